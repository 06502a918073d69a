"""Registry of finite-difference gradient checks over every
differentiable block: primitives, the calibrator, each loss term with
all of its modes, both encoders end to end, and the complete training
objective on a two-sample batch. All checks build float64 micro models
so central differences are trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import Calibrator
from .config import RunConfig
from .data import build_vocab, generate_corpus, make_batches, sequence_budget
from .encoders import (
    split_text_backward,
    split_text_outputs,
    split_vision_backward,
    split_vision_outputs,
)
from .numerics import (
    GeluBlock,
    GradCheckReport,
    L2NormalizeRowsBlock,
    LinearBlock,
    SoftmaxRowsBlock,
    check_gradients,
    grad_check,
    l2_normalize_rows,
)
from .objectives import (
    VARIANTS,
    SigmoidLossParams,
    _sap_bwd,
    _sap_fwd,
    _sigmoid_contrastive_bwd,
    _sigmoid_contrastive_fwd,
    _wpr_sample_bwd,
    _wpr_sample_fwd,
    sap_loss,
    sigmoid_contrastive,
    wpr_loss,
)
from .training import build_model


def _unit(seed, *shape):
    x = np.random.default_rng(seed).standard_normal(shape)
    return l2_normalize_rows(x.reshape(-1, shape[-1])).reshape(shape)


def micro_config(**kw) -> RunConfig:
    base = dict(grid=2, max_objects=2, patch_size=4, d_model=8, d_out=6,
                n_layers=1, n_heads=2, base_max_len=28, extend_keep=20,
                extend_ratio=1, batch_size=2, epochs=1, seed=11, data_seed=13,
                dtype="f64", corpus_n=2, holdout_n=0)
    base.update(kw)
    return RunConfig(**base).validate()


def micro_batch(cfg: RunConfig):
    corpus = generate_corpus(cfg.batch_size, grid=cfg.grid, seed=cfg.data_seed,
                             max_objects=cfg.max_objects, cell_px=cfg.patch_size)
    vocab = build_vocab(cfg.grid, cfg.max_objects)
    budget = sequence_budget(corpus, vocab, cfg.max_sentences)
    model = build_model(cfg, vocab, budget)
    batch = next(make_batches(corpus, cfg.batch_size, shuffle_seed=0,
                              vocab=vocab, budget=budget,
                              max_sentences=cfg.max_sentences))
    return model, batch


def _check_params(loss_fn, grad_fn, params, extra=None, eps=1e-5, tol=1e-4):
    """grad_fn fills Param.grad (and returns extra tensor grads)."""
    for p in params:
        p.zero_grad()
    extra_grads = grad_fn() or {}
    tensors = {p.name: p.value for p in params}
    analytic = {p.name: p.grad.copy() for p in params}
    if extra:
        for name, arr in extra.items():
            tensors[name] = arr
            analytic[name] = extra_grads[name]

    def forward_only():
        return loss_fn()

    return check_gradients(forward_only, tensors, analytic, eps=eps, tol=tol)


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------


def check_primitives(eps=1e-5, tol=1e-4) -> GradCheckReport:
    rng = np.random.default_rng(0)
    reports = [
        grad_check(SoftmaxRowsBlock(), rng.standard_normal((3, 5)), eps, tol),
        grad_check(GeluBlock(), rng.standard_normal((4, 4)), eps, tol),
        grad_check(L2NormalizeRowsBlock(), rng.standard_normal((3, 6)) + 0.2,
                   eps, tol),
        grad_check(LinearBlock(rng.standard_normal((5, 3))),
                   rng.standard_normal((4, 5)), eps, tol),
    ]
    worst = max(reports, key=lambda r: r.max_rel_err)
    return GradCheckReport(worst.max_rel_err, worst.worst, tol)


def check_calibrator(eps=1e-5, tol=1e-4) -> GradCheckReport:
    cal = Calibrator(d=6, n_in=5, seed=3, prefix="cal", dtype=np.float64)
    x = np.random.default_rng(4).standard_normal((5, 6))
    mask = np.array([True, True, True, True, False])
    upstream = np.random.default_rng(5).standard_normal((cal.n_out, 6))

    def loss_fn():
        out, _ = cal.forward(x, mask)
        return float((out * upstream).sum())

    def grad_fn():
        _, cache = cal.forward(x, mask)
        dx = cal.backward(cache, upstream)
        return {"input": dx}

    return _check_params(loss_fn, grad_fn, cal.params(), {"input": x},
                         eps, tol)


def check_sigmoid_loss(eps=1e-5, tol=1e-4) -> GradCheckReport:
    p = SigmoidLossParams(dtype=np.float64)
    u, w = _unit(6, 3, 5), _unit(7, 3, 5)

    def loss_fn():
        return sigmoid_contrastive(u, w, p)

    def grad_fn():
        _, cache = _sigmoid_contrastive_fwd(u, w, p)
        du, dw = _sigmoid_contrastive_bwd(cache, p, 1.0)
        return {"u": du, "w": dw}

    return _check_params(loss_fn, grad_fn, p.params(), {"u": u, "w": w},
                         eps, tol)


def check_wpr(mode: str, eps=1e-5, tol=1e-4) -> GradCheckReport:
    vp, tp = _unit(8, 3, 6), _unit(9, 2, 6)
    if mode == "naive_batch":
        sig = SigmoidLossParams(dtype=np.float64)

        def loss_fn():
            return wpr_loss(vp, tp, "naive_batch", sig=sig)

        from .objectives import _wpr_naive_bwd, _wpr_naive_fwd

        def grad_fn():
            _, cache = _wpr_naive_fwd([vp], [tp], sig)
            dvs, dts = _wpr_naive_bwd(cache, sig, 1.0)
            return {"vp": dvs[0], "tp": dts[0]}

        return _check_params(loss_fn, grad_fn, sig.params(),
                             {"vp": vp, "tp": tp}, eps, tol)

    def loss_fn():
        return wpr_loss(vp, tp, mode)

    def grad_fn():
        _, cache = _wpr_sample_fwd(vp, tp, mode, 0.07)
        dvp, dtp = _wpr_sample_bwd(cache, 1.0)
        return {"vp": dvp, "tp": dtp}

    return _check_params(loss_fn, grad_fn, [], {"vp": vp, "tp": tp}, eps, tol)


def check_sap(eps=1e-5, tol=1e-4) -> GradCheckReport:
    p = SigmoidLossParams(dtype=np.float64)
    v0, v1 = _unit(10, 3, 5), _unit(11, 3, 5)
    t_sub = _unit(12, 2, 2, 5)
    mask = np.array([[True, True], [True, False]])

    def loss_fn():
        return sap_loss([v0, v1], t_sub, mask, p)

    def grad_fn():
        _, cache = _sap_fwd([v0, v1], t_sub, mask, p)
        dvs, dt = _sap_bwd(cache, p, 1.0)
        return {"v0": dvs[0], "v1": dvs[1], "t_sub": dt}

    return _check_params(loss_fn, grad_fn, p.params(),
                         {"v0": v0, "v1": v1, "t_sub": t_sub}, eps, tol)


def check_vision_encoder(eps=1e-5, tol=1e-4) -> GradCheckReport:
    cfg = micro_config()
    model, batch = micro_batch(cfg)
    enc = model.vision
    imgs = np.array(batch.images, dtype=np.float64)
    rng = np.random.default_rng(14)
    rc = rng.standard_normal((len(imgs), enc.d_out))
    rl = rng.standard_normal((len(imgs), enc.n_patches, enc.d_out))

    def loss_fn():
        y, _ = enc.forward(imgs)
        v_cls, v_loc, _ = split_vision_outputs(y)
        return float((v_cls * rc).sum() + (v_loc * rl).sum())

    def grad_fn():
        y, cache = enc.forward(imgs)
        _, _, spl = split_vision_outputs(y)
        dy = split_vision_backward(spl, rc, rl, y.shape)
        d_imgs = enc.backward(cache, dy)
        return {"images": d_imgs}

    return _check_params(loss_fn, grad_fn, enc.params(), {"images": imgs},
                         eps, tol)


def check_text_encoder(eps=1e-5, tol=1e-4) -> GradCheckReport:
    cfg = micro_config()
    model, batch = micro_batch(cfg)
    enc = model.text
    tokens = batch.long_tokens
    eot = enc.eot_positions(tokens)
    rng = np.random.default_rng(15)
    re_ = rng.standard_normal((len(tokens), enc.d_out))
    rl = rng.standard_normal((len(tokens), tokens.shape[1] - 1, enc.d_out))

    def loss_fn():
        y, _ = enc.forward(tokens)
        t_eot, t_loc, _ = split_text_outputs(y, tokens, eot)
        return float((t_eot * re_).sum() + (t_loc * rl).sum())

    def grad_fn():
        y, cache = enc.forward(tokens)
        _, _, spl = split_text_outputs(y, tokens, eot)
        dy = split_text_backward(spl, re_, rl, y.shape)
        enc.backward(cache, dy)
        return {}

    return _check_params(loss_fn, grad_fn, enc.params(), None, eps, tol)


def check_total(variant_name: str, eps=1e-5, tol=1e-4) -> GradCheckReport:
    cfg = micro_config(variant=variant_name)
    model, batch = micro_batch(cfg)
    variant = VARIANTS[variant_name]

    def loss_fn():
        return model.loss_on_batch(batch, variant, cfg.lambda_w, cfg.lambda_s,
                                   compute_grads=False).l_total

    def grad_fn():
        model.loss_on_batch(batch, variant, cfg.lambda_w, cfg.lambda_s)
        return {}

    return _check_params(loss_fn, grad_fn, model.params(), None, eps, tol)


@dataclass
class CheckEntry:
    name: str
    runner: object


def registry() -> list:
    entries = [
        CheckEntry("primitives", check_primitives),
        CheckEntry("calibration", check_calibrator),
        CheckEntry("sigmoid_loss", check_sigmoid_loss),
        CheckEntry("wpr_bidirectional", lambda **kw: check_wpr("bidirectional", **kw)),
        CheckEntry("wpr_text_only", lambda **kw: check_wpr("text_only", **kw)),
        CheckEntry("wpr_image_only", lambda **kw: check_wpr("image_only", **kw)),
        CheckEntry("wpr_naive_batch", lambda **kw: check_wpr("naive_batch", **kw)),
        CheckEntry("sap", check_sap),
        CheckEntry("vision_encoder", check_vision_encoder),
        CheckEntry("text_encoder", check_text_encoder),
        # total_full exercises every other variant's graph as a superset;
        # the raw-token WPR path and the no-global wiring differ, so they
        # get their own entries
        CheckEntry("total_full", lambda **kw: check_total("full", **kw)),
        CheckEntry("total_no_lc_no_sap", lambda **kw: check_total("no_lc_no_sap", **kw)),
        CheckEntry("total_no_global", lambda **kw: check_total("no_global", **kw)),
    ]
    return entries


def run_all(only: str | None = None, eps: float = 1e-5,
            tol: float = 1e-4) -> dict:
    """Run (a filtered subset of) the registry; returns name -> report."""
    results = {}
    for entry in registry():
        if only and only not in entry.name:
            continue
        results[entry.name] = entry.runner(eps=eps, tol=tol)
    if not results:
        raise ValueError(f"no gradient checks match {only!r}")
    return results
