"""Alignment objectives and their hand-written backward passes.

Terms:
  * pairwise sigmoid contrastive loss over a batch (learnable temperature
    and bias), used for every batch-level contrast;
  * global loss = long-caption contrast + 0.5 * summary contrast;
  * word-patch reconstruction (WPR): bidirectional cross-modal attention
    reconstructions scored by a symmetric within-sample InfoNCE, so no
    cross-sample negatives are needed;
  * subcaption-aggregated patch loss (SAP): each subcaption attention-pools
    refined patches into one vector which is contrasted at batch level;
  * the weighted total with its ablation variants.

Losses are pure given parameters; backward helpers accumulate into
Param.grad and return gradients for their array inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .numerics import (
    Param,
    check_finite,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    softmax_rows,
    softmax_rows_backward,
)

WPR_MODES = ("bidirectional", "text_only", "image_only", "naive_batch")


class SigmoidLossParams:
    """Learnable log-temperature and bias of the sigmoid contrastive loss."""

    def __init__(self, t_logit: float = float(np.log(10.0)),
                 bias: float = -10.0, dtype=np.float32, prefix: str = "sig"):
        self.t_logit = Param(f"{prefix}.t_logit", np.array(t_logit, dtype),
                             decay=False)
        self.bias = Param(f"{prefix}.bias", np.array(bias, dtype), decay=False)

    def params(self) -> list[Param]:
        return [self.t_logit, self.bias]


# ---------------------------------------------------------------------------
# batch-level sigmoid contrastive
# ---------------------------------------------------------------------------


def _sigmoid_contrastive_fwd(u, w, p: SigmoidLossParams):
    u, w = np.asarray(u), np.asarray(w)
    if u.ndim != 2 or u.shape != w.shape:
        raise ValueError(f"row-aligned batches required, got {u.shape} vs {w.shape}")
    if u.shape[0] == 0:
        raise ValueError("empty batch")
    check_finite(u, "sigmoid contrastive u")
    check_finite(w, "sigmoid contrastive w")
    B = u.shape[0]
    t = np.exp(p.t_logit.value)
    sims = u @ w.T
    a = t * sims + p.bias.value
    z = 2.0 * np.eye(B, dtype=u.dtype) - 1.0
    loss = -log_expit(z * a).sum() / B
    return float(loss), (u, w, sims, a, z, t, B)


def _sigmoid_contrastive_bwd(cache, p: SigmoidLossParams, upstream: float):
    u, w, sims, a, z, t, B = cache
    # d/da of -log(sigmoid(z a)) is -z * sigmoid(-z a)
    da = (-z * expit(-z * a)) * (upstream / B)
    p.t_logit.grad += (da * sims).sum() * t
    p.bias.grad += da.sum()
    du = (da * t) @ w
    dw = (da * t).T @ u
    return du, dw


def sigmoid_contrastive(u, w, p: SigmoidLossParams) -> float:
    """-(1/B) sum_ij log sigmoid(z_ij (t <u_i,w_j> + bias)), z=+1 on the
    diagonal and -1 off it."""
    loss, _ = _sigmoid_contrastive_fwd(u, w, p)
    return loss


def _global_fwd(v_cls, t_long, t_short, p):
    if not (len(v_cls) == len(t_long) == len(t_short)):
        raise ValueError("global loss batches must align")
    l_long, c_long = _sigmoid_contrastive_fwd(v_cls, t_long, p)
    l_short, c_short = _sigmoid_contrastive_fwd(v_cls, t_short, p)
    return l_long + 0.5 * l_short, (c_long, c_short)


def _global_bwd(cache, p, upstream):
    c_long, c_short = cache
    dv1, dtl = _sigmoid_contrastive_bwd(c_long, p, upstream)
    dv2, dts = _sigmoid_contrastive_bwd(c_short, p, 0.5 * upstream)
    return dv1 + dv2, dtl, dts


def global_loss(v_cls, t_long, t_short, p: SigmoidLossParams) -> float:
    """Long-caption contrast plus half-weighted summary contrast."""
    loss, _ = _global_fwd(v_cls, t_long, t_short, p)
    return loss


# ---------------------------------------------------------------------------
# within-sample token contrast (used by WPR)
# ---------------------------------------------------------------------------


def _ce_rows(z):
    """Cross entropy of each row against its own index; z (n,n)."""
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - np.diag(z)


def _symmetric_infonce_fwd(x, y, tau):
    n = x.shape[0]
    z = x @ y.T / tau
    loss = 0.5 * (_ce_rows(z).mean() + _ce_rows(z.T).mean())
    return float(loss), (x, y, z, tau, n)


def _symmetric_infonce_bwd(cache, upstream):
    x, y, z, tau, n = cache
    scale = upstream / (2.0 * n)
    p1 = softmax_rows(z)
    p2 = softmax_rows(z.T)
    eye = np.eye(n, dtype=z.dtype)
    dz = (p1 - eye) * scale + ((p2 - eye) * scale).T
    dx = dz @ y / tau
    dy = dz.T @ x / tau
    return dx, dy


def _pairwise_sigmoid_fwd(x, y, tau):
    """Sigmoid-pairwise alternative to the within-sample InfoNCE."""
    n = x.shape[0]
    z = 2.0 * np.eye(n, dtype=x.dtype) - 1.0
    a = x @ y.T / tau
    loss = -log_expit(z * a).sum() / n
    return float(loss), (x, y, a, z, tau, n)


def _pairwise_sigmoid_bwd(cache, upstream):
    x, y, a, z, tau, n = cache
    da = (-z * expit(-z * a)) * (upstream / n)
    return da @ y / tau, da.T @ x / tau


_SAMPLE_FORMS = {
    "infonce": (_symmetric_infonce_fwd, _symmetric_infonce_bwd),
    "sigmoid": (_pairwise_sigmoid_fwd, _pairwise_sigmoid_bwd),
}


# ---------------------------------------------------------------------------
# word-patch reconstruction
# ---------------------------------------------------------------------------


def _wpr_sample_fwd(vp, tp, mode, tau_tok, sample_form="infonce",
                    normalize_recon=True):
    vp, tp = np.asarray(vp), np.asarray(tp)
    if vp.ndim != 2 or tp.ndim != 2 or vp.shape[0] == 0 or tp.shape[0] == 0:
        raise ValueError("WPR needs non-empty token matrices")
    d = vp.shape[1]
    if tp.shape[1] != d:
        raise ValueError("token dims must agree")
    scale = np.sqrt(d)
    form_fwd, _ = _SAMPLE_FORMS[sample_form]
    a_v2t = softmax_rows(vp @ tp.T / scale)
    a_t2v = softmax_rows(tp @ vp.T / scale)
    v_rec = a_v2t @ tp
    t_rec = a_t2v @ vp
    v_hat = l2_normalize_rows(v_rec) if normalize_recon else v_rec
    t_hat = l2_normalize_rows(t_rec) if normalize_recon else t_rec
    l_img = c_img = l_txt = c_txt = None
    if mode in ("bidirectional", "image_only"):
        l_img, c_img = form_fwd(vp, v_hat, tau_tok)
    if mode in ("bidirectional", "text_only"):
        l_txt, c_txt = form_fwd(tp, t_hat, tau_tok)
    loss = (l_img or 0.0) + (l_txt or 0.0)
    cache = (vp, tp, a_v2t, a_t2v, v_rec, t_rec, c_img, c_txt, scale,
             sample_form, normalize_recon)
    return float(loss), cache


def _wpr_sample_bwd(cache, upstream):
    (vp, tp, a_v2t, a_t2v, v_rec, t_rec, c_img, c_txt, scale,
     sample_form, normalize_recon) = cache
    _, form_bwd = _SAMPLE_FORMS[sample_form]
    dvp = np.zeros_like(vp)
    dtp = np.zeros_like(tp)
    if c_img is not None:
        dx, dv_hat = form_bwd(c_img, upstream)
        dvp += dx
        dv_rec = (l2_normalize_rows_backward(v_rec, dv_hat)
                  if normalize_recon else dv_hat)
        da = dv_rec @ tp.T
        dtp += a_v2t.T @ dv_rec
        dlog = softmax_rows_backward(a_v2t, da) / scale
        dvp += dlog @ tp
        dtp += dlog.T @ vp
    if c_txt is not None:
        dx, dt_hat = form_bwd(c_txt, upstream)
        dtp += dx
        dt_rec = (l2_normalize_rows_backward(t_rec, dt_hat)
                  if normalize_recon else dt_hat)
        da = dt_rec @ vp.T
        dvp += a_t2v.T @ dt_rec
        dlog = softmax_rows_backward(a_t2v, da) / scale
        dtp += dlog @ vp
        dvp += dlog.T @ tp
    return dvp, dtp


def _pool_rows_fwd(x):
    pooled = x.mean(axis=0)
    normed = l2_normalize_rows(pooled[None])[0]
    return normed, (x, pooled)


def _pool_rows_bwd(cache, d_normed):
    x, pooled = cache
    d_pooled = l2_normalize_rows_backward(pooled[None], d_normed[None])[0]
    return np.broadcast_to(d_pooled / x.shape[0], x.shape).copy()


def _wpr_naive_fwd(vps, tps, sig):
    pools = [(_pool_rows_fwd(vp), _pool_rows_fwd(tp))
             for vp, tp in zip(vps, tps)]
    u = np.stack([pv[0] for pv, _ in pools])
    w = np.stack([pt[0] for _, pt in pools])
    loss, sig_cache = _sigmoid_contrastive_fwd(u, w, sig)
    return loss, (pools, sig_cache)


def _wpr_naive_bwd(cache, sig, upstream):
    pools, sig_cache = cache
    du, dw = _sigmoid_contrastive_bwd(sig_cache, sig, upstream)
    dvps, dtps = [], []
    for b, (pv, pt) in enumerate(pools):
        dvps.append(_pool_rows_bwd(pv[1], du[b]))
        dtps.append(_pool_rows_bwd(pt[1], dw[b]))
    return dvps, dtps


def wpr_loss(vp, tp, mode: str = "bidirectional", tau_tok: float = 0.07,
             sig: SigmoidLossParams | None = None,
             sample_form: str = "infonce") -> float:
    """Word-patch reconstruction loss for one sample.

    vp (rP,d) refined patches, tp (rK,d) refined words, unit rows.
    ``naive_batch`` drops reconstruction and contrasts the mean-pooled
    tokens instead (neutral temperature/bias unless ``sig`` is given).
    """
    if mode not in WPR_MODES:
        raise ValueError(f"unknown WPR mode {mode!r}")
    if mode == "naive_batch":
        if sig is None:
            sig = SigmoidLossParams(t_logit=0.0, bias=0.0, dtype=np.float64)
        loss, _ = _wpr_naive_fwd([np.asarray(vp)], [np.asarray(tp)], sig)
        return loss
    loss, _ = _wpr_sample_fwd(vp, tp, mode, tau_tok, sample_form)
    return loss


# ---------------------------------------------------------------------------
# subcaption-aggregated patch loss
# ---------------------------------------------------------------------------


def _sap_fwd(v_tokens, t_sub, sub_mask, p: SigmoidLossParams):
    """v_tokens: (B,rP,d) or list of (rP,d); t_sub (B,M,d); sub_mask (B,M)."""
    v_list = [np.asarray(v) for v in v_tokens]
    t_sub = np.asarray(t_sub)
    sub_mask = np.asarray(sub_mask, dtype=bool)
    B, M, d = t_sub.shape
    if len(v_list) != B:
        raise ValueError("batch size mismatch between patches and subcaptions")
    if not sub_mask.any():
        raise ValueError("SAP: no valid subcaption anywhere in the batch")
    scale = np.sqrt(d)
    alphas = {}
    vbar_raw = {}
    vbar = {}
    for b in range(B):
        for i in range(M):
            if not sub_mask[b, i]:
                continue
            logits = t_sub[b, i] @ v_list[b].T / scale
            a = softmax_rows(logits[None])[0]
            raw = a @ v_list[b]
            alphas[(b, i)] = a
            vbar_raw[(b, i)] = raw
            vbar[(b, i)] = l2_normalize_rows(raw[None])[0]
    per_index = []
    total = 0.0
    for i in range(M):
        rows = [b for b in range(B) if sub_mask[b, i]]
        if not rows:
            continue
        u = np.stack([vbar[(b, i)] for b in rows])
        w = np.stack([t_sub[b, i] for b in rows])
        li, ci = _sigmoid_contrastive_fwd(u, w, p)
        per_index.append((i, rows, ci))
        total += li
    loss = total / len(per_index)
    cache = (v_list, t_sub, sub_mask, alphas, vbar_raw, scale, per_index)
    return float(loss), cache


def _sap_bwd(cache, p: SigmoidLossParams, upstream):
    v_list, t_sub, sub_mask, alphas, vbar_raw, scale, per_index = cache
    dv = [np.zeros_like(v) for v in v_list]
    dt_sub = np.zeros_like(t_sub)
    up = upstream / len(per_index)
    for i, rows, ci in per_index:
        du, dw = _sigmoid_contrastive_bwd(ci, p, up)
        for r, b in enumerate(rows):
            dt_sub[b, i] += dw[r]
            a = alphas[(b, i)]
            raw = vbar_raw[(b, i)]
            d_raw = l2_normalize_rows_backward(raw[None], du[r][None])[0]
            da = v_list[b] @ d_raw
            dv[b] += np.outer(a, d_raw)
            dlog = softmax_rows_backward(a[None], da[None])[0] / scale
            dt_sub[b, i] += dlog @ v_list[b]
            dv[b] += np.outer(dlog, t_sub[b, i])
    return dv, dt_sub


def sap_loss(v_tokens, t_sub, sub_mask, p: SigmoidLossParams) -> float:
    """Mean over subcaption indices of the batch sigmoid contrast between
    each subcaption and its attention-pooled patch vector."""
    loss, _ = _sap_fwd(v_tokens, t_sub, sub_mask, p)
    return loss


# ---------------------------------------------------------------------------
# variants and the total objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariantSpec:
    """Which loss terms are wired in, mirroring the ablation grid."""

    use_global: bool = True
    use_lc: bool = True
    use_wpr: bool = True
    use_sap: bool = True
    wpr_mode: str = "bidirectional"

    def validate(self) -> None:
        if self.wpr_mode not in WPR_MODES:
            raise ValueError(f"unknown WPR mode {self.wpr_mode!r}")
        if self.use_sap and not self.use_lc:
            raise ValueError("SAP requires calibration (inexpressible variant)")
        if not (self.use_global or self.use_wpr or self.use_sap):
            raise ValueError("variant selects no loss terms")


VARIANTS: dict[str, VariantSpec] = {
    "global_only": VariantSpec(True, False, False, False),
    "no_lc_no_sap": VariantSpec(True, False, True, False),
    "no_sap": VariantSpec(True, True, True, False),
    "no_wpr": VariantSpec(True, True, False, True),
    "full": VariantSpec(True, True, True, True),
    "no_global": VariantSpec(False, True, True, True),
    "text_recon": VariantSpec(True, True, True, True, "text_only"),
    "image_recon": VariantSpec(True, True, True, True, "image_only"),
    "naive_recon": VariantSpec(True, True, True, True, "naive_batch"),
}


@dataclass
class DualOutputs:
    """Batched encoder outputs feeding the loss stack (unused parts None)."""

    v_cls: np.ndarray | None = None        # (B,d)
    v_loc: np.ndarray | None = None        # (B,P,d)
    t_long_eot: np.ndarray | None = None   # (B,d)
    t_long_loc: np.ndarray | None = None   # (B,K,d)
    t_long_mask: np.ndarray | None = None  # (B,K) real-token rows
    t_short_eot: np.ndarray | None = None  # (B,d)
    t_sub: np.ndarray | None = None        # (B,M,d)
    sub_mask: np.ndarray | None = None     # (B,M)

    @property
    def batch_size(self) -> int:
        for a in (self.v_cls, self.v_loc):
            if a is not None:
                return a.shape[0]
        raise ValueError("empty outputs")


@dataclass
class OutputGrads:
    """Gradients w.r.t. DualOutputs arrays (zeros where a term is unused)."""

    v_cls: np.ndarray | None = None
    v_loc: np.ndarray | None = None
    t_long_eot: np.ndarray | None = None
    t_long_loc: np.ndarray | None = None
    t_short_eot: np.ndarray | None = None
    t_sub: np.ndarray | None = None


@dataclass
class LossBundle:
    """Scalar losses, inspection intermediates, and parameter gradients."""

    l_global: float
    l_word: float
    l_sub: float
    l_total: float
    attn_v2t: list = field(default_factory=list)   # per-sample (rP,rK)
    attn_t2v: list = field(default_factory=list)   # per-sample (rK,rP)
    sap_alphas: list = field(default_factory=list)  # per-sample (M_valid,rP)
    grads: dict = field(default_factory=dict)


def total_loss(outputs: DualOutputs, cal_v, cal_t, sig: SigmoidLossParams,
               variant: VariantSpec, lam_w: float = 1.0, lam_s: float = 1.0,
               *, tau_tok: float = 0.07, sample_form: str = "infonce",
               normalize_local: bool = True, pullback=None) -> LossBundle:
    """Assemble the selected loss terms and backpropagate through them.

    Accumulates gradients into the calibrator and sigmoid-loss parameters;
    gradients w.r.t. the encoder outputs are handed to ``pullback`` (by the
    model wrapper) so they continue into the encoders.
    """
    variant.validate()
    B = outputs.batch_size
    d_out = OutputGrads()

    l_global = 0.0
    g_cache = None
    if variant.use_global:
        l_global, g_cache = _global_fwd(outputs.v_cls, outputs.t_long_eot,
                                        outputs.t_short_eot, sig)

    # calibrated token sequences shared by WPR and SAP
    need_tokens = variant.use_wpr or variant.use_sap
    vp = tp = None
    cal_v_cache = cal_t_cache = None
    vp_raw = tp_raw = None
    if need_tokens:
        if variant.use_lc:
            cv_out, cal_v_cache = cal_v.forward(outputs.v_loc)
            vp_raw = cv_out
            vp = l2_normalize_rows(cv_out) if normalize_local else cv_out
            ct_out, cal_t_cache = cal_t.forward(outputs.t_long_loc,
                                                outputs.t_long_mask)
            tp_raw = ct_out
            tp = l2_normalize_rows(ct_out) if normalize_local else ct_out
        else:
            vp = outputs.v_loc
            tp = None  # raw text tokens are per-sample ragged (mask applied)

    bundle = LossBundle(0.0, 0.0, 0.0, 0.0)
    d_vp = np.zeros_like(vp) if vp is not None else None
    d_tp = np.zeros_like(tp) if tp is not None else None
    d_raw_text = []

    l_word = 0.0
    wpr_caches = None
    naive_cache = None
    if variant.use_wpr:
        if variant.use_lc:
            v_samples = [vp[b] for b in range(B)]
            t_samples = [tp[b] for b in range(B)]
        else:
            v_samples = [vp[b] for b in range(B)]
            t_samples = [outputs.t_long_loc[b][outputs.t_long_mask[b]]
                         for b in range(B)]
        if variant.wpr_mode == "naive_batch":
            l_word, naive_cache = _wpr_naive_fwd(v_samples, t_samples, sig)
        else:
            wpr_caches = []
            vals = []
            for b in range(B):
                lv, c = _wpr_sample_fwd(v_samples[b], t_samples[b],
                                        variant.wpr_mode, tau_tok, sample_form)
                vals.append(lv)
                wpr_caches.append(c)
                bundle.attn_v2t.append(c[2])
                bundle.attn_t2v.append(c[3])
            l_word = float(np.mean(vals))

    l_sub = 0.0
    sap_cache = None
    if variant.use_sap:
        l_sub, sap_cache = _sap_fwd([vp[b] for b in range(B)], outputs.t_sub,
                                    outputs.sub_mask, sig)
        _, _, sub_mask, alphas, _, _, _ = sap_cache
        for b in range(B):
            rows = [alphas[(b, i)] for i in range(outputs.t_sub.shape[1])
                    if (b, i) in alphas]
            bundle.sap_alphas.append(np.stack(rows) if rows else
                                     np.zeros((0, vp.shape[1])))

    l_total = ((l_global if variant.use_global else 0.0)
               + (lam_w * l_word if variant.use_wpr else 0.0)
               + (lam_s * l_sub if variant.use_sap else 0.0))
    bundle.l_global = float(l_global)
    bundle.l_word = float(l_word)
    bundle.l_sub = float(l_sub)
    bundle.l_total = float(l_total)

    # ----- backward -----
    if variant.use_global:
        dv_cls, dtl, dts = _global_bwd(g_cache, sig, 1.0)
        d_out.v_cls = dv_cls
        d_out.t_long_eot = dtl
        d_out.t_short_eot = dts

    if variant.use_wpr:
        if variant.wpr_mode == "naive_batch":
            dvs, dts_ = _wpr_naive_bwd(naive_cache, sig, lam_w)
            for b in range(B):
                d_vp[b] += dvs[b]
                if variant.use_lc:
                    d_tp[b] += dts_[b]
                else:
                    d_raw_text.append(dts_[b])
        else:
            for b in range(B):
                dv_b, dt_b = _wpr_sample_bwd(wpr_caches[b], lam_w / B)
                d_vp[b] += dv_b
                if variant.use_lc:
                    d_tp[b] += dt_b
                else:
                    d_raw_text.append(dt_b)

    if variant.use_sap:
        dvs, d_tsub = _sap_bwd(sap_cache, sig, lam_s)
        for b in range(B):
            d_vp[b] += dvs[b]
        d_out.t_sub = d_tsub

    if need_tokens:
        if variant.use_lc:
            d_cv = (l2_normalize_rows_backward(vp_raw, d_vp)
                    if normalize_local else d_vp)
            d_out.v_loc = cal_v.backward(cal_v_cache, d_cv)
            d_ct = (l2_normalize_rows_backward(tp_raw, d_tp)
                    if normalize_local else d_tp)
            d_out.t_long_loc = cal_t.backward(cal_t_cache, d_ct)
        else:
            d_out.v_loc = d_vp
            if d_raw_text:
                d_loc = np.zeros_like(outputs.t_long_loc)
                for b in range(B):
                    d_loc[b][outputs.t_long_mask[b]] = d_raw_text[b]
                d_out.t_long_loc = d_loc

    if pullback is not None:
        pullback(d_out)
    for p in (list(sig.params()) + list(cal_v.params() if cal_v else [])
              + list(cal_t.params() if cal_t else [])):
        bundle.grads[p.name] = p.grad.copy()
    return bundle
