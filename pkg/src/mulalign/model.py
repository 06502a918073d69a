"""Model bundle: dual encoders, per-modality calibrators, loss scalars.

``loss_on_batch`` runs the full differentiable pipeline on a tokenized
batch: encode image/long/short/subcaption inputs, split and normalize,
assemble the selected loss variant, and backpropagate into every
parameter. Per-sample terms are reduced in fixed order so runs are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import Calibrator
from .encoders import (
    TextEncoder,
    VisionEncoder,
    split_text_backward,
    split_text_outputs,
    split_vision_backward,
    split_vision_outputs,
)
from .numerics import Param
from .objectives import (
    DualOutputs,
    LossBundle,
    OutputGrads,
    SigmoidLossParams,
    VariantSpec,
    total_loss,
)


@dataclass
class ModelDims:
    """Architecture knobs; defaults are the desk-scale configuration."""

    patch_size: int = 4
    grid: int = 4
    channels: int = 3
    d_model: int = 64
    d_out: int = 32
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 256
    long_len: int = 64        # padded long-caption length incl. EOT
    max_len: int = 64         # base positional table length
    extend_keep: int = 20
    extend_ratio: int = 4
    cal_ratio: float = 0.5
    cal_dk: int | None = None


class AlignmentModel:
    def __init__(self, dims: ModelDims, eot_id: int = 1, pad_id: int = 0,
                 seed: int = 0, dtype=np.float32, tau_tok: float = 0.07,
                 normalize_local: bool = True, sample_form: str = "infonce"):
        self.dims = dims
        self.pad_id = pad_id
        self.dtype = dtype
        self.tau_tok = tau_tok
        self.normalize_local = normalize_local
        self.sample_form = sample_form
        rng = np.random.default_rng(seed)
        v_seed, t_seed, cv_seed, ct_seed = rng.integers(0, 2**31, size=4)
        self.vision = VisionEncoder(
            patch_size=dims.patch_size, grid=dims.grid, channels=dims.channels,
            d_model=dims.d_model, d_out=dims.d_out, n_layers=dims.n_layers,
            n_heads=dims.n_heads, seed=int(v_seed), dtype=dtype)
        extend_keep = dims.extend_keep if dims.extend_ratio > 1 else None
        self.text = TextEncoder(
            vocab_size=dims.vocab_size, d_model=dims.d_model, d_out=dims.d_out,
            n_layers=dims.n_layers, n_heads=dims.n_heads, max_len=dims.max_len,
            eot_id=eot_id, pad_id=pad_id, seed=int(t_seed), dtype=dtype,
            extend_keep=extend_keep, extend_ratio=dims.extend_ratio)
        if dims.long_len > self.text.max_len:
            raise ValueError(
                f"long_len {dims.long_len} exceeds positional table "
                f"{self.text.max_len}")
        self.cal_v = Calibrator(d=dims.d_out, n_in=dims.grid * dims.grid,
                                ratio=dims.cal_ratio, d_k=dims.cal_dk,
                                seed=int(cv_seed), prefix="cal_v", dtype=dtype)
        self.cal_t = Calibrator(d=dims.d_out, n_in=dims.long_len - 1,
                                ratio=dims.cal_ratio, d_k=dims.cal_dk,
                                seed=int(ct_seed), prefix="cal_t", dtype=dtype)
        self.sig = SigmoidLossParams(dtype=dtype)

    # -- parameter bookkeeping ------------------------------------------

    def params(self) -> list[Param]:
        return (self.vision.params() + self.text.params()
                + self.cal_v.params() + self.cal_t.params()
                + self.sig.params())

    def param_groups(self) -> dict[str, list[Param]]:
        """Two-tier split: slow backbone vs fast refinement modules.

        Refinement covers the calibrators, the loss scalars, and both
        projection heads; everything else is backbone.
        """
        refinement_names = {self.vision.head.name, self.text.head.name}
        refinement, backbone = [], []
        for p in self.params():
            if (p.name in refinement_names or p.name.startswith("cal_")
                    or p.name.startswith("sig.")):
                refinement.append(p)
            else:
                backbone.append(p)
        return {"backbone": backbone, "refinement": refinement}

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    # -- batched encode with pullback ------------------------------------

    def encode_batch(self, batch, need_short=True, need_subs=True,
                     need_long_loc=True):
        """Run all needed encoder passes; returns (DualOutputs, cache)."""
        nl = self.normalize_local
        y_v, cache_v = self.vision.forward(batch.images)
        v_cls, v_loc, spl_v = split_vision_outputs(y_v, nl)

        long_tokens = batch.long_tokens
        y_l, cache_l = self.text.forward(long_tokens)
        eot_l = self.text.eot_positions(long_tokens)
        t_long_eot, t_long_loc, spl_l = split_text_outputs(
            y_l, long_tokens, eot_l, nl)

        t_short_eot = None
        cache_s = spl_s = y_s = None
        if need_short:
            y_s, cache_s = self.text.forward(batch.short_tokens)
            eot_s = self.text.eot_positions(batch.short_tokens)
            t_short_eot, _, spl_s = split_text_outputs(
                y_s, batch.short_tokens, eot_s, nl)

        t_sub = None
        sub_cache = None
        if need_subs:
            t_sub, sub_cache = self._encode_subs(batch)

        outputs = DualOutputs(
            v_cls=v_cls, v_loc=v_loc, t_long_eot=t_long_eot,
            t_long_loc=t_long_loc, t_long_mask=batch.long_loc_mask,
            t_short_eot=t_short_eot, t_sub=t_sub, sub_mask=batch.sub_mask)
        cache = (cache_v, spl_v, y_v.shape, cache_l, spl_l, y_l.shape,
                 cache_s, spl_s, (y_s.shape if y_s is not None else None),
                 sub_cache)
        return outputs, cache

    def _encode_subs(self, batch):
        sub_mask = batch.sub_mask
        B, M = sub_mask.shape
        idx = np.argwhere(sub_mask)
        flat = batch.sub_tokens[sub_mask]
        y, cache = self.text.forward(flat)
        eot = self.text.eot_positions(flat)
        t_eot, _, spl = split_text_outputs(y, flat, eot, self.normalize_local)
        t_sub = np.zeros((B, M, t_eot.shape[-1]), dtype=t_eot.dtype)
        t_sub[idx[:, 0], idx[:, 1]] = t_eot
        return t_sub, (cache, spl, y.shape, idx, t_eot.shape)

    def encode_backward(self, cache, d: OutputGrads) -> np.ndarray:
        """Chain output gradients into the encoders; returns d(images)."""
        (cache_v, spl_v, shape_v, cache_l, spl_l, shape_l,
         cache_s, spl_s, shape_s, sub_cache) = cache
        zero = lambda a: np.zeros(a, dtype=self.text.head.value.dtype)

        d_cls = d.v_cls if d.v_cls is not None else zero((shape_v[0], shape_v[2]))
        dy_v = split_vision_backward(spl_v, d_cls, d.v_loc, shape_v)
        d_images = self.vision.backward(cache_v, dy_v)

        d_eot = (d.t_long_eot if d.t_long_eot is not None
                 else zero((shape_l[0], shape_l[2])))
        dy_l = split_text_backward(spl_l, d_eot, d.t_long_loc, shape_l)
        self.text.backward(cache_l, dy_l)

        if cache_s is not None and d.t_short_eot is not None:
            dy_s = split_text_backward(spl_s, d.t_short_eot, None, shape_s)
            self.text.backward(cache_s, dy_s)

        if sub_cache is not None and d.t_sub is not None:
            cache_t, spl, shape, idx, _ = sub_cache
            d_flat = d.t_sub[idx[:, 0], idx[:, 1]]
            dy = split_text_backward(spl, d_flat, None, shape)
            self.text.backward(cache_t, dy)
        return d_images

    # -- end-to-end loss --------------------------------------------------

    def loss_on_batch(self, batch, variant: VariantSpec, lam_w: float = 1.0,
                      lam_s: float = 1.0, compute_grads: bool = True) -> LossBundle:
        variant.validate()
        outputs, cache = self.encode_batch(
            batch, need_short=variant.use_global, need_subs=variant.use_sap,
            need_long_loc=variant.use_wpr)
        pullback = (lambda d: self.encode_backward(cache, d)) if compute_grads else None
        bundle = total_loss(
            outputs, self.cal_v, self.cal_t, self.sig, variant,
            lam_w, lam_s, tau_tok=self.tau_tok, sample_form=self.sample_form,
            normalize_local=self.normalize_local, pullback=pullback)
        if compute_grads:
            bundle.grads = {p.name: p.grad.copy() for p in self.params()}
        return bundle

    # -- checkpoint support ----------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = {p.name: p for p in self.params()}
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for name, p in own.items():
            t = tensors[name]
            if t.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{t.shape} vs {p.value.shape}")
            p.value = t.astype(p.value.dtype)
