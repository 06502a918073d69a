"""Learnable local-token calibration.

Compresses a length-N token sequence to N' = floor(ratio * N) rows via
X' = SoftMax(W_q gelu(X W_k)^T / tau) X, so every output row is a convex
combination of input rows. One independent calibrator per modality;
parameters are never shared. Padded input rows (shorter captions) are
masked to -inf logits inside the softmax.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    Param,
    gelu,
    gelu_backward,
    softmax_rows,
    softmax_rows_backward,
)

_MASK_BIAS = -1e30


class Calibrator:
    """Softmax aggregation over a fixed-length input sequence.

    d is the (projected) token dimension, n_in the fixed input length.
    tau is stored as a log-temperature so it stays positive.
    """

    def __init__(self, d: int, n_in: int, ratio: float = 0.5,
                 d_k: int | None = None, seed: int = 0, prefix: str = "cal",
                 dtype=np.float32):
        if d_k is None:
            d_k = d // 2
        if not 0 < d_k < d:
            raise ValueError(f"d_k must be in (0, {d}), got {d_k}")
        n_out = int(np.floor(ratio * n_in))
        if n_out < 1:
            raise ValueError(f"ratio {ratio} collapses {n_in} rows to zero")
        self.d = d
        self.d_k = d_k
        self.n_in = n_in
        self.n_out = n_out
        self.ratio = ratio
        rng = np.random.default_rng(seed)
        self.w_k = Param(f"{prefix}.w_k",
                         (0.02 * rng.standard_normal((d, d_k))).astype(dtype))
        self.w_q = Param(f"{prefix}.w_q",
                         (0.02 * rng.standard_normal((n_out, d_k))).astype(dtype))
        self.log_tau = Param(f"{prefix}.log_tau", np.zeros((), dtype),
                             decay=False)

    def params(self) -> list[Param]:
        return [self.w_k, self.w_q, self.log_tau]

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.value))

    def _check(self, x, mask):
        if x.shape[-2] != self.n_in or x.shape[-1] != self.d:
            raise ValueError(
                f"expected (..., {self.n_in}, {self.d}) input, got {x.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != x.shape[:-1]:
                raise ValueError("mask shape must match input rows")
            if not mask.any(axis=-1).all():
                raise ValueError("calibrate: sample with all rows masked")
        return mask

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None):
        """x (B,N,d) or (N,d) -> (X', cache). X' has n_out rows per sample."""
        x = np.asarray(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
            mask = mask[None] if mask is not None else None
        mask = self._check(x, mask)
        tau = np.exp(self.log_tau.value)
        h_raw = x @ self.w_k.value                      # (B,N,dk)
        h = gelu(h_raw)
        logits = np.einsum("qk,bnk->bqn", self.w_q.value, h) / tau
        if mask is not None:
            logits = logits + np.where(mask, 0.0, _MASK_BIAS)[:, None, :]
        s = softmax_rows(logits)                        # (B,N',N)
        out = np.einsum("bqn,bnd->bqd", s, x)
        cache = (x, h_raw, h, s, logits, squeeze)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, d_out: np.ndarray):
        """Accumulate parameter grads; return dL/dX with the input's shape."""
        x, h_raw, h, s, logits, squeeze = cache
        if squeeze:
            d_out = d_out[None]
        tau = np.exp(self.log_tau.value)
        ds = np.einsum("bqd,bnd->bqn", d_out, x)
        dx = np.einsum("bqn,bqd->bnd", s, d_out)
        dlogits = softmax_rows_backward(s, ds)
        # logits = raw/tau + constant mask bias, so dL/dtau =
        # -(1/tau) sum(dlogits * logits); masked entries contribute exactly
        # zero because s (hence dlogits) underflows to 0 there
        dtau = -(dlogits * logits).sum() / tau
        self.log_tau.grad += dtau * tau
        dh = np.einsum("bqn,qk->bnk", dlogits, self.w_q.value) / tau
        self.w_q.grad += np.einsum("bqn,bnk->qk", dlogits, h) / tau
        dh_raw = gelu_backward(h_raw, dh)
        self.w_k.grad += np.einsum("bnd,bnk->dk", x, dh_raw)
        dx += dh_raw @ self.w_k.value.T
        return dx[0] if squeeze else dx

    def assignment(self, x: np.ndarray, mask: np.ndarray | None = None):
        """Row-stochastic input-to-output weight matrix (B,N',N) or (N',N)."""
        _, cache = self.forward(x, mask)
        s = cache[3]
        return s[0] if cache[5] else s


def calibrate(c: Calibrator, x: np.ndarray,
              mask: np.ndarray | None = None) -> np.ndarray:
    """Aggregate token rows: (N,d) -> (n_out,d) convex combinations."""
    out, _ = c.forward(x, mask)
    return out


def calibrator_grads(c: Calibrator, x: np.ndarray, upstream: np.ndarray,
                     mask: np.ndarray | None = None):
    """Analytic (dW_k, dW_q, dtau, dX) for sum(calibrate(x) * upstream).

    dtau is reported with respect to tau itself, not log tau.
    """
    saved = [p.grad.copy() for p in c.params()]
    for p in c.params():
        p.zero_grad()
    _, cache = c.forward(x, mask)
    dx = c.backward(cache, np.asarray(upstream))
    dw_k = c.w_k.grad.copy()
    dw_q = c.w_q.grad.copy()
    dtau = float(c.log_tau.grad) / c.tau
    for p, g in zip(c.params(), saved):
        p.grad = g
    return dw_k, dw_q, dtau, dx
