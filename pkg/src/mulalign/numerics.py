"""Dense matrix primitives with hand-written backward passes.

Matrices are plain row-major numpy arrays. Everything here follows the
dtype of its inputs: training runs in float32, gradient checks build
their graphs in float64 (finite differences are noise-dominated in
float32). No taping autodiff; every differentiable unit supplies its own
backward, and ``grad_check`` verifies it against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

Mat = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Param:
    """Named trainable tensor plus its accumulated gradient.

    ``decay`` marks whether weight decay applies (off for layer-norm
    parameters, temperatures and loss scalars).
    """

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name}, shape={self.value.shape})"


def check_finite(m: Mat, what: str = "input") -> Mat:
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"non-finite values in {what}")
    return m


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def softmax_rows(m: Mat) -> Mat:
    """Row-wise softmax with per-row max subtraction. m (..., n)."""
    m = check_finite(m, "softmax input")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y: Mat, dy: Mat) -> Mat:
    """dL/dlogits given y = softmax_rows(logits) and dL/dy."""
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return y * (dy - inner)


def gelu(m: Mat) -> Mat:
    """Elementwise x * Phi(x), exact Gaussian-CDF form (no tanh approx)."""
    m = check_finite(m, "gelu input")
    return m * 0.5 * (1.0 + erf(m * _INV_SQRT2))


def gelu_backward(x: Mat, dy: Mat) -> Mat:
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return dy * (cdf + x * phi)


def l2_normalize_rows(m: Mat, eps: float = 0.0) -> Mat:
    """Scale each row to unit Euclidean norm. Zero rows are an error."""
    m = np.asarray(m)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if eps == 0.0 and np.any(norms < 1e-30):
        raise ValueError("l2_normalize_rows: zero row")
    return m / np.maximum(norms, eps if eps > 0.0 else 1e-300)


def l2_normalize_rows_backward(x: Mat, dy: Mat) -> Mat:
    """dL/dx for y = x / ||x||, rowwise."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / norms
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norms


def attn_weights(q: Mat, k: Mat, scale: float) -> Mat:
    """softmax_rows(q @ k.T / scale). q (n,d), k (m,d) -> (n,m)."""
    q, k = np.asarray(q), np.asarray(k)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attn_weights: dim mismatch {q.shape} vs {k.shape}")
    if scale <= 0:
        raise ValueError("attn_weights: scale must be positive")
    return softmax_rows(q @ k.T / scale)


# ---------------------------------------------------------------------------
# differentiable blocks
# ---------------------------------------------------------------------------


class DiffBlock:
    """A differentiable unit: a forward map and its matching backward.

    ``backward(x, dy)`` returns ``(dx, grads)`` where ``grads`` is a list of
    arrays aligned with ``params()``. Forward must be deterministic for
    fixed parameters and input.
    """

    def params(self) -> list[Param]:
        return []

    def forward(self, x: Mat) -> Mat:
        raise NotImplementedError

    def backward(self, x: Mat, dy: Mat) -> tuple[Mat, list[Mat]]:
        raise NotImplementedError


class SoftmaxRowsBlock(DiffBlock):
    def forward(self, x):
        return softmax_rows(x)

    def backward(self, x, dy):
        return softmax_rows_backward(softmax_rows(x), dy), []


class GeluBlock(DiffBlock):
    def forward(self, x):
        return gelu(x)

    def backward(self, x, dy):
        return gelu_backward(x, dy), []


class L2NormalizeRowsBlock(DiffBlock):
    def forward(self, x):
        return l2_normalize_rows(x)

    def backward(self, x, dy):
        return l2_normalize_rows_backward(x, dy), []


class LinearBlock(DiffBlock):
    """y = x @ W with a single weight parameter."""

    def __init__(self, w: np.ndarray, name: str = "linear.w"):
        self.w = Param(name, w)

    def params(self):
        return [self.w]

    def forward(self, x):
        return x @ self.w.value

    def backward(self, x, dy):
        return dy @ self.w.value.T, [x.T @ dy]


class AttnWeightsBlock(DiffBlock):
    """attn_weights(q, k, scale) with k held as the parameter, q as input."""

    def __init__(self, k: np.ndarray, scale: float, name: str = "attn.k"):
        self.k = Param(name, k)
        self.scale = float(scale)

    def params(self):
        return [self.k]

    def forward(self, q):
        return attn_weights(q, self.k.value, self.scale)

    def backward(self, q, dy):
        y = attn_weights(q, self.k.value, self.scale)
        dlogits = softmax_rows_backward(y, dy) / self.scale
        dq = dlogits @ self.k.value
        dk = dlogits.T @ q
        return dq, [dk]


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    tol: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} "
                f"(tol={self.tol:.1e}, worst={self.worst})")


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / (floor + max(abs(a), abs(n)))


def check_gradients(
    loss_fn,
    tensors: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` re-evaluates the scalar loss from the current contents of
    ``tensors`` (entries are perturbed in place and restored). All work is
    done in the tensors' own dtype; callers wanting trustworthy numbers
    should hand in float64.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    worst = ("", 0.0)
    per_tensor: dict[str, float] = {}
    for name, t in tensors.items():
        grad = analytic[name]
        if grad.shape != t.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        flat = t.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        tmax = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite loss perturbing {name}[{i}]")
            fd = (up - down) / (2.0 * eps)
            err = _rel_err(float(gflat[i]), float(fd), floor)
            if err > tmax:
                tmax = err
            if err > worst[1]:
                worst = (f"{name}[{i}]", err)
        per_tensor[name] = tmax
    name, err = worst
    return GradCheckReport(max_rel_err=err, worst=name or "-",
                           tol=tol, per_tensor=per_tensor)


def grad_check(
    block: DiffBlock,
    x: Mat,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    check_input: bool = True,
) -> GradCheckReport:
    """Gradient-check one DiffBlock through a fixed random linear readout.

    The scalar under test is sum(forward(x) * R) for weights R drawn once
    from ``seed``; every parameter entry (and input entry unless
    ``check_input`` is off) is perturbed with central differences.
    """
    x = np.array(x, dtype=np.float64)
    params = block.params()
    saved = [p.value for p in params]
    for p in params:
        p.value = p.value.astype(np.float64)
    try:
        y0 = block.forward(x)
        rng = np.random.default_rng(seed)
        r = rng.standard_normal(y0.shape)

        def loss_fn():
            return float((block.forward(x) * r).sum())

        dx, grads = block.backward(x, r.copy())
        tensors = {p.name: p.value for p in params}
        analytic = {p.name: np.asarray(g) for p, g in zip(params, grads)}
        if check_input:
            tensors["input"] = x
            analytic["input"] = np.asarray(dx)
        return check_gradients(loss_fn, tensors, analytic, eps=eps, tol=tol)
    finally:
        for p, v in zip(params, saved):
            p.value = v
