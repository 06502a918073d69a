"""Training loop: two-tier learning rates, linear warm-up, decoupled
weight decay, and a binary checkpoint format that round-trips bitwise.

The optimizer is Adam with decoupled multiplicative weight decay
(beta1=0.9, beta2=0.999, eps=1e-8); decay is skipped on layer-norm
parameters, temperatures and loss scalars via Param.decay. Batch order
is a pure function of (seed, epoch), which makes k steps of training
exactly equal to j steps + checkpoint + (k - j) steps.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .config import RunConfig, config_hash
from .data import (
    batches_from_arrays,
    build_vocab,
    sequence_budget,
    tokenize_corpus,
)
from .model import AlignmentModel, ModelDims
from .numerics import Param
from .objectives import VARIANTS

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(step: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up to base_lr, constant afterwards (no decay)."""
    if step < 1:
        raise ValueError("step counts from 1")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class OptimState:
    weight_decay: float = 0.0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)   # per-parameter update counts


def adamw_step(params, grads, state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update over ``params``.

    Decay is applied multiplicatively (p *= 1 - lr*wd) before the moment
    update, and only where Param.decay is set.
    """
    for p, g in zip(params, grads):
        g = np.asarray(g)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape mismatch for {p.name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {p.name}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
            state.t[p.name] = 0
        if state.weight_decay and p.decay:
            p.value *= 1.0 - lr * state.weight_decay
        state.t[p.name] += 1
        t = state.t[p.name]
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.value.dtype)


@dataclass
class ParamGroups:
    backbone: list
    refinement: list
    backbone_lr: float
    refinement_lr: float

    def validate(self, all_params) -> None:
        names_b = {p.name for p in self.backbone}
        names_r = {p.name for p in self.refinement}
        if names_b & names_r:
            raise ValueError(f"params in both groups: {names_b & names_r}")
        missing = {p.name for p in all_params} - names_b - names_r
        if missing:
            raise ValueError(f"params in no group: {sorted(missing)[:5]}")

    def items(self):
        return (("backbone", self.backbone, self.backbone_lr),
                ("refinement", self.refinement, self.refinement_lr))


# ---------------------------------------------------------------------------
# model construction and the fit loop
# ---------------------------------------------------------------------------


def build_model(cfg: RunConfig, vocab, budget) -> AlignmentModel:
    dims = ModelDims(
        patch_size=cfg.patch_size, grid=cfg.grid, channels=3,
        d_model=cfg.d_model, d_out=cfg.d_out, n_layers=cfg.n_layers,
        n_heads=cfg.n_heads, vocab_size=len(vocab),
        long_len=budget.long_len, max_len=cfg.base_max_len,
        extend_keep=cfg.extend_keep, extend_ratio=cfg.extend_ratio,
        cal_ratio=cfg.cal_ratio)
    dtype = np.float64 if cfg.dtype == "f64" else np.float32
    return AlignmentModel(dims, eot_id=vocab.eot_id, pad_id=vocab.pad_id,
                          seed=cfg.seed, dtype=dtype, tau_tok=cfg.tau_tok,
                          normalize_local=cfg.normalize_local,
                          sample_form=cfg.sample_form)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + epoch]).permutation(n)


@dataclass
class FitResult:
    model: AlignmentModel
    opt_state: OptimState
    metrics: list
    vocab: object
    budget: object
    steps: int


def fit(cfg: RunConfig, corpus, model: AlignmentModel | None = None,
        opt_state: OptimState | None = None, start_step: int = 0,
        on_step=None) -> FitResult:
    """Train the configured variant over the corpus.

    Deterministic given cfg.seed (bit-exact in f64 mode); resuming from
    (model, opt_state, start_step) replays the same batch sequence and
    skips the already-applied steps.
    """
    if not corpus:
        raise ValueError("empty corpus")
    cfg.validate()
    vocab = build_vocab(cfg.grid, cfg.max_objects)
    budget = sequence_budget(corpus, vocab, cfg.max_sentences)
    if model is None:
        model = build_model(cfg, vocab, budget)
    if opt_state is None:
        opt_state = OptimState(weight_decay=cfg.weight_decay)
    variant = VARIANTS[cfg.variant]
    groups = ParamGroups(**model.param_groups(),
                         backbone_lr=cfg.backbone_lr,
                         refinement_lr=cfg.refinement_lr)
    groups.validate(model.params())
    arrays = tokenize_corpus(corpus, vocab, budget, cfg.max_sentences)

    metrics = []
    step = 0
    t0 = time.monotonic()
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, len(corpus))
        for batch in batches_from_arrays(arrays, order, cfg.batch_size):
            step += 1
            if step <= start_step:
                continue
            model.zero_grads()
            bundle = model.loss_on_batch(batch, variant, cfg.lambda_w,
                                         cfg.lambda_s)
            if not np.isfinite(bundle.l_total) or bundle.l_total > 1e6:
                raise DivergenceError(step, f"l_total={bundle.l_total}")
            opt_state.step += 1
            lrs = {}
            try:
                for name, params, base in groups.items():
                    lr = lr_at(step, cfg.warmup_steps, base)
                    lrs[name] = lr
                    adamw_step(params, [p.grad for p in params], opt_state, lr)
            except FloatingPointError as exc:
                raise DivergenceError(step, str(exc)) from exc
            record = {
                "step": step, "epoch": epoch,
                "l_global": bundle.l_global, "l_word": bundle.l_word,
                "l_sub": bundle.l_sub, "l_total": bundle.l_total,
                "lr_backbone": lrs["backbone"],
                "lr_refinement": lrs["refinement"],
                "wall_time": time.monotonic() - t0,
                "timestamp": datetime.now(timezone.utc).isoformat(),
            }
            metrics.append(record)
            if on_step is not None:
                on_step(record)
    return FitResult(model=model, opt_state=opt_state, metrics=metrics,
                     vocab=vocab, budget=budget, steps=step)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"MULA"
VERSION = 1
_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i8"}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                  np.dtype(np.int64): 2}


@dataclass
class Checkpoint:
    version: int
    step: int
    config_digest: bytes
    tensors: dict          # parameter name -> array
    opt_m: dict
    opt_v: dict
    opt_t: dict
    weight_decay: float


class CheckpointError(RuntimeError):
    pass


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    shape = arr.shape  # ascontiguousarray would promote 0-d to 1-d
    arr = np.ascontiguousarray(arr)
    code = _CODE_FOR_KIND.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<BI", code, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
    return head + arr.astype(_DTYPE_CODES[code]).tobytes()


def save_checkpoint(path, model: AlignmentModel, state: OptimState,
                    step: int, config_digest: bytes) -> None:
    """Binary format: magic, version, step, config digest, named tensor
    records (params, adam moments, counts), trailing CRC32."""
    records = []
    for name, value in model.state_dict().items():
        records.append(_pack_record("p/" + name, value))
    for name, m in state.m.items():
        records.append(_pack_record("m/" + name, m))
    for name, v in state.v.items():
        records.append(_pack_record("v/" + name, v))
    for name, t in state.t.items():
        records.append(_pack_record("t/" + name, np.array(t, dtype=np.int64)))
    records.append(_pack_record(
        "h/weight_decay", np.array(state.weight_decay, dtype=np.float64)))
    body = (MAGIC + struct.pack("<IQ", VERSION, step)
            + struct.pack("<I", len(config_digest)) + config_digest
            + struct.pack("<I", len(records)) + b"".join(records))
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def _read(buf: bytes, offset: int, n: int):
    if offset + n > len(buf):
        raise CheckpointError(f"truncated checkpoint at offset {offset}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path, expect_config_digest: bytes | None = None,
                    force: bool = False) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint at offset 0")
    body, crc_bytes = buf[:-4], buf[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointError(f"CRC mismatch at offset {len(body)}")
    off = 0
    magic, off = _read(body, off, 4)
    if magic != MAGIC:
        raise CheckpointError("bad magic bytes at offset 0")
    raw, off = _read(body, off, 12)
    version, step = struct.unpack("<IQ", raw)
    if version != VERSION and not force:
        raise CheckpointError(f"format version {version} != {VERSION}")
    raw, off = _read(body, off, 4)
    (dlen,) = struct.unpack("<I", raw)
    digest, off = _read(body, off, dlen)
    if (expect_config_digest is not None and digest != expect_config_digest
            and not force):
        raise CheckpointError("config hash mismatch (pass force to override)")
    raw, off = _read(body, off, 4)
    (n_records,) = struct.unpack("<I", raw)
    tensors, opt_m, opt_v, opt_t = {}, {}, {}, {}
    weight_decay = 0.0
    for _ in range(n_records):
        raw, off = _read(body, off, 4)
        (nlen,) = struct.unpack("<I", raw)
        nb, off = _read(body, off, nlen)
        name = nb.decode("utf-8")
        raw, off = _read(body, off, 5)
        code, rank = struct.unpack("<BI", raw)
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} at offset {off}")
        shape = ()
        if rank:
            raw, off = _read(body, off, 4 * rank)
            shape = struct.unpack(f"<{rank}I", raw)
        dt = np.dtype(_DTYPE_CODES[code])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        raw, off = _read(body, off, nbytes)
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        kind, _, pname = name.partition("/")
        if kind == "p":
            tensors[pname] = arr
        elif kind == "m":
            opt_m[pname] = arr
        elif kind == "v":
            opt_v[pname] = arr
        elif kind == "t":
            opt_t[pname] = int(arr.reshape(-1)[0])
        elif kind == "h" and pname == "weight_decay":
            weight_decay = float(arr.reshape(-1)[0])
        else:
            raise CheckpointError(f"unknown record kind {kind!r}")
    if off != len(body):
        raise CheckpointError(f"trailing bytes at offset {off}")
    return Checkpoint(version=version, step=step, config_digest=digest,
                      tensors=tensors, opt_m=opt_m, opt_v=opt_v, opt_t=opt_t,
                      weight_decay=weight_decay)


def restore(model: AlignmentModel, ckpt: Checkpoint) -> OptimState:
    """Load parameters into the model and rebuild the optimizer state."""
    model.load_state(ckpt.tensors)
    state = OptimState(weight_decay=ckpt.weight_decay, step=ckpt.step)
    state.m = {k: v.copy() for k, v in ckpt.opt_m.items()}
    state.v = {k: v.copy() for k, v in ckpt.opt_v.items()}
    state.t = dict(ckpt.opt_t)
    return state


def checkpoint_digest_for(cfg: RunConfig) -> bytes:
    return config_hash(cfg)
