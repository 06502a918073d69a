"""Toy dual encoders: a patch ViT and a bidirectional text transformer.

Both produce a projected global embedding (CLS / EOT) plus projected
local token embeddings in a shared d-dimensional space. Forward passes
are batched over (B, T, d_model) arrays; every stage has a matching
hand-written backward that accumulates into Param.grad.

The text side supports the long-text positional table extension: the
first ``keep`` rows are kept verbatim and the tail is linearly
interpolated to ``ratio`` times its length.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    Mat,
    Param,
    gelu,
    gelu_backward,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    softmax_rows,
    softmax_rows_backward,
)

# ---------------------------------------------------------------------------
# shared layers
# ---------------------------------------------------------------------------


def _linear_fwd(x, w):
    """x (B,T,din) @ w (din,dout)."""
    return x @ w


def _linear_bwd(x, w, dy):
    din, dout = w.shape
    dx = dy @ w.T
    dw = x.reshape(-1, din).T @ dy.reshape(-1, dout)
    return dx, dw


def _layernorm_fwd(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * g + b, (xhat, inv_std)


def _layernorm_bwd(cache, g, dy):
    xhat, inv_std = cache
    n = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, n).sum(axis=0)
    db = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * g
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


class TransformerBlock:
    """Post-norm block: LN(x + attn(x)) then LN(h + mlp(h)).

    All projections are bias-free square mats; layer norms carry the only
    scale/shift vectors. Attention is bidirectional (no causal mask).
    """

    def __init__(self, d_model: int, n_heads: int, prefix: str,
                 rng: np.random.Generator, dtype=np.float32):
        if d_model % n_heads:
            raise ValueError("n_heads must divide d_model")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        s = 1.0 / np.sqrt(d_model)
        d_ff = 4 * d_model

        def mat(name, rows, cols, scale):
            return Param(f"{prefix}.{name}",
                         (scale * rng.standard_normal((rows, cols))).astype(dtype))

        self.w_q = mat("w_q", d_model, d_model, s)
        self.w_k = mat("w_k", d_model, d_model, s)
        self.w_v = mat("w_v", d_model, d_model, s)
        self.w_o = mat("w_o", d_model, d_model, s)
        self.w_ff1 = mat("w_ff1", d_model, d_ff, s)
        self.w_ff2 = mat("w_ff2", d_ff, d_model, 1.0 / np.sqrt(d_ff))
        self.ln1_g = Param(f"{prefix}.ln1_g", np.ones(d_model, dtype), decay=False)
        self.ln1_b = Param(f"{prefix}.ln1_b", np.zeros(d_model, dtype), decay=False)
        self.ln2_g = Param(f"{prefix}.ln2_g", np.ones(d_model, dtype), decay=False)
        self.ln2_b = Param(f"{prefix}.ln2_b", np.zeros(d_model, dtype), decay=False)

    def params(self) -> list[Param]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.w_ff1, self.w_ff2,
                self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]

    def _attn_fwd(self, x, key_mask=None):
        B, T, D = x.shape
        H, Dh = self.n_heads, self.d_head
        q = x @ self.w_q.value
        k = x @ self.w_k.value
        v = x @ self.w_v.value
        qh = q.reshape(B, T, H, Dh)
        kh = k.reshape(B, T, H, Dh)
        vh = v.reshape(B, T, H, Dh)
        scores = np.einsum("bthd,bshd->bhts", qh, kh) / np.sqrt(Dh)
        if key_mask is not None:
            scores = scores + np.where(key_mask, 0.0, -1e30)[:, None, None, :]
        attn = softmax_rows(scores)
        ctxh = np.einsum("bhts,bshd->bthd", attn, vh)
        ctx = ctxh.reshape(B, T, D)
        out = ctx @ self.w_o.value
        return out, (x, qh, kh, vh, attn, ctx)

    def _attn_bwd(self, cache, dy):
        x, qh, kh, vh, attn, ctx = cache
        B, T, D = x.shape
        H, Dh = self.n_heads, self.d_head
        d_ctx, dwo = _linear_bwd(ctx, self.w_o.value, dy)
        self.w_o.grad += dwo
        d_ctxh = d_ctx.reshape(B, T, H, Dh)
        d_attn = np.einsum("bthd,bshd->bhts", d_ctxh, vh)
        d_vh = np.einsum("bhts,bthd->bshd", attn, d_ctxh)
        d_scores = softmax_rows_backward(attn, d_attn) / np.sqrt(Dh)
        d_qh = np.einsum("bhts,bshd->bthd", d_scores, kh)
        d_kh = np.einsum("bhts,bthd->bshd", d_scores, qh)
        dx = np.zeros_like(x)
        for dproj, w in ((d_qh, self.w_q), (d_kh, self.w_k), (d_vh, self.w_v)):
            dflat = dproj.reshape(B, T, D)
            dxi, dw = _linear_bwd(x, w.value, dflat)
            dx += dxi
            w.grad += dw
        return dx

    def forward(self, x, key_mask=None):
        a, attn_cache = self._attn_fwd(x, key_mask)
        h1, ln1_cache = _layernorm_fwd(x + a, self.ln1_g.value, self.ln1_b.value)
        ff_in = h1 @ self.w_ff1.value
        ff_act = gelu(ff_in)
        ff_out = ff_act @ self.w_ff2.value
        out, ln2_cache = _layernorm_fwd(h1 + ff_out, self.ln2_g.value,
                                        self.ln2_b.value)
        return out, (attn_cache, ln1_cache, h1, ff_in, ff_act, ln2_cache)

    def backward(self, cache, dy):
        attn_cache, ln1_cache, h1, ff_in, ff_act, ln2_cache = cache
        dsum2, dg2, db2 = _layernorm_bwd(ln2_cache, self.ln2_g.value, dy)
        self.ln2_g.grad += dg2
        self.ln2_b.grad += db2
        d_ff_act, dw2 = _linear_bwd(ff_act, self.w_ff2.value, dsum2)
        self.w_ff2.grad += dw2
        d_ff_in = gelu_backward(ff_in, d_ff_act)
        dh1_ff, dw1 = _linear_bwd(h1, self.w_ff1.value, d_ff_in)
        self.w_ff1.grad += dw1
        dh1 = dsum2 + dh1_ff
        dsum1, dg1, db1 = _layernorm_bwd(ln1_cache, self.ln1_g.value, dh1)
        self.ln1_g.grad += dg1
        self.ln1_b.grad += db1
        dx_attn = self._attn_bwd(attn_cache, dsum1)
        return dsum1 + dx_attn


# ---------------------------------------------------------------------------
# positional table extension
# ---------------------------------------------------------------------------


def extend_positional_embeddings(pos: Mat, keep: int, ratio: int) -> Mat:
    """Stretch a positional table for longer sequences.

    The first ``keep`` rows are copied verbatim. Tail row j of the output
    samples fractional source index keep + j/ratio, linearly interpolating
    between the floor and ceil source rows and clamping at the last row.
    Output length: keep + (L - keep) * ratio.
    """
    pos = np.asarray(pos)
    L = pos.shape[0]
    if not 0 < keep < L:
        raise ValueError(f"keep must be in (0, {L}), got {keep}")
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    head = pos[:keep]
    n_tail = (L - keep) * ratio
    j = np.arange(n_tail)
    src = keep + j / ratio
    lo = np.minimum(np.floor(src).astype(int), L - 1)
    hi = np.minimum(lo + 1, L - 1)
    frac = (src - np.floor(src))[:, None]
    tail = pos[lo] * (1.0 - frac) + pos[hi] * frac
    return np.concatenate([head, tail.astype(pos.dtype)], axis=0)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class VisionEncoder:
    """Patch transformer: patchify -> project -> [CLS; patches] + pos ->
    blocks -> per-token head. Output dim d is shared with the text head."""

    def __init__(self, patch_size=4, grid=4, channels=3, d_model=64, d_out=32,
                 n_layers=2, n_heads=4, seed=0, dtype=np.float32):
        self.patch_size = patch_size
        self.grid = grid
        self.channels = channels
        self.d_model = d_model
        self.d_out = d_out
        self.n_patches = grid * grid
        rng = np.random.default_rng(seed)
        patch_dim = patch_size * patch_size * channels
        s = 1.0 / np.sqrt(patch_dim)
        self.patch_proj = Param(
            "vision.patch_proj",
            (s * rng.standard_normal((patch_dim, d_model))).astype(dtype))
        self.cls_embedding = Param(
            "vision.cls_embedding",
            (0.02 * rng.standard_normal((1, d_model))).astype(dtype))
        self.pos_embed = Param(
            "vision.pos_embed",
            (0.02 * rng.standard_normal((self.n_patches + 1, d_model))).astype(dtype))
        self.blocks = [TransformerBlock(d_model, n_heads, f"vision.block{i}",
                                        rng, dtype) for i in range(n_layers)]
        self.head = Param(
            "vision.head",
            ((1.0 / np.sqrt(d_model)) * rng.standard_normal((d_model, d_out))).astype(dtype))

    def params(self) -> list[Param]:
        out = [self.patch_proj, self.cls_embedding, self.pos_embed]
        for b in self.blocks:
            out.extend(b.params())
        out.append(self.head)
        return out

    def _patchify(self, images):
        B, H, W, C = images.shape
        ps = self.patch_size
        if H % ps or W % ps:
            raise ValueError(f"image side {H}x{W} not divisible by patch {ps}")
        if H != self.grid * ps or W != self.grid * ps or C != self.channels:
            raise ValueError(
                f"expected {self.grid * ps}x{self.grid * ps}x{self.channels} "
                f"images, got {H}x{W}x{C}")
        gh, gw = H // ps, W // ps
        x = images.reshape(B, gh, ps, gw, ps, C)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, gh * gw, ps * ps * C)

    def _unpatchify_grad(self, dpatches, shape):
        B, H, W, C = shape
        ps = self.patch_size
        gh, gw = H // ps, W // ps
        x = dpatches.reshape(B, gh, gw, ps, ps, C)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)

    def forward(self, images: np.ndarray):
        """images (B,H,W,C) -> projected token embeddings (B, P+1, d), raw
        (un-normalized); row 0 is CLS."""
        images = np.asarray(images, dtype=self.patch_proj.value.dtype)
        patches = self._patchify(images)
        B = patches.shape[0]
        x0 = patches @ self.patch_proj.value
        cls = np.broadcast_to(self.cls_embedding.value, (B, 1, self.d_model))
        x = np.concatenate([cls, x0], axis=1) + self.pos_embed.value
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x)
            caches.append(c)
        y = x @ self.head.value
        return y, (images.shape, patches, caches, x)

    def backward(self, cache, dy):
        shape, patches, caches, x_last = cache
        dx, dhead = _linear_bwd(x_last, self.head.value, dy)
        self.head.grad += dhead
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(c, dx)
        self.pos_embed.grad += dx.sum(axis=0)
        self.cls_embedding.grad += dx[:, 0, :].sum(axis=0, keepdims=True)
        dpatch_tokens = dx[:, 1:, :]
        dpatches, dproj = _linear_bwd(patches, self.patch_proj.value,
                                      dpatch_tokens)
        self.patch_proj.grad += dproj
        return self._unpatchify_grad(dpatches, shape)


class TextEncoder:
    """Token transformer with one EOT per sequence; bidirectional attention.

    pos_embed may be the extended long-text table; sequences beyond its
    row count are rejected.
    """

    def __init__(self, vocab_size=256, d_model=64, d_out=32, n_layers=2,
                 n_heads=4, max_len=64, eot_id=1, pad_id=0, seed=1,
                 dtype=np.float32, extend_keep: int | None = None,
                 extend_ratio: int = 1):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.d_out = d_out
        self.eot_id = eot_id
        self.pad_id = pad_id
        rng = np.random.default_rng(seed)
        self.token_embed = Param(
            "text.token_embed",
            (0.02 * rng.standard_normal((vocab_size, d_model))).astype(dtype))
        pos = (0.02 * rng.standard_normal((max_len, d_model))).astype(dtype)
        if extend_keep is not None and extend_ratio > 1:
            pos = extend_positional_embeddings(pos, extend_keep, extend_ratio)
        self.pos_embed = Param("text.pos_embed", pos)
        self.max_len = pos.shape[0]
        self.blocks = [TransformerBlock(d_model, n_heads, f"text.block{i}",
                                        rng, dtype) for i in range(n_layers)]
        self.head = Param(
            "text.head",
            ((1.0 / np.sqrt(d_model)) * rng.standard_normal((d_model, d_out))).astype(dtype))

    def params(self) -> list[Param]:
        out = [self.token_embed, self.pos_embed]
        for b in self.blocks:
            out.extend(b.params())
        out.append(self.head)
        return out

    def eot_positions(self, tokens: np.ndarray) -> np.ndarray:
        """Index of the single EOT in each row of tokens (B, L)."""
        tokens = np.asarray(tokens)
        hits = tokens == self.eot_id
        counts = hits.sum(axis=-1)
        if np.any(counts != 1):
            bad = int(np.argwhere(counts != 1)[0, 0])
            raise ValueError(
                f"sequence {bad} has {int(counts[bad])} EOT tokens, want 1")
        return hits.argmax(axis=-1)

    def forward(self, tokens: np.ndarray):
        """tokens (B, L) int -> projected embeddings (B, L, d), raw."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (B, L)")
        B, L = tokens.shape
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max {self.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError("token id out of range")
        self.eot_positions(tokens)
        x = self.token_embed.value[tokens] + self.pos_embed.value[:L]
        # padding positions are removed from the attention key set so
        # pooling never mixes pad noise into real tokens
        key_mask = tokens != self.pad_id
        if key_mask.all():
            key_mask = None
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x, key_mask)
            caches.append(c)
        y = x @ self.head.value
        return y, (tokens, caches, x)

    def backward(self, cache, dy):
        tokens, caches, x_last = cache
        B, L = tokens.shape
        dx, dhead = _linear_bwd(x_last, self.head.value, dy)
        self.head.grad += dhead
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(c, dx)
        self.pos_embed.grad[:L] += dx.sum(axis=0)
        np.add.at(self.token_embed.grad, tokens.reshape(-1),
                  dx.reshape(-1, self.d_model))


# ---------------------------------------------------------------------------
# output splitting + the per-sample public surface
# ---------------------------------------------------------------------------


def split_text_outputs(y: np.ndarray, tokens: np.ndarray, eot_pos: np.ndarray,
                       normalize_local: bool = True):
    """Split raw projected text embeddings into (t_eot, t_loc).

    y (B,L,d): t_eot (B,d) is the row at each EOT position (normalized);
    t_loc (B,L-1,d) is every other row in original order. Returns a cache
    for scatter-backward.
    """
    B, L, d = y.shape
    rows = np.arange(B)
    eot_raw = y[rows, eot_pos]
    loc_idx = _loc_indices(L, eot_pos)
    loc_raw = np.take_along_axis(y, loc_idx[:, :, None], axis=1)
    t_eot = l2_normalize_rows(eot_raw)
    t_loc = l2_normalize_rows(loc_raw) if normalize_local else loc_raw
    return t_eot, t_loc, (eot_raw, loc_raw, eot_pos, loc_idx, normalize_local)


def split_text_backward(cache, d_eot, d_loc, y_shape):
    eot_raw, loc_raw, eot_pos, loc_idx, normalize_local = cache
    B, L, d = y_shape
    dy = np.zeros(y_shape, dtype=d_eot.dtype)
    d_eot_raw = l2_normalize_rows_backward(eot_raw, d_eot)
    rows = np.arange(B)
    dy[rows, eot_pos] = d_eot_raw
    if d_loc is not None:
        d_loc_raw = (l2_normalize_rows_backward(loc_raw, d_loc)
                     if normalize_local else d_loc)
        np.put_along_axis(dy, loc_idx[:, :, None], d_loc_raw, axis=1)
    return dy


def _loc_indices(L, eot_pos):
    base = np.arange(L)[None, :].repeat(len(eot_pos), axis=0)
    mask = base != eot_pos[:, None]
    return base[mask].reshape(len(eot_pos), L - 1)


def split_vision_outputs(y: np.ndarray, normalize_local: bool = True):
    """Split raw projected vision embeddings into (v_cls, v_loc)."""
    cls_raw = y[:, 0, :]
    loc_raw = y[:, 1:, :]
    v_cls = l2_normalize_rows(cls_raw)
    v_loc = l2_normalize_rows(loc_raw) if normalize_local else loc_raw
    return v_cls, v_loc, (cls_raw, loc_raw, normalize_local)


def split_vision_backward(cache, d_cls, d_loc, y_shape):
    cls_raw, loc_raw, normalize_local = cache
    dy = np.zeros(y_shape, dtype=d_cls.dtype)
    dy[:, 0, :] = l2_normalize_rows_backward(cls_raw, d_cls)
    if d_loc is not None:
        dy[:, 1:, :] = (l2_normalize_rows_backward(loc_raw, d_loc)
                        if normalize_local else d_loc)
    return dy


def encode_image(enc: VisionEncoder, image: np.ndarray,
                 normalize_local: bool = True):
    """Single image (H,W,C) -> (v_cls (d,), v_loc (P,d))."""
    y, _ = enc.forward(image[None])
    v_cls, v_loc, _ = split_vision_outputs(y, normalize_local)
    return v_cls[0], v_loc[0]


def encode_text(enc: TextEncoder, tokens, normalize_local: bool = True):
    """Single token sequence (one EOT) -> (t_eot (d,), t_loc (K,d))."""
    tokens = np.asarray(tokens)[None]
    y, cache = enc.forward(tokens)
    eot_pos = enc.eot_positions(tokens)
    t_eot, t_loc, _ = split_text_outputs(y, tokens, eot_pos, normalize_local)
    return t_eot[0], t_loc[0]


def encode_subcaptions(enc: TextEncoder, subs: list) -> np.ndarray:
    """Stack the EOT embeddings of M independent subcaption encodes (M,d)."""
    if not subs:
        raise ValueError("no subcaptions")
    return np.stack([encode_text(enc, s)[0] for s in subs], axis=0)
