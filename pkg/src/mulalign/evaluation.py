"""Retrieval metrics, difficulty-stratified probes, attention-map export.

Retrieval scores text-to-image and image-to-text Recall@k over the
global CLS/EOT embeddings. The fine-grained probe ranks a positive
object sentence against attribute-swap negatives using the
subcaption-aggregated patch vector; ties always resolve to the lower
candidate index so fixtures are exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    LEVELS,
    Vocab,
    make_hard_negatives,
    sequence_budget,
    tokenize,
    tokenize_corpus,
)
from .model import AlignmentModel
from .numerics import l2_normalize_rows, softmax_rows


# ---------------------------------------------------------------------------
# recall
# ---------------------------------------------------------------------------


@dataclass
class SimMatrix:
    values: np.ndarray        # (queries, gallery) cosine similarities
    ground_truth: np.ndarray  # (queries,) gallery index per query

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.ground_truth = np.asarray(self.ground_truth)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("similarity matrix must be non-empty 2-D")
        if self.ground_truth.shape != (self.values.shape[0],):
            raise ValueError("one ground-truth index per query row")
        if (self.ground_truth.min() < 0
                or self.ground_truth.max() >= self.values.shape[1]):
            raise ValueError("ground-truth index out of range")


def recall_at_k(s: SimMatrix, k: int) -> float:
    """Fraction of queries whose true column ranks in the top k.

    Equal similarities rank by ascending column index.
    """
    q, g = s.values.shape
    if not 1 <= k <= g:
        raise ValueError(f"k must be in [1, {g}], got {k}")
    rows = np.arange(q)
    gt_vals = s.values[rows, s.ground_truth]
    greater = (s.values > gt_vals[:, None]).sum(axis=1)
    cols = np.arange(g)[None, :]
    tied_before = ((s.values == gt_vals[:, None])
                   & (cols < s.ground_truth[:, None])).sum(axis=1)
    ranks = greater + tied_before  # zero-based
    return float((ranks < k).mean())


# ---------------------------------------------------------------------------
# retrieval over a corpus
# ---------------------------------------------------------------------------


def embed_corpus(model: AlignmentModel, corpus, vocab: Vocab,
                 max_sentences: int = 15, chunk: int = 64):
    """Global embeddings for every sample: (v_cls (N,d), t_eot (N,d))."""
    budget = sequence_budget(corpus, vocab, max_sentences)
    arrays = tokenize_corpus(corpus, vocab, budget, max_sentences)
    v_parts, t_parts = [], []
    n = len(corpus)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        y_v, _ = model.vision.forward(arrays["images"][sl])
        v_parts.append(l2_normalize_rows(y_v[:, 0, :]))
        toks = arrays["long_tokens"][sl]
        y_t, _ = model.text.forward(toks)
        eot = model.text.eot_positions(toks)
        t_parts.append(l2_normalize_rows(y_t[np.arange(len(toks)), eot]))
    return np.concatenate(v_parts), np.concatenate(t_parts)


def run_retrieval(model: AlignmentModel, corpus, vocab: Vocab,
                  ks=(1, 5), max_sentences: int = 15) -> dict:
    """Recall@k for text->image and image->text over global embeddings."""
    captions = [s.long_caption for s in corpus]
    if len(set(captions)) != len(captions):
        raise ValueError("corpus captions must be unique for retrieval")
    v_cls, t_eot = embed_corpus(model, corpus, vocab, max_sentences)
    gt = np.arange(len(corpus))
    t2i = SimMatrix(values=t_eot @ v_cls.T, ground_truth=gt)
    i2t = SimMatrix(values=v_cls @ t_eot.T, ground_truth=gt)
    report = {"t2i": {}, "i2t": {}}
    for k in ks:
        report["t2i"][f"r{k}"] = recall_at_k(t2i, k)
        report["i2t"][f"r{k}"] = recall_at_k(i2t, k)
    return report


# ---------------------------------------------------------------------------
# fine-grained attribute probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeGroup:
    sample_index: int
    image: np.ndarray
    positive: str
    negatives: dict             # level -> list of captions


@dataclass
class ProbeSet:
    k: int
    groups: list = field(default_factory=list)


def build_probe_set(corpus, k: int = 5, n_groups: int = 200,
                    seed: int = 0) -> ProbeSet:
    """Sample objects and build all four difficulty levels per group."""
    from .data import object_sentence
    rng = np.random.default_rng(seed)
    probes = ProbeSet(k=k)
    order = rng.permutation(len(corpus))
    pos = 0
    attempt = 0
    while len(probes.groups) < n_groups:
        if pos >= len(order):
            pos = 0
            order = rng.permutation(len(corpus))
        idx = int(order[pos])
        pos += 1
        sample = corpus[idx]
        obj = sample.scene.objects[int(rng.integers(len(sample.scene.objects)))]
        positive = object_sentence(obj)
        negatives = {}
        try:
            for level in LEVELS:
                negatives[level] = make_hard_negatives(
                    positive, sample.scene, level, k,
                    seed=int(rng.integers(2**31)))
        except ValueError:
            attempt += 1
            if attempt > 100 * n_groups:
                raise
            continue
        probes.groups.append(ProbeGroup(
            sample_index=idx, image=sample.image, positive=positive,
            negatives=negatives))
    return probes


def _embed_texts(model: AlignmentModel, texts, vocab: Vocab) -> np.ndarray:
    out = []
    for text in texts:
        ids = np.asarray(tokenize(text, vocab))[None]
        y, _ = model.text.forward(ids)
        eot = model.text.eot_positions(ids)
        out.append(l2_normalize_rows(y[np.arange(1), eot])[0])
    return np.stack(out)


def sap_pooled_vector(model: AlignmentModel, image: np.ndarray,
                      query_embedding: np.ndarray):
    """Attention-pool calibrated patches by one text embedding.

    Returns (pooled unit vector, alpha over calibrated tokens, assignment
    matrix of the calibrator).
    """
    y_v, _ = model.vision.forward(image[None])
    v_loc = y_v[0, 1:, :]
    if model.normalize_local:
        v_loc = l2_normalize_rows(v_loc)
    assignment = model.cal_v.assignment(v_loc)
    vp, _ = model.cal_v.forward(v_loc)
    if model.normalize_local:
        vp = l2_normalize_rows(vp)
    d = vp.shape[-1]
    alpha = softmax_rows(query_embedding[None] @ vp.T / np.sqrt(d))[0]
    pooled = l2_normalize_rows((alpha @ vp)[None])[0]
    return pooled, alpha, assignment


def run_fg_probe(model: AlignmentModel, probes: ProbeSet, vocab: Vocab,
                 scoring: str = "sap") -> dict:
    """Accuracy per difficulty level; a level absent from every group is
    omitted. scoring="global" ranks against the image CLS instead of the
    pooled patch vector."""
    if scoring not in ("sap", "global"):
        raise ValueError("scoring must be 'sap' or 'global'")
    hits = {level: 0 for level in LEVELS}
    counts = {level: 0 for level in LEVELS}
    for group in probes.groups:
        pos_emb = _embed_texts(model, [group.positive], vocab)[0]
        if scoring == "sap":
            target, _, _ = sap_pooled_vector(model, group.image, pos_emb)
        else:
            y_v, _ = model.vision.forward(group.image[None])
            target = l2_normalize_rows(y_v[:, 0, :])[0]
        for level, negs in group.negatives.items():
            if not negs:
                continue
            cand = _embed_texts(model, [group.positive] + list(negs), vocab)
            sims = cand @ target
            # positive sits at index 0, so exact ties resolve in its favor
            hits[level] += bool(sims[0] >= sims[1:].max())
            counts[level] += 1
    report = {level: hits[level] / counts[level]
              for level in LEVELS if counts[level]}
    if report:
        report["avg"] = float(np.mean([report[k] for k in report]))
    return report


# ---------------------------------------------------------------------------
# attention-map export
# ---------------------------------------------------------------------------


def write_pgm(path, values01: np.ndarray) -> None:
    """Binary portable graymap (P5, maxval 255)."""
    img = np.clip(np.round(values01 * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def attention_grid(model: AlignmentModel, image: np.ndarray, text: str,
                   vocab: Vocab):
    """Patch-level attention of a caption over an image.

    The EOT embedding attends over calibrated patches; each calibrated
    token's weight is pushed back to original patches through the
    calibrator's row-stochastic assignment, so the grid sums to 1.
    """
    t_emb = _embed_texts(model, [text], vocab)[0]
    _, alpha, assignment = sap_pooled_vector(model, image, t_emb)
    patch_weights = alpha @ assignment
    grid = model.dims.grid
    return patch_weights.reshape(grid, grid)


def export_attention_map(model: AlignmentModel, sample, text: str,
                         vocab: Vocab, out_dir, stem: str = "attention"):
    """Write <stem>.pgm (upscaled to image resolution) and <stem>.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = attention_grid(model, sample.image, text, vocab)
    peak = grid.max()
    norm = grid / peak if peak > 0 else grid
    cell = sample.image.shape[0] // grid.shape[0]
    upscaled = np.kron(norm, np.ones((cell, cell)))
    pgm_path = out_dir / f"{stem}.pgm"
    txt_path = out_dir / f"{stem}.txt"
    write_pgm(pgm_path, upscaled)
    with open(txt_path, "w", encoding="utf-8") as f:
        for row in grid:
            f.write(" ".join(f"{v:.8f}" for v in row) + "\n")
    return grid, pgm_path, txt_path
