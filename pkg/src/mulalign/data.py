"""Deterministic synthetic corpus with verifiable image-caption alignment.

Each sample is a grid scene of colored glyphs (square / circle / triangle
in one of several colors and sizes), rendered so that one scene cell is
exactly one vision patch. The long caption opens with a summary sentence
("An image with k objects.") followed by one sentence per object; the
summary doubles as the short caption and the sentence list as the
subcaptions. A closed-vocabulary word tokenizer keeps everything exactly
round-trippable, and attribute-swap negatives provide difficulty-graded
probes with ground truth.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from itertools import combinations
from math import comb
from pathlib import Path

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = (("red", (1.0, 0.0, 0.0)), ("green", (0.0, 1.0, 0.0)),
          ("blue", (0.0, 0.0, 1.0)), ("yellow", (1.0, 1.0, 0.0)),
          ("magenta", (1.0, 0.0, 1.0)), ("cyan", (0.0, 1.0, 1.0)))
SIZES = (("small", 0.5), ("medium", 0.75), ("big", 1.0))

COLOR_NAMES = tuple(name for name, _ in COLORS)
SIZE_NAMES = tuple(name for name, _ in SIZES)

PAD, EOT = "<pad>", "<eot>"
_TOKEN_RE = re.compile(r"[A-Za-z]+|\d+|[.!?]")
_PUNCT = {".", "!", "?"}


# ---------------------------------------------------------------------------
# scene graphs and rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneGraph:
    """Objects as (shape_id, color_id, size_id, row, col); rows/cols 0-based."""

    objects: tuple
    grid: int
    seed: int

    def __post_init__(self):
        positions = [(r, c) for _, _, _, r, c in self.objects]
        if len(set(positions)) != len(positions):
            raise ValueError("object positions must be distinct")
        if not 1 <= len(self.objects) <= self.grid * self.grid:
            raise ValueError("object count outside grid capacity")


@dataclass
class SyntheticSample:
    scene: SceneGraph
    image: np.ndarray          # (grid*cell_px, grid*cell_px, 3) in [0,1]
    long_caption: str
    short_caption: str
    subcaptions: list


def _glyph_mask(shape_id: int, cell_px: int, frac: float) -> np.ndarray:
    c = (cell_px - 1) / 2.0
    w = frac * cell_px / 2.0
    yy, xx = np.mgrid[0:cell_px, 0:cell_px]
    dy, dx = yy - c, xx - c
    shape = SHAPES[shape_id]
    if shape == "square":
        return (np.abs(dx) <= w) & (np.abs(dy) <= w)
    if shape == "circle":
        return dx * dx + dy * dy <= w * w
    # upward triangle: widens towards the bottom of the cell
    yb = dy + w
    return (yb >= 0) & (yb <= 2 * w) & (np.abs(dx) <= yb / 2.0 + 1e-9)


def render_scene(scene: SceneGraph, cell_px: int = 4) -> np.ndarray:
    side = scene.grid * cell_px
    img = np.zeros((side, side, 3), dtype=np.float32)
    for shape_id, color_id, size_id, r, c in scene.objects:
        mask = _glyph_mask(shape_id, cell_px, SIZES[size_id][1])
        cell = img[r * cell_px:(r + 1) * cell_px, c * cell_px:(c + 1) * cell_px]
        cell[mask] = COLORS[color_id][1]
    return img


def object_sentence(obj) -> str:
    shape_id, color_id, size_id, r, c = obj
    return (f"A {SIZE_NAMES[size_id]} {COLOR_NAMES[color_id]} "
            f"{SHAPES[shape_id]} at row {r + 1} column {c + 1}.")


def summary_sentence(n_objects: int) -> str:
    noun = "object" if n_objects == 1 else "objects"
    return f"An image with {n_objects} {noun}."


def captions_for(scene: SceneGraph):
    subs = [summary_sentence(len(scene.objects))]
    subs.extend(object_sentence(o) for o in scene.objects)
    return " ".join(subs), subs[0], subs


# ---------------------------------------------------------------------------
# sentence splitting and tokenization
# ---------------------------------------------------------------------------


def split_sentences(text: str, max_sentences: int = 15) -> list:
    """Split on '.', '!' or '?' followed by whitespace or end of text.

    Pieces are trimmed, empties dropped, and the list truncated. Text with
    no terminator at all comes back as a single element.
    """
    if not text or not text.strip():
        raise ValueError("empty text")
    parts = re.split(r"(?<=[.!?])(?:\s+|$)", text.strip())
    sentences = [p.strip() for p in parts if p.strip()]
    return sentences[:max_sentences]


@dataclass(frozen=True)
class Vocab:
    words: tuple

    @property
    def word2id(self):
        return {w: i for i, w in enumerate(self.words)}

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eot_id(self) -> int:
        return 1

    def __len__(self):
        return len(self.words)


def build_vocab(grid: int = 4, max_objects: int = 4) -> Vocab:
    """Closed word list covering every caption the generator can emit."""
    nums = sorted({str(i) for i in range(1, max(grid, max_objects) + 1)},
                  key=int)
    words = ([PAD, EOT, ".", "!", "?"]
             + ["A", "An", "at", "column", "image", "object", "objects",
                "row", "with"]
             + list(SIZE_NAMES) + list(COLOR_NAMES) + list(SHAPES) + nums)
    return Vocab(tuple(words))


def tokenize(text: str, vocab: Vocab) -> list:
    """Word/punctuation ids with EOT appended; unknown words are an error."""
    table = vocab.word2id
    ids = []
    for piece in _TOKEN_RE.findall(text):
        if piece not in table:
            raise ValueError(f"out-of-vocabulary word: {piece!r}")
        ids.append(table[piece])
    ids.append(vocab.eot_id)
    return ids


def detokenize(ids, vocab: Vocab) -> str:
    out = []
    for i in ids:
        w = vocab.words[int(i)]
        if w in (PAD, EOT):
            continue
        if w in _PUNCT and out:
            out[-1] += w
        else:
            out.append(w)
    return " ".join(out)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


def scene_capacity(grid: int, max_objects: int) -> int:
    """Distinct object-set scenes: positions are unordered, attributes free."""
    cells = grid * grid
    per_cell = len(SHAPES) * len(COLORS) * len(SIZES)
    return sum(comb(cells, k) * per_cell ** k
               for k in range(1, min(max_objects, cells) + 1))


def _sample_scene(grid: int, max_objects: int, seed: int) -> SceneGraph:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(grid * grid, size=k, replace=False)
    objs = []
    for cell in cells:
        objs.append((int(rng.integers(len(SHAPES))),
                     int(rng.integers(len(COLORS))),
                     int(rng.integers(len(SIZES))),
                     int(cell) // grid, int(cell) % grid))
    return SceneGraph(objects=tuple(objs), grid=grid, seed=seed)


def generate_corpus(n: int, grid: int = 4, seed: int = 0, max_objects: int = 4,
                    cell_px: int = 4) -> list:
    """n unique samples; byte-identical across calls with the same seed.

    Uniqueness is enforced on the unordered object set, which makes both
    captions and rendered images pairwise distinct.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    capacity = scene_capacity(grid, max_objects)
    if n > capacity:
        raise ValueError(f"requested {n} samples but only {capacity} "
                         f"distinct scenes exist")
    samples = []
    seen = set()
    attempt = 0
    max_attempts = 200 * n + 1000
    while len(samples) < n:
        if attempt >= max_attempts:
            raise RuntimeError("scene sampling stalled; corpus too dense")
        sub_seed = int(np.random.SeedSequence((seed, attempt)).generate_state(1)[0])
        attempt += 1
        scene = _sample_scene(grid, max_objects, sub_seed)
        key = frozenset(scene.objects)
        if key in seen:
            continue
        seen.add(key)
        long_caption, short_caption, subs = captions_for(scene)
        samples.append(SyntheticSample(
            scene=scene, image=render_scene(scene, cell_px),
            long_caption=long_caption, short_caption=short_caption,
            subcaptions=subs))
    return samples


def save_corpus(path, samples) -> None:
    """One JSON record per line; images are regenerable from the scene."""
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            rec = {
                "grid": s.scene.grid,
                "seed": s.scene.seed,
                "cell_px": s.image.shape[0] // s.scene.grid,
                "objects": [list(o) for o in s.scene.objects],
                "long_caption": s.long_caption,
                "short_caption": s.short_caption,
                "subcaptions": s.subcaptions,
            }
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            f.write("\n")


def load_corpus(path) -> list:
    samples = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        scene = SceneGraph(objects=tuple(tuple(o) for o in rec["objects"]),
                           grid=rec["grid"], seed=rec["seed"])
        subs = list(rec["subcaptions"])
        if subs != split_sentences(rec["long_caption"], len(subs)):
            raise ValueError(f"line {line_no}: subcaptions do not match caption")
        if rec["short_caption"] != subs[0]:
            raise ValueError(f"line {line_no}: short caption is not sentence 0")
        samples.append(SyntheticSample(
            scene=scene, image=render_scene(scene, rec["cell_px"]),
            long_caption=rec["long_caption"],
            short_caption=rec["short_caption"], subcaptions=subs))
    return samples


# ---------------------------------------------------------------------------
# attribute-swap negatives
# ---------------------------------------------------------------------------

LEVELS = ("hard", "medium", "easy", "trivial")

_SENTENCE_RE = re.compile(
    r"A (\w+) (\w+) (\w+) at row (\d+) column (\d+)\.")


def parse_object_sentence(sub: str):
    m = _SENTENCE_RE.fullmatch(sub.strip())
    if not m:
        raise ValueError(f"not a single-object sentence: {sub!r}")
    size, color, shape, row, col = m.groups()
    try:
        return (SHAPES.index(shape), COLOR_NAMES.index(color),
                SIZE_NAMES.index(size), int(row) - 1, int(col) - 1)
    except ValueError as exc:
        raise ValueError(f"unknown attribute in {sub!r}") from exc


def _swap_candidates(obj, grid: int, swap_color, swap_size, swap_pos):
    shape_id, color_id, size_id, r, c = obj
    colors = ([i for i in range(len(COLORS)) if i != color_id]
              if swap_color else [color_id])
    sizes = ([i for i in range(len(SIZES)) if i != size_id]
             if swap_size else [size_id])
    if swap_pos:
        positions = [(pr, pc) for pr in range(grid) for pc in range(grid)
                     if (pr, pc) != (r, c)]
    else:
        positions = [(r, c)]
    return [(shape_id, ci, si, pr, pc)
            for ci in colors for si in sizes for pr, pc in positions]


def make_hard_negatives(sub: str, scene: SceneGraph, level: str, k: int,
                        seed: int = 0) -> list:
    """k distinct perturbed captions at one difficulty level.

    hard swaps exactly one of color/size/position, medium exactly two,
    easy all three (shape kept), trivial describes an entirely different
    object (shape and every attribute changed). No negative may equal the
    positive or describe an object actually present in the scene.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    obj = parse_object_sentence(sub)
    grid = scene.grid
    candidates = []
    if level == "hard":
        for attr in range(3):
            candidates += _swap_candidates(obj, grid, attr == 0, attr == 1,
                                           attr == 2)
    elif level == "medium":
        for pair in combinations(range(3), 2):
            candidates += _swap_candidates(obj, grid, 0 in pair, 1 in pair,
                                           2 in pair)
    elif level == "easy":
        candidates = _swap_candidates(obj, grid, True, True, True)
    else:  # trivial: different shape and all attributes different
        shape_id, color_id, size_id, r, c = obj
        candidates = [
            (sh, ci, si, pr, pc)
            for sh in range(len(SHAPES)) if sh != shape_id
            for ci in range(len(COLORS)) if ci != color_id
            for si in range(len(SIZES)) if si != size_id
            for pr in range(grid) for pc in range(grid) if (pr, pc) != (r, c)]
    present = set(scene.objects)
    valid = [cand for cand in dict.fromkeys(candidates)
             if cand != obj and cand not in present]
    if len(valid) < k:
        raise ValueError(f"only {len(valid)} distinct {level} negatives "
                         f"available, need {k}")
    order = np.random.default_rng(seed).permutation(len(valid))
    return [object_sentence(valid[i]) for i in order[:k]]


# ---------------------------------------------------------------------------
# tokenized batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceBudget:
    long_len: int   # padded long-caption length incl. EOT
    sub_len: int    # padded subcaption/summary length incl. EOT
    m_max: int      # maximum subcaption count after the sentence cap


@dataclass
class TokenizedBatch:
    images: np.ndarray         # (B,H,W,C)
    long_tokens: np.ndarray    # (B, long_len)
    long_loc_mask: np.ndarray  # (B, long_len-1) true at real-word rows
    short_tokens: np.ndarray   # (B, sub_len)
    sub_tokens: np.ndarray     # (B, M, sub_len)
    sub_mask: np.ndarray       # (B, M)
    indices: np.ndarray        # (B,) corpus positions


def sequence_budget(samples, vocab: Vocab,
                    max_sentences: int = 15) -> SequenceBudget:
    long_len = sub_len = m_max = 0
    for s in samples:
        long_len = max(long_len, len(tokenize(s.long_caption, vocab)))
        subs = split_sentences(s.long_caption, max_sentences)
        m_max = max(m_max, len(subs))
        for sub in subs:
            sub_len = max(sub_len, len(tokenize(sub, vocab)))
    return SequenceBudget(long_len=long_len, sub_len=sub_len, m_max=m_max)


def _pad(ids, length, pad_id):
    if len(ids) > length:
        raise ValueError(f"sequence of {len(ids)} exceeds budget {length}")
    return ids + [pad_id] * (length - len(ids))


def tokenize_corpus(samples, vocab: Vocab, budget: SequenceBudget,
                    max_sentences: int = 15):
    """Pad and stack every sample once; batches then just slice."""
    n = len(samples)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    long_tokens = np.zeros((n, budget.long_len), dtype=np.int64)
    short_tokens = np.zeros((n, budget.sub_len), dtype=np.int64)
    sub_tokens = np.zeros((n, budget.m_max, budget.sub_len), dtype=np.int64)
    sub_mask = np.zeros((n, budget.m_max), dtype=bool)
    for i, s in enumerate(samples):
        long_tokens[i] = _pad(tokenize(s.long_caption, vocab),
                              budget.long_len, vocab.pad_id)
        short_tokens[i] = _pad(tokenize(s.short_caption, vocab),
                               budget.sub_len, vocab.pad_id)
        subs = split_sentences(s.long_caption, max_sentences)
        for j, sub in enumerate(subs):
            sub_tokens[i, j] = _pad(tokenize(sub, vocab), budget.sub_len,
                                    vocab.pad_id)
            sub_mask[i, j] = True
    eot_pos = (long_tokens == vocab.eot_id).argmax(axis=1)
    L = budget.long_len
    base = np.arange(L)[None, :].repeat(n, axis=0)
    keep = base != eot_pos[:, None]
    loc_positions = base[keep].reshape(n, L - 1)
    long_loc_mask = np.take_along_axis(long_tokens, loc_positions,
                                       axis=1) != vocab.pad_id
    return {"images": images, "long_tokens": long_tokens,
            "long_loc_mask": long_loc_mask, "short_tokens": short_tokens,
            "sub_tokens": sub_tokens, "sub_mask": sub_mask}


def batches_from_arrays(arrays, order, batch_size: int):
    if batch_size < 2:
        raise ValueError("batch-level contrast needs batch_size >= 2")
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield TokenizedBatch(
            images=arrays["images"][idx],
            long_tokens=arrays["long_tokens"][idx],
            long_loc_mask=arrays["long_loc_mask"][idx],
            short_tokens=arrays["short_tokens"][idx],
            sub_tokens=arrays["sub_tokens"][idx],
            sub_mask=arrays["sub_mask"][idx],
            indices=np.asarray(idx))


def make_batches(corpus, batch_size: int, shuffle_seed: int, *,
                 vocab: Vocab | None = None,
                 budget: SequenceBudget | None = None,
                 max_sentences: int = 15):
    """Shuffled, padded, masked batch stream; a final short batch is dropped."""
    if vocab is None:
        grid = corpus[0].scene.grid
        vocab = build_vocab(grid, max(len(s.scene.objects) for s in corpus))
    if budget is None:
        budget = sequence_budget(corpus, vocab, max_sentences)
    arrays = tokenize_corpus(corpus, vocab, budget, max_sentences)
    order = np.random.default_rng(shuffle_seed).permutation(len(corpus))
    yield from batches_from_arrays(arrays, order, batch_size)
