import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mulalign.config import RunConfig
from mulalign.data import build_vocab, generate_corpus, sequence_budget
from mulalign.evaluation import (
    ProbeSet,
    SimMatrix,
    attention_grid,
    build_probe_set,
    export_attention_map,
    recall_at_k,
    run_fg_probe,
    run_retrieval,
)
from mulalign.training import build_model


def sort_oracle(values, gt, k):
    """Full stable sort per row: ties broken by lower column index."""
    hits = 0
    for i, row in enumerate(values):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += order.index(gt[i]) < k
    return hits / len(values)


def eval_config(**kw):
    base = dict(grid=3, max_objects=2, d_model=16, d_out=8, n_layers=1,
                n_heads=2, base_max_len=40, extend_ratio=1, batch_size=4,
                epochs=0, seed=5, dtype="f64", probe_k=3, probe_groups=12)
    base.update(kw)
    return RunConfig(**base).validate()


def make_model_and_corpus(cfg, n=20):
    corpus = generate_corpus(n, grid=cfg.grid, seed=cfg.data_seed,
                             max_objects=cfg.max_objects,
                             cell_px=cfg.patch_size)
    vocab = build_vocab(cfg.grid, cfg.max_objects)
    model = build_model(cfg, vocab, sequence_budget(corpus, vocab))
    return model, corpus, vocab


class TestRecallAtK:
    def test_identity_matrix(self):
        s = SimMatrix(values=np.eye(4), ground_truth=np.arange(4))
        assert recall_at_k(s, 1) == 1.0

    def test_explicit_three_by_three(self):
        values = np.array([[0.9, 0.1, 0.0], [0.8, 0.2, 0.3], [0.1, 0.2, 0.7]])
        s = SimMatrix(values=values, ground_truth=np.arange(3))
        assert recall_at_k(s, 1) == pytest.approx(2 / 3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            SimMatrix(values=np.zeros((0, 3)), ground_truth=np.zeros(0))

    def test_k_bounds(self):
        s = SimMatrix(values=np.eye(3), ground_truth=np.arange(3))
        with pytest.raises(ValueError):
            recall_at_k(s, 0)
        with pytest.raises(ValueError):
            recall_at_k(s, 4)

    def test_tie_goes_to_lower_index(self):
        values = np.array([[0.5, 0.5]])
        assert recall_at_k(SimMatrix(values, np.array([0])), 1) == 1.0
        assert recall_at_k(SimMatrix(values, np.array([1])), 1) == 0.0

    def test_matches_full_sort_oracle_on_random(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            values = rng.standard_normal((50, 50))
            gt = rng.integers(0, 50, size=50)
            s = SimMatrix(values=values, ground_truth=gt)
            for k in (1, 5, 17):
                assert recall_at_k(s, k) == sort_oracle(values, gt, k)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 9))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_k(self, seed, q):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((q, 10))
        s = SimMatrix(values=values, ground_truth=rng.integers(0, 10, size=q))
        recalls = [recall_at_k(s, k) for k in range(1, 11)]
        assert all(a <= b for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((6, 8))
        gt = rng.integers(0, 8, size=6)
        a = SimMatrix(values=values, ground_truth=gt)
        b = SimMatrix(values=np.exp(3.0 * values) + 2.0, ground_truth=gt)
        for k in (1, 3, 8):
            assert recall_at_k(a, k) == recall_at_k(b, k)


class TestRunRetrieval:
    def test_corpus_of_one_is_perfect(self):
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=4)
        report = run_retrieval(model, corpus[:1], vocab, ks=(1,))
        assert report["t2i"]["r1"] == 1.0 and report["i2t"]["r1"] == 1.0

    def test_duplicate_captions_rejected(self):
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=4)
        with pytest.raises(ValueError):
            run_retrieval(model, corpus + corpus[:1], vocab)

    def test_untrained_model_is_at_chance(self):
        cfg = eval_config()
        recalls = []
        for seed in range(5):
            model, corpus, vocab = make_model_and_corpus(
                eval_config(seed=seed), n=64)
            report = run_retrieval(model, corpus, vocab, ks=(1,))
            recalls.append(report["t2i"]["r1"])
            recalls.append(report["i2t"]["r1"])
        assert np.mean(recalls) <= 3 / 64


class TestFgProbe:
    def test_reports_all_levels(self):
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=16)
        probes = build_probe_set(corpus, k=3, n_groups=10, seed=1)
        report = run_fg_probe(model, probes, vocab)
        for level in ("hard", "medium", "easy", "trivial", "avg"):
            assert level in report
            assert 0.0 <= report[level] <= 1.0

    def test_identical_negatives_tie_to_positive(self):
        # degenerate: negatives equal to the positive text score the same;
        # index-0 tie-breaking marks the group correct
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=4)
        from mulalign.data import object_sentence
        sample = corpus[0]
        positive = object_sentence(sample.scene.objects[0])
        probes = ProbeSet(k=1)
        from mulalign.evaluation import ProbeGroup
        probes.groups.append(ProbeGroup(
            sample_index=0, image=sample.image, positive=positive,
            negatives={"hard": [positive]}))
        report = run_fg_probe(model, probes, vocab)
        assert report["hard"] == 1.0

    def test_random_model_near_chance(self):
        accs = []
        for seed in range(3):
            cfg = eval_config(seed=100 + seed)
            model, corpus, vocab = make_model_and_corpus(cfg, n=32)
            probes = build_probe_set(corpus, k=5, n_groups=40, seed=seed)
            report = run_fg_probe(model, probes, vocab)
            accs.extend(report[lv] for lv in ("hard", "medium", "easy",
                                              "trivial"))
        # chance is 1/6 per level; allow generous binomial slack
        assert abs(np.mean(accs) - 1 / 6) < 0.12

    def test_global_scoring_flag(self):
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=8)
        probes = build_probe_set(corpus, k=2, n_groups=6, seed=2)
        report = run_fg_probe(model, probes, vocab, scoring="global")
        assert "hard" in report
        with pytest.raises(ValueError):
            run_fg_probe(model, probes, vocab, scoring="banana")


class TestAttentionExport:
    def test_grid_sums_to_one(self):
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=4)
        grid = attention_grid(model, corpus[0].image,
                              corpus[0].subcaptions[0], vocab)
        assert grid.shape == (cfg.grid, cfg.grid)
        assert abs(grid.sum() - 1.0) < 1e-6
        assert np.all(grid >= 0)

    def test_export_files(self, tmp_path):
        cfg = eval_config()
        model, corpus, vocab = make_model_and_corpus(cfg, n=4)
        sample = corpus[0]
        grid, pgm, txt = export_attention_map(model, sample,
                                              sample.short_caption, vocab,
                                              tmp_path, stem="m")
        data = pgm.read_bytes()
        assert data.startswith(b"P5\n")
        side = sample.image.shape[0]
        header_end = data.index(b"255\n") + 4
        assert len(data) - header_end == side * side
        parsed = np.array([[float(v) for v in line.split()]
                           for line in txt.read_text().splitlines()])
        np.testing.assert_allclose(parsed, grid, atol=1e-7)
        # normalized to [0,1]: the peak cell maps to 255
        assert max(data[-side * side:]) == 255
