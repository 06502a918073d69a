import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mulalign.data import (
    SceneGraph,
    build_vocab,
    detokenize,
    generate_corpus,
    load_corpus,
    make_batches,
    make_hard_negatives,
    parse_object_sentence,
    render_scene,
    save_corpus,
    scene_capacity,
    sequence_budget,
    split_sentences,
    tokenize,
    tokenize_corpus,
)


class TestSplitSentences:
    def test_two_sentences(self):
        assert split_sentences("A red car. A tall tree.", 15) == \
            ["A red car.", "A tall tree."]

    def test_cap_truncates(self):
        assert split_sentences("A red car. A tall tree.", 1) == ["A red car."]

    def test_no_terminator_whole_text(self):
        assert split_sentences("No terminator here", 15) == \
            ["No terminator here"]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_sentences("   ", 15)

    def test_join_round_trip_on_generated_captions(self):
        for s in generate_corpus(20, grid=3, seed=5, max_objects=3):
            subs = split_sentences(s.long_caption, 15)
            assert " ".join(subs) == s.long_caption


class TestTokenizer:
    def test_empty_text_is_just_eot(self):
        v = build_vocab()
        assert tokenize("", v) == [v.eot_id]

    def test_distinct_words_distinct_ids(self):
        v = build_vocab()
        a = tokenize("red", v)[0]
        b = tokenize("blue", v)[0]
        assert a != b

    def test_oov_names_the_word(self):
        v = build_vocab()
        with pytest.raises(ValueError, match="zebra"):
            tokenize("A red zebra", v)

    def test_round_trip_over_corpus(self):
        v = build_vocab(grid=4, max_objects=4)
        for s in generate_corpus(30, seed=9):
            for text in [s.long_caption, s.short_caption] + s.subcaptions:
                assert detokenize(tokenize(text, v), v) == text


class TestSceneRendering:
    def test_distinct_positions_enforced(self):
        with pytest.raises(ValueError):
            SceneGraph(objects=((0, 0, 0, 1, 1), (1, 1, 1, 1, 1)), grid=4,
                       seed=0)

    def test_one_cell_per_object(self):
        scene = SceneGraph(objects=((0, 0, 2, 0, 0),), grid=2, seed=0)
        img = render_scene(scene, cell_px=4)
        assert img.shape == (8, 8, 3)
        assert img[:4, :4].sum() > 0          # big red square fills its cell
        assert img[:4, 4:].sum() == 0
        assert img[4:].sum() == 0

    def test_rendering_deterministic(self):
        scene = SceneGraph(objects=((1, 2, 1, 1, 0), (2, 3, 0, 0, 1)), grid=2,
                           seed=0)
        np.testing.assert_array_equal(render_scene(scene), render_scene(scene))

    def test_shapes_render_differently(self):
        imgs = [render_scene(SceneGraph(objects=((sh, 0, 2, 0, 0),), grid=1,
                                        seed=0), cell_px=8)
                for sh in range(3)]
        assert not np.array_equal(imgs[0], imgs[1])
        assert not np.array_equal(imgs[1], imgs[2])


class TestGenerateCorpus:
    def test_deterministic_under_seed(self):
        a = generate_corpus(16, seed=7)
        b = generate_corpus(16, seed=7)
        for x, y in zip(a, b):
            assert x.long_caption == y.long_caption
            np.testing.assert_array_equal(x.image, y.image)

    def test_single_object_two_sentences(self):
        sample = generate_corpus(1, grid=2, seed=3, max_objects=1)[0]
        assert len(split_sentences(sample.long_caption, 15)) == 2

    def test_all_captions_unique_at_512(self):
        corpus = generate_corpus(512, grid=4, seed=11)
        captions = [s.long_caption for s in corpus]
        assert len(set(captions)) == 512
        # image uniqueness follows from object-set uniqueness
        keys = {frozenset(s.scene.objects) for s in corpus}
        assert len(keys) == 512

    def test_capacity_guard(self):
        cap = scene_capacity(1, 1)
        assert cap == len("sct") * 6 * 3  # 3 shapes x 6 colors x 3 sizes
        with pytest.raises(ValueError):
            generate_corpus(cap + 1, grid=1, max_objects=1)

    def test_summary_is_first_sentence(self):
        for s in generate_corpus(8, seed=2):
            assert s.short_caption == s.subcaptions[0]
            assert s.short_caption.startswith("An image with")

    def test_round_trip_through_file(self, tmp_path):
        corpus = generate_corpus(12, seed=4)
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, corpus)
        again = load_corpus(path)
        assert len(again) == 12
        for a, b in zip(corpus, again):
            assert a.long_caption == b.long_caption
            assert a.scene == b.scene
            np.testing.assert_array_equal(a.image, b.image)

    def test_file_bytes_reproducible(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(p1, generate_corpus(10, seed=21))
        save_corpus(p2, generate_corpus(10, seed=21))
        assert p1.read_bytes() == p2.read_bytes()


class TestHardNegatives:
    def scene_and_sub(self, seed=0):
        scene = generate_corpus(1, seed=seed)[0].scene
        sub = None
        from mulalign.data import object_sentence
        sub = object_sentence(scene.objects[0])
        return scene, sub

    def test_hard_swaps_exactly_one_attribute(self):
        scene, sub = self.scene_and_sub()
        pos = parse_object_sentence(sub)
        for neg in make_hard_negatives(sub, scene, "hard", k=5, seed=1):
            cand = parse_object_sentence(neg)
            diffs = sum([cand[1] != pos[1], cand[2] != pos[2],
                         (cand[3], cand[4]) != (pos[3], pos[4])])
            assert cand[0] == pos[0] and diffs == 1

    def test_medium_swaps_two(self):
        scene, sub = self.scene_and_sub(3)
        pos = parse_object_sentence(sub)
        for neg in make_hard_negatives(sub, scene, "medium", k=5, seed=2):
            cand = parse_object_sentence(neg)
            diffs = sum([cand[1] != pos[1], cand[2] != pos[2],
                         (cand[3], cand[4]) != (pos[3], pos[4])])
            assert cand[0] == pos[0] and diffs == 2

    def test_easy_swaps_all_keeps_shape(self):
        scene, sub = self.scene_and_sub(4)
        pos = parse_object_sentence(sub)
        for neg in make_hard_negatives(sub, scene, "easy", k=5, seed=3):
            cand = parse_object_sentence(neg)
            assert cand[0] == pos[0]
            assert cand[1] != pos[1] and cand[2] != pos[2]
            assert (cand[3], cand[4]) != (pos[3], pos[4])

    def test_trivial_changes_shape_and_everything(self):
        scene, sub = self.scene_and_sub(5)
        pos = parse_object_sentence(sub)
        for neg in make_hard_negatives(sub, scene, "trivial", k=5, seed=4):
            cand = parse_object_sentence(neg)
            assert cand[0] != pos[0] and cand[1] != pos[1]
            assert cand[2] != pos[2]
            assert (cand[3], cand[4]) != (pos[3], pos[4])

    @given(st.sampled_from(["hard", "medium", "easy", "trivial"]),
           st.integers(1, 8), st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_distinct_and_absent_from_scene(self, level, k, seed):
        corpus = generate_corpus(4, seed=seed % 17)
        scene = corpus[seed % 4].scene
        from mulalign.data import object_sentence
        sub = object_sentence(scene.objects[0])
        negs = make_hard_negatives(sub, scene, level, k=k, seed=seed)
        assert len(set(negs)) == k
        assert sub not in negs
        present = set(scene.objects)
        for neg in negs:
            assert parse_object_sentence(neg) not in present

    def test_summary_sentence_rejected(self):
        scene, _ = self.scene_and_sub()
        with pytest.raises(ValueError):
            make_hard_negatives("An image with 2 objects.", scene, "hard", 1)

    def test_too_many_requested(self):
        scene, sub = self.scene_and_sub()
        with pytest.raises(ValueError):
            make_hard_negatives(sub, scene, "hard", k=1000, seed=0)


class TestBatching:
    def test_batch_count(self):
        corpus = generate_corpus(70, seed=1, grid=3, max_objects=2)
        batches = list(make_batches(corpus, 16, shuffle_seed=0))
        assert len(batches) == 4  # 70 // 16, short remainder dropped

    def test_same_seed_same_order(self):
        corpus = generate_corpus(48, seed=2, grid=3, max_objects=2)
        a = [b.indices for b in make_batches(corpus, 8, shuffle_seed=5)]
        b = [b.indices for b in make_batches(corpus, 8, shuffle_seed=5)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_batch_size_floor(self):
        corpus = generate_corpus(8, seed=3, grid=3, max_objects=2)
        with pytest.raises(ValueError):
            list(make_batches(corpus, 1, shuffle_seed=0))

    def test_masks_count_subcaptions(self):
        corpus = generate_corpus(32, seed=4)
        vocab = build_vocab(4, 4)
        budget = sequence_budget(corpus, vocab)
        for batch in make_batches(corpus, 8, shuffle_seed=1, vocab=vocab,
                                  budget=budget):
            want = sum(len(corpus[i].subcaptions) for i in batch.indices)
            assert batch.sub_mask.sum() == want

    def test_exactly_one_eot_everywhere(self):
        corpus = generate_corpus(16, seed=5)
        vocab = build_vocab(4, 4)
        budget = sequence_budget(corpus, vocab)
        arrays = tokenize_corpus(corpus, vocab, budget)
        assert ((arrays["long_tokens"] == vocab.eot_id).sum(axis=1) == 1).all()
        assert ((arrays["short_tokens"] == vocab.eot_id).sum(axis=1) == 1).all()
        subs = arrays["sub_tokens"][arrays["sub_mask"]]
        assert ((subs == vocab.eot_id).sum(axis=1) == 1).all()

    def test_loc_mask_counts_real_words(self):
        corpus = generate_corpus(6, seed=6)
        vocab = build_vocab(4, 4)
        budget = sequence_budget(corpus, vocab)
        arrays = tokenize_corpus(corpus, vocab, budget)
        for i, s in enumerate(corpus):
            n_words = len(tokenize(s.long_caption, vocab)) - 1
            assert arrays["long_loc_mask"][i].sum() == n_words
