import math

import numpy as np
import pytest

from mulalign.calibration import Calibrator
from mulalign.numerics import check_gradients, l2_normalize_rows
from mulalign.objectives import (
    VARIANTS,
    DualOutputs,
    SigmoidLossParams,
    VariantSpec,
    _sap_bwd,
    _sap_fwd,
    _sigmoid_contrastive_bwd,
    _sigmoid_contrastive_fwd,
    _wpr_sample_bwd,
    _wpr_sample_fwd,
    global_loss,
    sap_loss,
    sigmoid_contrastive,
    total_loss,
    wpr_loss,
)


def unit_rows(seed, *shape):
    x = np.random.default_rng(seed).standard_normal(shape)
    return l2_normalize_rows(x)


def neutral_params():
    return SigmoidLossParams(t_logit=0.0, bias=0.0, dtype=np.float64)


def sigmoid_loop_oracle(u, w, t, b):
    """Naive double loop over all pairs, stdlib math only."""
    B = len(u)
    total = 0.0
    for i in range(B):
        for j in range(B):
            a = t * float(np.dot(u[i], w[j])) + b
            z = 1.0 if i == j else -1.0
            total += -math.log(1.0 / (1.0 + math.exp(-z * a)))
    return total / B


class TestSigmoidContrastive:
    def test_single_orthogonal_pair(self):
        u = np.array([[1.0, 0.0]])
        w = np.array([[0.0, 1.0]])
        loss = sigmoid_contrastive(u, w, neutral_params())
        assert abs(loss - math.log(2.0)) < 1e-12

    def test_two_pairs_all_zero_sims(self):
        u = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
        w = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        loss = sigmoid_contrastive(u, w, neutral_params())
        assert abs(loss - 2.0 * math.log(2.0)) < 1e-12

    def test_matches_loop_oracle(self):
        p = SigmoidLossParams(t_logit=math.log(7.0), bias=-3.0,
                              dtype=np.float64)
        for seed in range(20):
            u = unit_rows(seed, 3, 5)
            w = unit_rows(seed + 100, 3, 5)
            expected = sigmoid_loop_oracle(u, w, 7.0, -3.0)
            assert abs(sigmoid_contrastive(u, w, p) - expected) < 1e-6

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            sigmoid_contrastive(np.zeros((0, 3)), np.zeros((0, 3)),
                                neutral_params())

    def test_nonfinite_rejected(self):
        u = np.array([[np.nan, 0.0]])
        with pytest.raises(ValueError):
            sigmoid_contrastive(u, u, neutral_params())

    def test_decreases_as_positive_sim_grows(self):
        p = SigmoidLossParams(t_logit=math.log(10.0), bias=-10.0,
                              dtype=np.float64)
        losses = []
        for s in (0.2, 0.5, 0.8):
            u = np.array([[1.0, 0.0], [0.0, 1.0]])
            w = np.array([[s, math.sqrt(1 - s * s)], [0.0, 1.0]])
            losses.append(sigmoid_contrastive(u, w, p))
        assert losses[0] > losses[1] > losses[2]

    def test_gradients(self):
        p = neutral_params()
        u = unit_rows(1, 3, 4)
        w = unit_rows(2, 3, 4)

        def fwd():
            return sigmoid_contrastive(u, w, p)

        for q in p.params():
            q.zero_grad()
        _, cache = _sigmoid_contrastive_fwd(u, w, p)
        du, dw = _sigmoid_contrastive_bwd(cache, p, 1.0)
        tensors = {"u": u, "w": w, "t_logit": p.t_logit.value,
                   "bias": p.bias.value}
        analytic = {"u": du, "w": dw, "t_logit": p.t_logit.grad.copy(),
                    "bias": p.bias.grad.copy()}
        report = check_gradients(fwd, tensors, analytic, eps=1e-5, tol=1e-4)
        assert report.passed, report.summary()


class TestGlobalLoss:
    def test_equal_texts_give_one_and_a_half(self):
        p = neutral_params()
        v = unit_rows(3, 4, 6)
        t = unit_rows(4, 4, 6)
        np.testing.assert_allclose(global_loss(v, t, t, p),
                                   1.5 * sigmoid_contrastive(v, t, p),
                                   atol=1e-12)

    def test_joint_permutation_invariance(self):
        p = neutral_params()
        v, tl, ts = unit_rows(5, 4, 6), unit_rows(6, 4, 6), unit_rows(7, 4, 6)
        perm = np.array([2, 0, 3, 1])
        base = global_loss(v, tl, ts, p)
        assert abs(base - global_loss(v[perm], tl[perm], ts[perm], p)) < 1e-6

    def test_composes_two_calls(self):
        p = SigmoidLossParams(t_logit=0.3, bias=-1.0, dtype=np.float64)
        v, tl, ts = unit_rows(8, 2, 5), unit_rows(9, 2, 5), unit_rows(10, 2, 5)
        expected = (sigmoid_contrastive(v, tl, p)
                    + 0.5 * sigmoid_contrastive(v, ts, p))
        assert abs(global_loss(v, tl, ts, p) - expected) < 1e-9

    def test_batch_mismatch_rejected(self):
        p = neutral_params()
        with pytest.raises(ValueError):
            global_loss(unit_rows(0, 3, 4), unit_rows(1, 2, 4),
                        unit_rows(2, 3, 4), p)


def wpr_loop_oracle(vp, tp, tau, mode="bidirectional"):
    """Straight-loop recomputation: attention, reconstruction, symmetric
    within-sample InfoNCE with normalized reconstructions."""
    rP, d = vp.shape
    rK = tp.shape[0]
    scale = math.sqrt(d)

    def softmax(xs):
        m = max(xs)
        es = [math.exp(x - m) for x in xs]
        s = sum(es)
        return [e / s for e in es]

    def ce(logits, idx):
        m = max(logits)
        return m + math.log(sum(math.exp(v - m) for v in logits)) - logits[idx]

    def side(queries, keys):
        n = len(queries)
        recon = []
        for i in range(n):
            a = softmax([float(queries[i] @ keys[j]) / scale
                         for j in range(len(keys))])
            r = sum(a[j] * keys[j] for j in range(len(keys)))
            recon.append(r / np.linalg.norm(r))
        loss = 0.0
        for i in range(n):
            fwd = [float(queries[i] @ recon[j]) / tau for j in range(n)]
            rev = [float(recon[i] @ queries[j]) / tau for j in range(n)]
            loss += 0.5 * (ce(fwd, i) + ce(rev, i))
        return loss / n

    l_img = side(list(vp), list(tp))
    l_txt = side(list(tp), list(vp))
    if mode == "image_only":
        return l_img
    if mode == "text_only":
        return l_txt
    return l_img + l_txt


class TestWprLoss:
    def test_single_token_pair_is_zero(self):
        vp = unit_rows(11, 1, 4)
        tp = unit_rows(12, 1, 4)
        assert abs(wpr_loss(vp, tp)) < 1e-12

    def test_one_sided_modes_sum_to_bidirectional(self):
        vp = unit_rows(13, 4, 6)
        tp = unit_rows(14, 3, 6)
        both = wpr_loss(vp, tp, "bidirectional")
        t_only = wpr_loss(vp, tp, "text_only")
        i_only = wpr_loss(vp, tp, "image_only")
        assert abs(both - (t_only + i_only)) < 1e-6

    def test_matches_loop_oracle(self):
        for seed in range(20):
            vp = unit_rows(seed, 3, 5)
            tp = unit_rows(seed + 50, 2, 5)
            for mode in ("bidirectional", "text_only", "image_only"):
                got = wpr_loss(vp, tp, mode, tau_tok=0.07)
                want = wpr_loop_oracle(vp, tp, 0.07, mode)
                assert abs(got - want) < 1e-6, (seed, mode)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            wpr_loss(np.zeros((0, 4)), unit_rows(1, 2, 4))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            wpr_loss(unit_rows(1, 2, 4), unit_rows(2, 2, 4), "sideways")

    @pytest.mark.parametrize("mode", ["bidirectional", "text_only",
                                      "image_only"])
    def test_gradients(self, mode):
        vp = unit_rows(15, 3, 5)
        tp = unit_rows(16, 2, 5)

        def fwd():
            return wpr_loss(vp, tp, mode)

        _, cache = _wpr_sample_fwd(vp, tp, mode, 0.07)
        dvp, dtp = _wpr_sample_bwd(cache, 1.0)
        report = check_gradients(fwd, {"vp": vp, "tp": tp},
                                 {"vp": dvp, "tp": dtp}, eps=1e-5, tol=1e-4)
        assert report.passed, report.summary()

    def test_sigmoid_sample_form_available(self):
        vp = unit_rows(17, 3, 5)
        tp = unit_rows(18, 2, 5)
        a = wpr_loss(vp, tp, sample_form="infonce")
        b = wpr_loss(vp, tp, sample_form="sigmoid")
        assert np.isfinite(a) and np.isfinite(b) and a != b


def sap_loop_oracle(v_list, t_sub, sub_mask, t, b):
    """Mask-aware loop: per (sample, subcaption) attention pooling, then a
    per-index batch sigmoid contrast, averaged over populated indices."""
    B, M, d = t_sub.shape
    scale = math.sqrt(d)
    vbars = {}
    for bi in range(B):
        for i in range(M):
            if not sub_mask[bi, i]:
                continue
            logits = [float(t_sub[bi, i] @ row) / scale for row in v_list[bi]]
            m = max(logits)
            es = [math.exp(x - m) for x in logits]
            s = sum(es)
            a = [e / s for e in es]
            raw = sum(a[j] * v_list[bi][j] for j in range(len(a)))
            vbars[(bi, i)] = raw / np.linalg.norm(raw)
    losses = []
    for i in range(M):
        rows = [bi for bi in range(B) if sub_mask[bi, i]]
        if not rows:
            continue
        u = [vbars[(bi, i)] for bi in rows]
        w = [t_sub[bi, i] for bi in rows]
        losses.append(sigmoid_loop_oracle(u, w, t, b))
    return sum(losses) / len(losses)


class TestSapLoss:
    def test_single_patch_row_is_the_pool(self):
        p = neutral_params()
        v = unit_rows(19, 1, 4)
        t_sub = unit_rows(20, 1, 4)[None]          # (1,1,4)
        mask = np.array([[True]])
        got = sap_loss([v], t_sub, mask, p)
        want = sigmoid_contrastive(v, t_sub[0], p)
        assert abs(got - want) < 1e-12

    def test_one_sample_one_sub_reduces_to_pair(self):
        p = neutral_params()
        v = unit_rows(21, 3, 4)
        t_sub = unit_rows(22, 1, 4)[None]
        mask = np.array([[True]])
        _, cache = _sap_fwd([v], t_sub, mask, p)
        vbar = list(cache[4].values())[0]
        vbar = vbar / np.linalg.norm(vbar)
        want = sigmoid_contrastive(vbar[None], t_sub[0], p)
        assert abs(sap_loss([v], t_sub, mask, p) - want) < 1e-12

    def test_matches_mask_aware_loop_oracle(self):
        t, b = 4.0, -2.0
        p = SigmoidLossParams(t_logit=math.log(t), bias=b, dtype=np.float64)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            v_list = [unit_rows(seed + 1, 3, 5), unit_rows(seed + 2, 3, 5)]
            t_sub = l2_normalize_rows(
                rng.standard_normal((2, 2, 5)).reshape(-1, 5)).reshape(2, 2, 5)
            mask = np.array([[True, True], [True, False]])
            got = sap_loss(v_list, t_sub, mask, p)
            want = sap_loop_oracle(v_list, t_sub, mask, t, b)
            assert abs(got - want) < 1e-6, seed

    def test_all_masked_rejected(self):
        p = neutral_params()
        with pytest.raises(ValueError):
            sap_loss([unit_rows(0, 2, 4)], unit_rows(1, 1, 4)[None],
                     np.array([[False]]), p)

    def test_gradients(self):
        p = neutral_params()
        v0, v1 = unit_rows(23, 3, 4), unit_rows(24, 3, 4)
        t_sub = l2_normalize_rows(
            np.random.default_rng(25).standard_normal((4, 4))).reshape(2, 2, 4)
        mask = np.array([[True, True], [True, False]])

        def fwd():
            return sap_loss([v0, v1], t_sub, mask, p)

        for q in p.params():
            q.zero_grad()
        _, cache = _sap_fwd([v0, v1], t_sub, mask, p)
        dvs, dt = _sap_bwd(cache, p, 1.0)
        tensors = {"v0": v0, "v1": v1, "t_sub": t_sub,
                   "t_logit": p.t_logit.value, "bias": p.bias.value}
        analytic = {"v0": dvs[0], "v1": dvs[1], "t_sub": dt,
                    "t_logit": p.t_logit.grad.copy(),
                    "bias": p.bias.grad.copy()}
        report = check_gradients(fwd, tensors, analytic, eps=1e-5, tol=1e-4)
        assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# total objective over synthetic outputs
# ---------------------------------------------------------------------------

B, P, K, M, D = 3, 4, 5, 3, 6


def fake_outputs(seed=0):
    rng = np.random.default_rng(seed)

    def rows(*shape):
        flat = l2_normalize_rows(rng.standard_normal(shape).reshape(-1, shape[-1]))
        return flat.reshape(shape)

    mask = np.array([[True] * 5, [True, True, True, False, False],
                     [True, True, False, False, False]])
    sub_mask = np.array([[True, True, True], [True, True, False],
                         [True, False, False]])
    return DualOutputs(
        v_cls=rows(B, D), v_loc=rows(B, P, D), t_long_eot=rows(B, D),
        t_long_loc=rows(B, K, D), t_long_mask=mask, t_short_eot=rows(B, D),
        t_sub=rows(B, M, D), sub_mask=sub_mask)


def fake_calibrators(seed=1):
    cv = Calibrator(d=D, n_in=P, seed=seed, prefix="cal_v", dtype=np.float64)
    ct = Calibrator(d=D, n_in=K, seed=seed + 1, prefix="cal_t",
                    dtype=np.float64)
    return cv, ct


def run_variant(name, lam_w=1.0, lam_s=1.0, seed=0):
    outputs = fake_outputs(seed)
    cv, ct = fake_calibrators()
    sig = neutral_params()
    for p in cv.params() + ct.params() + sig.params():
        p.zero_grad()
    return total_loss(outputs, cv, ct, sig, VARIANTS[name], lam_w, lam_s)


class TestTotalLoss:
    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_decomposition_identity(self, name):
        v = VARIANTS[name]
        bundle = run_variant(name, lam_w=0.7, lam_s=0.3)
        expect = ((bundle.l_global if v.use_global else 0.0)
                  + (0.7 * bundle.l_word if v.use_wpr else 0.0)
                  + (0.3 * bundle.l_sub if v.use_sap else 0.0))
        assert abs(bundle.l_total - expect) < 1e-6

    def test_global_only_reports_zero_locals(self):
        bundle = run_variant("global_only")
        assert bundle.l_word == 0.0 and bundle.l_sub == 0.0
        assert bundle.l_total == bundle.l_global

    def test_zero_lambdas_degenerate_to_global(self):
        bundle = run_variant("full", lam_w=0.0, lam_s=0.0)
        assert bundle.l_total == bundle.l_global

    def test_no_global_is_word_plus_sub(self):
        bundle = run_variant("no_global")
        assert bundle.l_global == 0.0
        assert abs(bundle.l_total - (bundle.l_word + bundle.l_sub)) < 1e-12

    def test_one_sided_recon_sums_to_full(self):
        t_only = run_variant("text_recon")
        i_only = run_variant("image_recon")
        both = run_variant("full")
        assert abs(both.l_word - (t_only.l_word + i_only.l_word)) < 1e-6

    def test_lambda_sweep_is_linear_and_distinct(self):
        values = []
        for lam in (0.2, 0.6, 0.8, 1.0):
            b = run_variant("full", lam_w=lam, lam_s=lam)
            values.append((lam, b.l_global, b.l_word, b.l_sub, b.l_total))
        totals = [v[4] for v in values]
        assert len(set(totals)) == 4
        for lam, lg, lw, lsub, lt in values:
            assert abs(lt - (lg + lam * (lw + lsub))) < 1e-9
        # l_word/l_sub themselves do not depend on the weights
        assert len({round(v[2], 12) for v in values}) == 1
        assert len({round(v[3], 12) for v in values}) == 1

    def test_sap_without_lc_rejected(self):
        with pytest.raises(ValueError):
            VariantSpec(True, False, False, True).validate()

    def test_batch_permutation_invariance(self):
        outputs = fake_outputs(3)
        cv, ct = fake_calibrators()
        sig = neutral_params()
        base = total_loss(outputs, cv, ct, sig, VARIANTS["full"])
        perm = np.array([2, 0, 1])
        permuted = DualOutputs(
            v_cls=outputs.v_cls[perm], v_loc=outputs.v_loc[perm],
            t_long_eot=outputs.t_long_eot[perm],
            t_long_loc=outputs.t_long_loc[perm],
            t_long_mask=outputs.t_long_mask[perm],
            t_short_eot=outputs.t_short_eot[perm],
            t_sub=outputs.t_sub[perm], sub_mask=outputs.sub_mask[perm])
        other = total_loss(permuted, cv, ct, sig, VARIANTS["full"])
        assert abs(base.l_total - other.l_total) < 1e-6

    def test_wpr_within_sample_isolation(self):
        # per-sample terms: changing sample 2's tokens moves only its term
        vps = [unit_rows(s, 4, D) for s in range(3)]
        tps = [unit_rows(s + 10, 3, D) for s in range(3)]
        before = [wpr_loss(v, t) for v, t in zip(vps, tps)]
        tps[2] = unit_rows(99, 3, D)
        after = [wpr_loss(v, t) for v, t in zip(vps, tps)]
        assert before[0] == after[0] and before[1] == after[1]
        assert before[2] != after[2]

    def test_intermediates_exposed(self):
        bundle = run_variant("full")
        assert len(bundle.attn_v2t) == B and len(bundle.attn_t2v) == B
        assert len(bundle.sap_alphas) == B
        for a in bundle.attn_v2t:
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_gradients_through_calibrators(self):
        outputs = fake_outputs(7)
        cv, ct = fake_calibrators(5)
        sig = neutral_params()
        params = cv.params() + ct.params() + sig.params()

        def fwd():
            return total_loss(outputs, cv, ct, sig, VARIANTS["full"]).l_total

        for p in params:
            p.zero_grad()
        grads = {}
        captured = {}

        def pullback(d):
            captured["v_loc"] = d.v_loc
            captured["t_sub"] = d.t_sub

        total_loss(outputs, cv, ct, sig, VARIANTS["full"], pullback=pullback)
        for p in params:
            grads[p.name] = p.grad.copy()
        tensors = {p.name: p.value for p in params}
        tensors["v_loc"] = outputs.v_loc
        tensors["t_sub"] = outputs.t_sub
        grads["v_loc"] = captured["v_loc"]
        grads["t_sub"] = captured["t_sub"]

        def fwd2():
            for p in params:
                p.zero_grad()
            return fwd()

        report = check_gradients(fwd2, tensors, grads, eps=1e-5, tol=1e-4)
        assert report.passed, report.summary()
