from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_ubm
from discivec.disc import (Classifier, EpochRecord, LabeledIvectorSet, TrainConfig, accuracy, cross_entropy,
                           filter_speakers, grad_classifier, grad_tmatrix, read_loss_log, softmax_posteriors,
                           stage1_train, stage2_train, write_loss_log)
from discivec.gradcheck import check_classifier, check_tmatrix, random_instance, reference_loss
from discivec.ivector import em_train_t, extract_batch, normalize_t, random_tmatrix


@dataclass
class Utt:
    speaker: str
    source: str | None = None


def ce_oracle(W, X, y):
    """Per-sample scalar re-evaluation with plain Python loops."""
    total = 0.0
    for x, label in zip(X, y):
        logits = [float(np.dot(x, W[:, k])) for k in range(W.shape[1])]
        m = max(logits)
        total += m + np.log(sum(np.exp(v - m) for v in logits)) - logits[label]
    return total


def toy_problem(seed=0, speakers=12, utts=8, C=4, F=3, D=4, frames=60):
    r = np.random.default_rng(seed)
    ubm = random_ubm(r, C, F)
    t_true = r.standard_normal((C, F, D))
    spk_phi = r.standard_normal((speakers, D))
    sd = np.sqrt(ubm.variances)
    tbar = t_true / sd[:, :, None]
    n = r.multinomial(frames, ubm.weights, speakers * utts).astype(float)
    labels = np.repeat(np.arange(speakers), utts)
    phi = spk_phi[labels] + 0.7 * r.standard_normal((speakers * utts, D))
    fbar = n[:, :, None] * np.einsum("cfd,nd->ncf", tbar, phi) + np.sqrt(n)[:, :, None] * r.standard_normal(
        (speakers * utts, C, F))
    return ubm, n, fbar, labels, speakers


class TestFilterSpeakers:
    def test_definition(self):
        utts = [Utt("A")] * 5 + [Utt("B")] * 4 + [Utt("C")] * 7
        kept = filter_speakers(utts, 5)
        assert {u.speaker for u in kept} == {"A", "C"}

    def test_counts_only_originals_but_keeps_copies(self):
        utts = [Utt("A")] * 4 + [Utt("A", "x")] * 3 + [Utt("B")] * 5 + [Utt("B", "y")] * 2
        kept = filter_speakers(utts, 5)
        assert len(kept) == 7 and {u.speaker for u in kept} == {"B"}

    def test_threshold_one_is_identity(self):
        utts = [Utt("A"), Utt("B"), Utt("B", "z")]
        assert filter_speakers(utts, 1) == utts

    def test_empty_result(self):
        with pytest.raises(ValueError, match="no speakers survive filter"):
            filter_speakers([Utt("A")], 2)


class TestSoftmax:
    def test_zero_weights_uniform(self):
        p = softmax_posteriors(Classifier.zeros(3, 5), np.ones(3))
        np.testing.assert_allclose(p, 0.2, atol=1e-15)

    def test_two_class_closed_form(self):
        clf = Classifier(np.array([[1.0, 0.0]]))
        assert softmax_posteriors(clf, np.array([1.0]))[0] == pytest.approx(1 / (1 + np.exp(-1)), rel=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_shift_invariance_and_normalization(self, seed):
        r = np.random.default_rng(seed)
        W = r.standard_normal((4, 6)) * 3
        phi = r.standard_normal((7, 4))
        c = r.standard_normal(4)
        p = softmax_posteriors(Classifier(W), phi)
        q = softmax_posteriors(Classifier(W + c[:, None]), phi)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(p, q, atol=1e-12)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            Classifier(np.zeros((3, 1)))


class TestCrossEntropy:
    def test_perfect_predictions_zero(self):
        X = np.eye(3) * 1000
        data = LabeledIvectorSet(X, np.arange(3), 3)
        assert cross_entropy(Classifier(np.eye(3)), data) == pytest.approx(0.0, abs=1e-300)

    def test_zero_weights_log_k(self, rng):
        data = LabeledIvectorSet(rng.standard_normal((9, 4)), rng.integers(0, 5, 9) % 5, 5)
        assert cross_entropy(Classifier.zeros(4, 5), data, "mean") == pytest.approx(np.log(5), rel=1e-14)
        assert cross_entropy(Classifier.zeros(4, 5), data) == pytest.approx(9 * np.log(5), rel=1e-14)

    def test_scalar_oracle(self, rng):
        W = rng.standard_normal((5, 6))
        X, y = rng.standard_normal((8, 5)), rng.integers(0, 6, 8)
        data = LabeledIvectorSet(X, y, 6)
        assert cross_entropy(Classifier(W), data) == pytest.approx(ce_oracle(W, X, y), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        data = LabeledIvectorSet(r.standard_normal((6, 3)) * 10, r.integers(0, 4, 6), 4)
        assert cross_entropy(Classifier(r.standard_normal((3, 4)) * 10), data) >= 0

    def test_bias_column(self, rng):
        clf = Classifier(rng.standard_normal((4, 3)), use_bias=True)
        X = rng.standard_normal((5, 3))
        np.testing.assert_allclose(clf.logits(X), X @ clf.W[:3] + clf.W[3], rtol=1e-14)


class TestGradClassifier:
    def test_zero_at_perfect_fit(self):
        data = LabeledIvectorSet(np.eye(3) * 1000, np.arange(3), 3)
        np.testing.assert_allclose(grad_classifier(Classifier(np.eye(3)), data), 0.0, atol=1e-300)

    def test_uniform_pattern(self, rng):
        phi = rng.standard_normal(4)
        data = LabeledIvectorSet(phi[None], np.array([2]), 5)
        g = grad_classifier(Classifier.zeros(4, 5), data)
        s = np.eye(5)[2]
        np.testing.assert_allclose(g, np.outer(phi, 0.2 - s), rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        err, _, _ = check_classifier(random_instance(seed), h=1e-5, num_samples=8, seed=seed)
        assert err < 1e-6


class TestGradTmatrix:
    def test_zero_classifier_gives_zero(self):
        inst = random_instance(0)
        g = grad_tmatrix(inst.T, inst.ubm, Classifier.zeros(5, 6), inst.n, inst.fbar, inst.labels)
        np.testing.assert_array_equal(g, 0.0)

    def test_zero_stats_matches_finite_differences(self):
        inst = random_instance(1)
        from dataclasses import replace
        inst = replace(inst, fbar=np.zeros_like(inst.fbar))
        err, analytic, numeric = check_tmatrix(inst)
        np.testing.assert_allclose(analytic, 0.0, atol=1e-12)
        np.testing.assert_allclose(numeric, 0.0, atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        err, _, _ = check_tmatrix(random_instance(seed), h=1e-4)
        assert err < 1e-4

    def test_finite_differences_with_l2(self):
        err, _, _ = check_tmatrix(random_instance(7), h=1e-4, l2=0.3)
        assert err < 1e-4

    def test_reference_loss_agrees_with_extraction(self):
        inst = random_instance(3)
        T = normalize_t(inst.T, inst.ubm)
        phis = extract_batch(inst.n, inst.fbar, T)
        data = LabeledIvectorSet(phis, inst.labels, 6)
        ref = reference_loss(inst.T.blocks, inst.ubm, inst.clf.W, inst.n, inst.fbar, inst.labels)
        assert cross_entropy(inst.clf, data) == pytest.approx(ref, rel=1e-12)

    def test_dim_mismatch(self):
        inst = random_instance(0)
        with pytest.raises(ValueError):
            grad_tmatrix(inst.T, inst.ubm, Classifier.zeros(4, 6), inst.n, inst.fbar, inst.labels)


class TestStage1:
    def test_separable_two_class(self, rng):
        X = np.vstack([rng.normal(3, 0.5, (20, 2)), rng.normal(-3, 0.5, (20, 2))])
        data = LabeledIvectorSet(X, np.repeat([0, 1], 20), 2)
        clf = stage1_train(Classifier.zeros(2, 2), data, TrainConfig(batch_size=8))
        assert accuracy(clf, data) == 1.0

    def test_zero_epochs_unchanged(self, rng):
        clf = Classifier(rng.standard_normal((3, 4)))
        data = LabeledIvectorSet(rng.standard_normal((8, 3)), np.arange(8) % 4, 4)
        out = stage1_train(clf, data, TrainConfig(stage1_epochs=0))
        np.testing.assert_array_equal(out.W, clf.W)

    def test_deterministic_and_decreasing(self):
        ubm, n, fbar, labels, K = toy_problem(1)
        T = normalize_t(random_tmatrix(4, 3, 4, seed=0), ubm)
        data = LabeledIvectorSet(extract_batch(n, fbar, T), labels, K)
        cfg = TrainConfig(batch_size=8, seed=3)
        a = stage1_train(Classifier.zeros(4, K), data, cfg)
        b = stage1_train(Classifier.zeros(4, K), data, cfg)
        np.testing.assert_array_equal(a.W, b.W)
        assert cross_entropy(a, data) < cross_entropy(Classifier.zeros(4, K), data)

    def test_divergence_aborts(self, rng):
        X = rng.standard_normal((16, 3)) * 100
        data = LabeledIvectorSet(X, np.arange(16) % 4, 4)
        with pytest.raises(FloatingPointError):
            stage1_train(Classifier(rng.standard_normal((3, 4))), data, TrainConfig(lr_stage1=50.0, batch_size=4))


@pytest.fixture(scope="module")
def refined_setup():
    ubm, n, fbar, labels, K = toy_problem(2)
    from discivec.gmm import SuffStats
    stats = [SuffStats(n[i], np.zeros_like(fbar[i]), fbar[i]) for i in range(len(n))]
    T = em_train_t(stats, ubm, 4, iters=5, seed=0)
    data = LabeledIvectorSet(extract_batch(n, fbar, T), labels, K)
    cfg = TrainConfig(batch_size=8, stage2_epochs=5, lr_stage2=1e-2)
    clf = stage1_train(Classifier.zeros(4, K), data, cfg)
    return ubm, n, fbar, labels, K, T, clf, cfg


class TestStage2:
    def test_rejects_random_init(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        with pytest.raises(ValueError, match="generative initialization required"):
            stage2_train(random_tmatrix(4, 3, 4, seed=0), ubm, clf, n, fbar, labels, cfg)

    def test_loss_decreases_and_trace(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        trace = []
        T2, _ = stage2_train(T, ubm, clf, n, fbar, labels, cfg, trace)
        assert trace[0].epoch == -1 and len(trace) == cfg.stage2_epochs + 1
        assert trace[-1].loss < trace[0].loss
        assert T2.provenance == "discriminative"
        np.testing.assert_allclose(T2.normalized, T2.blocks / np.sqrt(ubm.variances)[:, :, None], rtol=1e-12)

    def test_zero_learning_rate_is_bit_exact(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        from dataclasses import replace
        T2, clf2 = stage2_train(T, ubm, clf, n, fbar, labels, replace(cfg, lr_stage2=0.0))
        np.testing.assert_array_equal(T2.blocks, T.blocks)
        np.testing.assert_array_equal(clf2.W, clf.W)

    def test_huge_l2_pins_t(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        from dataclasses import replace
        T2, _ = stage2_train(T, ubm, clf, n, fbar, labels, replace(cfg, l2_tmat=1e6))
        assert np.linalg.norm(T2.blocks - T.blocks) < 1e-3

    def test_regularized_loss_not_above_start(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        from dataclasses import replace
        trace = []
        stage2_train(T, ubm, clf, n, fbar, labels, replace(cfg, l2_tmat=0.05), trace)
        assert trace[-1].loss <= trace[0].loss

    def test_deterministic(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        a = stage2_train(T, ubm, clf, n, fbar, labels, cfg)
        b = stage2_train(T, ubm, clf, n, fbar, labels, cfg)
        np.testing.assert_array_equal(a[0].blocks, b[0].blocks)
        np.testing.assert_array_equal(a[1].W, b[1].W)

    def test_misaligned_labels(self, refined_setup):
        ubm, n, fbar, labels, K, T, clf, cfg = refined_setup
        with pytest.raises(ValueError):
            stage2_train(T, ubm, clf, n, fbar, labels[:-1], cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_stage1=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(stage2_epochs=-1)


def test_loss_log_round_trip(tmp_path):
    trace = [EpochRecord(-1, 2, 1.25, 0.5), EpochRecord(0, 2, 1.125, 0.625)]
    write_loss_log(tmp_path / "loss.tsv", trace)
    assert (tmp_path / "loss.tsv").read_text().splitlines()[0] == "-1\t2\t1.25\t0.500000"
    assert read_loss_log(tmp_path / "loss.tsv") == trace
