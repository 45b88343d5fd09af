"""Acceptance criteria 1-8, one test each; each prints a single PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from conftest import ACCEPTANCE_LINES, random_ubm, sample_tv_stats
from discivec import io
from discivec.cli import main
from discivec.corpus import (AugmentSpec, SynthConfig, augment_set, measured_snr, room_rirs, synth_corpus,
                             vad_energy)
from discivec.disc import Classifier, LabeledIvectorSet, TrainConfig, stage1_train, stage2_train
from discivec.experiment import TrendConfig, trend_run
from discivec.gmm import SuffStats, corpus_stats, normalize_stats, train_ubm_em
from discivec.gradcheck import check_classifier, check_tmatrix, random_instance
from discivec.ivector import TMatrix, em_train_t, extract, extract_all, extract_batch, normalize_t, random_tmatrix
from discivec.plda import train_plda


def report(num, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {num} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def direct_convolution(x, h):
    """O(N*M) shifted-sum convolution truncated to len(x)."""
    out = np.zeros(len(x))
    for k, hk in enumerate(h[:len(x)]):
        out[k:] += hk * x[:len(x) - k]
    return out


def test_criterion_1_closed_form_oracle():
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(100):
        ubm = random_ubm(rng, 8, 4)
        T = normalize_t(TMatrix(rng.standard_normal((8, 4, 16))), ubm)
        stats = normalize_stats(SuffStats(rng.uniform(0, 50, 8), 10 * rng.standard_normal((8, 4))), ubm)
        cases.append((T, stats))
    start = time.perf_counter()
    phis = [extract(stats, T).phi for T, stats in cases]
    elapsed = time.perf_counter() - start
    worst = 0.0
    for (T, stats), phi in zip(cases, phis):
        Tbar = T.normalized.reshape(-1, 16)
        L = np.eye(16) + Tbar.T @ (np.repeat(stats.n, 4)[:, None] * Tbar)
        ref = np.linalg.solve(L, Tbar.T @ stats.normalized.reshape(-1))
        worst = max(worst, np.linalg.norm(phi - ref) / np.linalg.norm(ref))
    report(1, "closed-form extraction vs dense solve", worst <= 1e-10 and elapsed < 1.0,
           f"max_rel_err={worst:.2e} (<=1e-10) runtime={elapsed:.3f}s (<1s) over 100 instances")


def test_criterion_2_gradient_fidelity():
    start = time.perf_counter()
    err_t = err_w = 0.0
    for seed in range(5):
        inst = random_instance(seed, C=4, F=3, D=5, K=6, batch=4)
        err_t = max(err_t, check_tmatrix(inst, h=1e-4)[0])
        err_w = max(err_w, check_classifier(inst, h=1e-5, num_samples=8, seed=seed)[0])
    elapsed = time.perf_counter() - start
    report(2, "analytic gradients vs central differences",
           err_t < 1e-4 and err_w < 1e-6 and elapsed < 30,
           f"T max_rel_err={err_t:.2e} (<1e-4) W max_rel_err={err_w:.2e} (<1e-6) runtime={elapsed:.1f}s (<30s)")


def test_criterion_3_em_monotonicity():
    start = time.perf_counter()
    corpus = synth_corpus(SynthConfig(num_speakers=30, utts_per_speaker=5, frames_per_utt=(200, 300),
                                      num_components=8, feat_dim=5, seed=3))
    feats = [u.features for u in corpus.utterances]
    ubm, ubm_hist = train_ubm_em(feats, 8, iters=10, seed=3, return_loglik=True)
    stats = corpus_stats(feats, ubm)
    T, t_hist = em_train_t(stats, ubm, 6, iters=10, seed=3, return_loglik=True)

    phis = extract_all(stats, T)
    labels = np.repeat(np.arange(30), 5)
    _, p_hist = train_plda(phis, labels, iters=10, return_loglik=True)
    elapsed = time.perf_counter() - start

    drops = {name: float(np.min(np.diff(h))) for name, h in
             (("ubm", ubm_hist), ("tmatrix", t_hist), ("plda", p_hist))}
    ok = all(d >= -1e-6 for d in drops.values()) and all(len(h) == 11 for h in (ubm_hist, t_hist, p_hist))
    detail = " ".join(f"{k}_min_step={v:+.2e}" for k, v in drops.items())
    report(3, "EM objectives non-decreasing", ok and elapsed < 60,
           f"{detail} (>= -1e-6, 10 iters each) runtime={elapsed:.1f}s (<60s)")


def test_criterion_4_subspace_recovery():
    start = time.perf_counter()
    rng = np.random.default_rng(44)
    ubm = random_ubm(rng, 16, 4)
    t_true = rng.standard_normal((16, 4, 8)) * np.sqrt(ubm.variances)[:, :, None]
    stats = sample_tv_stats(ubm, t_true, 500, 200, rng)
    T = em_train_t(stats, ubm, 8, iters=10, seed=0)
    truth = (t_true / np.sqrt(ubm.variances)[:, :, None]).reshape(-1, 8)
    angle = float(np.degrees(subspace_angles(T.stacked(), truth).max()))
    elapsed = time.perf_counter() - start
    report(4, "total-variability subspace recovery", angle < 10 and elapsed < 60,
           f"largest_principal_angle={angle:.2f}deg (<10) runtime={elapsed:.1f}s (<60s)")


@pytest.mark.slow
def test_criterion_5_discriminative_trend():
    start = time.perf_counter()
    runs = [trend_run(TrendConfig(seed=s)) for s in (0, 1, 2)]
    elapsed = time.perf_counter() - start
    loss_ok = all(r["stage2_final_loss"] < r["stage2_entry_loss"] for r in runs)
    acc_ok = all(r["heldout_acc_discriminative"] >= r["heldout_acc_generative"] for r in runs)
    med_b = float(np.median([r["eer"]["B"] for r in runs]))
    med_d = float(np.median([r["eer"]["D"] for r in runs]))
    eer_ok = med_d <= med_b
    losses = "/".join(f"{r['stage2_entry_loss']:.3f}->{r['stage2_final_loss']:.3f}" for r in runs)
    accs = "/".join(f"{r['heldout_acc_generative']:.3f}->{r['heldout_acc_discriminative']:.3f}" for r in runs)
    detail = (f"(a) stage2 loss {losses} (b) heldout acc G->D {accs} "
              f"(c) median EER B={100 * med_b:.2f}% D={100 * med_d:.2f}% runtime={elapsed:.0f}s (<600s)")
    report(5, "discriminative refinement trend", loss_ok and acc_ok and eer_ok and elapsed < 600, detail)


def test_criterion_6_augmentation_exactness():
    sig = synth_corpus(SynthConfig(num_speakers=4, utts_per_speaker=5, frames_per_utt=(320, 700), mode="signal",
                                   channel_noise_std=0.5, seed=6))
    spec = AugmentSpec(noise_fraction=0.5, reverb_fraction=0.3, joint_fraction=0.5, cut_fraction=0.3, seed=6)
    out = augment_set(sig, spec)
    by_id = {u.utt_id: u for u in out.utterances}
    snr_err, conv_err, durations, mixed = 0.0, 0.0, [], 0
    for u in out.utterances:
        if u.is_original:
            continue
        src = by_id[u.source]
        mask = vad_energy(src.signal, sig.sample_rate, spec.vad_threshold_rel)
        if u.aug_type == "noise":
            snr_err = max(snr_err, abs(measured_snr(src.signal, u.signal - src.signal, mask) - u.params["snr_db"]))
            mixed += 1
        elif u.aug_type in ("reverb", "joint"):
            rir_s, rir_n = room_rirs(spec, u.params["room"], sig.sample_rate)
            rev = direct_convolution(src.signal, rir_s.taps)
            if u.aug_type == "reverb":
                conv_err = max(conv_err, float(np.max(np.abs(u.signal - rev))))
            else:
                assert rir_n.room_id == rir_s.room_id and not np.array_equal(rir_n.taps, rir_s.taps)
                snr_err = max(snr_err, abs(measured_snr(rev, u.signal - rev, mask) - u.params["snr_db"]))
                mixed += 1
        elif u.aug_type == "cut":
            durations.append(len(u.signal) / sig.sample_rate)

    feat = synth_corpus(SynthConfig(num_speakers=97, utts_per_speaker=10, frames_per_utt=(300, 500),
                                    num_components=2, feat_dim=2, seed=6))
    feat_out = augment_set(feat, AugmentSpec(cut_fraction=0.3, seed=6))
    feat_cuts = [u for u in feat_out.utterances if u.aug_type == "cut"]
    durations += [len(u.features) / 100.0 for u in feat_cuts]
    sig_cuts = sum(u.aug_type == "cut" for u in out.utterances)
    count_ok = len(feat_cuts) == round(0.3 * 970) and sig_cuts == round(0.3 * 20)
    dur_ok = all(3.0 <= d <= 5.0 for d in durations)
    ok = snr_err < 1e-6 and conv_err <= 1e-12 and count_ok and dur_ok and mixed > 0
    report(6, "augmentation exactness", ok,
           f"max_snr_err={snr_err:.1e}dB over {mixed} mixes (<1e-6) reverb_err={conv_err:.1e} (<=1e-12) "
           f"cuts={len(feat_cuts)}/970 and {sig_cuts}/20 (=round(0.3N)) "
           f"durations in [{min(durations):.2f},{max(durations):.2f}]s")


@pytest.mark.slow
def test_criterion_7_experiment_determinism(tmp_path, capsys):
    runs = {"a": ["--workers", "1"], "b": ["--workers", "1"], "c": ["--workers", "4"]}
    codes = {}
    for name, extra in runs.items():
        codes[name] = main(["experiment", "--out", str(tmp_path / name), "--seed", "7", *extra])
    capsys.readouterr()
    digests = {name: {p.name: io.sha256_file(p) for p in sorted((tmp_path / name).iterdir()) if p.is_file()}
               for name in runs}
    models = [k for k in digests["a"] if k.endswith((".ivxu", ".ivxt", ".ivxp", ".ivxw"))]
    same = digests["a"] == digests["b"] == digests["c"]
    ok = all(c == 0 for c in codes.values()) and same and "report.json" in digests["a"] and models
    report(7, "experiment matrix determinism", ok,
           f"{len(digests['a'])} artifacts ({len(models)} model files + report.json) byte-identical "
           f"across rerun and workers=1/4: {same}")


def test_criterion_8_guardrails():
    rng = np.random.default_rng(8)
    ubm = random_ubm(rng, 6, 3)
    t_true = rng.standard_normal((6, 3, 5))
    stats = sample_tv_stats(ubm, t_true, 80, 60, rng)
    T = em_train_t(stats, ubm, 5, iters=5, seed=0)
    n = np.array([s.n for s in stats])
    fbar = np.array([s.normalized for s in stats])
    labels = np.arange(80) % 8
    cfg = TrainConfig(batch_size=8, stage2_epochs=3)
    clf = stage1_train(Classifier.zeros(5, 8), LabeledIvectorSet(extract_batch(n, fbar, T), labels, 8), cfg)

    try:
        stage2_train(random_tmatrix(6, 3, 5, seed=1), ubm, clf, n, fbar, labels, cfg)
        rejected = False
    except ValueError as exc:
        rejected = "generative initialization required" in str(exc)

    pinned, _ = stage2_train(T, ubm, clf, n, fbar, labels, replace(cfg, l2_tmat=1e6))
    drift = float(np.linalg.norm(pinned.blocks - T.blocks))
    frozen, _ = stage2_train(T, ubm, clf, n, fbar, labels, replace(cfg, lr_stage2=0.0))
    bit_exact = np.array_equal(frozen.blocks, T.blocks) and frozen.blocks.tobytes() == T.blocks.tobytes()
    report(8, "training guardrails", rejected and drift < 1e-3 and bit_exact,
           f"random_init_rejected={rejected} l2=1e6 drift={drift:.1e} (<1e-3) lr2=0 bit_identical={bit_exact}")
