"""Two-covariance PLDA, trial scoring and equal error rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._fsutil import atomic_write

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


def _logdet_spd(a: np.ndarray) -> float:
    cf = cho_factor(a, lower=True)
    return 2.0 * float(np.log(np.diag(cf[0])).sum())


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class PldaModel:
    """Speaker means ``y ~ N(mu, B)``, observations ``x = y + e`` with ``e ~ N(0, W_cov)``."""

    mu: np.ndarray
    B: np.ndarray
    W_cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        W = np.asarray(self.W_cov, dtype=np.float64)
        D = mu.shape[0]
        if B.shape != (D, D) or W.shape != (D, D):
            raise ValueError("PLDA parameter shapes are inconsistent")
        for name, m in (("B", B), ("W_cov", W)):
            if np.max(np.abs(m - m.T), initial=0.0) > 1e-10 * max(1.0, np.abs(m).max(initial=0.0)):
                raise ValueError(f"{name} is not symmetric")
        try:
            cho_factor(W, lower=True)
            cho_factor(B + W, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("PLDA covariances are not positive definite") from exc
        if np.linalg.eigvalsh(B).min() < -1e-10 * max(1.0, np.abs(B).max()):
            raise ValueError("between-speaker covariance is not positive semidefinite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "B", _sym(B))
        object.__setattr__(self, "W_cov", _sym(W))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @cached_property
    def _scoring(self):
        D = self.dim
        tot = self.B + self.W_cov
        ac = self.B
        tot_inv = cho_solve(cho_factor(tot, lower=True), np.eye(D))
        cond = _sym(tot - ac @ tot_inv @ ac)  # covariance of t given e under "same"
        cond_inv = cho_solve(cho_factor(cond, lower=True), np.eye(D))
        Q = _sym(tot_inv - cond_inv)
        P = tot_inv @ ac @ cond_inv
        P = _sym(P)
        const = 0.5 * (_logdet_spd(tot) - _logdet_spd(cond))
        return Q, P, const

    def score(self, enroll: np.ndarray, test: np.ndarray) -> float:
        """Same-speaker vs different-speaker log-likelihood ratio; symmetric bit-for-bit."""
        Q, P, const = self._scoring
        e = np.asarray(enroll, dtype=np.float64) - self.mu
        t = np.asarray(test, dtype=np.float64) - self.mu
        quad = (e @ Q @ e) + (t @ Q @ t)
        cross = ((P @ e) @ t) + ((P @ t) @ e)
        return float(0.5 * quad + 0.5 * cross + const)

    def score_many(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        """Row-wise scores of two ``(N, D)`` arrays (same arithmetic order as :meth:`score`)."""
        return np.array([self.score(e, t) for e, t in zip(enroll, test)])


def score_trial(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    return model.score(enroll, test)


def preprocess(ivectors: np.ndarray, mu: np.ndarray, do_lennorm: bool = True) -> np.ndarray:
    """Centre on ``mu`` and optionally scale rows to unit length (zero rows stay zero)."""
    x = np.atleast_2d(np.asarray(ivectors, dtype=np.float64)) - mu
    if do_lennorm:
        norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return x


@dataclass(frozen=True)
class Backend:
    """PLDA model together with the preprocessing applied to its training data."""

    center: np.ndarray
    lennorm: bool
    model: PldaModel

    def transform(self, ivectors: np.ndarray) -> np.ndarray:
        return preprocess(ivectors, self.center, self.lennorm)

    def score_trials(self, trials: Sequence["Trial"], vectors: dict[str, np.ndarray]) -> np.ndarray:
        ids = sorted({t.enroll for t in trials} | {t.test for t in trials})
        missing = [i for i in ids if i not in vectors]
        if missing:
            raise KeyError(f"trial ids without i-vectors: {missing[:5]}")
        x = self.transform(np.array([vectors[i] for i in ids]))
        return score_trials(self.model, trials, dict(zip(ids, x)))


def train_backend(ivectors: np.ndarray, labels: np.ndarray, iters: int = 10, lennorm: bool = True) -> Backend:
    center = np.asarray(ivectors, dtype=np.float64).mean(axis=0)
    x = preprocess(ivectors, center, lennorm)
    return Backend(center, lennorm, train_plda(x, labels, iters))


def _speaker_groups(x: np.ndarray, labels: np.ndarray) -> list[np.ndarray]:
    return [x[labels == s] for s in np.unique(labels)]


def plda_loglik(model: PldaModel, ivectors: np.ndarray, labels: np.ndarray) -> float:
    """Marginal log-likelihood of labelled data with speaker means integrated out."""
    D = model.dim
    W_cf = cho_factor(model.W_cov, lower=True)
    logdet_W = 2.0 * np.log(np.diag(W_cf[0])).sum()
    B_reg = model.B
    total = 0.0
    for grp in _speaker_groups(np.asarray(ivectors, dtype=np.float64), np.asarray(labels)):
        n = len(grp)
        xc = grp - model.mu
        winv_x = cho_solve(W_cf, xc.T).T
        b = winv_x.sum(axis=0)
        # n W^-1 + B^-1 precision, written without inverting B: |B||B^-1 + n W^-1| = |I + n B W^-1|
        M = B_reg @ (n * cho_solve(W_cf, np.eye(D))) + np.eye(D)
        sign, logdet_M = np.linalg.slogdet(M)
        # b' (B^-1 + nW^-1)^-1 b = b' (I + n B W^-1)^-1 B b
        quad_post = b @ np.linalg.solve(M, B_reg @ b)
        total += (-0.5 * n * D * LOG_2PI - 0.5 * n * logdet_W - 0.5 * logdet_M
                  - 0.5 * np.sum(xc * winv_x) + 0.5 * quad_post)
    return float(total)


def train_plda(ivectors: np.ndarray, labels: np.ndarray, iters: int = 10, return_loglik: bool = False,
               ridge: float = 1e-6):
    """EM for the two-covariance model, initialised from between/within scatter."""
    x = np.atleast_2d(np.asarray(ivectors, dtype=np.float64))
    labels = np.asarray(labels)
    groups = _speaker_groups(x, labels)
    if len(groups) < 2:
        raise ValueError("PLDA needs at least two speakers")
    N, D = x.shape
    mu = x.mean(axis=0)
    spk_means = np.array([g.mean(axis=0) for g in groups])
    B = _sym(np.cov(spk_means.T, bias=True).reshape(D, D))
    Wc = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups) / N
    Wc = _sym(np.asarray(Wc).reshape(D, D))
    try:
        cho_factor(Wc, lower=True)
    except np.linalg.LinAlgError:
        logger.warning("within-speaker scatter singular, adding ridge")
        Wc = Wc + ridge * max(np.trace(Wc) / D, 1e-12) * np.eye(D)
    if np.linalg.eigvalsh(B).min() <= 0:
        B = B + ridge * max(np.trace(B) / D, 1e-12) * np.eye(D)
    model = PldaModel(mu, B, Wc)

    history = []
    eye = np.eye(D)
    for _ in range(iters):
        if return_loglik:
            history.append(plda_loglik(model, x, labels))
        B_cf = cho_factor(model.B, lower=True)
        W_cf = cho_factor(model.W_cov, lower=True)
        B_inv = cho_solve(B_cf, eye)
        W_inv = cho_solve(W_cf, eye)
        binv_mu = B_inv @ model.mu
        post_means = np.empty((len(groups), D))
        post_covs = np.empty((len(groups), D, D))
        for s, g in enumerate(groups):
            prec = B_inv + len(g) * W_inv
            cf = cho_factor(_sym(prec), lower=True)
            post_covs[s] = cho_solve(cf, eye)
            post_means[s] = cho_solve(cf, binv_mu + W_inv @ g.sum(axis=0))
        new_mu = post_means.mean(axis=0)
        second = post_covs.sum(axis=0) + post_means.T @ post_means
        new_B = _sym(second / len(groups) - np.outer(new_mu, new_mu))
        acc = np.zeros((D, D))
        for s, g in enumerate(groups):
            r = g - post_means[s]
            acc += r.T @ r + len(g) * post_covs[s]
        new_W = _sym(acc / N)
        model = PldaModel(new_mu, new_B, new_W)
    if return_loglik:
        history.append(plda_loglik(model, x, labels))
        return model, history
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # True for target trials

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=bool)
        if s.shape != lab.shape:
            raise ValueError("scores and labels must align")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", lab)


def compute_eer(scores: ScoreSet) -> float:
    """EER from the piecewise-linear miss/false-alarm curve over unique thresholds.

    A trial is accepted when ``score >= threshold``; tied scores move together.
    """
    tar = np.sort(scores.scores[scores.labels])
    non = np.sort(scores.scores[~scores.labels])
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("EER needs at least one target and one non-target score")
    thresholds = np.unique(scores.scores)
    p_miss = np.searchsorted(tar, thresholds, side="left") / len(tar)
    p_fa = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    p_miss = np.append(p_miss, 1.0)
    p_fa = np.append(p_fa, 0.0)
    diff = p_miss - p_fa  # non-decreasing, ends at 1
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        return float(p_miss[k])
    d0, d1 = diff[k - 1], diff[k]
    t = -d0 / (d1 - d0)
    return float(p_miss[k - 1] + t * (p_miss[k] - p_miss[k - 1]))


# ---------------------------------------------------------------------------
# trial lists


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


def read_trials(path) -> list[Trial]:
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}:{lineno}: expected 'enroll test target|nontarget'")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(path, trials: Sequence[Trial]) -> None:
    with atomic_write(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.enroll} {t.test} {'target' if t.target else 'nontarget'}\n")


def write_scores(path, trials: Sequence[Trial], scores: Sequence[float]) -> None:
    with atomic_write(path, "w") as fh:
        for t, s in zip(trials, scores):
            fh.write(f"{t.enroll} {t.test} {s:.10f}\n")


def read_scores(path) -> list[tuple[str, str, float]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'enroll test score'")
            out.append((parts[0], parts[1], float(parts[2])))
    return out


def score_trials(model: PldaModel, trials: Sequence[Trial], vectors: dict[str, np.ndarray]) -> np.ndarray:
    missing = {t.enroll for t in trials} | {t.test for t in trials}
    missing -= set(vectors)
    if missing:
        raise KeyError(f"trial ids without i-vectors: {sorted(missing)[:5]}")
    return np.array([model.score(vectors[t.enroll], vectors[t.test]) for t in trials])
