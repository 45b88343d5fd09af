"""Diagonal-covariance GMM-UBM, frame posteriors and Baum-Welch statistics."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.num_frames / self.frame_rate_hz


def _frames(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.frames
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class GmmUbm:
    """Universal background model with diagonal covariances.

    ``means`` and ``variances`` are ``C x F``; ``weights`` has length ``C``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or v.shape != m.shape or m.shape[0] != w.shape[0]:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("variances must be positive and finite")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        for name, arr in (("weights", w), ("means", m), ("variances", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.means.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.weights, self.means, self.variances):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def component_loglik(self, features) -> np.ndarray:
        """Per-frame, per-component ``log w_c + log N(o_t; m_c, S_c)``, shape ``T x C``."""
        x = _frames(features)
        if x.shape[1] != self.feat_dim:
            raise ValueError(f"feature dim {x.shape[1]} does not match UBM dim {self.feat_dim}")
        const = np.log(self.weights) - 0.5 * (self.feat_dim * LOG_2PI + np.log(self.variances).sum(axis=1))
        inv_var = 1.0 / self.variances
        quad = (x * x) @ inv_var.T - 2.0 * x @ (self.means * inv_var).T
        quad += np.sum(self.means * self.means * inv_var, axis=1)
        return const - 0.5 * quad

    def loglik(self, features) -> float:
        """Total log-likelihood of the frames under the mixture."""
        return float(logsumexp(self.component_loglik(features), axis=1).sum())


@dataclass(frozen=True)
class Responsibilities:
    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError("responsibilities must be 2-D")
        if g.size and (g.min() < 0 or g.max() > 1 or np.abs(g.sum(axis=1) - 1).max() > 1e-10):
            raise ValueError("responsibility rows must be probability vectors")
        object.__setattr__(self, "gamma", g)


@dataclass(frozen=True)
class SuffStats:
    """Zero-order counts ``n`` (C,), first-order sums ``f`` (C, F), optional centred/whitened ``normalized``."""

    n: np.ndarray
    f: np.ndarray
    normalized: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64)
        f = np.asarray(self.f, dtype=np.float64)
        if n.ndim != 1 or f.ndim != 2 or f.shape[0] != n.shape[0]:
            raise ValueError("inconsistent statistics shapes")
        if np.any(n < 0):
            raise ValueError("zero-order counts must be non-negative")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "f", f)

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.n + other.n, self.f + other.f)


def gmm_posteriors(features, ubm: GmmUbm) -> Responsibilities:
    ll = ubm.component_loglik(features)
    ll -= ll.max(axis=1, keepdims=True)
    gamma = np.exp(ll)
    gamma /= gamma.sum(axis=1, keepdims=True)
    return Responsibilities(gamma)


def accumulate_stats(features, gamma: Responsibilities | np.ndarray) -> SuffStats:
    x = _frames(features)
    g = gamma.gamma if isinstance(gamma, Responsibilities) else np.asarray(gamma, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != x.shape[0]:
        raise ValueError(f"gamma shape {g.shape} does not match {x.shape[0]} frames")
    return SuffStats(g.sum(axis=0), g.T @ x)


def normalize_stats(stats: SuffStats, ubm: GmmUbm) -> SuffStats:
    if stats.f.shape != ubm.means.shape:
        raise ValueError("statistics do not match UBM dimensions")
    if np.any(ubm.variances <= 0):
        raise ValueError("non-positive UBM variance")
    centred = stats.f - stats.n[:, None] * ubm.means
    return replace(stats, normalized=centred / np.sqrt(ubm.variances))


def denormalize_stats(normalized: np.ndarray, n: np.ndarray, ubm: GmmUbm) -> np.ndarray:
    """Recover raw first-order sums from their normalized form."""
    return normalized * np.sqrt(ubm.variances) + n[:, None] * ubm.means


def utterance_stats(features, ubm: GmmUbm, normalize: bool = True) -> SuffStats:
    stats = accumulate_stats(features, gmm_posteriors(features, ubm))
    return normalize_stats(stats, ubm) if normalize else stats


def corpus_stats(features: Sequence, ubm: GmmUbm, workers: int = 1) -> list[SuffStats]:
    """Per-utterance statistics; results are returned in input order regardless of ``workers``."""
    if workers <= 1:
        return [utterance_stats(x, ubm) for x in features]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda x: utterance_stats(x, ubm), features))


def stack_stats(stats: Sequence[SuffStats]) -> tuple[np.ndarray, np.ndarray]:
    """Stack normalized statistics into ``(N, C)`` counts and ``(N, C, F)`` first-order arrays."""
    if any(s.normalized is None for s in stats):
        raise ValueError("statistics must be normalized")
    n = np.stack([s.n for s in stats])
    fbar = np.stack([s.normalized for s in stats])
    return n, fbar


# ---------------------------------------------------------------------------
# UBM training


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator, steps: int = 10) -> tuple[np.ndarray, np.ndarray]:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(x.shape[0])
        else:
            idx = rng.choice(x.shape[0], p=d2 / total)
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    assign = np.zeros(x.shape[0], dtype=int)
    sq = np.sum(x * x, axis=1)
    for _ in range(steps):
        # only the argmin is used, so the expanded squared distance is accurate enough
        dist = sq[:, None] - 2.0 * x @ centers.T + np.sum(centers * centers, axis=1)
        assign = dist.argmin(axis=1)
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=x[:, f], minlength=k) for f in range(x.shape[1])], axis=1)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers, assign


def train_ubm_em(features: Iterable, num_components: int, iters: int, seed: int = 0,
                 var_floor_rel: float = 1e-6, return_loglik: bool = False):
    """Fit a diagonal GMM by k-means++ seeding, 10 k-means steps and ``iters`` EM iterations.

    With ``return_loglik`` the total log-likelihood before each iteration and after the
    last one is returned as well (``iters + 1`` values).
    """
    raw = np.vstack([_frames(f) for f in features])
    C, F = num_components, raw.shape[1]
    if C < 1 or iters < 1:
        raise ValueError("num_components and iters must be >= 1")
    if raw.shape[0] < 10 * C * F:
        raise ValueError(f"not enough frames: {raw.shape[0]} < {10 * C * F}")
    rng = np.random.default_rng(seed)
    # EM runs on globally centred data (keeps E[x^2] - m^2 well conditioned); means shifted back at the end
    gmean = raw.mean(axis=0)
    x = raw - gmean
    gvar = x.var(axis=0)
    floor = np.maximum(var_floor_rel * gvar, np.finfo(float).tiny)

    centers, assign = _kmeans_pp(x, C, rng)
    counts = np.bincount(assign, minlength=C).astype(float)
    weights = np.maximum(counts, 1.0)
    weights /= weights.sum()
    variances = np.empty((C, F))
    for c in range(C):
        members = x[assign == c]
        variances[c] = members.var(axis=0) if len(members) > 1 else gvar
    ubm = GmmUbm(weights, centers, np.maximum(variances, floor))

    history = []
    for it in range(iters):
        ll = ubm.component_loglik(x)
        peak = ll.max(axis=1, keepdims=True)
        gamma = np.exp(ll - peak)
        norm = gamma.sum(axis=1, keepdims=True)
        history.append(float(np.sum(np.log(norm) + peak)))
        gamma /= norm
        occ = gamma.sum(axis=0)
        first = gamma.T @ x
        second = gamma.T @ (x * x)
        means = np.empty((C, F))
        variances = np.empty((C, F))
        for c in range(C):
            if occ[c] < 1e-10:
                logger.warning("UBM EM iter %d: component %d empty, reseeding near global mean", it, c)
                means[c] = 0.1 * np.sqrt(gvar) * rng.standard_normal(F)
                variances[c] = gvar
                occ[c] = 1.0
                continue
            means[c] = first[c] / occ[c]
            variances[c] = second[c] / occ[c] - means[c] ** 2
        weights = occ / occ.sum()
        ubm = GmmUbm(weights, means, np.maximum(variances, floor))
    if return_loglik:
        history.append(ubm.loglik(x))
    ubm = GmmUbm(ubm.weights, ubm.means + gmean, ubm.variances)
    return (ubm, history) if return_loglik else ubm
