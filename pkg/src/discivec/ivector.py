"""Total-variability matrix, closed-form i-vector extraction and generative EM training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .gmm import GmmUbm, SuffStats, stack_stats

logger = logging.getLogger(__name__)

PROVENANCES = ("random", "generative", "discriminative")


@dataclass(frozen=True)
class TMatrix:
    """Extractor blocks ``T[c]`` of shape ``F x D`` stored as a ``(C, F, D)`` array.

    ``normalized`` caches the UBM-whitened blocks; ``provenance`` records how the
    matrix was initialised, which discriminative refinement checks.
    """

    blocks: np.ndarray
    normalized: np.ndarray | None = None
    provenance: str = "random"
    ubm_checksum: str | None = None

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.float64)
        if b.ndim != 3 or b.shape[2] < 1:
            raise ValueError(f"T blocks must have shape (C, F, D), got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("T contains non-finite entries")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "blocks", b)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.blocks.shape

    @property
    def dim(self) -> int:
        return self.blocks.shape[2]

    @cached_property
    def gram(self) -> np.ndarray:
        """Per-component ``Tbar_c' Tbar_c``, shape ``(C, D, D)``."""
        tbar = self._require_normalized()
        return np.einsum("cfd,cfe->cde", tbar, tbar)

    def _require_normalized(self) -> np.ndarray:
        if self.normalized is None:
            raise ValueError("T matrix has not been normalized against a UBM")
        return self.normalized

    def stacked(self, normalized: bool = True) -> np.ndarray:
        """Supervector-shaped ``(C*F, D)`` view."""
        arr = self._require_normalized() if normalized else self.blocks
        return arr.reshape(-1, arr.shape[2])


@dataclass(frozen=True)
class IVector:
    phi: np.ndarray
    precision: np.ndarray | None = None


def random_tmatrix(C: int, F: int, D: int, seed: int, scale: float = 0.1) -> TMatrix:
    rng = np.random.default_rng(seed)
    return TMatrix(scale * rng.standard_normal((C, F, D)), provenance="random")


def normalize_t(T: TMatrix, ubm: GmmUbm) -> TMatrix:
    C, F, _ = T.shape
    if (C, F) != ubm.means.shape:
        raise ValueError(f"T blocks {T.shape[:2]} do not match UBM {ubm.means.shape}")
    tbar = T.blocks / np.sqrt(ubm.variances)[:, :, None]
    return replace(T, normalized=tbar, ubm_checksum=ubm.checksum())


def denormalize_t(tbar: np.ndarray, ubm: GmmUbm, provenance: str) -> TMatrix:
    return TMatrix(tbar * np.sqrt(ubm.variances)[:, :, None], normalized=tbar,
                   provenance=provenance, ubm_checksum=ubm.checksum())


def precision(n: np.ndarray, T: TMatrix) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("zero-order statistics must be non-negative")
    gram = T.gram
    if n.shape != (gram.shape[0],):
        raise ValueError("count vector does not match number of components")
    L = np.einsum("c,cde->de", n, gram)
    L[np.diag_indices_from(L)] += 1.0
    return L


def _projected_stats(fbar: np.ndarray, tbar: np.ndarray) -> np.ndarray:
    return np.einsum("cfd,cf->d", tbar, fbar)


def extract(stats: SuffStats, T: TMatrix, return_precision: bool = False) -> IVector:
    """Posterior mean ``phi = L^-1 Tbar' fbar`` via a Cholesky solve."""
    if stats.normalized is None:
        raise ValueError("statistics must be normalized")
    tbar = T._require_normalized()
    if stats.normalized.shape != tbar.shape[:2]:
        raise ValueError("statistics do not match T dimensions")
    if not (np.all(np.isfinite(stats.n)) and np.all(np.isfinite(stats.normalized))):
        raise ValueError("non-finite statistics")
    L = precision(stats.n, T)
    phi = cho_solve(cho_factor(L, lower=True), _projected_stats(stats.normalized, tbar))
    return IVector(phi, L if return_precision else None)


def extract_batch(n: np.ndarray, fbar: np.ndarray, T: TMatrix, workers: int = 1) -> np.ndarray:
    """Extract i-vectors for stacked statistics ``n (N, C)``, ``fbar (N, C, F)``; returns ``(N, D)``."""
    tbar = T._require_normalized()
    if fbar.shape[1:] != tbar.shape[:2]:
        raise ValueError("statistics do not match T dimensions")
    if not (np.all(np.isfinite(n)) and np.all(np.isfinite(fbar))):
        raise ValueError("non-finite statistics")
    L = np.einsum("nc,cde->nde", n, T.gram)
    idx = np.arange(T.dim)
    L[:, idx, idx] += 1.0
    rhs = np.einsum("cfd,ncf->nd", tbar, fbar)

    def solve(i):
        return cho_solve(cho_factor(L[i], lower=True), rhs[i])

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(solve, range(len(rhs))))
    else:
        rows = [solve(i) for i in range(len(rhs))]
    return np.array(rows).reshape(len(rhs), T.dim)


def extract_all(stats: Sequence[SuffStats], T: TMatrix, workers: int = 1) -> np.ndarray:
    n, fbar = stack_stats(stats)
    return extract_batch(n, fbar, T, workers=workers)


def tv_loglik(n: np.ndarray, fbar: np.ndarray, T: TMatrix) -> float:
    """Log-likelihood of the statistics under the total-variability model, up to a T-independent constant.

    Per utterance this is ``-0.5 log|L| + 0.5 phi' L phi``; EM on T never decreases it.
    """
    L = np.einsum("nc,cde->nde", n, T.gram)
    idx = np.arange(T.dim)
    L[:, idx, idx] += 1.0
    rhs = np.einsum("cfd,ncf->nd", T._require_normalized(), fbar)
    total = 0.0
    for Li, bi in zip(L, rhs):
        cf = cho_factor(Li, lower=True)
        phi = cho_solve(cf, bi)
        total += -np.log(np.diag(cf[0])).sum() + 0.5 * phi @ bi
    return float(total)


def em_train_t(stats: Sequence[SuffStats], ubm: GmmUbm, dim: int, iters: int = 10, seed: int = 0,
               init: TMatrix | None = None, return_loglik: bool = False):
    """Maximum-likelihood EM for the total-variability matrix.

    E-step: posterior mean and precision of every i-vector. M-step, per component,
    ``Tbar_c = A_c B_c^-1`` with ``A_c = sum_n fbar_nc phi_n'`` and
    ``B_c = sum_n N_nc (L_n^-1 + phi_n phi_n')``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if len(stats) < dim:
        raise ValueError(f"need at least {dim} utterances, got {len(stats)}")
    n, fbar = stack_stats(stats)
    C, F = ubm.means.shape
    if fbar.shape[1:] != (C, F):
        raise ValueError("statistics do not match UBM dimensions")
    T = normalize_t(init if init is not None else random_tmatrix(C, F, dim, seed), ubm)
    if T.dim != dim:
        raise ValueError("initial T has wrong i-vector dimension")
    tbar = T.normalized
    eye = np.eye(dim)
    history = []
    for it in range(iters):
        T = denormalize_t(tbar, ubm, "generative")
        L = np.einsum("nc,cde->nde", n, T.gram)
        L += eye
        rhs = np.einsum("cfd,ncf->nd", tbar, fbar)
        phis = np.empty((len(n), dim))
        second = np.empty((len(n), dim, dim))
        objective = 0.0
        for i in range(len(n)):
            cf = cho_factor(L[i], lower=True)
            phis[i] = cho_solve(cf, rhs[i])
            second[i] = cho_solve(cf, eye) + np.outer(phis[i], phis[i])
            objective += -np.log(np.diag(cf[0])).sum() + 0.5 * phis[i] @ rhs[i]
        history.append(float(objective))
        A = np.einsum("ncf,nd->cfd", fbar, phis)
        B = np.einsum("nc,nde->cde", n, second)
        if not np.any(n) or not np.any(B):
            raise ValueError("degenerate accumulators")
        new = np.empty_like(tbar)
        for c in range(C):
            Bc = B[c]
            tr = np.trace(Bc)
            if tr <= 0:
                logger.warning("T EM iter %d: component %d has no occupancy, block kept", it, c)
                new[c] = tbar[c]
                continue
            try:
                cf = cho_factor(Bc, lower=True)
            except np.linalg.LinAlgError:
                logger.warning("T EM iter %d: B_%d singular, adding ridge", it, c)
                cf = cho_factor(Bc + 1e-8 * tr / dim * eye, lower=True)
            new[c] = cho_solve(cf, A[c].T).T
        tbar = new
    T = denormalize_t(tbar, ubm, "generative")
    if return_loglik:
        history.append(tv_loglik(n, fbar, T))
        return T, history
    return T
