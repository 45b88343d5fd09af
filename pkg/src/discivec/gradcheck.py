"""Central finite-difference checks of the analytic classifier and T gradients.

The loss used here is re-derived independently: each i-vector comes from a
generic dense solve of ``L phi = Tbar' fbar`` with ``L`` accumulated
component by component, not from the extraction code under test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .disc import Classifier, LabeledIvectorSet, grad_classifier, grad_tmatrix
from .gmm import GmmUbm
from .ivector import TMatrix


@dataclass(frozen=True)
class GradInstance:
    ubm: GmmUbm
    T: TMatrix
    T_init: TMatrix
    clf: Classifier
    n: np.ndarray
    fbar: np.ndarray
    labels: np.ndarray


def random_instance(seed: int, C: int = 4, F: int = 3, D: int = 5, K: int = 6, batch: int = 4) -> GradInstance:
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, C)
    ubm = GmmUbm(w / w.sum(), rng.standard_normal((C, F)), rng.uniform(0.5, 2.0, (C, F)))
    T = TMatrix(0.5 * rng.standard_normal((C, F, D)), provenance="generative")
    T_init = TMatrix(T.blocks + 0.1 * rng.standard_normal((C, F, D)), provenance="generative")
    clf = Classifier(rng.standard_normal((D, K)))
    n = rng.uniform(0.5, 5.0, (batch, C))
    fbar = rng.standard_normal((batch, C, F)) * np.sqrt(n)[:, :, None]
    labels = rng.integers(0, K, batch)
    return GradInstance(ubm, T, T_init, clf, n, fbar, labels)


def reference_loss(blocks: np.ndarray, ubm: GmmUbm, W: np.ndarray, n: np.ndarray, fbar: np.ndarray,
                   labels: np.ndarray, l2: float = 0.0, t_init: np.ndarray | None = None) -> float:
    C, F, D = blocks.shape
    total = 0.0
    for i in range(len(n)):
        L = np.eye(D)
        rhs = np.zeros(D)
        for c in range(C):
            tb = blocks[c] / np.sqrt(ubm.variances[c])[:, None]
            L += n[i, c] * tb.T @ tb
            rhs += tb.T @ fbar[i, c]
        phi = np.linalg.solve(L, rhs)
        z = phi @ W
        zmax = z.max()
        total += zmax + np.log(np.exp(z - zmax).sum()) - z[labels[i]]
    if l2 > 0:
        total += l2 * float(np.sum((blocks - t_init) ** 2))
    return total


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entry-wise ``|a - n| / max(|a|, |n|)``; entries where both vanish count as exact."""
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    ratio = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
    return float(ratio.max(initial=0.0))


def check_tmatrix(inst: GradInstance, h: float = 1e-4, l2: float = 0.0) -> tuple[float, np.ndarray, np.ndarray]:
    analytic = grad_tmatrix(inst.T, inst.ubm, inst.clf, inst.n, inst.fbar, inst.labels,
                            l2=l2, t_init=inst.T_init)
    base = inst.T.blocks
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        args = (inst.ubm, inst.clf.W, inst.n, inst.fbar, inst.labels, l2, inst.T_init.blocks)
        numeric[idx] = (reference_loss(plus, *args) - reference_loss(minus, *args)) / (2 * h)
    return relative_error(analytic, numeric), analytic, numeric


def check_classifier(inst: GradInstance, h: float = 1e-5, num_samples: int | None = None,
                     seed: int = 0) -> tuple[float, np.ndarray, np.ndarray]:
    """Classifier gradient on random i-vectors (``num_samples`` of them, default the batch size)."""
    rng = np.random.default_rng(seed)
    N = num_samples or len(inst.labels)
    D, K = inst.clf.W.shape
    data = LabeledIvectorSet(rng.standard_normal((N, D)), rng.integers(0, K, N), K)
    analytic = grad_classifier(inst.clf, data)

    def loss(W):
        z = data.ivectors @ W
        zmax = z.max(axis=1)
        return float(np.sum(zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1)) - z[np.arange(N), data.labels]))

    numeric = np.zeros_like(inst.clf.W)
    for idx in np.ndindex(numeric.shape):
        plus = inst.clf.W.copy()
        minus = inst.clf.W.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric[idx] = (loss(plus) - loss(minus)) / (2 * h)
    return relative_error(analytic, numeric), analytic, numeric


def run(seed: int = 0, instances: int = 5) -> dict[str, float]:
    """Worst relative errors over ``instances`` random problems (C=4, F=3, D=5, K=6, batch 4)."""
    worst_t = worst_w = 0.0
    for k in range(instances):
        inst = random_instance(seed + k)
        worst_t = max(worst_t, check_tmatrix(inst)[0])
        worst_w = max(worst_w, check_classifier(inst, num_samples=8, seed=seed + k)[0])
    return {"max_rel_err_t": worst_t, "max_rel_err_w": worst_w}
