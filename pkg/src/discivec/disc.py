"""Logistic-regression speaker classifier and discriminative refinement of the extractor.

Stage 1 fits the classifier on fixed i-vectors. Stage 2 updates the classifier
and T jointly, re-extracting i-vectors from cached normalized statistics for
every minibatch and backpropagating through the closed-form extraction.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from ._fsutil import atomic_write
from .gmm import GmmUbm
from .ivector import TMatrix, denormalize_t, extract_batch, normalize_t

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Classifier:
    """Weights ``W`` of shape ``(D, K)``, or ``(D + 1, K)`` with a bias row appended."""

    W: np.ndarray
    use_bias: bool = False

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] < 2:
            raise ValueError("classifier needs a 2-D weight matrix with K >= 2")
        if not np.all(np.isfinite(W)):
            raise ValueError("classifier weights must be finite")
        object.__setattr__(self, "W", W)

    @classmethod
    def zeros(cls, dim: int, num_classes: int, use_bias: bool = False) -> "Classifier":
        return cls(np.zeros((dim + int(use_bias), num_classes)), use_bias)

    @property
    def dim(self) -> int:
        return self.W.shape[0] - int(self.use_bias)

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def _inputs(self, phis: np.ndarray) -> np.ndarray:
        phis = np.atleast_2d(phis)
        if phis.shape[1] != self.dim:
            raise ValueError(f"i-vector dim {phis.shape[1]} does not match classifier dim {self.dim}")
        if self.use_bias:
            phis = np.hstack([phis, np.ones((len(phis), 1))])
        return phis

    def logits(self, phis: np.ndarray) -> np.ndarray:
        return self._inputs(phis) @ self.W


@dataclass(frozen=True)
class LabeledIvectorSet:
    ivectors: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.ivectors, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (x.shape[0],):
            raise ValueError("labels must align with i-vectors")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label out of range")
        object.__setattr__(self, "ivectors", x)
        object.__setattr__(self, "labels", y)

    def onehot(self) -> np.ndarray:
        s = np.zeros((len(self.labels), self.num_classes))
        s[np.arange(len(self.labels)), self.labels] = 1.0
        return s


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    lr_stage1: float = 1e-1
    lr_stage2: float = 1e-3
    batch_size: int = 256
    l2_tmat: float = 0.0
    min_utts_per_speaker: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.min_utts_per_speaker < 1 or self.l2_tmat < 0:
            raise ValueError("invalid training configuration")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: int
    loss: float
    train_acc: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.stage}\t{self.loss:.10g}\t{self.train_acc:.6f}"


def write_loss_log(path, trace: Sequence[EpochRecord]) -> None:
    with atomic_write(path, "w") as fh:
        for rec in trace:
            fh.write(rec.line() + "\n")


def read_loss_log(path) -> list[EpochRecord]:
    with open(path) as fh:
        return [EpochRecord(int(e), int(s), float(l), float(a))
                for e, s, l, a in (line.rstrip("\n").split("\t") for line in fh if line.strip())]


def filter_speakers(utterances: Sequence, min_utts: int) -> list:
    """Keep speakers with at least ``min_utts`` original utterances, with all their augmented copies.

    Items need ``speaker`` and ``source`` attributes; ``source is None`` marks an original.
    """
    if min_utts < 1:
        raise ValueError("min_utts must be >= 1")
    counts = Counter(u.speaker for u in utterances if u.source is None)
    keep = {spk for spk, cnt in counts.items() if cnt >= min_utts}
    out = [u for u in utterances if u.speaker in keep]
    if not out:
        raise ValueError("no speakers survive filter")
    return out


def softmax_posteriors(clf: Classifier, phi: np.ndarray) -> np.ndarray:
    z = clf.logits(phi)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if np.ndim(phi) == 1 else p


def cross_entropy(clf: Classifier, data: LabeledIvectorSet, reduction: str = "sum") -> float:
    """Multi-class cross-entropy ``-sum_n log p(label_n | phi_n)``; ``reduction="mean"`` divides by N."""
    z = clf.logits(data.ivectors)
    nll = logsumexp(z, axis=1) - z[np.arange(len(z)), data.labels]
    total = float(nll.sum())
    if reduction == "mean":
        return total / max(len(z), 1)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def accuracy(clf: Classifier, data: LabeledIvectorSet) -> float:
    if len(data.labels) == 0:
        return 0.0
    return float(np.mean(clf.logits(data.ivectors).argmax(axis=1) == data.labels))


def grad_classifier(clf: Classifier, data: LabeledIvectorSet) -> np.ndarray:
    """``dE/dW = sum_n x_n (p_n - s_n)'`` for the summed cross-entropy."""
    p = softmax_posteriors(clf, data.ivectors)
    return clf._inputs(data.ivectors).T @ (p - data.onehot())


def _forward_backward(tbar: np.ndarray, gram: np.ndarray, clf: Classifier, n: np.ndarray,
                      fbar: np.ndarray, labels: np.ndarray):
    """Summed cross-entropy of a batch plus its gradients w.r.t. ``W`` and the normalized blocks."""
    D = tbar.shape[2]
    L = np.einsum("nc,cde->nde", n, gram)
    idx = np.arange(D)
    L[:, idx, idx] += 1.0
    rhs = np.einsum("cfd,ncf->nd", tbar, fbar)
    factors = [cho_factor(Li, lower=True) for Li in L]
    phis = np.array([cho_solve(cf, b) for cf, b in zip(factors, rhs)]).reshape(len(n), D)

    z = clf.logits(phis)
    lse = logsumexp(z, axis=1)
    rows = np.arange(len(labels))
    loss = float((lse - z[rows, labels]).sum())
    resid = np.exp(z - lse[:, None])
    resid[rows, labels] -= 1.0
    grad_w = clf._inputs(phis).T @ resid

    g = resid @ clf.W[:D].T  # dE/dphi
    y = np.array([cho_solve(cf, gi) for cf, gi in zip(factors, g)]).reshape(len(n), D)
    sym = np.einsum("nc,nd,ne->cde", n, y, phis)
    sym = sym + sym.transpose(0, 2, 1)
    grad_tbar = np.einsum("ncf,nd->cfd", fbar, y) - np.einsum("cfd,cde->cfe", tbar, sym)
    return loss, grad_w, grad_tbar, phis


def grad_tmatrix(T: TMatrix, ubm: GmmUbm, clf: Classifier, n: np.ndarray, fbar: np.ndarray,
                 labels: np.ndarray, l2: float = 0.0, t_init: TMatrix | None = None) -> np.ndarray:
    """Gradient of the summed batch cross-entropy (plus ``l2 * ||T - T_init||_F^2``) w.r.t. the raw T blocks."""
    T = normalize_t(T, ubm)
    if fbar.shape[1:] != T.shape[:2] or n.shape != fbar.shape[:2]:
        raise ValueError("statistics do not match T dimensions")
    if clf.dim != T.dim:
        raise ValueError("classifier dim does not match i-vector dim")
    _, _, grad_tbar, _ = _forward_backward(T.normalized, T.gram, clf, n, fbar, np.asarray(labels))
    grad = grad_tbar / np.sqrt(ubm.variances)[:, :, None]
    if l2 > 0:
        if t_init is None:
            raise ValueError("L2 regularization needs t_init")
        grad = grad + 2.0 * l2 * (T.blocks - t_init.blocks)
    return grad


def _batches(num: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(num)
    for start in range(0, num, batch_size):
        yield order[start:start + batch_size]


def stage1_train(clf: Classifier, data: LabeledIvectorSet, cfg: TrainConfig,
                 trace: list | None = None) -> Classifier:
    """Plain minibatch SGD on the classifier alone (mean cross-entropy per batch)."""
    rng = np.random.default_rng([cfg.seed, 1])
    W = clf.W.copy()
    current = clf
    initial = cross_entropy(clf, data, "mean")
    for epoch in range(cfg.stage1_epochs):
        for batch in _batches(len(data.labels), cfg.batch_size, rng):
            sub = LabeledIvectorSet(data.ivectors[batch], data.labels[batch], data.num_classes)
            W -= cfg.lr_stage1 / len(batch) * grad_classifier(current, sub)
            current = Classifier(W.copy(), clf.use_bias)
        loss = cross_entropy(current, data, "mean")
        if not np.isfinite(loss) or loss > 10 * max(initial, 1e-12):
            raise FloatingPointError(f"stage-1 diverged at epoch {epoch}: loss {loss:.4g} vs initial {initial:.4g}")
        if trace is not None:
            trace.append(EpochRecord(epoch, 1, loss, accuracy(current, data)))
        logger.info("stage1 epoch %d loss %.6f", epoch, loss)
    return current


def stage2_train(T: TMatrix, ubm: GmmUbm, clf: Classifier, n: np.ndarray, fbar: np.ndarray,
                 labels: np.ndarray, cfg: TrainConfig, trace: list | None = None) -> tuple[TMatrix, Classifier]:
    """Joint SGD on the classifier and T, starting from a generatively trained T.

    The L2 pull towards the initial T is applied as an exact proximal step, which
    stays stable for any ``l2_tmat`` (a plain gradient step diverges once
    ``2 * lr * l2_tmat > 2``).
    """
    if T.provenance == "random":
        raise ValueError("generative initialization required: refining a randomly initialised T does not converge")
    labels = np.asarray(labels, dtype=np.int64)
    if n.shape != fbar.shape[:2] or len(labels) != len(n):
        raise ValueError("statistics and labels do not align")
    T = normalize_t(T, ubm)
    sqrt_var = np.sqrt(ubm.variances)[:, :, None]
    t_init = T.blocks.copy()
    blocks = T.blocks.copy()
    W = clf.W.copy()
    lr, lam = cfg.lr_stage2, cfg.l2_tmat
    rng = np.random.default_rng([cfg.seed, 2])
    K = clf.num_classes

    def full_loss(blocks, W):
        cur = normalize_t(replace(T, blocks=blocks, normalized=None), ubm)
        c = Classifier(W, clf.use_bias)
        data = LabeledIvectorSet(extract_batch(n, fbar, cur), labels, K)
        reg = lam * float(np.sum((blocks - t_init) ** 2))
        return cross_entropy(c, data, "mean") + reg, accuracy(c, data)

    entry, entry_acc = full_loss(blocks, W)
    if not np.isfinite(entry):
        raise FloatingPointError("non-finite loss at stage-2 entry")
    if trace is not None:
        trace.append(EpochRecord(-1, 2, entry, entry_acc))
    for epoch in range(cfg.stage2_epochs):
        for batch in _batches(len(n), cfg.batch_size, rng):
            tbar = blocks / sqrt_var
            gram = np.einsum("cfd,cfe->cde", tbar, tbar)
            _, g_w, g_tbar, _ = _forward_backward(tbar, gram, Classifier(W, clf.use_bias),
                                                  n[batch], fbar[batch], labels[batch])
            step = lr / len(batch)
            W = W - step * g_w
            blocks = blocks - step * (g_tbar / sqrt_var)
            if lam > 0:
                blocks = (blocks + 2.0 * lr * lam * t_init) / (1.0 + 2.0 * lr * lam)
        loss, acc = full_loss(blocks, W)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss in stage-2 epoch {epoch}")
        if trace is not None:
            trace.append(EpochRecord(epoch, 2, loss, acc))
        logger.info("stage2 epoch %d loss %.6f acc %.4f", epoch, loss, acc)
    refined = denormalize_t(blocks / sqrt_var, ubm, "discriminative")
    return replace(refined, blocks=blocks), Classifier(W, clf.use_bias)
