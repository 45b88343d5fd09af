"""i-vector extraction with generative EM and discriminative refinement of T."""

from .disc import Classifier, LabeledIvectorSet, TrainConfig, stage1_train, stage2_train
from .gmm import FeatureMatrix, GmmUbm, SuffStats, gmm_posteriors, train_ubm_em, utterance_stats
from .ivector import IVector, TMatrix, em_train_t, extract, normalize_t, precision
from .plda import PldaModel, compute_eer, train_plda

__version__ = "0.1.0"

__all__ = [
    "Classifier",
    "FeatureMatrix",
    "GmmUbm",
    "IVector",
    "LabeledIvectorSet",
    "PldaModel",
    "SuffStats",
    "TMatrix",
    "TrainConfig",
    "compute_eer",
    "em_train_t",
    "extract",
    "gmm_posteriors",
    "normalize_t",
    "precision",
    "stage1_train",
    "stage2_train",
    "train_plda",
    "train_ubm_em",
    "utterance_stats",
]
