"""End-to-end B/G/D comparison at desk scale.

B: generative T trained on clean data. G: generative T trained on clean plus
augmented data. D: G refined discriminatively (stage 1 + stage 2) on speakers
with enough original utterances. Each extractor feeds a PLDA trained on clean
or on clean + augmented i-vectors, and EER is measured on disjoint speakers.

Every stage writes its artifact into the work directory and reloads it, so a
rerun resumes from the last finished stage and fresh and resumed runs see the
same bytes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import io
from .corpus import AugmentSpec, SynthConfig, Utterance, augment_set, make_trials, read_manifest, \
    synth_corpus, write_manifest
from .disc import Classifier, EpochRecord, LabeledIvectorSet, TrainConfig, accuracy, filter_speakers, \
    read_loss_log, stage1_train, stage2_train
from .gmm import corpus_stats, stack_stats, train_ubm_em
from .ivector import em_train_t, extract_batch
from .plda import ScoreSet, compute_eer, train_backend, write_scores

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SYSTEMS = ("B", "G", "D")
PLDA_SETS = ("clean", "multi")
RUNTIME_KEYS = ("workers",)


@dataclass
class PipelineConfig:
    seed: int = 0
    num_train_speakers: int = 60
    num_eval_speakers: int = 20
    utts_per_speaker: int = 8
    frames_per_utt: tuple[int, int] = (300, 600)
    channel_noise_std: float = 3.0
    feat_dim: int = 10
    ubm_components: int = 16
    ubm_iters: int = 10
    tv_iters: int = 10
    plda_iters: int = 10
    lennorm: bool = True
    dims: dict[str, int] = field(default_factory=lambda: {"D400": 20, "D600": 30})
    systems: tuple[str, ...] = SYSTEMS
    plda_sets: tuple[str, ...] = PLDA_SETS
    workers: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=8))
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(noise_fraction=0.3, cut_fraction=0.3))

    def __post_init__(self):
        if any(d < 1 for d in self.dims.values()):
            raise ValueError("i-vector dimensions must be positive")
        if not self.dims:
            raise ValueError("at least one i-vector dimension is required")
        bad = [s for s in self.systems if s not in SYSTEMS] + [p for p in self.plda_sets if p not in PLDA_SETS]
        if bad:
            raise ValueError(f"unknown matrix entries: {bad}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_utt"] = list(self.frames_per_utt)
        d["systems"] = list(self.systems)
        d["plda_sets"] = list(self.plda_sets)
        d["augment"]["snr_db"] = list(self.augment.snr_db)
        d["augment"]["rt60_range"] = list(self.augment.rt60_range)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "augment" in d:
            aug = dict(d["augment"])
            for key in ("snr_db", "rt60_range"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augment"] = AugmentSpec(**aug)
        for key in ("frames_per_utt", "systems", "plda_sets"):
            if key in d:
                d[key] = tuple(d[key])
        if "dims" in d:
            d["dims"] = {str(k): int(v) for k, v in d["dims"].items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path, runtime: bool = True) -> None:
        """Write JSON; ``runtime=False`` drops keys that must not influence results."""
        d = self.to_dict()
        if not runtime:
            for key in RUNTIME_KEYS:
                d.pop(key)
        with io.atomic_write(path) as fh:
            fh.write(json.dumps(d, indent=2, sort_keys=True).encode() + b"\n")


def _cached(path: Path, compute: Callable, write: Callable, read: Callable):
    if not path.exists():
        write(path, compute())
    else:
        logger.info("reusing %s", path.name)
    return read(path)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, work_dir):
        self.cfg = cfg
        self.dir = Path(work_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.dir / name

    # -- data -------------------------------------------------------------

    def corpus(self) -> tuple[list[Utterance], dict[str, np.ndarray]]:
        feats_path, manifest_path = self.path("features.ivxf"), self.path("manifest.txt")
        if not (feats_path.exists() and manifest_path.exists()):
            c = self.cfg
            synth = SynthConfig(num_speakers=c.num_train_speakers + c.num_eval_speakers,
                                utts_per_speaker=c.utts_per_speaker, frames_per_utt=c.frames_per_utt,
                                channel_noise_std=c.channel_noise_std, feat_dim=c.feat_dim, seed=c.seed)
            corpus = synth_corpus(synth)
            train_ids = {f"spk{s:04d}" for s in range(c.num_train_speakers)}
            train = corpus.subset([u for u in corpus.utterances if u.speaker in train_ids])
            evals = [u for u in corpus.utterances if u.speaker not in train_ids]
            augmented = augment_set(train, c.augment)
            for u in evals:
                u.aug_type = "eval"
            utts = augmented.utterances + evals
            io.write_features(feats_path, ((u.utt_id, u.features) for u in utts))
            write_manifest(manifest_path, utts)
        utts = read_manifest(manifest_path)
        feats = io.read_features(feats_path)
        return utts, feats

    # -- stages -----------------------------------------------------------

    def run(self) -> dict:
        c = self.cfg
        c.dump(self.path("config.json"), runtime=False)
        utts, feats = self.corpus()
        train_clean = [u for u in utts if u.aug_type == "clean"]
        train_all = [u for u in utts if u.aug_type != "eval"]
        evals = [u for u in utts if u.aug_type == "eval"]

        ubm = _cached(self.path("ubm.ivxu"),
                      lambda: train_ubm_em([feats[u.utt_id] for u in train_clean], c.ubm_components,
                                           c.ubm_iters, c.seed),
                      io.write_ubm, io.read_ubm)
        stats = _cached(self.path("stats.ivxs"),
                        lambda: list(zip([u.utt_id for u in utts],
                                         corpus_stats([feats[u.utt_id] for u in utts], ubm, c.workers))),
                        io.write_stats, io.read_stats)

        def stacked(items):
            return stack_stats([stats[u.utt_id] for u in items])

        trials = make_trials(evals)
        trial_labels = np.array([t.target for t in trials])
        eer: dict = {}
        traces: dict = {}
        need_g = "G" in c.systems or "D" in c.systems
        for label, dim in sorted(c.dims.items()):
            extractors = {}
            if "B" in c.systems:
                extractors["B"] = _cached(
                    self.path(f"T_B_{label}.ivxt"),
                    lambda: em_train_t([stats[u.utt_id] for u in train_clean], ubm, dim, c.tv_iters, c.seed),
                    io.write_tmatrix, lambda p: io.read_tmatrix(p, ubm))
            if need_g:
                extractors["G"] = _cached(
                    self.path(f"T_G_{label}.ivxt"),
                    lambda: em_train_t([stats[u.utt_id] for u in train_all], ubm, dim, c.tv_iters, c.seed),
                    io.write_tmatrix, lambda p: io.read_tmatrix(p, ubm))
            if "D" in c.systems:
                extractors["D"], traces[label] = self._discriminative(extractors["G"], ubm, train_all, stacked,
                                                                      label)
            eer[label] = {}
            for plda_set in c.plda_sets:
                plda_utts = train_clean if plda_set == "clean" else train_all
                eer[label][plda_set] = {}
                for system in c.systems:
                    T = extractors[system]
                    name = f"{system}_{label}_{plda_set}"

                    def fit_backend(T=T, plda_utts=plda_utts):
                        phis = extract_batch(*stacked(plda_utts), T, workers=c.workers)
                        return train_backend(phis, _speaker_index(plda_utts), c.plda_iters, c.lennorm)

                    backend = _cached(self.path(f"plda_{name}.ivxp"), fit_backend, io.write_plda, io.read_plda)
                    eval_phis = extract_batch(*stacked(evals), T, workers=c.workers)
                    vectors = {u.utt_id: v for u, v in zip(evals, eval_phis)}
                    scores = backend.score_trials(trials, vectors)
                    write_scores(self.path(f"scores_{name}.txt"), trials, scores)
                    eer[label][plda_set][system] = compute_eer(ScoreSet(scores, trial_labels))

        report = {
            "schema_version": SCHEMA_VERSION,
            "seed": c.seed,
            "eer": eer,
            "trend_d_le_b": {lab: {ps: row["D"] <= row["B"] for ps, row in cols.items()}
                             for lab, cols in eer.items() if {"B", "D"} <= set(c.systems)},
            "loss_traces": {lab: [[r.epoch, r.stage, r.loss, r.train_acc] for r in tr] for lab, tr in traces.items()},
            "checksums": self.checksums(),
        }
        with io.atomic_write(self.path("report.json")) as fh:
            fh.write(json.dumps(report, indent=2, sort_keys=True).encode() + b"\n")
        return report

    def _discriminative(self, T_gen, ubm, train_all, stacked, label):
        c = self.cfg
        t_path, w_path = self.path(f"T_D_{label}.ivxt"), self.path(f"clf_D_{label}.ivxw")
        log_path = self.path(f"loss_D_{label}.tsv")
        if not (t_path.exists() and w_path.exists() and log_path.exists()):
            kept = filter_speakers(train_all, c.train.min_utts_per_speaker)
            labels = _speaker_index(kept)
            n, fbar = stacked(kept)
            K = int(labels.max()) + 1
            trace: list[EpochRecord] = []
            data = LabeledIvectorSet(extract_batch(n, fbar, T_gen, workers=c.workers), labels, K)
            clf = stage1_train(Classifier.zeros(T_gen.dim, K), data, c.train, trace)
            T_disc, clf = stage2_train(T_gen, ubm, clf, n, fbar, labels, c.train, trace)
            io.write_tmatrix(t_path, T_disc)
            io.write_classifier(w_path, clf)
            with io.atomic_write(log_path) as fh:
                fh.write("".join(r.line() + "\n" for r in trace).encode())
        return io.read_tmatrix(t_path, ubm), read_loss_log(log_path)

    def checksums(self) -> dict[str, str]:
        return {p.name: io.sha256_file(p) for p in sorted(self.dir.iterdir())
                if p.is_file() and p.name != "report.json" and not p.name.startswith(".")}


def _speaker_index(utts) -> np.ndarray:
    speakers = sorted({u.speaker for u in utts})
    index = {s: i for i, s in enumerate(speakers)}
    return np.array([index[u.speaker] for u in utts])


def run_experiment(cfg: PipelineConfig, work_dir) -> dict:
    return Pipeline(cfg, work_dir).run()


def format_table(report: dict) -> str:
    """Plain-text EER table (percent), one row per dim/PLDA set, one column per system."""
    lines = []
    for label, cols in sorted(report["eer"].items()):
        for plda_set, row in cols.items():
            cells = "  ".join(f"{s}={100 * v:6.2f}" for s, v in row.items())
            lines.append(f"{label:>6} {plda_set:>6}  {cells}")
    return "\n".join(lines)


@dataclass
class TrendConfig:
    seed: int = 0
    num_train_speakers: int = 100
    num_eval_speakers: int = 20
    utts_per_speaker: int = 10
    heldout_per_speaker: int = 2
    frames_per_utt: tuple[int, int] = (300, 600)
    channel_noise_std: float = 3.0
    ubm_components: int = 16
    dim: int = 20
    em_iters: int = 10
    plda_iters: int = 10
    workers: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=8))
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(noise_fraction=0.3, cut_fraction=0.3))


def trend_run(cfg: TrendConfig) -> dict:
    """B vs G vs D on one seed: stage-2 losses, held-out accuracy and clean-PLDA EER.

    The last ``heldout_per_speaker`` originals of each training speaker are kept out of
    every training step and only used to measure classification accuracy.
    """
    total = cfg.num_train_speakers + cfg.num_eval_speakers
    corpus = synth_corpus(SynthConfig(num_speakers=total, utts_per_speaker=cfg.utts_per_speaker,
                                      frames_per_utt=cfg.frames_per_utt, channel_noise_std=cfg.channel_noise_std,
                                      num_components=cfg.ubm_components, seed=cfg.seed))
    train_ids = {f"spk{s:04d}" for s in range(cfg.num_train_speakers)}
    keep = cfg.utts_per_speaker - cfg.heldout_per_speaker
    train, heldout, evals = [], [], []
    for u in corpus.utterances:
        if u.speaker not in train_ids:
            evals.append(u)
        elif int(u.utt_id.rsplit("-u", 1)[1]) < keep:
            train.append(u)
        else:
            heldout.append(u)
    train_all = augment_set(corpus.subset(train), replace(cfg.augment, seed=cfg.seed)).utterances

    ubm = train_ubm_em([u.features for u in train], cfg.ubm_components, cfg.em_iters, cfg.seed)
    everything = train_all + heldout + evals
    stats = dict(zip([u.utt_id for u in everything],
                     corpus_stats([u.features for u in everything], ubm, cfg.workers)))

    def stacked(items):
        return stack_stats([stats[u.utt_id] for u in items])

    T_B = em_train_t([stats[u.utt_id] for u in train], ubm, cfg.dim, cfg.em_iters, cfg.seed)
    T_G = em_train_t([stats[u.utt_id] for u in train_all], ubm, cfg.dim, cfg.em_iters, cfg.seed)

    tcfg = replace(cfg.train, seed=cfg.seed)
    kept = filter_speakers(train_all, tcfg.min_utts_per_speaker)
    speakers = sorted({u.speaker for u in kept})
    index = {s: i for i, s in enumerate(speakers)}
    labels = np.array([index[u.speaker] for u in kept])
    n, fbar = stacked(kept)
    K = len(speakers)
    trace: list[EpochRecord] = []
    data = LabeledIvectorSet(extract_batch(n, fbar, T_G, workers=cfg.workers), labels, K)
    clf_gen = stage1_train(Classifier.zeros(cfg.dim, K), data, tcfg, trace)
    T_D, clf_disc = stage2_train(T_G, ubm, clf_gen, n, fbar, labels, tcfg, trace)

    held = [u for u in heldout if u.speaker in index]
    held_labels = np.array([index[u.speaker] for u in held])

    def held_acc(T, clf):
        phis = extract_batch(*stacked(held), T, workers=cfg.workers)
        return accuracy(clf, LabeledIvectorSet(phis, held_labels, K))

    trials = make_trials(evals)
    trial_labels = np.array([t.target for t in trials])
    train_spk = _speaker_index(train)

    def eer(T):
        backend = train_backend(extract_batch(*stacked(train), T, workers=cfg.workers), train_spk,
                                cfg.plda_iters, True)
        vecs = dict(zip([u.utt_id for u in evals], extract_batch(*stacked(evals), T, workers=cfg.workers)))
        return compute_eer(ScoreSet(backend.score_trials(trials, vecs), trial_labels))

    stage1 = [r for r in trace if r.stage == 1]
    stage2 = [r for r in trace if r.stage == 2]
    return {
        "seed": cfg.seed,
        "stage1_final_loss": stage1[-1].loss if stage1 else None,
        "stage2_entry_loss": stage2[0].loss,
        "stage2_final_loss": stage2[-1].loss,
        "heldout_acc_generative": held_acc(T_G, clf_gen),
        "heldout_acc_discriminative": held_acc(T_D, clf_disc),
        "eer": {"B": eer(T_B), "G": eer(T_G), "D": eer(T_D)},
    }
