"""``discivec`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Each command
prints one ``OK key=value ...`` line on success. Defaults come from a JSON
pipeline config (``--config`` or ``$DISCIVEC_CONFIG``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, io
from ._fsutil import atomic_write
from .corpus import AugmentSpec, Corpus, SynthConfig, augment_set, make_trials, read_manifest, synth_corpus, \
    write_manifest
from .disc import Classifier, LabeledIvectorSet, TrainConfig, filter_speakers, stage1_train, stage2_train, \
    write_loss_log
from .experiment import PLDA_SETS, SYSTEMS, PipelineConfig, format_table, run_experiment
from .gmm import FeatureMatrix, corpus_stats, stack_stats, train_ubm_em
from .ivector import em_train_t, extract_batch, random_tmatrix
from .plda import ScoreSet, compute_eer, read_scores, read_trials, train_backend, write_scores, write_trials

CONFIG_ENV = "DISCIVEC_CONFIG"
EXIT_USAGE = 1
EXIT_DATA = 2

logger = logging.getLogger("discivec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ok(**items) -> None:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    print("OK " + " ".join(f"{k}={fmt(v)}" for k, v in items.items()))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def _pick(flag, default):
    return default if flag is None else flag


# ---------------------------------------------------------------------------
# corpus directories: corpus.json, manifest.txt, features.ivxf[, signals.ivxf]


def save_corpus(corpus: Corpus, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {"mode": corpus.mode, "sample_rate": corpus.sample_rate, "frame_rate": corpus.frame_rate,
            "feat_dim": corpus.feat_dim, "num_utterances": len(corpus.utterances)}
    with atomic_write(out / "corpus.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    io.write_features(out / "features.ivxf", ((u.utt_id, u.features) for u in corpus.utterances))
    if corpus.mode == "signal":
        io.write_features(out / "signals.ivxf", ((u.utt_id, u.signal[None, :]) for u in corpus.utterances))
    write_manifest(out / "manifest.txt", corpus.utterances)


def load_corpus(path) -> Corpus:
    path = _existing(path)
    meta = json.loads((path / "corpus.json").read_text())
    utts = read_manifest(path / "manifest.txt")
    feats = io.read_features(path / "features.ivxf")
    signals = io.read_features(path / "signals.ivxf") if meta["mode"] == "signal" else {}
    for u in utts:
        if u.utt_id not in feats:
            raise ValueError(f"{u.utt_id}: listed in manifest but missing from features")
        u.features = feats[u.utt_id]
        if u.utt_id in signals:
            u.signal = signals[u.utt_id][0]
    return Corpus(utts, meta["mode"], meta["sample_rate"], meta["frame_rate"], meta["feat_dim"])


def _select(utts, subset: str):
    if subset == "clean":
        return [u for u in utts if u.is_original]
    return list(utts)


def _speaker_labels(utts) -> np.ndarray:
    speakers = sorted({u.speaker for u in utts})
    index = {s: i for i, s in enumerate(speakers)}
    return np.array([index[u.speaker] for u in utts])


def _stats_for(stats: dict, utts):
    missing = [u.utt_id for u in utts if u.utt_id not in stats]
    if missing:
        raise ValueError(f"no statistics for {len(missing)} utterances, e.g. {missing[0]}")
    return [stats[u.utt_id] for u in utts]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: PipelineConfig) -> None:
    synth = SynthConfig(num_speakers=_pick(args.speakers, cfg.num_train_speakers + cfg.num_eval_speakers),
                        utts_per_speaker=_pick(args.utts, cfg.utts_per_speaker),
                        frames_per_utt=tuple(_pick(args.frames, cfg.frames_per_utt)),
                        channel_noise_std=_pick(args.channel_std, cfg.channel_noise_std),
                        feat_dim=_pick(args.feat_dim, cfg.feat_dim), seed=_pick(args.seed, cfg.seed),
                        mode=args.mode, speaker_prefix=args.prefix)
    corpus = synth_corpus(synth)
    save_corpus(corpus, Path(args.out))
    _ok(utts=len(corpus.utterances), speakers=len(corpus.speakers()), mode=corpus.mode)


def cmd_augment(args, cfg: PipelineConfig) -> None:
    corpus = load_corpus(args.corpus)
    base = cfg.augment
    spec = AugmentSpec(noise_fraction=_pick(args.noise, base.noise_fraction),
                       reverb_fraction=_pick(args.reverb, base.reverb_fraction),
                       joint_fraction=_pick(args.joint, base.joint_fraction),
                       cut_fraction=_pick(args.cut, base.cut_fraction),
                       snr_db=tuple(_pick(args.snr, base.snr_db)), cut_min_s=base.cut_min_s,
                       cut_max_s=base.cut_max_s, num_rooms=base.num_rooms, rt60_range=base.rt60_range,
                       vad_threshold_rel=base.vad_threshold_rel, seed=_pick(args.seed, base.seed))
    out = augment_set(corpus, spec)
    save_corpus(out, Path(args.out))
    _ok(utts=len(out.utterances), derived=len(out.utterances) - len(corpus.utterances))


def cmd_train_ubm(args, cfg: PipelineConfig) -> None:
    corpus = load_corpus(args.corpus)
    utts = _select(corpus.utterances, args.subset)
    ubm = train_ubm_em([u.features for u in utts], _pick(args.components, cfg.ubm_components),
                       _pick(args.iters, cfg.ubm_iters), _pick(args.seed, cfg.seed))
    io.write_ubm(args.out, ubm)
    _ok(components=ubm.num_components, feat_dim=ubm.feat_dim, checksum=ubm.checksum()[:16])


def cmd_stats(args, cfg: PipelineConfig) -> None:
    corpus = load_corpus(args.corpus)
    ubm = io.read_ubm(_existing(args.ubm))
    stats = corpus_stats([FeatureMatrix(u.features) for u in corpus.utterances], ubm,
                         _pick(args.workers, cfg.workers))
    io.write_stats(args.out, zip([u.utt_id for u in corpus.utterances], stats))
    _ok(utts=len(stats), frames=f"{sum(float(s.n.sum()) for s in stats):.0f}")


def cmd_train_t(args, cfg: PipelineConfig) -> None:
    ubm = io.read_ubm(_existing(args.ubm))
    stats = io.read_stats(_existing(args.stats))
    if args.manifest:
        utts = _select(read_manifest(_existing(args.manifest)), args.subset)
        items = _stats_for(stats, utts)
    else:
        items = list(stats.values())
    dim = _pick(args.dim, min(cfg.dims.values()))
    T = em_train_t(items, ubm, dim, _pick(args.iters, cfg.tv_iters), _pick(args.seed, cfg.seed))
    io.write_tmatrix(args.out, T)
    _ok(utts=len(items), dim=T.dim, provenance=T.provenance)


def _train_config(args, cfg: PipelineConfig) -> TrainConfig:
    base = cfg.train
    return TrainConfig(stage1_epochs=_pick(args.stage1_epochs, base.stage1_epochs),
                       stage2_epochs=_pick(args.stage2_epochs, base.stage2_epochs),
                       lr_stage1=_pick(args.lr1, base.lr_stage1), lr_stage2=_pick(args.lr2, base.lr_stage2),
                       batch_size=_pick(args.batch_size, base.batch_size), l2_tmat=_pick(args.l2, base.l2_tmat),
                       min_utts_per_speaker=_pick(args.min_utts, base.min_utts_per_speaker),
                       seed=_pick(args.seed, base.seed))


def cmd_train_disc(args, cfg: PipelineConfig) -> None:
    tcfg = _train_config(args, cfg)
    ubm = io.read_ubm(_existing(args.ubm))
    if args.init == "random":
        if args.tmat:
            shape = io.read_tmatrix(_existing(args.tmat)).shape
            dim = shape[2]
        else:
            dim = _pick(args.dim, min(cfg.dims.values()))
        T = random_tmatrix(ubm.num_components, ubm.feat_dim, dim, tcfg.seed)
    else:
        if not args.tmat:
            raise UsageError("--tmat is required with --init generative")
        T = io.read_tmatrix(_existing(args.tmat), ubm)
        if T.provenance == "random":
            raise ValueError("generative initialization required: the given T was never trained by EM")
    if T.provenance == "random":
        raise ValueError("generative initialization required: refining a randomly initialised T does not converge")
    stats = io.read_stats(_existing(args.stats))
    utts = filter_speakers(read_manifest(_existing(args.manifest)), tcfg.min_utts_per_speaker)
    labels = _speaker_labels(utts)
    n, fbar = stack_stats(_stats_for(stats, utts))
    K = int(labels.max()) + 1
    trace = []
    data = LabeledIvectorSet(extract_batch(n, fbar, T, workers=_pick(args.workers, cfg.workers)), labels, K)
    clf = stage1_train(Classifier.zeros(T.dim, K), data, tcfg, trace)
    T_disc, clf = stage2_train(T, ubm, clf, n, fbar, labels, tcfg, trace)
    io.write_tmatrix(args.out, T_disc)
    if args.classifier:
        io.write_classifier(args.classifier, clf)
    if args.loss_log:
        write_loss_log(args.loss_log, trace)
    stage2 = [r for r in trace if r.stage == 2]
    _ok(speakers=K, utts=len(utts), entry_loss=stage2[0].loss, final_loss=stage2[-1].loss,
        train_acc=stage2[-1].train_acc)


def cmd_extract(args, cfg: PipelineConfig) -> None:
    ubm = io.read_ubm(_existing(args.ubm))
    T = io.read_tmatrix(_existing(args.tmat), ubm)
    stats = io.read_stats(_existing(args.stats))
    ids = list(stats)
    if not ids:
        raise ValueError("statistics archive is empty")
    phis = extract_batch(*stack_stats([stats[k] for k in ids]), T, workers=_pick(args.workers, cfg.workers))
    io.write_ivectors(args.out, zip(ids, phis))
    _ok(utts=len(ids), dim=T.dim)


def cmd_train_plda(args, cfg: PipelineConfig) -> None:
    vectors = io.read_ivectors(_existing(args.ivectors))
    utts = _select(read_manifest(_existing(args.manifest)), args.subset)
    utts = [u for u in utts if u.utt_id in vectors]
    if not utts:
        raise ValueError("no manifest utterance has an i-vector")
    lennorm = cfg.lennorm if args.lennorm is None else args.lennorm
    backend = train_backend(np.stack([vectors[u.utt_id] for u in utts]), _speaker_labels(utts),
                            _pick(args.iters, cfg.plda_iters), lennorm)
    io.write_plda(args.out, backend)
    _ok(utts=len(utts), speakers=len({u.speaker for u in utts}), dim=backend.model.dim)


def cmd_trials(args, cfg: PipelineConfig) -> None:
    utts = _select(read_manifest(_existing(args.manifest)), "clean")
    if args.prefix:
        utts = [u for u in utts if u.speaker.startswith(args.prefix)]
    trials = make_trials(utts)
    if not trials:
        raise ValueError("no trials: need at least two utterances")
    write_trials(args.out, trials)
    _ok(trials=len(trials), targets=sum(t.target for t in trials))


def cmd_score(args, cfg: PipelineConfig) -> None:
    backend = io.read_plda(_existing(args.plda))
    vectors = io.read_ivectors(_existing(args.ivectors))
    trials = read_trials(_existing(args.trials))
    scores = backend.score_trials(trials, vectors)
    write_scores(args.out, trials, scores)
    _ok(trials=len(trials))


def cmd_eval(args, cfg: PipelineConfig) -> None:
    scored = read_scores(_existing(args.scores))
    truth = {(t.enroll, t.test): t.target for t in read_trials(_existing(args.trials))}
    labels = []
    for e, t, _ in scored:
        if (e, t) not in truth:
            raise ValueError(f"score for unknown trial {e} {t}")
        labels.append(truth[(e, t)])
    eer = compute_eer(ScoreSet(np.array([s for _, _, s in scored]), np.array(labels)))
    _ok(eer=eer, trials=len(labels))


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    res = gradcheck.run(seed=args.seed, instances=args.instances)
    passed = res["max_rel_err_t"] < args.tol_t and res["max_rel_err_w"] < args.tol_w
    line = f"max_rel_err_t={res['max_rel_err_t']:.3e} max_rel_err_w={res['max_rel_err_w']:.3e}"
    if not passed:
        print(f"FAIL {line}", file=sys.stderr)
        return EXIT_DATA
    print(f"OK {line}")
    return 0


def cmd_experiment(args, cfg: PipelineConfig) -> None:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.augment.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.dims:
        cfg.dims = dict(args.dims)
    if args.systems:
        cfg.systems = tuple(args.systems)
    if args.plda_sets:
        cfg.plda_sets = tuple(args.plda_sets)
    cfg = PipelineConfig.from_dict(cfg.to_dict())
    report = run_experiment(cfg, args.out)
    if args.table:
        print(format_table(report), file=sys.stderr)
    cells = sum(len(row) for cols in report["eer"].values() for row in cols.values())
    _ok(cells=cells, report=str(Path(args.out) / "report.json"))


# ---------------------------------------------------------------------------
# parser


def _csv(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc))
    return parse


def _dims(text):
    out = []
    for item in text.split(","):
        label, sep, value = item.partition("=")
        if not sep:
            value, label = label, f"D{label}"
        try:
            out.append((label, int(value)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad dimension {item!r}")
    return out


def _choices(allowed):
    def parse(text):
        items = text.split(",")
        bad = [x for x in items if x not in allowed]
        if bad:
            raise argparse.ArgumentTypeError(f"unknown {bad}, choose from {','.join(allowed)}")
        return items
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="discivec", description="Discriminatively refined i-vector toolkit.")
    p.add_argument("--config", help=f"pipeline config JSON (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus directory")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int)
    s.add_argument("--utts", type=int)
    s.add_argument("--frames", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--channel-std", type=float)
    s.add_argument("--feat-dim", type=int)
    s.add_argument("--mode", choices=("feature", "signal"), default="feature")
    s.add_argument("--prefix", default="spk")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("augment", help="add noisy, reverberant and cut copies")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float)
    s.add_argument("--reverb", type=float)
    s.add_argument("--joint", type=float)
    s.add_argument("--cut", type=float)
    s.add_argument("--snr", type=_csv(float), help="comma-separated SNR choices in dB")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train-ubm", help="diagonal GMM-UBM by k-means++ seeded EM")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--subset", choices=("all", "clean"), default="clean")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_ubm)

    s = sub.add_parser("stats", help="zero/first-order statistics for every utterance")
    s.add_argument("--corpus", required=True)
    s.add_argument("--ubm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train-t", help="EM training of the total-variability matrix")
    s.add_argument("--stats", required=True)
    s.add_argument("--ubm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.add_argument("--subset", choices=("all", "clean"), default="all")
    s.add_argument("--dim", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_t)

    s = sub.add_parser("train-disc", help="stage-1 classifier then joint classifier + T refinement")
    s.add_argument("--stats", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--ubm", required=True)
    s.add_argument("--tmat")
    s.add_argument("--init", choices=("generative", "random"), default="generative")
    s.add_argument("--dim", type=int, help="i-vector dim for --init random without --tmat")
    s.add_argument("--out", required=True)
    s.add_argument("--classifier")
    s.add_argument("--loss-log")
    s.add_argument("--stage1-epochs", type=int)
    s.add_argument("--stage2-epochs", type=int)
    s.add_argument("--lr1", type=float)
    s.add_argument("--lr2", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--l2", type=float)
    s.add_argument("--min-utts", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_disc)

    s = sub.add_parser("extract", help="closed-form i-vectors from statistics")
    s.add_argument("--stats", required=True)
    s.add_argument("--ubm", required=True)
    s.add_argument("--tmat", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-plda", help="two-covariance PLDA backend")
    s.add_argument("--ivectors", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subset", choices=("all", "clean"), default="all",
                   help="clean: originals only; all: multi-condition")
    s.add_argument("--iters", type=int)
    s.add_argument("--lennorm", action=argparse.BooleanOptionalAction, default=None)
    s.set_defaults(func=cmd_train_plda)

    s = sub.add_parser("trials", help="all-pairs trial list over original utterances")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prefix", help="only speakers whose id starts with this")
    s.set_defaults(func=cmd_trials)

    s = sub.add_parser("score", help="PLDA log-likelihood ratio per trial")
    s.add_argument("--plda", required=True)
    s.add_argument("--ivectors", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="equal error rate of a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--trials", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of both analytic gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=5)
    s.add_argument("--tol-t", type=float, default=1e-4)
    s.add_argument("--tol-w", type=float, default=1e-6)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="B/G/D x clean/multi x dims matrix, resumable")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--dims", type=_dims, help="e.g. D400=20,D600=30")
    s.add_argument("--systems", type=_choices(SYSTEMS))
    s.add_argument("--plda-sets", type=_choices(PLDA_SETS))
    s.add_argument("--table", action="store_true", help="print the EER table to stderr")
    s.set_defaults(func=cmd_experiment)
    return p


def _outputs(args) -> list[Path]:
    names = ("out", "classifier", "loss_log")
    return [Path(getattr(args, n)) for n in names if getattr(args, n, None)]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outputs = [p for p in _outputs(args) if not p.exists() and args.command != "experiment"]
    try:
        config_path = args.config or os.environ.get(CONFIG_ENV)
        cfg = PipelineConfig.load(_existing(config_path)) if config_path else PipelineConfig()
        code = args.func(args, cfg)
        return code or 0
    except UsageError as exc:
        print(f"discivec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FloatingPointError, OSError, KeyError, json.JSONDecodeError) as exc:
        for p in outputs:
            if p.is_file():
                p.unlink()
        print(f"discivec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
