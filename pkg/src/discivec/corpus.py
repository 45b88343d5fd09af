"""Synthetic corpora and data augmentation.

Two corpus flavours exist. Feature-space corpora sample frames straight from a
GMM whose means are shifted by a speaker offset ``T_true phi_s`` and a
per-utterance channel offset. Signal-space corpora render harmonic "voices" to
waveforms and featurize them, so the waveform augmentations (additive noise at
a VAD-referenced SNR, reverberation, random cuts) can be applied.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.fft import dct, rfft

from ._fsutil import atomic_write
from .gmm import FeatureMatrix, GmmUbm

logger = logging.getLogger(__name__)

FRAME_MS = 25.0
SHIFT_MS = 10.0


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass
class SynthConfig:
    num_speakers: int = 50
    utts_per_speaker: int = 10
    frames_per_utt: tuple[int, int] = (300, 600)
    true_ivector_dim: int = 8
    channel_dim: int = 8
    channel_noise_std: float = 3.0
    num_components: int = 16
    feat_dim: int = 10
    speaker_scale: float = 0.25
    seed: int = 0
    mode: str = "feature"
    sample_rate: int = 8000
    speaker_prefix: str = "spk"

    def __post_init__(self):
        lo, hi = self.frames_per_utt
        if self.num_speakers < 1 or self.utts_per_speaker < 0 or self.true_ivector_dim < 1:
            raise ValueError("invalid synthetic corpus sizes")
        if self.num_components < 1 or self.feat_dim < 1 or self.channel_dim < 0:
            raise ValueError("invalid synthetic model dimensions")
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_utt must be a non-empty positive range")
        if self.mode not in ("feature", "signal"):
            raise ValueError(f"unknown corpus mode {self.mode!r}")
        if self.channel_noise_std < 0:
            raise ValueError("channel_noise_std must be non-negative")


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    features: np.ndarray | None = None
    signal: np.ndarray | None = None
    source: str | None = None
    aug_type: str = "clean"
    params: dict = field(default_factory=dict)

    @property
    def is_original(self) -> bool:
        return self.source is None


@dataclass
class Truth:
    ubm: GmmUbm
    T_true: np.ndarray
    channel_basis: np.ndarray
    speaker_phi: dict[str, np.ndarray]


@dataclass
class Corpus:
    utterances: list[Utterance]
    mode: str = "feature"
    sample_rate: int = 8000
    frame_rate: float = 100.0
    feat_dim: int = 10
    truth: Truth | None = None

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def subset(self, utterances: Sequence[Utterance]) -> "Corpus":
        return replace(self, utterances=list(utterances))


# ---------------------------------------------------------------------------
# synthesis


def _generating_model(cfg: SynthConfig):
    rng = _rng(cfg.seed, 0)
    C, F = cfg.num_components, cfg.feat_dim
    weights = rng.dirichlet(np.full(C, 20.0))
    means = 3.0 * rng.standard_normal((C, F))
    variances = rng.uniform(0.5, 1.5, (C, F))
    ubm = GmmUbm(weights, means, variances)
    T_true = cfg.speaker_scale * rng.standard_normal((C, F, cfg.true_ivector_dim))
    channel = cfg.speaker_scale * rng.standard_normal((C, F, cfg.channel_dim))
    return ubm, T_true, channel


def sample_frames(ubm: GmmUbm, offsets: np.ndarray, num_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Draw frames from the GMM with component means shifted by ``offsets`` (C x F)."""
    comp = rng.choice(ubm.num_components, size=num_frames, p=ubm.weights)
    noise = rng.standard_normal((num_frames, ubm.feat_dim))
    return ubm.means[comp] + offsets[comp] + np.sqrt(ubm.variances[comp]) * noise


def synth_corpus(cfg: SynthConfig) -> Corpus:
    if cfg.mode == "signal":
        return _synth_signal_corpus(cfg)
    ubm, T_true, channel = _generating_model(cfg)
    utts, phis = [], {}
    lo, hi = cfg.frames_per_utt
    for s in range(cfg.num_speakers):
        spk = f"{cfg.speaker_prefix}{s:04d}"
        phi = _rng(cfg.seed, 1, s).standard_normal(cfg.true_ivector_dim)
        phis[spk] = phi
        spk_offset = np.einsum("cfd,d->cf", T_true, phi)
        for u in range(cfg.utts_per_speaker):
            rng = _rng(cfg.seed, 2, s, u)
            x = cfg.channel_noise_std * rng.standard_normal(cfg.channel_dim)
            offset = spk_offset + np.einsum("cfd,d->cf", channel, x)
            frames = sample_frames(ubm, offset, int(rng.integers(lo, hi + 1)), rng)
            utts.append(Utterance(f"{spk}-u{u:03d}", spk, features=frames))
    return Corpus(utts, "feature", cfg.sample_rate, 100.0, cfg.feat_dim,
                  Truth(ubm, T_true, channel, phis))


@dataclass(frozen=True)
class Voice:
    f0: float
    harmonics: np.ndarray
    noise_taps: np.ndarray


def random_voice(rng: np.random.Generator, num_harmonics: int = 12) -> Voice:
    tilt = rng.uniform(0.3, 1.2)
    formant = rng.uniform(2.0, 8.0)
    h = np.arange(1, num_harmonics + 1)
    amps = np.exp(-tilt * h / 4.0) * (1.0 + np.exp(-0.5 * ((h - formant) / 1.5) ** 2))
    amps *= rng.uniform(0.7, 1.3, num_harmonics)
    taps = rng.standard_normal(8) * np.exp(-np.arange(8) / rng.uniform(1.0, 4.0))
    return Voice(float(rng.uniform(90.0, 260.0)), amps, taps)


def render_voice(voice: Voice, num_samples: int, sample_rate: int, rng: np.random.Generator,
                 channel_std: float = 0.0) -> np.ndarray:
    """Harmonic source with syllable-like on/off gating, breath noise and a short channel filter."""
    t = np.arange(num_samples) / sample_rate
    f0 = voice.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    sig = np.zeros(num_samples)
    for k, a in enumerate(voice.harmonics, 1):
        if k * voice.f0 < 0.45 * sample_rate:
            sig += a * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    gate = np.zeros(num_samples)
    pos = 0
    while pos < num_samples:
        on = int(rng.uniform(0.15, 0.5) * sample_rate)
        off = int(rng.uniform(0.05, 0.25) * sample_rate)
        gate[pos:pos + on] = 1.0
        pos += on + off
    ramp = np.hanning(int(0.02 * sample_rate) | 1)
    gate = np.convolve(gate, ramp / ramp.sum(), mode="same")
    breath = np.convolve(rng.standard_normal(num_samples), voice.noise_taps, mode="full")[:num_samples]
    sig = sig * gate + 0.05 * breath * gate
    if channel_std > 0:
        chan = np.zeros(6)
        chan[0] = 1.0
        chan[1:] = channel_std * 0.3 * rng.standard_normal(5)
        sig = np.convolve(sig, chan, mode="full")[:num_samples]
    return sig / (np.max(np.abs(sig)) + 1e-12) * 0.5


def _synth_signal_corpus(cfg: SynthConfig) -> Corpus:
    utts = []
    lo, hi = cfg.frames_per_utt
    for s in range(cfg.num_speakers):
        spk = f"{cfg.speaker_prefix}{s:04d}"
        voice = random_voice(_rng(cfg.seed, 1, s))
        for u in range(cfg.utts_per_speaker):
            rng = _rng(cfg.seed, 2, s, u)
            n_samples = int(rng.integers(lo, hi + 1)) * cfg.sample_rate // 100
            sig = render_voice(voice, n_samples, cfg.sample_rate, rng, cfg.channel_noise_std)
            utts.append(Utterance(f"{spk}-u{u:03d}", spk, signal=sig,
                                  features=featurize(sig, cfg.sample_rate, cfg.feat_dim)))
    return Corpus(utts, "signal", cfg.sample_rate, 100.0, cfg.feat_dim, None)


# ---------------------------------------------------------------------------
# framing, features, VAD


def frame_signal(signal: np.ndarray, sample_rate: int, frame_ms: float = FRAME_MS,
                 shift_ms: float = SHIFT_MS) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    flen = int(round(frame_ms * sample_rate / 1000))
    shift = int(round(shift_ms * sample_rate / 1000))
    if len(x) < flen:
        return np.empty((0, flen))
    count = 1 + (len(x) - flen) // shift
    idx = np.arange(flen)[None, :] + shift * np.arange(count)[:, None]
    return x[idx]


def frame_energies(signal: np.ndarray, sample_rate: int, frame_ms: float = FRAME_MS,
                   shift_ms: float = SHIFT_MS) -> np.ndarray:
    frames = frame_signal(signal, sample_rate, frame_ms, shift_ms)
    return np.sum(frames * frames, axis=1)


def vad_energy(signal: np.ndarray, sample_rate: int = 8000, threshold_rel: float = 0.1,
               frame_ms: float = FRAME_MS, shift_ms: float = SHIFT_MS) -> np.ndarray:
    """Frame is active iff its energy exceeds ``threshold_rel`` times the mean frame energy."""
    energy = frame_energies(signal, sample_rate, frame_ms, shift_ms)
    if len(energy) == 0:
        return np.zeros(0, dtype=bool)
    return energy > threshold_rel * energy.mean()


def featurize(signal: np.ndarray, sample_rate: int, num_ceps: int = 10, num_bands: int = 24) -> np.ndarray:
    """Cepstra from log energies of linearly spaced bands, 25 ms Hamming frames every 10 ms."""
    frames = frame_signal(signal, sample_rate)
    if len(frames) == 0:
        return np.empty((0, num_ceps))
    spec = np.abs(rfft(frames * np.hamming(frames.shape[1]), axis=1)) ** 2
    edges = np.linspace(1, spec.shape[1], num_bands + 1).astype(int)
    bands = np.stack([spec[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1)
    logb = np.log(bands + 1e-8)
    return dct(logb, type=2, norm="ortho", axis=1)[:, :num_ceps]


# ---------------------------------------------------------------------------
# noise, reverberation, cuts


def fit_length(noise: np.ndarray, length: int) -> np.ndarray:
    """Tile or crop ``noise`` to ``length`` samples."""
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) == 0:
        raise ValueError("empty noise signal")
    reps = -(-length // len(noise))
    return np.tile(noise, reps)[:length]


def _active_energy(x: np.ndarray, mask: np.ndarray, sample_rate: int) -> float:
    e = frame_energies(x, sample_rate)
    if len(e) != len(mask):
        raise ValueError("VAD mask does not match signal framing")
    return float(e[mask].sum())


def snr_scale(speech: np.ndarray, noise: np.ndarray, snr_db: float, vad_mask: np.ndarray,
              sample_rate: int = 8000) -> float:
    """Amplitude ``alpha`` that puts ``alpha * noise`` at ``snr_db`` below ``speech`` over the active frames."""
    mask = np.asarray(vad_mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot compute SNR reference: no active VAD frames")
    e_s = _active_energy(speech, mask, sample_rate)
    e_n = _active_energy(noise, mask, sample_rate)
    if e_n <= 0:
        raise ValueError("cannot compute SNR reference: noise has zero energy in active frames")
    return float(np.sqrt(e_s / (e_n * 10.0 ** (snr_db / 10.0))))


def measured_snr(speech: np.ndarray, scaled_noise: np.ndarray, vad_mask: np.ndarray,
                 sample_rate: int = 8000) -> float:
    mask = np.asarray(vad_mask, dtype=bool)
    return 10.0 * np.log10(_active_energy(speech, mask, sample_rate) / _active_energy(scaled_noise, mask, sample_rate))


def add_noise_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float, vad_mask: np.ndarray,
                  sample_rate: int = 8000) -> np.ndarray:
    """Mix ``noise`` (tiled/cropped to length) into ``speech`` at ``snr_db``.

    ``vad_mask`` must come from the original, uncorrupted speech.
    """
    speech = np.asarray(speech, dtype=np.float64)
    noise = fit_length(noise, len(speech))
    return speech + snr_scale(speech, noise, snr_db, vad_mask, sample_rate) * noise


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    room_id: str

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or len(taps) == 0:
            raise ValueError("RIR needs a non-empty 1-D tap vector")
        object.__setattr__(self, "taps", taps)


def apply_reverb(signal: np.ndarray, rir: Rir) -> np.ndarray:
    """Full convolution with the RIR, truncated to the input length."""
    x = np.asarray(signal, dtype=np.float64)
    return np.convolve(x, rir.taps)[:len(x)]


def synth_rir(room_seed: int, rt60_s: float, sample_rate: int = 8000) -> tuple[Rir, Rir]:
    """Two exponentially decaying noise RIRs from the same room (60 dB decay at ``rt60_s``)."""
    if rt60_s <= 0:
        raise ValueError("rt60_s must be positive")
    length = max(int(round(rt60_s * sample_rate)), 1)
    t = np.arange(length) / sample_rate
    envelope = 10.0 ** (-3.0 * t / rt60_s)
    room = f"room{room_seed}"
    pair = []
    for child in np.random.SeedSequence([int(room_seed) & 0xFFFFFFFF, 7]).spawn(2):
        taps = np.random.default_rng(child).standard_normal(length) * envelope
        pair.append(Rir(taps / np.sqrt(np.sum(taps * taps)), room))
    return pair[0], pair[1]


@dataclass(frozen=True)
class CutResult:
    data: np.ndarray | FeatureMatrix
    start: int
    stop: int
    skipped: bool = False

    @property
    def length(self) -> int:
        return self.stop - self.start


def random_cut(utt, rate: float | None = None, min_s: float = 3.0, max_s: float = 5.0,
               seed: int | np.random.Generator = 0) -> CutResult:
    """Contiguous segment of uniform duration in ``[min_s, max_s]`` at a uniform position.

    ``utt`` is a 1-D signal (``rate`` = sample rate), a 2-D frame array (``rate`` = frame
    rate) or a :class:`FeatureMatrix`. Too-short inputs come back untouched with ``skipped``.
    """
    if min_s >= max_s:
        raise ValueError("min_s must be below max_s")
    if isinstance(utt, FeatureMatrix):
        rate, arr = utt.frame_rate_hz, utt.frames
    else:
        arr = np.asarray(utt)
        if rate is None:
            raise ValueError("rate is required for raw arrays")
    total = arr.shape[0]
    if total < min_s * rate:
        logger.warning("utterance of %.2f s shorter than %.2f s, cut skipped", total / rate, min_s)
        return CutResult(utt, 0, total, skipped=True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo = int(np.ceil(min_s * rate))
    hi = int(np.floor(max_s * rate))
    length = int(np.clip(round(rng.uniform(min_s, max_s) * rate), lo, min(hi, total)))
    start = int(rng.integers(0, total - length + 1))
    seg = arr[start:start + length]
    data = FeatureMatrix(seg, rate) if isinstance(utt, FeatureMatrix) else seg
    return CutResult(data, start, start + length)


# ---------------------------------------------------------------------------
# noise sources


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def hum_noise(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.choice([50.0, 100.0])
    t = np.arange(n) / sample_rate
    sig = sum(np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 6))
    return sig + 0.05 * rng.standard_normal(n)


def babble_noise(n: int, sample_rate: int, rng: np.random.Generator, talkers: int = 5) -> np.ndarray:
    return sum(render_voice(random_voice(rng), n, sample_rate, rng) for _ in range(talkers))


NOISE_KINDS = ("white", "hum", "babble")


def make_noise(kind: str, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "white":
        return white_noise(n, rng)
    if kind == "hum":
        return hum_noise(n, sample_rate, rng)
    if kind == "babble":
        return babble_noise(n, sample_rate, rng)
    raise ValueError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentSpec:
    noise_fraction: float = 0.0
    reverb_fraction: float = 0.0
    joint_fraction: float = 0.0
    cut_fraction: float = 0.30
    snr_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    cut_min_s: float = 3.0
    cut_max_s: float = 5.0
    num_rooms: int = 8
    rt60_range: tuple[float, float] = (0.2, 0.7)
    vad_threshold_rel: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_fraction", "reverb_fraction", "joint_fraction", "cut_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.cut_min_s >= self.cut_max_s:
            raise ValueError("cut_min_s must be below cut_max_s")
        if not self.snr_db:
            raise ValueError("snr_db choices must be non-empty")


_AUG_CODES = {"noise": 1, "reverb": 2, "joint": 3, "cut": 4}


def room_rirs(spec: AugmentSpec, room: int, sample_rate: int) -> tuple[Rir, Rir]:
    lo, hi = spec.rt60_range
    rt60 = lo + (hi - lo) * (room + 0.5) / spec.num_rooms
    return synth_rir(spec.seed * 1000 + room, rt60, sample_rate)


def _select(n: int, fraction: float, seed: int, code: int) -> np.ndarray:
    k = int(round(fraction * n))
    return np.sort(_rng(seed, 100, code).permutation(n)[:k])


def augment_set(corpus: Corpus, spec: AugmentSpec) -> Corpus:
    """Originals plus derived copies at the requested fractions, each tagged with its provenance."""
    originals = [u for u in corpus.utterances if u.is_original]
    if not originals:
        raise ValueError("cannot augment an empty dataset")
    signal_mode = corpus.mode == "signal"
    if not signal_mode and (spec.reverb_fraction > 0 or spec.joint_fraction > 0):
        raise ValueError("reverberation needs a signal-space corpus")
    derived: list[Utterance] = []
    plan = [("noise", spec.noise_fraction), ("reverb", spec.reverb_fraction),
            ("joint", spec.joint_fraction), ("cut", spec.cut_fraction)]
    for kind, fraction in plan:
        code = _AUG_CODES[kind]
        for idx in _select(len(originals), fraction, spec.seed, code):
            src = originals[idx]
            rng = _rng(spec.seed, _key(src.utt_id), code)
            new = _augment_one(kind, src, spec, rng, corpus)
            if new is not None:
                derived.append(new)
    return corpus.subset(list(corpus.utterances) + derived)


def _augment_one(kind: str, src: Utterance, spec: AugmentSpec, rng: np.random.Generator,
                 corpus: Corpus) -> Utterance | None:
    sr = corpus.sample_rate
    uid = f"{src.utt_id}-{kind}"
    if kind == "cut":
        if corpus.mode == "signal":
            res = random_cut(src.signal, sr, spec.cut_min_s, spec.cut_max_s, rng)
        else:
            res = random_cut(src.features, corpus.frame_rate, spec.cut_min_s, spec.cut_max_s, rng)
        if res.skipped:
            return None
        params = {"start": res.start, "stop": res.stop}
        if corpus.mode == "signal":
            return Utterance(uid, src.speaker, featurize(res.data, sr, corpus.feat_dim), res.data,
                             src.utt_id, "cut", params)
        return Utterance(uid, src.speaker, res.data, None, src.utt_id, "cut", params)

    snr = float(spec.snr_db[int(rng.integers(len(spec.snr_db)))])
    if corpus.mode == "feature":
        feats = src.features
        sigma = feats.std(axis=0) * 10.0 ** (-snr / 20.0)
        noisy = feats + sigma * rng.standard_normal(feats.shape)
        return Utterance(f"{src.utt_id}-featnoise", src.speaker, noisy, None, src.utt_id, "featnoise",
                         {"snr_db": snr})

    speech = src.signal
    mask = vad_energy(speech, sr, spec.vad_threshold_rel)
    params: dict = {}
    if kind == "noise":
        noise_kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
        noise = make_noise(noise_kind, len(speech), sr, rng)
        alpha = snr_scale(speech, noise, snr, mask, sr)
        out = speech + alpha * noise
        params = {"noise": noise_kind, "snr_db": snr, "alpha": alpha}
    elif kind == "reverb":
        room = int(rng.integers(spec.num_rooms))
        rir, _ = room_rirs(spec, room, sr)
        out = apply_reverb(speech, rir)
        params = {"room_id": rir.room_id, "room": room}
    else:
        room = int(rng.integers(spec.num_rooms))
        rir_speech, rir_noise = room_rirs(spec, room, sr)
        noise_kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
        noise = make_noise(noise_kind, len(speech), sr, rng)
        rev_speech = apply_reverb(speech, rir_speech)
        rev_noise = apply_reverb(noise, rir_noise)
        alpha = snr_scale(rev_speech, rev_noise, snr, mask, sr)
        out = rev_speech + alpha * rev_noise
        params = {"room_id": rir_speech.room_id, "room": room, "noise": noise_kind, "snr_db": snr, "alpha": alpha}
    return Utterance(uid, src.speaker, featurize(out, sr, corpus.feat_dim), out, src.utt_id, kind, params)


# ---------------------------------------------------------------------------
# manifests and trials


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_manifest(path, utterances: Sequence[Utterance]) -> None:
    with atomic_write(path, "w") as fh:
        for u in utterances:
            params = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(u.params.items()))
            line = f"{u.utt_id} {u.speaker} {u.source or '-'} {u.aug_type}"
            fh.write((line + (" " + params if params else "")) + "\n")


def _parse_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_manifest(path) -> list[Utterance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 4:
                raise ValueError(f"{path}:{lineno}: expected 'utt spk source|- type [k=v ...]'")
            params = {}
            for item in parts[4:]:
                k, sep, v = item.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: bad parameter {item!r}")
                params[k] = _parse_value(v)
            out.append(Utterance(parts[0], parts[1], source=None if parts[2] == "-" else parts[2],
                                 aug_type=parts[3], params=params))
    return out


def make_trials(utterances: Sequence[Utterance]):
    """All unordered pairs of the given utterances, labelled by speaker identity."""
    from .plda import Trial

    trials = []
    for i in range(len(utterances)):
        for j in range(i + 1, len(utterances)):
            a, b = utterances[i], utterances[j]
            trials.append(Trial(a.utt_id, b.utt_id, a.speaker == b.speaker))
    return trials
