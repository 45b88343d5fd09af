"""Little-endian binary model and archive files.

Every file starts with a 4-byte magic and a ``u32`` version. Writers go through a
temporary file and an atomic rename, so a failed command never leaves a partial
artifact behind.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ._fsutil import atomic_write
from .disc import Classifier
from .gmm import GmmUbm, SuffStats
from .ivector import PROVENANCES, TMatrix
from .plda import Backend, PldaModel

VERSION = 1

MAGIC_FEATS = b"IVXF"
MAGIC_STATS = b"IVXS"
MAGIC_IVECS = b"IVXI"
MAGIC_UBM = b"IVXU"
MAGIC_TMAT = b"IVXT"
MAGIC_CLF = b"IVXW"
MAGIC_PLDA = b"IVXP"


class FormatError(ValueError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(nbytes), dtype=dtype).astype(np.float64).reshape(shape)

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def _open(path, magic: bytes) -> _Reader:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    r = _Reader(data, path)
    r.pos = 4
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return r


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<I", VERSION)


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# ---------------------------------------------------------------------------
# matrix archives: IVXF holds f32 features, IVXI f64 i-vectors


def _write_matrix_archive(path, magic: bytes, dtype: str, items: Iterable[tuple[str, np.ndarray]]) -> None:
    with atomic_write(path) as fh:
        fh.write(_header(magic))
        for utt_id, mat in items:
            mat = np.atleast_2d(np.asarray(mat))
            key = utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<II", *mat.shape))
            fh.write(np.ascontiguousarray(mat, dtype=dtype).tobytes())


def _read_matrix_archive(path, magic: bytes, dtype: str) -> dict[str, np.ndarray]:
    r = _open(path, magic)
    out: dict[str, np.ndarray] = {}
    while not r.done:
        key = r.take(r.u32()).decode("utf-8")
        rows, cols = r.u32(), r.u32()
        if key in out:
            raise FormatError(f"{path}: duplicate utterance id {key}")
        out[key] = r.array(dtype, (rows, cols))
    return out


def write_features(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    _write_matrix_archive(path, MAGIC_FEATS, "<f4", items)


def read_features(path) -> dict[str, np.ndarray]:
    return _read_matrix_archive(path, MAGIC_FEATS, "<f4")


def write_ivectors(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    _write_matrix_archive(path, MAGIC_IVECS, "<f8", ((k, np.reshape(v, (1, -1))) for k, v in items))


def read_ivectors(path) -> dict[str, np.ndarray]:
    return {k: v[0] for k, v in _read_matrix_archive(path, MAGIC_IVECS, "<f8").items()}


def write_stats(path, items: Iterable[tuple[str, SuffStats]]) -> None:
    """Stats archive: per record id, ``C``, ``F``, then ``n`` and normalized ``f`` (or raw when absent)."""
    with atomic_write(path) as fh:
        fh.write(_header(MAGIC_STATS))
        for utt_id, st in items:
            key = utt_id.encode("utf-8")
            C, F = st.f.shape
            normalized = st.normalized is not None
            fh.write(struct.pack("<I", len(key)) + key + struct.pack("<IIB", C, F, int(normalized)))
            fh.write(_f64(st.n) + _f64(st.f))
            if normalized:
                fh.write(_f64(st.normalized))


def read_stats(path) -> dict[str, SuffStats]:
    r = _open(path, MAGIC_STATS)
    out = {}
    while not r.done:
        key = r.take(r.u32()).decode("utf-8")
        C, F, normalized = r.u32(), r.u32(), r.u8()
        n = r.array("<f8", (C,))
        f = r.array("<f8", (C, F))
        fbar = r.array("<f8", (C, F)) if normalized else None
        out[key] = SuffStats(n, f, fbar)
    return out


# ---------------------------------------------------------------------------
# models


def write_ubm(path, ubm: GmmUbm) -> None:
    with atomic_write(path) as fh:
        fh.write(_header(MAGIC_UBM) + struct.pack("<II", ubm.num_components, ubm.feat_dim))
        fh.write(_f64(ubm.weights) + _f64(ubm.means) + _f64(ubm.variances))


def read_ubm(path) -> GmmUbm:
    r = _open(path, MAGIC_UBM)
    C, F = r.u32(), r.u32()
    try:
        return GmmUbm(r.array("<f8", (C,)), r.array("<f8", (C, F)), r.array("<f8", (C, F)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_tmatrix(path, T: TMatrix, normalized: bool = False) -> None:
    """Raw (default) or normalized blocks, with provenance and the paired UBM checksum."""
    blocks = T.normalized if normalized else T.blocks
    if blocks is None:
        raise ValueError("normalized blocks requested but not present")
    C, F, D = T.shape
    checksum = bytes.fromhex(T.ubm_checksum) if T.ubm_checksum else bytes(32)
    with atomic_write(path) as fh:
        fh.write(_header(MAGIC_TMAT) + struct.pack("<IIIBB", C, F, D, int(normalized),
                                                   PROVENANCES.index(T.provenance)))
        fh.write(checksum + _f64(blocks))


def read_tmatrix(path, ubm: GmmUbm | None = None) -> TMatrix:
    """Load T; when ``ubm`` is given the checksum must match and normalized blocks are filled."""
    from .ivector import denormalize_t, normalize_t

    r = _open(path, MAGIC_TMAT)
    C, F, D = r.u32(), r.u32(), r.u32()
    normalized, prov = r.u8(), r.u8()
    if prov >= len(PROVENANCES):
        raise FormatError(f"{path}: unknown provenance code {prov}")
    checksum = r.take(32)
    blocks = r.array("<f8", (C, F, D))
    stored = None if checksum == bytes(32) else checksum.hex()
    if ubm is not None and stored is not None and stored != ubm.checksum():
        raise FormatError(f"{path}: T matrix was built against a different UBM")
    if normalized:
        if ubm is None:
            raise FormatError(f"{path}: normalized blocks need the paired UBM to load")
        return denormalize_t(blocks, ubm, PROVENANCES[prov])
    T = TMatrix(blocks, provenance=PROVENANCES[prov], ubm_checksum=stored)
    return normalize_t(T, ubm) if ubm is not None else T


def write_classifier(path, clf: Classifier) -> None:
    with atomic_write(path) as fh:
        fh.write(_header(MAGIC_CLF) + struct.pack("<IIB", clf.dim, clf.num_classes, int(clf.use_bias)))
        fh.write(_f64(clf.W))


def read_classifier(path) -> Classifier:
    r = _open(path, MAGIC_CLF)
    D, K, bias = r.u32(), r.u32(), r.u8()
    return Classifier(r.array("<f8", (D + bias, K)), bool(bias))


def write_plda(path, backend: Backend) -> None:
    """``D``, length-norm flag, preprocessing centre, then ``mu``, ``B``, ``W_cov``."""
    model = backend.model
    with atomic_write(path) as fh:
        fh.write(_header(MAGIC_PLDA) + struct.pack("<IB", model.dim, int(backend.lennorm)))
        fh.write(_f64(backend.center) + _f64(model.mu) + _f64(model.B) + _f64(model.W_cov))


def read_plda(path) -> Backend:
    r = _open(path, MAGIC_PLDA)
    D, lennorm = r.u32(), r.u8()
    center = r.array("<f8", (D,))
    try:
        model = PldaModel(r.array("<f8", (D,)), r.array("<f8", (D, D)), r.array("<f8", (D, D)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return Backend(center, bool(lennorm), model)
