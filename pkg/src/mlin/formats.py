"""Binary feature files (MLF1) and checkpoints (MLC1).

All integers are little-endian u32.  Feature values are little-endian
float32; checkpoint values are little-endian float64.

MLF1::

    b"MLF1" | count | count x (M | N | d_in | label | M*d_in f32 | N*d_in f32)

MLC1::

    b"MLC1" | cfg_len | cfg_len bytes of UTF-8 run config | n_params |
    n_params x (name_len | name | rank | rank x extent | prod(extents) f64)
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .mli import ConfigError
from .network import MlinModel
from .synthetic import Dataset

FEATURE_MAGIC = b"MLF1"
CHECKPOINT_MAGIC = b"MLC1"
PathLike = Union[str, Path]


class FormatError(ValueError):
    """Corrupt or truncated file; carries the path and byte offset."""

    def __init__(self, path: PathLike, offset: int, message: str):
        super().__init__(f"{path}: at byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, path: PathLike):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(self.path, self.pos,
                              f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * width, what), dtype=dtype).astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(self.path, self.pos, f"{len(self.buf) - self.pos} trailing bytes")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, 0, exc.strerror or str(exc)) from exc


# ---------------------------------------------------------------------------
# features


def encode_features(ds: Dataset) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<I", len(ds))]
    for R, E, label in zip(ds.R, ds.E, ds.labels):
        M, d = R.shape
        N = E.shape[0]
        parts.append(struct.pack("<IIII", M, N, d, label))
        parts.append(np.ascontiguousarray(R, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(E, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes, path: PathLike = "<bytes>") -> Dataset:
    r = _Reader(buf, path)
    if r.take(4, "magic") != FEATURE_MAGIC:
        raise FormatError(path, 0, "bad magic, expected MLF1")
    count = r.u32("record count")
    ds = Dataset()
    for i in range(count):
        start = r.pos
        M, N, d, label = (r.u32(f"record {i} header") for _ in range(4))
        if M < 1 or N < 1 or d < 1:
            raise FormatError(path, start, f"record {i}: empty extents M={M} N={N} d_in={d}")
        R = r.array(M * d, "<f4", f"record {i} regions").reshape(M, d)
        E = r.array(N * d, "<f4", f"record {i} words").reshape(N, d)
        ds.append(R, E, label)
    r.finish()
    return ds


def write_features(path: PathLike, ds: Dataset) -> None:
    atomic_write(path, encode_features(ds))


def read_features(path: PathLike) -> Dataset:
    return decode_features(_read_bytes(path), path)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(model: MlinModel, cfg: RunConfig) -> bytes:
    text = serialize_config(cfg).encode("utf-8")
    named = model.named_parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(named))]
    for name, t in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path: PathLike = "<bytes>") -> tuple[MlinModel, RunConfig]:
    r = _Reader(buf, path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, "bad magic, expected MLC1")
    n = r.u32("config length")
    at = r.pos
    try:
        cfg = parse_config(r.take(n, "config block").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(path, at, f"bad config block: {exc}") from None
    model = MlinModel.init(cfg.mli(), cfg.d_in, cfg.num_classes, seed=0)
    expected = model.named_parameters()
    count = r.u32("parameter count")
    if count != len(expected):
        raise FormatError(path, r.pos - 4, f"{count} parameters stored, config implies {len(expected)}")
    for name, t in expected:
        at = r.pos
        stored = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
        if stored != name:
            raise FormatError(path, at, f"expected parameter {name!r}, found {stored!r}")
        at = r.pos
        rank = r.u32(f"{name} rank")
        shape = tuple(r.u32(f"{name} extent") for _ in range(rank))
        if shape != t.shape:
            raise FormatError(path, at, f"{name}: stored shape {shape}, config implies {t.shape}")
        t.data[...] = r.array(t.size, "<f8", f"{name} values").reshape(shape)
    r.finish()
    return model, cfg


def save_checkpoint(path: PathLike, model: MlinModel, cfg: RunConfig) -> None:
    atomic_write(path, encode_checkpoint(model, cfg))


def load_checkpoint(path: PathLike) -> tuple[MlinModel, RunConfig]:
    return decode_checkpoint(_read_bytes(path), path)
