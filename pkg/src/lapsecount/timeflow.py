"""Per-location feature histories and the padded temporal block fed to the RNN."""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class TemporalConfig:
    tw: int = 20
    sampling_interval: float = 1.0
    pad_value: float = 1.0

    def __post_init__(self):
        if self.tw < 1:
            raise ValueError("tw must be >= 1")


@dataclass
class FeatureHistory:
    """Time-ordered features for one crop location; keeps at most ``keep`` entries."""

    key: tuple[int, int] = (0, 0)
    keep: int | None = None
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        self.entries = deque(self.entries, maxlen=self.keep)

    def __len__(self):
        return len(self.entries)

    @property
    def m(self) -> int | None:
        return len(self.entries[-1][1]) if self.entries else None

    def append(self, t: float, v) -> "FeatureHistory":
        v = np.asarray(v, dtype=np.float64)
        if self.entries:
            if t <= self.entries[-1][0]:
                raise ValueError(f"timestamp {t} not after last stored {self.entries[-1][0]}")
            if v.shape != (self.m,):
                raise ValueError(f"feature length {v.shape} != ({self.m},)")
        self.entries.append((float(t), v))
        return self


def append_features(history: FeatureHistory, t: float, v) -> FeatureHistory:
    return history.append(t, v)


@dataclass
class TemporalBlock:
    rows: np.ndarray  # (tw, m)
    n_real: int

    @property
    def tw(self) -> int:
        return self.rows.shape[0]


def build_block(history: FeatureHistory, cfg: TemporalConfig, m: int | None = None) -> TemporalBlock:
    """Most recent ``tw`` features in time order, prefixed by padding rows when short."""
    m = history.m if history.m is not None else m
    if m is None:
        raise ValueError("empty history needs an explicit feature length m")
    recent = list(history.entries)[-cfg.tw:]
    rows = np.full((cfg.tw, m), cfg.pad_value, dtype=np.float64)
    if recent:
        rows[cfg.tw - len(recent):] = np.stack([v for _, v in recent])
    return TemporalBlock(rows, len(recent))


def sequence_blocks(features: np.ndarray, tw: int, pad_value: float = 1.0) -> np.ndarray:
    """Blocks for every time step of a (T, ..., m) feature sequence.

    Returns (T, ..., tw, m): entry t equals build_block over features[:t+1].
    """
    features = np.asarray(features, dtype=np.float64)
    T = features.shape[0]
    pad = np.full((tw - 1, *features.shape[1:]), pad_value)
    padded = np.concatenate([pad, features], axis=0)
    idx = np.arange(T)[:, None] + np.arange(tw)[None, :]  # (T, tw)
    blocks = padded[idx]  # (T, tw, ..., m)
    return np.moveaxis(blocks, 1, -2)


# ---------------------------------------------------------------- block record stream

BLOCK_MAGIC = b"LBLK"
BLOCK_VERSION = 1
_BLOCK_HEADER = struct.Struct("<4sIII")


def write_block_records(path: str | Path, tw: int, m: int,
                        records: Iterable[tuple[TemporalBlock, float]]) -> int:
    """Binary layout (little endian):

    header: b"LBLK", u32 version, u32 tw, u32 m
    record: u32 n_real, tw*m f64 rows (row-major), f64 label
    """
    n = 0
    with open(path, "wb") as fh:
        fh.write(_BLOCK_HEADER.pack(BLOCK_MAGIC, BLOCK_VERSION, tw, m))
        for block, label in records:
            if block.rows.shape != (tw, m):
                raise ValueError(f"block shape {block.rows.shape} != ({tw}, {m})")
            fh.write(struct.pack("<I", block.n_real))
            fh.write(np.ascontiguousarray(block.rows, dtype="<f8").tobytes())
            fh.write(struct.pack("<d", float(label)))
            n += 1
    return n


def read_block_records(path: str | Path):
    data = Path(path).read_bytes()
    magic, version, tw, m = _BLOCK_HEADER.unpack_from(data, 0)
    if magic != BLOCK_MAGIC or version != BLOCK_VERSION:
        raise ValueError(f"{path}: not an LBLK v{BLOCK_VERSION} stream")
    off = _BLOCK_HEADER.size
    out = []
    while off < len(data):
        (n_real,) = struct.unpack_from("<I", data, off)
        off += 4
        rows = np.frombuffer(data, dtype="<f8", count=tw * m, offset=off).reshape(tw, m).copy()
        off += 8 * tw * m
        (label,) = struct.unpack_from("<d", data, off)
        off += 8
        out.append((TemporalBlock(rows, n_real), label))
    return tw, m, out
