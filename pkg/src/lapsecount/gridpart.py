"""Sliding-window crops, crop labels, coverage and count joining."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


@dataclass(frozen=True)
class PartitionConfig:
    window: int = 50
    step: int = 25
    flush_edges: bool = False

    def validate(self, width: int, height: int):
        if not 0 < self.step <= self.window:
            raise ValueError(f"need 0 < step <= window, got step={self.step} window={self.window}")
        if self.window > min(width, height):
            raise ValueError(f"window {self.window} larger than frame {width}x{height}")


@dataclass(frozen=True)
class CropRef:
    x: int
    y: int
    window: int
    frame_id: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.x, self.y)


def axis_offsets(length: int, window: int, step: int, flush: bool) -> list[int]:
    offs = list(range(0, length - window + 1, step))
    if flush and (length - window) % step:
        offs.append(length - window)
    return offs


def enumerate_crops(width: int, height: int, cfg: PartitionConfig, frame_id: int = 0) -> list[CropRef]:
    """Row-major crop grid; optional flush crops on the right/bottom borders."""
    cfg.validate(width, height)
    xs = axis_offsets(width, cfg.window, cfg.step, cfg.flush_edges)
    ys = axis_offsets(height, cfg.window, cfg.step, cfg.flush_edges)
    return [CropRef(x, y, cfg.window, frame_id) for y in ys for x in xs]


def label_crop(crop: CropRef, dots) -> int:
    """Number of dots inside the half-open box [x, x+w) x [y, y+w)."""
    d = np.asarray(dots, dtype=float).reshape(-1, 2)
    inside = ((d[:, 0] >= crop.x) & (d[:, 0] < crop.x + crop.window)
              & (d[:, 1] >= crop.y) & (d[:, 1] < crop.y + crop.window))
    return int(inside.sum())


def label_crops(crops: list[CropRef], dots) -> np.ndarray:
    d = np.asarray(dots, dtype=float).reshape(-1, 2)
    if not crops:
        return np.zeros(0, dtype=np.int64)
    x0 = np.array([c.x for c in crops])[:, None]
    y0 = np.array([c.y for c in crops])[:, None]
    w = crops[0].window
    inside = (d[None, :, 0] >= x0) & (d[None, :, 0] < x0 + w) & (d[None, :, 1] >= y0) & (d[None, :, 1] < y0 + w)
    return inside.sum(axis=1).astype(np.int64)


def cut_crops(pixels: np.ndarray, crops: list[CropRef]) -> np.ndarray:
    """Stack crop pixel blocks, shape (n, w, w); ``pixels`` is (H, W)."""
    if not crops:
        return np.zeros((0, 0, 0))
    w = crops[0].window
    return np.stack([pixels[c.y:c.y + w, c.x:c.x + w] for c in crops])


def _axis_coverage(length: int, window: int, step: int, flush: bool) -> np.ndarray:
    cov = np.zeros(length, dtype=np.int64)
    for o in axis_offsets(length, window, step, flush):
        cov[o:o + window] += 1
    return cov


def coverage_map(width: int, height: int, cfg: PartitionConfig) -> np.ndarray:
    """Per-pixel crop multiplicity, shape (H, W).

    The grid is separable, so coverage is the outer product of the per-axis counts.
    """
    cfg.validate(width, height)
    cx = _axis_coverage(width, cfg.window, cfg.step, cfg.flush_edges)
    cy = _axis_coverage(height, cfg.window, cfg.step, cfg.flush_edges)
    return np.outer(cy, cx)


class JoinMethod(enum.Enum):
    OVERLAP_AVERAGED_DENSITY = "overlap_density"
    SIMPLE_NORMALIZED_SUM = "normalized_sum"


def join_counts(estimates: Mapping[tuple[int, int], float] | Iterable[float], cfg: PartitionConfig,
                width: int, height: int,
                method: JoinMethod = JoinMethod.OVERLAP_AVERAGED_DENSITY) -> float:
    """Merge per-crop estimates into a frame total.

    ``estimates`` is either a mapping (x, y) -> estimate covering exactly the
    crop set of ``enumerate_crops``, or a sequence aligned with that order.
    Negative estimates are clamped to zero first.
    """
    crops = enumerate_crops(width, height, cfg)
    if isinstance(estimates, Mapping):
        keys = {(k.x, k.y) if isinstance(k, CropRef) else tuple(k): v for k, v in estimates.items()}
        if set(keys) != {c.key for c in crops}:
            raise ValueError("estimate keys do not match the crop enumeration")
        est = np.array([keys[c.key] for c in crops], dtype=float)
    else:
        est = np.asarray(list(estimates), dtype=float)
        if est.shape != (len(crops),):
            raise ValueError(f"expected {len(crops)} estimates, got {est.shape}")
    est = np.maximum(est, 0.0)
    method = JoinMethod(method)
    w = cfg.window
    cx = _axis_coverage(width, w, cfg.step, cfg.flush_edges)
    cy = _axis_coverage(height, w, cfg.step, cfg.flush_edges)
    if method is JoinMethod.OVERLAP_AVERAGED_DENSITY:
        # crop weight = sum of 1/R_p over its pixels / w^2; R_p = cy[y] * cx[x] factorizes
        inv_x = np.concatenate([[0.0], np.cumsum(1.0 / np.maximum(cx, 1))])
        inv_y = np.concatenate([[0.0], np.cumsum(1.0 / np.maximum(cy, 1))])
        xs = np.array([c.x for c in crops])
        ys = np.array([c.y for c in crops])
        weight = (inv_x[xs + w] - inv_x[xs]) * (inv_y[ys + w] - inv_y[ys]) / (w * w)
        return float(np.dot(est, weight))
    # normalize by the redundancy of fully overlapped (interior) pixels
    return float(est.sum() / (cx.max() * cy.max()))


# ---------------------------------------------------------------- crop record stream

CROP_MAGIC = b"LCRP"
CROP_VERSION = 1
_CROP_HEADER = struct.Struct("<4sIII")
_CROP_RECORD = struct.Struct("<IIId")


@dataclass
class CropRecord:
    frame_id: int
    x: int
    y: int
    count: float
    pixels: np.ndarray  # (w, w) uint8


def write_crop_records(path: str | Path, window: int, records: Iterable[CropRecord]) -> int:
    """Binary layout (little endian):

    header: b"LCRP", u32 version, u32 window, u32 reserved (0)
    record: u32 frame_id, u32 x, u32 y, f64 count, window*window u8 pixels (row-major)
    """
    n = 0
    with open(path, "wb") as fh:
        fh.write(_CROP_HEADER.pack(CROP_MAGIC, CROP_VERSION, window, 0))
        for r in records:
            px = np.asarray(r.pixels, dtype=np.uint8)
            if px.shape != (window, window):
                raise ValueError(f"record pixels {px.shape} != ({window}, {window})")
            fh.write(_CROP_RECORD.pack(r.frame_id, r.x, r.y, float(r.count)))
            fh.write(px.tobytes())
            n += 1
    return n


def read_crop_records(path: str | Path) -> tuple[int, list[CropRecord]]:
    data = Path(path).read_bytes()
    magic, version, window, _ = _CROP_HEADER.unpack_from(data, 0)
    if magic != CROP_MAGIC or version != CROP_VERSION:
        raise ValueError(f"{path}: not an LCRP v{CROP_VERSION} stream")
    off = _CROP_HEADER.size
    size = window * window
    out = []
    while off < len(data):
        fid, x, y, count = _CROP_RECORD.unpack_from(data, off)
        off += _CROP_RECORD.size
        px = np.frombuffer(data, dtype=np.uint8, count=size, offset=off).reshape(window, window)
        off += size
        out.append(CropRecord(fid, x, y, count, px.copy()))
    return window, out
