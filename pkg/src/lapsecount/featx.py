"""Crop descriptors and the static per-crop count regressor."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import numcore as nc
from .gridpart import JoinMethod, PartitionConfig, cut_crops, enumerate_crops, join_counts

log = logging.getLogger(__name__)

TINYCONV = "tinyconv-8-16-m32"
HANDCRAFTED = "handcrafted-19"
EXTRACTOR_NAMES = {"tinyconv": TINYCONV, "handcrafted": HANDCRAFTED}


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


def _check_crops(crops, window):
    crops = np.asarray(crops, dtype=nc.DTYPE)
    if crops.ndim == 2:
        crops = crops[None]
    if crops.ndim != 3 or crops.shape[1:] != (window, window):
        raise nc.ShapeError(f"expected crops of side {window}, got {crops.shape}")
    return crops


class TinyConvNet(nc.Sequential):
    """conv3x3(8) relu pool, conv3x3(16) relu pool, global mean, dense(32) relu.

    Crops are shifted by a fixed -0.5 before the first convolution; with raw
    [0, 1] input the first layer sees mostly the background level and training
    stalls on the constant predictor.
    """

    arch = TINYCONV
    m = 32
    input_offset = 0.5

    def __init__(self, rng: np.random.Generator, window: int = 50):
        self.window = window
        super().__init__(
            nc.Conv2d(1, 8, rng, "extractor/conv1"), nc.ReLU(), nc.MaxPool2(),
            nc.Conv2d(8, 16, rng, "extractor/conv2"), nc.ReLU(), nc.MaxPool2(),
            nc.GlobalAvgPool(),
            nc.Dense(16, self.m, rng, "extractor/fc"), nc.ReLU(),
        )
        self.layers[0].input_grad = False  # crops are data, never optimized

    def forward(self, crops):
        crops = _check_crops(crops, self.window)
        return super().forward(crops[:, None, :, :] - self.input_offset)

    def backward(self, dy):
        super().backward(dy)


class HandcraftedExtractor:
    """Fixed descriptor: 16-bin histogram, blob count, std, mean gradient magnitude."""

    arch = HANDCRAFTED
    m = 19
    bins = 16

    def __init__(self, window: int = 50):
        self.window = window

    def params(self):
        return []

    def forward(self, crops):
        crops = _check_crops(crops, self.window)
        n = crops.shape[0]
        out = np.empty((n, self.m))
        flat = crops.reshape(n, -1)
        idx = np.minimum((flat * self.bins).astype(np.int64), self.bins - 1)
        for i in range(n):
            out[i, :self.bins] = np.bincount(idx[i], minlength=self.bins) / flat.shape[1]
        for i, c in enumerate(crops):
            mu, sd = c.mean(), c.std()
            smooth = ndimage.gaussian_filter(c, 1.5)
            # adaptive threshold: local maxima brighter than mean + 1 sd of the crop
            peaks = (smooth == ndimage.maximum_filter(smooth, size=5)) & (smooth > mu + sd)
            gy, gx = np.gradient(c)
            out[i, 16] = peaks.sum()
            out[i, 17] = sd
            out[i, 18] = np.hypot(gx, gy).mean()
        return out

    def backward(self, dy):
        raise RuntimeError("handcrafted extractor is not trainable")


def make_extractor(kind: str, rng: np.random.Generator, window: int = 50):
    kind = {v: k for k, v in EXTRACTOR_NAMES.items()}.get(kind, kind)
    if kind == "tinyconv":
        return TinyConvNet(rng, window)
    if kind == "handcrafted":
        return HandcraftedExtractor(window)
    raise ValueError(f"unknown extractor {kind!r}")


def extract(crops, extractor) -> np.ndarray:
    """Feature vectors of shape (n, m); a single (w, w) crop gives shape (m,)."""
    single = np.ndim(crops) == 2
    feats = extractor.forward(crops)
    return feats[0] if single else feats


@dataclass
class StaticModel:
    extractor: object
    head: nc.Dense

    @property
    def m(self) -> int:
        return self.extractor.m

    @property
    def window(self) -> int:
        return self.extractor.window

    def params(self, head_only: bool = False):
        ps = list(self.head.params())
        return ps if head_only else list(self.extractor.params()) + ps

    def features(self, crops, batch: int = 512) -> np.ndarray:
        crops = _check_crops(crops, self.window)
        return np.concatenate([self.extractor.forward(crops[i:i + batch])
                               for i in range(0, len(crops), batch)] or [np.zeros((0, self.m))])

    def forward(self, crops):
        return self.head.forward(self.extractor.forward(crops))[:, 0]

    def backward(self, dpred, head_only: bool = False):
        dfeat = self.head.backward(np.asarray(dpred)[:, None])
        if not head_only:
            self.extractor.backward(dfeat)

    def predict_features(self, feats):
        return nc.dense_forward(feats, self.head.W.value, self.head.b.value)[:, 0]


def new_static_model(kind: str = "tinyconv", seed: int = 0, window: int = 50) -> StaticModel:
    rng = np.random.default_rng(seed)
    ext = make_extractor(kind, rng, window)
    return StaticModel(ext, nc.Dense(ext.m, 1, rng, "head"))


def train_static(crops, labels, kind: str = "tinyconv", loss: nc.LossKind = nc.LossKind.L1,
                 epochs: int = 10, seed: int = 0, batch_size: int = 32, lr: float = 1e-3,
                 head_only: bool | None = None, model: StaticModel | None = None):
    """Jointly fit extractor and head on crop counts; returns (model, per-epoch losses).

    The handcrafted extractor has no parameters, so it always trains head-only.
    """
    crops = np.asarray(crops, dtype=nc.DTYPE)
    labels = np.asarray(labels, dtype=nc.DTYPE)
    if len(crops) == 0 or len(crops) != len(labels):
        raise ValueError("need at least one crop and one label per crop")
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative")
    window = crops.shape[-1]
    if model is None:
        model = new_static_model(kind, seed, window)
    if head_only is None:
        head_only = not model.extractor.params()
    rng = np.random.default_rng([seed, 1])
    opt = nc.Adam(lr=lr)
    params = model.params(head_only)
    nc.zero_grads(model.params())
    feats = model.features(crops) if head_only else None
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(crops))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if head_only:
                pred = model.head.forward(feats[idx])[:, 0]
            else:
                pred = model.forward(crops[idx])
            value, grad = nc.loss(pred, labels[idx], loss)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, "non-finite loss")
            total += value * len(idx)
            model.backward(grad, head_only=head_only)
            try:
                opt.step(params)
            except nc.NonFiniteGradient as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
        history.append(total / len(order))
        log.debug("static epoch %d loss %.4f", epoch, history[-1])
    return model, history


def predict_static(crops, model: StaticModel) -> np.ndarray:
    """Unclamped per-crop estimates (pixels only)."""
    single = np.ndim(crops) == 2
    pred = model.predict_features(model.features(crops))
    return float(pred[0]) if single else pred


def frame_crops(pixels: np.ndarray, cfg: PartitionConfig):
    h, w = pixels.shape
    if min(h, w) < cfg.window:
        raise ValueError(f"frame {w}x{h} smaller than window {cfg.window}")
    crops = enumerate_crops(w, h, cfg)
    return crops, cut_crops(pixels, crops)


def static_frame_count(frame, model, cfg: PartitionConfig | None = None,
                       method: JoinMethod = JoinMethod.OVERLAP_AVERAGED_DENSITY) -> float:
    """Crop (flush edges on), predict every crop, join.

    ``model`` is a StaticModel or any callable mapping a crop stack to estimates.
    """
    cfg = cfg or PartitionConfig(flush_edges=True)
    if not cfg.flush_edges:
        cfg = PartitionConfig(cfg.window, cfg.step, True)
    pixels = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame)
    crops, stack = frame_crops(pixels, cfg)
    est = predict_static(stack, model) if isinstance(model, StaticModel) else model(stack, crops)
    h, w = pixels.shape
    return join_counts(np.atleast_1d(est), cfg, w, h, method)
