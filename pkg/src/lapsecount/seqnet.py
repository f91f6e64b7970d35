"""Stacked (bi)LSTM many-to-one regressors over temporal blocks.

Gate order inside the stacked weight matrices is i, f, o, g.  Inputs are
batched as (N, T, in); a single (T, in) block is also accepted.
"""
from __future__ import annotations

import logging
from collections import deque

import numpy as np

from . import numcore as nc
from .featx import StaticModel, TrainingDiverged, frame_crops
from .gridpart import JoinMethod, PartitionConfig, join_counts
from .timeflow import TemporalBlock, TemporalConfig

log = logging.getLogger(__name__)


def lstm_step(x, h_prev, c_prev, W, U, b):
    """One LSTM update; W (4h, in), U (4h, h), b (4h). Returns (h, c)."""
    hs = U.shape[1]
    if W.shape[0] != 4 * hs or U.shape != (4 * hs, hs) or b.shape != (4 * hs,) \
            or np.shape(x)[-1] != W.shape[1] or np.shape(h_prev)[-1] != hs:
        raise nc.ShapeError(f"lstm_step: x {np.shape(x)}, h {np.shape(h_prev)}, W {W.shape}, U {U.shape}")
    z = x @ W.T + h_prev @ U.T + b
    i = nc.sigmoid(z[..., :hs])
    f = nc.sigmoid(z[..., hs:2 * hs])
    o = nc.sigmoid(z[..., 2 * hs:3 * hs])
    g = np.tanh(z[..., 3 * hs:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


class LstmLayer:
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.hidden = hidden
        self.n_in = n_in
        W = nc.glorot_uniform(rng, (4 * hidden, n_in), n_in, hidden)
        U = nc.glorot_uniform(rng, (4 * hidden, hidden), hidden, hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.W = nc.Param(W, f"{name}/W")
        self.U = nc.Param(U, f"{name}/U")
        self.b = nc.Param(b, f"{name}/b")

    def params(self):
        return [self.W, self.U, self.b]

    def forward(self, x):
        """x (N, T, in) -> hidden states (N, T, h)."""
        n, T, _ = x.shape
        hs = self.hidden
        W, U, b = self.W.value, self.U.value, self.b.value
        zx = x @ W.T + b
        h = np.zeros((n, hs))
        c = np.zeros((n, hs))
        H = np.empty((n, T, hs))
        cache = []
        for t in range(T):
            z = zx[:, t] + h @ U.T
            s = nc.sigmoid(z[:, :3 * hs])
            i, f, o = s[:, :hs], s[:, hs:2 * hs], s[:, 2 * hs:]
            g = np.tanh(z[:, 3 * hs:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            H[:, t] = h
            cache.append((i, f, o, g, c_prev, h_prev, tc))
        self._x, self._cache = x, cache
        return H

    def backward(self, dH):
        """dH (N, T, h) -> dx (N, T, in); accumulates parameter grads (full BPTT)."""
        x, cache = self._x, self._cache
        n, T, _ = x.shape
        hs = self.hidden
        W, U = self.W.value, self.U.value
        dz_all = np.empty((n, T, 4 * hs))
        dh_next = np.zeros((n, hs))
        dc_next = np.zeros((n, hs))
        dU = np.zeros_like(U)
        for t in reversed(range(T)):
            i, f, o, g, c_prev, h_prev, tc = cache[t]
            dh = dH[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :hs] = dc * g * i * (1.0 - i)
            dz[:, hs:2 * hs] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * hs:3 * hs] = dh * tc * o * (1.0 - o)
            dz[:, 3 * hs:] = dc * i * (1.0 - g * g)
            dU += dz.T @ h_prev
            dh_next = dz @ U
            dc_next = dc * f
        flat = dz_all.reshape(n * T, 4 * hs)
        self.W.grad += flat.T @ x.reshape(n * T, -1)
        self.U.grad += dU
        self.b.grad += flat.sum(axis=0)
        return dz_all @ W


class LstmCore:
    """Stacked LSTM layers without a readout; exposes the top layer's last hidden state."""

    def __init__(self, n_in: int, hidden: int = 30, layers: int = 2, rng=None, name: str = "core"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for k in range(layers):
            self.layers.append(LstmLayer(n_in if k == 0 else hidden, hidden, rng, f"{name}/l{k + 1}"))
        self.hidden = hidden
        self.n_in = n_in

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._T = x.shape[1]
        return x[:, -1]

    def backward(self, dlast):
        n = dlast.shape[0]
        dH = np.zeros((n, self._T, self.hidden))
        dH[:, -1] = dlast
        for layer in reversed(self.layers):
            dH = layer.backward(dH)
        return dH


def _as_batch(block, n_in):
    if isinstance(block, TemporalBlock):
        block = block.rows
    x = np.asarray(block, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != n_in:
        raise nc.ShapeError(f"block feature length {x.shape[-1]} != model input {n_in}")
    return x, single


class LstmStack:
    """Two-layer LSTM with a dense readout on the final step (many-to-one)."""

    def __init__(self, m: int, hidden: int = 30, seed: int = 0, layers: int = 2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.core = LstmCore(m, hidden, layers, rng, "rnn/fwd")
        self.readout = nc.Dense(hidden, 1, rng, "rnn/readout")
        self.m, self.hidden = m, hidden

    @property
    def kind(self) -> str:
        return f"lstm{len(self.core.layers)}x{self.hidden}"

    def params(self):
        return self.core.params() + self.readout.params()

    def forward(self, blocks):
        x, single = _as_batch(blocks, self.m)
        y = self.readout.forward(self.core.forward(x))[:, 0]
        return float(y[0]) if single else y

    def backward(self, dy):
        self.core.backward(self.readout.backward(np.atleast_1d(dy)[:, None]))


class BiLstmStack:
    """Forward and backward LSTM cores; their final states are concatenated into one readout."""

    def __init__(self, m: int, hidden: int = 30, seed: int = 0, layers: int = 2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.fwd = LstmCore(m, hidden, layers, rng, "rnn/fwd")
        self.bwd = LstmCore(m, hidden, layers, rng, "rnn/bwd")
        self.readout = nc.Dense(2 * hidden, 1, rng, "rnn/readout")
        self.m, self.hidden = m, hidden

    @property
    def kind(self) -> str:
        return f"bilstm{len(self.fwd.layers)}x{self.hidden}"

    def params(self):
        return self.fwd.params() + self.bwd.params() + self.readout.params()

    def states(self, x):
        return self.fwd.forward(x), self.bwd.forward(x[:, ::-1])

    def forward(self, blocks):
        x, single = _as_batch(blocks, self.m)
        hf, hb = self.states(x)
        y = self.readout.forward(np.concatenate([hf, hb], axis=1))[:, 0]
        return float(y[0]) if single else y

    def backward(self, dy):
        dcat = self.readout.backward(np.atleast_1d(dy)[:, None])
        self.fwd.backward(dcat[:, :self.hidden])
        self.bwd.backward(dcat[:, self.hidden:])


def many_to_one_forward(block, model: LstmStack):
    return model.forward(block)


def bilstm_forward(block, model: BiLstmStack):
    return model.forward(block)


def new_recurrent(m: int, bidirectional: bool = False, hidden: int = 30, seed: int = 0):
    cls = BiLstmStack if bidirectional else LstmStack
    return cls(m, hidden, seed)


def train_dynamic(blocks, labels, bidirectional: bool = False, loss: nc.LossKind = nc.LossKind.L2,
                  epochs: int = 10, seed: int = 0, hidden: int = 30, batch_size: int = 64,
                  lr: float = 1e-3, model=None):
    """Fit the recurrent head on precomputed (frozen) feature blocks.

    Returns (model, per-epoch mean training loss).
    """
    x = np.asarray(blocks.rows if isinstance(blocks, TemporalBlock) else blocks, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 3 or len(x) != len(y) or len(y) == 0:
        raise ValueError(f"blocks {x.shape} and labels {y.shape} do not pair up")
    if np.any(y < 0):
        raise ValueError("labels must be non-negative")
    if model is None:
        model = new_recurrent(x.shape[2], bidirectional, hidden, seed)
    params = model.params()
    nc.zero_grads(params)
    opt = nc.Adam(lr=lr)
    rng = np.random.default_rng([seed, 2])
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            pred = model.forward(x[idx])
            value, grad = nc.loss(pred, y[idx], loss)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, "non-finite loss")
            total += value * len(idx)
            model.backward(grad)
            try:
                opt.step(params)
            except nc.NonFiniteGradient as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
        history.append(total / len(order))
        log.debug("dynamic epoch %d loss %.4f", epoch, history[-1])
    return model, history


class DynamicCounter:
    """Frame-by-frame counting: crop, extract, append to per-location history, predict, join.

    Inference is stateless per prediction: each block is rebuilt from the stored
    history, and memory is bounded by crops_per_frame * tw * m.
    """

    def __init__(self, static: StaticModel, recurrent, tcfg: TemporalConfig,
                 pcfg: PartitionConfig | None = None,
                 method: JoinMethod = JoinMethod.OVERLAP_AVERAGED_DENSITY, predictor=None):
        pcfg = pcfg or PartitionConfig(flush_edges=True)
        self.pcfg = PartitionConfig(pcfg.window, pcfg.step, True)
        self.static, self.recurrent, self.tcfg, self.method = static, recurrent, tcfg, method
        self.predictor = predictor
        self.histories: dict[tuple[int, int], deque] = {}
        self.last_t: float | None = None

    def push(self, frame) -> float:
        if self.last_t is not None and frame.timestamp <= self.last_t:
            raise ValueError(f"frame at {frame.timestamp} h arrived after {self.last_t} h")
        self.last_t = frame.timestamp
        crops, stack = frame_crops(frame.pixels, self.pcfg)
        feats = self.static.features(stack)
        tw, m = self.tcfg.tw, feats.shape[1]
        blocks = np.full((len(crops), tw, m), self.tcfg.pad_value)
        for k, (crop, v) in enumerate(zip(crops, feats)):
            hist = self.histories.setdefault(crop.key, deque(maxlen=tw))
            hist.append(v)
            blocks[k, tw - len(hist):] = np.stack(hist)
        if self.predictor is not None:
            est = self.predictor(blocks, crops, frame)
        else:
            est = self.recurrent.forward(blocks)
        h, w = frame.pixels.shape
        return join_counts(np.atleast_1d(est), self.pcfg, w, h, self.method)


def dynamic_frame_count(counter: DynamicCounter, frame) -> float:
    return counter.push(frame)
