"""Small explicit-backward neural network kernel on float64 numpy arrays.

Every layer pairs a forward with a hand-written backward; there is no graph
autodiff.  Arrays may carry a leading batch axis, the per-sample shapes are
the ones named in the function signatures.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class GradientCheckError(AssertionError):
    def __init__(self, name: str, index: tuple, err: float, tol: float):
        super().__init__(
            f"gradient check failed: {name}{list(index)} rel. err {err:.3e} > {tol:.1e}"
        )
        self.name = name
        self.index = index
        self.err = err


@dataclass
class Param:
    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# ---------------------------------------------------------------- dense

def dense_forward(x, W, b):
    x = np.asarray(x, dtype=DTYPE)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def dense_backward(dy, x, W):
    """Return (dx, dW, db) for y = x W^T + b."""
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = dy @ W
    return dx, dW, db


# ---------------------------------------------------------------- conv / pool

def _batched(x, ndim):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d input, got {x.shape}")
    return x, False


def _im2col3(x):
    # (N, C, H, W) -> (N*H*W, C*9), zero padded so output keeps H x W
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N C H W 3 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x, kernels, b, _cols_out=None):
    """Same-padded, stride-1 3x3 cross-correlation: (C,H,W) -> (K,H,W)."""
    xb, single = _batched(x, 4)
    k, c = kernels.shape[:2]
    if kernels.shape[2:] != (3, 3) or xb.shape[1] != c or b.shape != (k,):
        raise ShapeError(f"conv2d: x {xb.shape}, kernels {kernels.shape}, b {b.shape}")
    n, _, h, w = xb.shape
    cols = _im2col3(xb)
    if _cols_out is not None:
        _cols_out.append(cols)
    y = cols @ kernels.reshape(k, c * 9).T + b
    y = y.reshape(n, h, w, k).transpose(0, 3, 1, 2)
    return y[0] if single else y


def conv2d_backward(dy, x, kernels, cols=None, need_dx=True):
    """Return (dx, dkernels, db); dx is None when ``need_dx`` is false."""
    xb, single = _batched(x, 4)
    dyb = dy[None] if single else dy
    k = kernels.shape[0]
    if cols is None:
        cols = _im2col3(xb)
    dyr = dyb.transpose(0, 2, 3, 1).reshape(-1, k)
    dk = (dyr.T @ cols).reshape(kernels.shape)
    db = dyr.sum(axis=0)
    dx = None
    if need_dx:
        # input gradient is a same-padded correlation with the flipped, channel-swapped kernels
        flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv2d(dyb, flipped, np.zeros(flipped.shape[0]))
        if single:
            dx = dx[0]
    return dx, dk, db


def maxpool2(x):
    """2x2 stride-2 max pooling with ceil output size; returns (y, argmax).

    argmax indexes the window in row-major order; ties go to the first element.
    """
    xb, single = _batched(x, 4)
    n, c, h, w = xb.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs H, W >= 2, got {xb.shape}")
    if h % 2 or w % 2:
        xp = np.full((n, c, h + h % 2, w + w % 2), -np.inf, dtype=DTYPE)
        xp[:, :, :h, :w] = xb
    else:
        xp = xb
    y = xp[:, :, 0::2, 0::2].copy()
    idx = np.zeros(y.shape, dtype=np.int8)
    for k, (i, j) in enumerate(((0, 1), (1, 0), (1, 1)), start=1):
        cand = xp[:, :, i::2, j::2]
        better = cand > y
        y[better] = cand[better]
        idx[better] = k
    if single:
        return y[0], idx[0]
    return y, idx


def maxpool2_backward(dy, idx, in_shape):
    single = len(in_shape) == 3
    if single:
        dy, idx, in_shape = dy[None], idx[None], (1, *in_shape)
    n, c, h, w = in_shape
    dx = np.zeros((n, c, h + h % 2, w + w % 2), dtype=DTYPE)
    for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, i::2, j::2] = np.where(idx == k, dy, 0.0)
    dx = dx[:, :, :h, :w]
    return dx[0] if single else dx


# ---------------------------------------------------------------- activations

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


def global_avg_pool(x):
    """(C,H,W) -> (C) spatial mean."""
    return np.asarray(x, dtype=DTYPE).mean(axis=(-2, -1))


def global_avg_pool_backward(dy, in_shape):
    h, w = in_shape[-2:]
    return np.broadcast_to(dy[..., None, None] / (h * w), in_shape).copy()


# ---------------------------------------------------------------- losses

class LossKind(enum.Enum):
    L1 = "L1"
    L2 = "L2"


def loss(pred, target, kind: LossKind):
    """Mean loss over the batch and its gradient w.r.t. ``pred``."""
    kind = LossKind(kind)
    pred = np.asarray(pred, dtype=DTYPE)
    diff = pred - np.asarray(target, dtype=DTYPE)
    n = max(diff.size, 1)
    if kind is LossKind.L1:
        value = np.abs(diff).sum() / n
        grad = np.sign(diff) / n
    else:
        value = (diff * diff).sum() / n
        grad = 2.0 * diff / n
    if pred.ndim == 0:
        return float(value), float(grad)
    return float(value), grad


# ---------------------------------------------------------------- layers

class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        self.W = Param(glorot_uniform(rng, (n_out, n_in), n_in, n_out), f"{name}/W")
        self.b = Param(np.zeros(n_out), f"{name}/b")

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.W.value, self.b.value)

    def backward(self, dy):
        dx, dW, db = dense_backward(dy, self._x, self.W.value)
        self.W.grad += dW
        self.b.grad += db
        return dx


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str = "conv"):
        shape = (c_out, c_in, 3, 3)
        self.K = Param(glorot_uniform(rng, shape, c_in * 9, c_out * 9), f"{name}/K")
        self.b = Param(np.zeros(c_out), f"{name}/b")

    input_grad = True

    def params(self):
        return [self.K, self.b]

    def forward(self, x):
        self._x = x
        cols = []
        y = conv2d(x, self.K.value, self.b.value, _cols_out=cols)
        self._cols = cols[0]
        return y

    def backward(self, dy):
        dx, dk, db = conv2d_backward(dy, self._x, self.K.value, self._cols, self.input_grad)
        self.K.grad += dk
        self.b.grad += db
        return dx


class MaxPool2(Layer):
    def forward(self, x):
        self._shape = x.shape
        y, self._idx = maxpool2(x)
        return y

    def backward(self, dy):
        return maxpool2_backward(dy, self._idx, self._shape)


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, dy):
        return relu_backward(dy, self._x)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return sigmoid_backward(dy, self._y)


class Tanh(Layer):
    def forward(self, x):
        self._y = tanh(x)
        return self._y

    def backward(self, dy):
        return tanh_backward(dy, self._y)


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._shape)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- optimizer

@dataclass
class Adam:
    """Bias-corrected adaptive-moment optimizer; zeroes grads after each step."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: list[Param]):
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(p.name)
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(params):
            key = p.name or i
            if key not in self.m:
                self.m[key] = np.zeros_like(p.value)
                self.v[key] = np.zeros_like(p.value)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


# ---------------------------------------------------------------- verification

def gradient_check(model, x, target, tol: float = 1e-4, kind: LossKind = LossKind.L2,
                   h: float = 1e-5) -> float:
    """Compare backward() against central differences for every parameter entry.

    ``model`` needs ``params()``, ``forward(x)`` and ``backward(dout)``.
    Returns the max relative error; raises GradientCheckError above ``tol``.
    """
    params = model.params()
    zero_grads(params)
    _, dpred = loss(model.forward(x), target, kind)
    model.backward(dpred)
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)

    worst = (0.0, "", ())
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss(model.forward(x), target, kind)
            flat[i] = orig - h
            lm, _ = loss(model.forward(x), target, kind)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > worst[0]:
                worst = (err, p.name, np.unravel_index(i, p.value.shape))
    if worst[0] > tol:
        raise GradientCheckError(worst[1], tuple(int(j) for j in worst[2]), worst[0], tol)
    return worst[0]
