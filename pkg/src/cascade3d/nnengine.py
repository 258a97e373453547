"""A small 5-D tensor engine: the closed set of layers the cascade needs,
each with a hand-written backward pass, and an Adam optimizer with L2
regularisation on convolution kernels.

Tensors are plain ``numpy`` arrays of shape ``(N, C, D, H, W)``.  Layers
cache what they need during ``forward`` and consume that cache in
``backward``; a layer instance therefore serves one forward/backward pair at
a time.  Parameter dtype follows the ``dtype`` given at construction
(float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

DEBUG = os.environ.get("CASCADE3D_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced by {where}")
    return x


@dataclass
class ParamBlock:
    """A named parameter tensor with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    decay: bool = False
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class Layer:
    name: str = ""

    def params(self) -> list[ParamBlock]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _need_cache(self, cache):
        if cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return cache


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv3D(Layer):
    """3x3x3 convolution, stride 1, zero 'same' padding."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng=None, dtype=np.float32):
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        shape = (out_ch, in_ch, 3, 3, 3)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = he_uniform(rng, shape, in_ch * 27, dtype)
        self.weight = ParamBlock(f"{name}.weight", w, decay=True)
        self.bias = ParamBlock(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def _wmat(self, w):
        # (O, C, 3, 3, 3) -> (O, 27 * C) matching the row order of _im2col
        o, c = w.shape[:2]
        return w.reshape(o, c, 27).transpose(0, 2, 1).reshape(o, 27 * c)

    def forward(self, x):
        n, c, d, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        cols = _im2col(x)
        out = self._wmat(self.weight.value) @ cols
        out += self.bias.value[:, None]
        self._cache = (x.shape, cols)
        return _cols_to_tensor(out, n, d, h, w)

    def backward(self, dout):
        shape, cols = self._need_cache(self._cache)
        n, c, d, h, w = shape
        o = self.out_ch
        dflat = dout.transpose(1, 0, 2, 3, 4).reshape(o, n * d * h * w)
        dw = (dflat @ cols.T).reshape(o, 27, c).transpose(0, 2, 1).reshape(self.weight.shape)
        self.weight.grad += dw
        self.bias.grad += dflat.sum(axis=1)
        # input gradient = 'same' convolution of dout with the flipped, transposed kernel
        wt = self.weight.value[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        dx = self._wmat(np.ascontiguousarray(wt)) @ _im2col(dout)
        return _cols_to_tensor(dx, n, d, h, w)


def _im2col(x):
    """Column matrix of shape (27 * C, N * D * H * W).

    Row ``t * C + c`` holds channel ``c`` shifted by kernel tap ``t``
    (taps enumerated kz, ky, kx); columns enumerate output voxels.
    """
    n, c, d, h, w = x.shape
    xp = np.zeros((c, n, d + 2, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3, 4)
    cols = np.empty((27, c, n, d, h, w), dtype=x.dtype)
    t = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                cols[t] = xp[:, :, i:i + d, j:j + h, k:k + w]
                t += 1
    return cols.reshape(27 * c, n * d * h * w)


def _cols_to_tensor(m, n, d, h, w):
    return np.ascontiguousarray(m.reshape(-1, n, d, h, w).transpose(1, 0, 2, 3, 4))


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._cache = None

    def forward(self, x):
        self._cache = x > 0
        # maximum keeps NaN so diverged weights still reach the loss check
        return np.maximum(x, np.zeros((), dtype=x.dtype))

    def backward(self, dout):
        pos = self._need_cache(self._cache)
        return np.where(pos, dout, np.zeros((), dtype=dout.dtype))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = np.asarray(0.5, dtype=x.dtype)
    return half * (np.tanh(half * x) + 1)


class Sigmoid(Layer):
    def __init__(self, name: str = "sigmoid"):
        self.name = name
        self._cache = None

    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dout):
        y = self._need_cache(self._cache)
        return dout * y * (1 - y)


def _check_even(shape, factor, who):
    for s in shape[2:]:
        if s % factor:
            raise ShapeError(f"{who}: spatial dims {tuple(shape[2:])} not divisible by {factor}")


class MaxPool3D(Layer):
    """2x2x2 max pooling, stride 2.  Ties go to the first voxel in (z, y, x) order."""

    def __init__(self, name: str = "maxpool"):
        self.name = name
        self._cache = None

    def forward(self, x):
        _check_even(x.shape, 2, self.name)
        n, c, d, h, w = x.shape
        blocks = (x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
                  .transpose(0, 1, 2, 4, 6, 3, 5, 7)
                  .reshape(n, c, d // 2, h // 2, w // 2, 8))
        idx = blocks.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, idx = self._need_cache(self._cache)
        n, c, d, h, w = shape
        g = np.zeros(idx.shape + (8,), dtype=dout.dtype)
        np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
        return (g.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                .reshape(shape))


class NearestUpsample3D(Layer):
    """x2 nearest-neighbour upsampling; backward sums each 2x2x2 replica set."""

    def __init__(self, name: str = "upsample"):
        self.name = name

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def backward(self, dout):
        n, c, d, h, w = dout.shape
        return dout.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))


class DownsampleInput(Layer):
    """Average-pool by an integer ``factor`` per spatial axis (input pyramid)."""

    def __init__(self, factor: int, name: str = "downsample"):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor
        self.name = name
        self._shape = None

    def forward(self, x):
        f = self.factor
        self._shape = x.shape
        if f == 1:
            return x
        _check_even(x.shape, f, self.name)
        n, c, d, h, w = x.shape
        return x.reshape(n, c, d // f, f, h // f, f, w // f, f).mean(axis=(3, 5, 7))

    def backward(self, dout):
        shape = self._need_cache(self._shape)
        f = self.factor
        if f == 1:
            return dout
        g = dout / (f ** 3)
        return g.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4).reshape(shape)


class ConcatChannels(Layer):
    def __init__(self, name: str = "concat"):
        self.name = name
        self._sizes = None

    def forward(self, xs):
        self._sizes = [x.shape[1] for x in xs]
        ref = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"{self.name}: cannot concatenate {ref} with {x.shape}")
        return np.concatenate(xs, axis=1)

    def backward(self, dout):
        sizes = self._need_cache(self._sizes)
        return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


class AvgPoolToScalarPerChannel(Layer):
    """Global average pool: (N, C, D, H, W) -> (N, C)."""

    def __init__(self, name: str = "gap"):
        self.name = name
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, dout):
        shape = self._need_cache(self._shape)
        count = shape[2] * shape[3] * shape[4]
        g = dout / count
        return np.broadcast_to(g[:, :, None, None, None], shape).copy()


class Dense(Layer):
    """Fully connected layer on (N, features)."""

    def __init__(self, name: str, in_f: int, out_f: int, rng=None, dtype=np.float32):
        self.name = name
        self.in_f, self.out_f = in_f, out_f
        if rng is None:
            w = np.zeros((out_f, in_f), dtype=dtype)
        else:
            w = he_uniform(rng, (out_f, in_f), in_f, dtype)
        self.weight = ParamBlock(f"{name}.weight", w)
        self.bias = ParamBlock(f"{name}.bias", np.zeros(out_f, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        if x.shape[1] != self.in_f:
            raise ShapeError(f"{self.name}: expected {self.in_f} features, got {x.shape[1]}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout):
        x = self._need_cache(self._cache)
        self.weight.grad += dout.T @ x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


class SEBlock(Layer):
    """Squeeze-and-excitation channel gating.

    ``z = sigmoid(W2 relu(W1 gap(x) + b1) + b2)`` and ``out[n, c] = x[n, c] * z[n, c]``.
    """

    def __init__(self, name: str, channels: int, reduction: int = 2, rng=None, dtype=np.float32):
        if reduction < 1 or channels % reduction:
            raise ShapeError(f"{name}: {channels} channels not divisible by reduction {reduction}")
        self.name = name
        self.channels = channels
        hidden = channels // reduction
        self.pool = AvgPoolToScalarPerChannel(f"{name}.gap")
        self.fc1 = Dense(f"{name}.fc1", channels, hidden, rng, dtype)
        self.relu = ReLU(f"{name}.relu")
        self.fc2 = Dense(f"{name}.fc2", hidden, channels, rng, dtype)
        self.gate = Sigmoid(f"{name}.gate")
        self._cache = None

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        z = self.gate.forward(self.fc2.forward(self.relu.forward(self.fc1.forward(self.pool.forward(x)))))
        self._cache = (x, z)
        return x * z[:, :, None, None, None]

    def backward(self, dout):
        x, z = self._need_cache(self._cache)
        dz = (dout * x).sum(axis=(2, 3, 4))
        ds = self.fc1.backward(self.relu.backward(self.fc2.backward(self.gate.backward(dz))))
        return dout * z[:, :, None, None, None] + self.pool.backward(ds)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-5
    t: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0 or self.l2 < 0:
            raise ValueError("lr and eps must be positive, l2 non-negative")


def adam_step(params: list[ParamBlock], state: AdamState) -> None:
    """One bias-corrected Adam update in place.

    The L2 term ``l2 * w`` is added to the gradient of blocks flagged
    ``decay`` (convolution kernels) before the moment updates.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        if p.decay and state.l2:
            g = g + state.l2 * p.value
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * (g * g)
        mhat = p.m / c1
        vhat = p.v / c2
        p.value -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.value.dtype, copy=False)


def zero_grad(params: list[ParamBlock]) -> None:
    for p in params:
        p.grad.fill(0)
