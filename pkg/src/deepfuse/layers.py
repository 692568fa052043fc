"""Dense-tensor layer primitives with exact reverse-mode gradients.

Every layer the catalog networks use is implemented twice over nothing:
one numpy kernel per op, used both by the stateful layer classes (the
training engine) and by the stateless functional wrappers at the bottom
of this module.

Layout convention: the public tensor format is NCHW (batch, channel,
height, width), row-major. Internally the layer classes run NHWC because
channel-last im2col feeds BLAS far better on small channel counts; the
functional wrappers and the network front-ends convert at the boundary.

All ops are pure given (input, params, mode): no globals, no shared
mutable state, so distinct layer instances are safe to drive from
concurrent contexts. A single instance retains its forward cache for
backward and must not be shared mid-step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input shape incompatible with an op's contract."""


def nchw_to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def nhwc_to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _require_rank4(x: np.ndarray, who: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{who}: expected a rank-4 tensor, got rank {x.ndim}")


def _require_dtype(x: np.ndarray, dtype: np.dtype, who: str) -> None:
    if x.dtype != dtype:
        raise ShapeError(f"{who}: input dtype {x.dtype} does not match layer dtype {dtype}")


def _build_cols(xp: np.ndarray, out_h: int, out_w: int, k: int) -> np.ndarray:
    """im2col for stride-1 windows on a padded NHWC tensor.

    Returns (N*out_h*out_w, k*k*C) with columns ordered (ki, kj, c), which
    matches a (k, k, ci, co) weight reshaped to (k*k*ci, co).
    """
    n, _, _, c = xp.shape
    cols = np.empty((n, out_h, out_w, k * k * c), dtype=xp.dtype)
    s = 0
    for i in range(k):
        for j in range(k):
            cols[:, :, :, s : s + c] = xp[:, i : i + out_h, j : j + out_w, :]
            s += c
    return cols.reshape(n * out_h * out_w, k * k * c)


class Conv2d:
    """2D cross-correlation (3x3 pad 1 or 1x1 pad 0), stride 1, plus bias.

    Weight layout is (k, k, in_channels, out_channels). The 3x3 padding of 1
    keeps H and W constant, which is what the catalog networks rely on.
    """

    def __init__(self, in_channels: int, out_channels: int, ksize: int = 3,
                 dtype=np.float32):
        if ksize not in (1, 3):
            raise ValueError(f"unsupported kernel size {ksize}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ksize = ksize
        self.padding = 1 if ksize == 3 else 0
        self.stride = 1
        self.dtype = np.dtype(dtype)
        self.w = np.zeros((ksize, ksize, in_channels, out_channels), dtype=dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _require_rank4(x, "conv2d")
        _require_dtype(x, self.dtype, "conv2d")
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d: input has {c} channels, kernel expects {self.in_channels}")
        if self.ksize == 1:
            flat = x.reshape(-1, c)
            y = flat @ self.w.reshape(c, self.out_channels)
            y += self.b
            self._cache = (flat, x.shape)
            return y.reshape(n, h, w, self.out_channels)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = _build_cols(xp, h, w, 3)
        y = cols @ self.w.reshape(-1, self.out_channels)
        y += self.b
        self._cache = (cols, x.shape)
        return y.reshape(n, h, w, self.out_channels)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("conv2d: backward called before forward")
        cols, x_shape = self._cache
        n, h, w, ci = x_shape
        dyf = dy.reshape(-1, self.out_channels)
        self.db = dyf.sum(axis=0)
        if self.ksize == 1:
            self.dw = (cols.T @ dyf).reshape(self.w.shape)
            dx = dyf @ self.w.reshape(ci, self.out_channels).T
            return dx.reshape(x_shape)
        self.dw = (cols.T @ dyf).reshape(self.w.shape)
        # d_input is the full correlation of dy with the flipped, channel-
        # transposed kernel; another GEMM instead of a col2im scatter.
        wr = self.w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, ci)
        dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
        dcols = _build_cols(dyp, h, w, 3)
        dx = dcols @ wr
        return dx.reshape(x_shape)

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def grads(self) -> dict[str, np.ndarray]:
        return {"w": self.dw, "b": self.db}

    def decay_names(self) -> set[str]:
        return {"w"}

    def state(self) -> dict[str, np.ndarray]:
        return {}


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    estimates with momentum 0.9; eval mode normalizes with the running
    estimates. Variance is the biased (1/M) estimator in both places.
    """

    EPS = 1e-5
    MOMENTUM = 0.9

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.dtype = np.dtype(dtype)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _require_rank4(x, "batchnorm")
        _require_dtype(x, self.dtype, "batchnorm")
        if x.shape[3] != self.channels:
            raise ShapeError(
                f"batchnorm: input has {x.shape[3]} channels, expected {self.channels}")
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            self.running_mean = (self.MOMENTUM * self.running_mean
                                 + (1.0 - self.MOMENTUM) * mean).astype(self.dtype)
            self.running_var = (self.MOMENTUM * self.running_var
                                + (1.0 - self.MOMENTUM) * var).astype(self.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std.astype(self.dtype), train)
        return (self.gamma * xhat + self.beta).astype(self.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batchnorm: backward called before forward")
        xhat, inv_std, train = self._cache
        self.dbeta = dy.sum(axis=(0, 1, 2))
        self.dgamma = (dy * xhat).sum(axis=(0, 1, 2))
        dxhat = dy * self.gamma
        if not train:
            return dxhat * inv_std
        m = dy.shape[0] * dy.shape[1] * dy.shape[2]
        # batch statistics depend on x, so the Jacobian picks up the usual
        # mean / variance correction terms
        return (inv_std / m) * (m * dxhat
                                - dxhat.sum(axis=(0, 1, 2))
                                - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self) -> dict[str, np.ndarray]:
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def decay_names(self) -> set[str]:
        return set()

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU:
    """Elementwise max(x, 0) with the active mask retained for backward."""

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("relu: backward called before forward")
        return np.where(self._mask, dy, np.zeros((), dtype=dy.dtype))

    def params(self):
        return {}

    def grads(self):
        return {}

    def decay_names(self):
        return set()

    def state(self):
        return {}


class MaxPool2:
    """2x2 max pooling, stride 2. H and W must be even.

    The argmax index of every window (0..3, row-major within the window)
    is retained; backward routes the upstream gradient to the winner only.
    Ties resolve to the lowest index, so routing is deterministic.
    """

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _require_rank4(x, "maxpool2")
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2: H and W must be even, got {h}x{w}")
        win = x.reshape(n, h // 2, 2, w // 2, 2, c)
        win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=4)
        y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
        self._cache = (idx, x.shape)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("maxpool2: backward called before forward")
        idx, (n, h, w, c) = self._cache
        dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
        dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return np.ascontiguousarray(dwin).reshape(n, h, w, c)

    @property
    def mask(self) -> np.ndarray | None:
        return None if self._cache is None else self._cache[0]

    def params(self):
        return {}

    def grads(self):
        return {}

    def decay_names(self):
        return set()

    def state(self):
        return {}


class GlobalAvgPool:
    """Average over the full spatial extent, producing (N, 1, 1, C)."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        _require_rank4(x, "avgpool_global")
        self._shape = x.shape
        return x.mean(axis=(1, 2), keepdims=True)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise RuntimeError("avgpool_global: backward called before forward")
        n, h, w, c = self._shape
        return np.broadcast_to(dy / (h * w), self._shape).astype(dy.dtype, copy=True)

    def params(self):
        return {}

    def grads(self):
        return {}

    def decay_names(self):
        return set()

    def state(self):
        return {}


class Fuse:
    """Combine K same-stage tensors: sum, elementwise max, or channel concat.

    Sum accumulates in ascending input order so float rounding is fixed.
    Max ties resolve to the lowest input index. Concat keeps input order
    along the channel axis. Backward: sum copies upstream to every branch,
    max routes via the winner mask, concat slices by channel ranges.
    """

    KINDS = ("sum", "max", "concat")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, inputs: list[np.ndarray], train: bool = False) -> np.ndarray:
        if not inputs:
            raise ShapeError("fuse: at least one input required")
        base = inputs[0].shape
        for k, t in enumerate(inputs[1:], start=1):
            same = t.shape == base if self.kind != "concat" else t.shape[:3] == base[:3]
            if not same:
                raise ShapeError(
                    f"fuse[{self.kind}]: input {k} has shape {t.shape}, "
                    f"incompatible with input 0 of shape {base}")
        if self.kind == "sum":
            out = inputs[0].copy()
            for t in inputs[1:]:
                out += t
            self._cache = (len(inputs), None)
            return out
        if self.kind == "max":
            stack = np.stack(inputs)
            winner = stack.argmax(axis=0)
            out = np.take_along_axis(stack, winner[None], axis=0)[0]
            self._cache = (len(inputs), winner)
            return out
        splits = np.cumsum([t.shape[3] for t in inputs])[:-1]
        self._cache = (len(inputs), splits)
        return np.concatenate(inputs, axis=3)

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("fuse: backward called before forward")
        k, aux = self._cache
        if self.kind == "sum":
            return [dy.copy() for _ in range(k)]
        if self.kind == "max":
            outs = []
            for i in range(k):
                outs.append(np.where(aux == i, dy, np.zeros((), dtype=dy.dtype)))
            return outs
        return [np.ascontiguousarray(part) for part in np.split(dy, aux, axis=3)]

    def params(self):
        return {}

    def grads(self):
        return {}

    def decay_names(self):
        return set()

    def state(self):
        return {}


def softmax_xent(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(scores) against integer labels.

    Accepts (N, classes) or (N, classes, 1, 1). Uses max-subtraction for
    stability. Returns (loss, d_scores) with d_scores = (softmax - onehot) / N
    in the input's shape.
    """
    squeeze = scores.ndim == 4
    if squeeze:
        if scores.shape[2] != 1 or scores.shape[3] != 1:
            raise ShapeError(f"softmax_xent: spatial extent must be 1x1, got {scores.shape}")
        flat = scores.reshape(scores.shape[0], scores.shape[1])
    elif scores.ndim == 2:
        flat = scores
    else:
        raise ShapeError(f"softmax_xent: expected rank 2 or 4 scores, got rank {scores.ndim}")
    n, k = flat.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_xent: expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_xent: label out of range [0, {k})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    logp = shifted - np.log(exps.sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    d = d.astype(flat.dtype, copy=False)
    return loss, d.reshape(scores.shape)


def softmax_probs(scores: np.ndarray) -> np.ndarray:
    """Softmax over the class axis of (N, classes) or (N, classes, 1, 1)."""
    flat = scores.reshape(scores.shape[0], -1) if scores.ndim == 4 else scores
    shifted = flat - flat.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


@dataclass
class GradBundle:
    """Gradients produced by one backward call: d_input plus per-parameter
    arrays keyed like the layer's params()."""

    d_input: np.ndarray
    d_params: dict[str, np.ndarray] = field(default_factory=dict)


# --- NCHW functional surface -------------------------------------------------
#
# Thin wrappers over the layer classes for callers that hold plain NCHW
# arrays. Stateful layers passed in retain their forward cache, so
# `backward(layer, upstream)` works afterwards.


def conv2d(x: np.ndarray, conv: Conv2d) -> np.ndarray:
    _require_rank4(x, "conv2d")
    return nhwc_to_nchw(conv.forward(nchw_to_nhwc(x)))


def maxpool2(x: np.ndarray, pool: MaxPool2 | None = None) -> tuple[np.ndarray, np.ndarray]:
    pool = pool or MaxPool2()
    y = pool.forward(nchw_to_nhwc(x))
    return nhwc_to_nchw(y), pool.mask.transpose(0, 3, 1, 2)


def avgpool_global(x: np.ndarray, pool: GlobalAvgPool | None = None) -> np.ndarray:
    pool = pool or GlobalAvgPool()
    return nhwc_to_nchw(pool.forward(nchw_to_nhwc(x)))


def relu(x: np.ndarray, unit: ReLU | None = None) -> np.ndarray:
    unit = unit or ReLU()
    return nhwc_to_nchw(unit.forward(nchw_to_nhwc(x)))


def batchnorm(x: np.ndarray, bn: BatchNorm2d, train: bool = False) -> np.ndarray:
    return nhwc_to_nchw(bn.forward(nchw_to_nhwc(x), train=train))


def linear_classifier(x: np.ndarray, fc: Conv2d) -> np.ndarray:
    _require_rank4(x, "linear_classifier")
    if x.shape[2] != 1 or x.shape[3] != 1:
        raise ShapeError(
            f"linear_classifier: spatial extent must be 1x1 after pooling, got {x.shape}")
    return nhwc_to_nchw(fc.forward(nchw_to_nhwc(x)))


def elementwise_fuse(kind: str, inputs: list[np.ndarray],
                     node: Fuse | None = None) -> np.ndarray:
    node = node or Fuse(kind)
    if node.kind != kind:
        raise ValueError(f"fuse node kind {node.kind!r} does not match {kind!r}")
    return nhwc_to_nchw(node.forward([nchw_to_nhwc(t) for t in inputs]))


def backward(node, upstream: np.ndarray) -> GradBundle:
    """Vector-Jacobian product of `node` at its retained forward point.

    `upstream` is NCHW; the returned d_input is NCHW as well. For Fuse
    nodes d_input is the list of per-branch gradients.
    """
    d = node.backward(nchw_to_nhwc(upstream))
    if isinstance(d, list):
        return GradBundle(d_input=[nhwc_to_nchw(t) for t in d],
                          d_params=dict(node.grads()))
    return GradBundle(d_input=nhwc_to_nchw(d), d_params=dict(node.grads()))
