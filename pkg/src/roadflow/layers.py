"""Neural network layers: 2D convolution, direction-oriented 1D convolution,
batch normalization, pooling, resizing, residual blocks, dense layers.

Spatial tensors are channel-last, ``(batch, height, width, channels)``; the
layer entry points also accept unbatched ``(H, W, C)`` input and return the
same rank. Fused layers (conv, batchnorm, pooling, bilinear resize) register
a single tape entry with a hand-written backward rule; those rules are what
the finite-difference suite in ``gradcheck`` exercises.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Direction index vectors for the 1D convolution group: horizontal,
# vertical, forward diagonal, backward diagonal. Offsets for tap i are
# (i * dh, i * dw).
DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ValueError(f"expected rank-3 or rank-4 input, got shape {x.shape}")


def _make_out(x: Tensor, data4: np.ndarray, batched: bool) -> Tensor:
    return Tensor(data4 if batched else data4[0])


def _grad4(g: np.ndarray, batched: bool) -> np.ndarray:
    return g if batched else g[None]


# --------------------------------------------------------------------------
# 2D convolution, stride 1, same padding

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padding stride-1 convolution; kernel is (k, k, C_in, C_out), k odd."""
    k = kernel.shape[0]
    if kernel.ndim != 4 or kernel.shape[1] != k:
        raise ValueError(f"kernel must be square (k, k, C_in, C_out), got {kernel.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel extent must be odd for same padding, got {k}")
    x4, batched = _as_batched(x)
    b_n, h, w, c_in = x4.shape
    if c_in != kernel.shape[2]:
        raise ValueError(f"input has {c_in} channels, kernel expects {kernel.shape[2]}")
    c_out = kernel.shape[3]
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} channels")
    p = (k - 1) // 2

    def im2col(arr):
        xp = np.pad(arr, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((b_n, h, w, k, k, c_in))
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
        return cols.reshape(b_n * h * w, k * k * c_in)

    cols = im2col(x4)
    k_mat = kernel.data.reshape(k * k * c_in, c_out)
    out4 = (cols @ k_mat).reshape(b_n, h, w, c_out)
    if bias is not None:
        out4 += bias.data
    out = _make_out(x, out4, batched)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    if T.recording(*inputs):
        def fn(g):
            g4 = _grad4(g, batched)
            g_mat = g4.reshape(b_n * h * w, c_out)
            d_kernel = (cols.T @ g_mat).reshape(kernel.shape)
            d_cols = (g_mat @ k_mat.T).reshape(b_n, h, w, k, k, c_in)
            dxp = np.zeros((b_n, h + 2 * p, w + 2 * p, c_in))
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + w, :] += d_cols[:, :, :, i, j, :]
            dx = dxp[:, p:p + h, p:p + w, :]
            if not batched:
                dx = dx[0]
            if bias is None:
                return (dx, d_kernel)
            return (dx, d_kernel, g_mat.sum(axis=0))
        T.record(out, inputs, fn)
    return out


class Conv2D:
    """Conv kernel + bias with Xavier init."""

    def __init__(self, k: int, c_in: int, c_out: int, rng: np.random.Generator):
        self.kernel = T.xavier_init((k, k, c_in, c_out),
                                    fan_in=k * k * c_in, fan_out=k * k * c_out,
                                    rng=rng)
        self.bias = T.zeros((c_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias)

    def param_items(self, prefix: str = ""):
        return [(prefix + "kernel", self.kernel), (prefix + "bias", self.bias)]


# --------------------------------------------------------------------------
# Multi-directional 1D convolution
#
# out_d[h, w, c] = sum_i sum_j x[h + i*dh, w + i*dw, j] * K_d[j, i+R, c]
# for taps i in [-R, R]; out-of-bounds reads are zero. The four direction
# outputs (C_out/4 channels each) concatenate channel-wise in the order of
# DIRECTIONS.

def mdconv1d(x: Tensor, kernels: list[Tensor], radius: int) -> Tensor:
    if len(kernels) != 4:
        raise ValueError(f"need one kernel per direction, got {len(kernels)}")
    x4, batched = _as_batched(x)
    b_n, h, w, c_in = x4.shape
    taps = 2 * radius + 1
    c_q = kernels[0].shape[2]
    for kt in kernels:
        if kt.shape != (c_in, taps, c_q):
            raise ValueError(
                f"kernel shape {kt.shape} != ({c_in}, {taps}, {c_q})")
    r = radius
    xp = np.pad(x4, ((0, 0), (r, r), (r, r), (0, 0)))
    flat = b_n * h * w

    def tap_matrix(i, dh, dw):
        sl = xp[:, r + i * dh: r + i * dh + h, r + i * dw: r + i * dw + w, :]
        return np.ascontiguousarray(sl).reshape(flat, c_in)

    taps_by_dir = {}
    parts = []
    for d, (dh, dw) in enumerate(DIRECTIONS):
        acc = np.zeros((flat, c_q))
        kd = kernels[d].data
        mats = [tap_matrix(i, dh, dw) for i in range(-r, r + 1)]
        taps_by_dir[d] = mats
        for i in range(-r, r + 1):
            acc += mats[i + r] @ kd[:, i + r, :]
        parts.append(acc)
    out4 = np.concatenate(parts, axis=1).reshape(b_n, h, w, 4 * c_q)
    out = _make_out(x, out4, batched)

    inputs = (x, *kernels)
    if T.recording(*inputs):
        def fn(g):
            g4 = _grad4(g, batched).reshape(flat, 4 * c_q)
            dxp = np.zeros_like(xp)
            d_kernels = []
            for d, (dh, dw) in enumerate(DIRECTIONS):
                gd = g4[:, d * c_q:(d + 1) * c_q]
                kd = kernels[d].data
                dk = np.empty_like(kd)
                for i in range(-r, r + 1):
                    dk[:, i + r, :] = taps_by_dir[d][i + r].T @ gd
                    spread = (gd @ kd[:, i + r, :].T).reshape(b_n, h, w, c_in)
                    dxp[:, r + i * dh: r + i * dh + h,
                        r + i * dw: r + i * dw + w, :] += spread
                d_kernels.append(dk)
            dx = dxp[:, r:r + h, r:r + w, :]
            if not batched:
                dx = dx[0]
            return (dx, *d_kernels)
        T.record(out, inputs, fn)
    return out


class MultiDirConv1D:
    """Four direction-oriented 1D kernels over a shared input, no bias."""

    def __init__(self, c_in: int, c_out: int, radius: int,
                 rng: np.random.Generator):
        if c_out % 4 != 0:
            raise ValueError(f"output channels must divide by 4, got {c_out}")
        if radius < 1:
            raise ValueError(f"radius must be >= 1, got {radius}")
        taps = 2 * radius + 1
        c_q = c_out // 4
        self.radius = radius
        self.kernels = [
            T.xavier_init((c_in, taps, c_q), fan_in=c_in * taps,
                          fan_out=c_q * taps, rng=rng)
            for _ in DIRECTIONS
        ]

    def __call__(self, x: Tensor) -> Tensor:
        return mdconv1d(x, self.kernels, self.radius)

    def param_items(self, prefix: str = ""):
        names = ("horizontal", "vertical", "diag_fwd", "diag_bwd")
        return [(prefix + f"kernel_{n}", k) for n, k in zip(names, self.kernels)]


# --------------------------------------------------------------------------
# Batch normalization (channel-last, stats over all leading axes)

class BatchNorm:
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = T.create((channels,), 1.0, requires_grad=True)
        self.beta = T.zeros((channels,), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if x.ndim < 2 or x.shape[-1] != self.gamma.shape[0]:
            raise ValueError(
                f"batchnorm over {self.gamma.shape[0]} channels got shape {x.shape}")
        axes = tuple(range(x.ndim - 1))
        n = int(np.prod(x.shape[:-1]))
        gamma, beta = self.gamma, self.beta
        if train:
            mu = x.data.mean(axis=axes)
            centered = x.data - mu
            flat2 = centered.reshape(n, x.shape[-1])
            var = np.einsum("nc,nc->c", flat2, flat2) / n
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = centered
            xhat *= inv
            out = Tensor(gamma.data * xhat + beta.data)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mu)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var)
            if T.recording(x, gamma, beta):
                def fn(g):
                    d_beta = g.sum(axis=axes)
                    d_gamma = (g * xhat).sum(axis=axes)
                    gx = g * gamma.data
                    dx = inv / n * (n * gx - gx.sum(axis=axes)
                                    - xhat * (gx * xhat).sum(axis=axes))
                    return (dx, d_gamma, d_beta)
                T.record(out, (x, gamma, beta), fn)
        else:
            # Freeze copies: the running buffers may be updated later.
            rm = self.running_mean.copy()
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x.data - rm) * inv
            out = Tensor(gamma.data * xhat + beta.data)
            if T.recording(x, gamma, beta):
                def fn(g):
                    return (g * (gamma.data * inv),
                            (g * xhat).sum(axis=axes),
                            g.sum(axis=axes))
                T.record(out, (x, gamma, beta), fn)
        return out

    def param_items(self, prefix: str = ""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]


# --------------------------------------------------------------------------
# Pooling and resizing

def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties route to the first window cell
    in row-major order."""
    x4, batched = _as_batched(x)
    b_n, h, w, c = x4.shape
    if h % k or w % k:
        raise ValueError(f"extents {(h, w)} not divisible by pool factor {k}")
    hp, wp = h // k, w // k
    windows = (x4.reshape(b_n, hp, k, wp, k, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(b_n, hp, wp, k * k, c))
    idx = windows.argmax(axis=3)
    out4 = np.take_along_axis(windows, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = _make_out(x, out4, batched)
    if T.recording(x):
        def fn(g):
            g4 = _grad4(g, batched)
            dwin = np.zeros((b_n, hp, wp, k * k, c))
            np.put_along_axis(dwin, idx[:, :, :, None, :], g4[:, :, :, None, :], axis=3)
            dx = (dwin.reshape(b_n, hp, wp, k, k, c)
                  .transpose(0, 1, 3, 2, 4, 5)
                  .reshape(b_n, h, w, c))
            return (dx if batched else dx[0],)
        T.record(out, (x,), fn)
    return out


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1D bilinear weights with half-pixel centers and edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_resize(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Separable bilinear resize (half-pixel centers, clamped edges)."""
    x4, batched = _as_batched(x)
    _, h, w, _ = x4.shape
    mh = _interp_matrix(h, h_out)
    mw = _interp_matrix(w, w_out)
    out4 = np.einsum("oh,pw,bhwc->bopc", mh, mw, x4, optimize=True)
    out = _make_out(x, out4, batched)
    if T.recording(x):
        def fn(g):
            g4 = _grad4(g, batched)
            dx = np.einsum("oh,pw,bopc->bhwc", mh, mw, g4, optimize=True)
            return (dx if batched else dx[0],)
        T.record(out, (x,), fn)
    return out


def nearest_resize(arr: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Nearest-neighbour resize of a plain array (data paths only, no grad)."""
    h, w = arr.shape[0], arr.shape[1]
    rows = np.minimum((np.arange(h_out) + 0.5) * h // h_out, h - 1).astype(int)
    cols = np.minimum((np.arange(w_out) + 0.5) * w // w_out, w - 1).astype(int)
    return arr.take(rows, axis=0).take(cols, axis=1)


# --------------------------------------------------------------------------
# Residual blocks, wired conv -> BN -> ReLU -> conv -> BN -> skip add

class ResidualBlock2D:
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2D(3, channels, channels, rng)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv2D(3, channels, channels, rng)
        self.bn2 = BatchNorm(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = self.bn1(self.conv1(x), train)
        h = T.relu(h)
        h = self.bn2(self.conv2(h), train)
        return T.add(x, h)

    def param_items(self, prefix: str = ""):
        items = []
        for name, child in (("conv1.", self.conv1), ("bn1.", self.bn1),
                            ("conv2.", self.conv2), ("bn2.", self.bn2)):
            items.extend(child.param_items(prefix + name))
        return items

    def batchnorms(self, prefix: str = ""):
        return [(prefix + "bn1.", self.bn1), (prefix + "bn2.", self.bn2)]


class ResidualBlock1D:
    """Residual block around direction-oriented 1D convolutions.

    With ``conv_kind="square2d"`` the two 1D convolutions are swapped for
    3x3 2D convolutions (ablation path); the wiring is unchanged.
    """

    def __init__(self, channels: int, radius: int, rng: np.random.Generator,
                 conv_kind: str = "md1d"):
        self.conv1 = _make_road_conv(conv_kind, channels, channels, radius, rng)
        self.bn1 = BatchNorm(channels)
        self.conv2 = _make_road_conv(conv_kind, channels, channels, radius, rng)
        self.bn2 = BatchNorm(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = self.bn1(self.conv1(x), train)
        h = T.relu(h)
        h = self.bn2(self.conv2(h), train)
        return T.add(x, h)

    def param_items(self, prefix: str = ""):
        items = []
        for name, child in (("conv1.", self.conv1), ("bn1.", self.bn1),
                            ("conv2.", self.conv2), ("bn2.", self.bn2)):
            items.extend(child.param_items(prefix + name))
        return items

    def batchnorms(self, prefix: str = ""):
        return [(prefix + "bn1.", self.bn1), (prefix + "bn2.", self.bn2)]


def _make_road_conv(kind: str, c_in: int, c_out: int, radius: int,
                    rng: np.random.Generator):
    if kind == "md1d":
        return MultiDirConv1D(c_in, c_out, radius, rng)
    if kind == "square2d":
        return Conv2D(3, c_in, c_out, rng)
    raise ValueError(f"unknown road conv kind {kind!r}")


# --------------------------------------------------------------------------
# Dense layer

class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = T.xavier_init((n_in, n_out), fan_in=n_in, fan_out=n_out,
                                    rng=rng)
        self.bias = T.zeros((n_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-1] != self.weight.shape[0]:
            raise ValueError(
                f"dense expects (..., {self.weight.shape[0]}), got {x.shape}")
        return T.add_bias(T.matmul(x, self.weight), self.bias)

    def param_items(self, prefix: str = ""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]
