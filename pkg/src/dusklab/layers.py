"""Neural building blocks: conv, batchnorm, activations, pooling, softmax, CE.

Layers are plain parameter containers; calling one runs its forward pass on
the active tape.  Convolution is cross-correlation (no kernel flip) with
zero padding.  BatchNorm has three modes:

  train  batch statistics, running stats updated with momentum 0.1
  eval   running statistics, pure function
  adapt  batch statistics, running stats frozen (test-time adaptation)
"""

from __future__ import annotations

import numpy as np

from .tensor import PRIMITIVE_CHECKS, Tensor, _emit, as_tensor, reduce


class DegenerateBatchError(ValueError):
    """Batch statistics undefined: a single value per channel."""


# -- activations -------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0  # subgradient at 0 is 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda needs: lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.data
    # stable two-branch form: no overflow for |v| up to 1e9
    out = np.where(v >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _emit(out, (x,), lambda needs: lambda g: (g * out * (1.0 - out),), "sigmoid")


def activations(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), (ho, wo), xp.shape


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, pad: int, out_hw):
    n, c = xp_shape[0], xp_shape[1]
    ho, wo = out_hw
    dxp = np.zeros(xp_shape, dtype=np.float64)
    dc = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dc[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw) + bias."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    cols, (ho, wo), xp_shape = _im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo) + bias.data[None, :, None, None]

    def make_backward(needs):
        def bw(g):
            g2 = g.reshape(n, cout, ho * wo)
            gx = gw = gb = None
            if needs[0]:
                dcols = np.matmul(w2.T, g2)
                gx = _col2im(dcols, xp_shape, kh, kw, stride, pad, (ho, wo))
            if needs[1]:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            if needs[2]:
                gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return bw

    return _emit(out, (x, weight, bias), make_backward, "conv2d")


class Conv2D:
    """2-D convolution layer; He-initialized weight, zero bias."""

    def __init__(self, in_c: int, out_c: int, k: int, stride: int = 1, pad: int = 0, rng=None):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (in_c * k * k))
        self.weight = Tensor(rng.normal(0.0, scale, size=(out_c, in_c, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_c), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv2d_forward(layer: Conv2D, x: Tensor) -> Tensor:
    return layer(x)


# -- batch normalization -------------------------------------------------------

class BatchNorm2D:
    """Per-channel normalization with learnable affine terms gamma/beta.

    gamma and beta are the only trainable members; running statistics are
    buffers.  In adapt mode the batch provides the statistics while the
    running buffers stay frozen.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.mode = "train"

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"input has {c} channels, layer expects {self.channels}")
        gamma = self.gamma.reshape((1, c, 1, 1))
        beta = self.beta.reshape((1, c, 1, 1))
        if self.mode == "eval":
            inv = 1.0 / np.sqrt(self.running_var + self.EPS)
            xhat = (x - Tensor(self.running_mean.reshape(1, c, 1, 1))) * Tensor(inv.reshape(1, c, 1, 1))
            return gamma * xhat + beta
        if n * h * w < 2:
            raise DegenerateBatchError(f"batch statistics undefined for {n}x{c}x{h}x{w} in {self.mode} mode")
        mu = x.mean(axes=(0, 2, 3), keepdims=True)
        diff = x - mu
        var = (diff * diff).mean(axes=(0, 2, 3), keepdims=True)
        xhat = diff * ((var + self.EPS) ** -0.5)
        if self.mode == "train":
            m = self.MOMENTUM
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data.reshape(c)
            self.running_var = (1.0 - m) * self.running_var + m * var.data.reshape(c)
        return gamma * xhat + beta

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def batchnorm2d_forward(layer: BatchNorm2D, x: Tensor) -> Tensor:
    return layer(x)


# -- dense ---------------------------------------------------------------------

class DenseLayer:
    """Fully connected: out = x @ weight.T + bias, weight is (out, in)."""

    def __init__(self, in_f: int, out_f: int, rng=None):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_f)
        self.weight = Tensor(rng.normal(0.0, scale, size=(out_f, in_f)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.weight.transpose()) + self.bias

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


# -- pooling / resize -----------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first window element."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def make_backward(needs):
        def bw(g):
            scat = np.zeros_like(windows)
            np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
            gx = scat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (gx,)
        return bw

    return _emit(out, (x,), make_backward, "maxpool2")


def global_maxpool(x: Tensor) -> Tensor:
    """Reduce H,W to 1,1 by max; gradient routes to the argmax cell."""
    return reduce("max", x, axes=(2, 3), keepdims=True)


def nearest_upsample2(x: Tensor) -> Tensor:
    """Double H and W by replication."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def make_backward(needs):
        def bw(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
        return bw

    return _emit(out, (x,), make_backward, "upsample2")


def pool_and_resize(kind: str, x: Tensor) -> Tensor:
    if kind == "maxpool2":
        return maxpool2(x)
    if kind == "global_maxpool":
        return global_maxpool(x)
    if kind == "nearest_upsample2":
        return nearest_upsample2(x)
    raise ValueError(f"unknown pool/resize kind {kind!r}")


# -- softmax family ---------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable log-softmax along `axis`.

    The per-slice max is subtracted as a constant shift, which leaves both
    the value and the gradient exact.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    s = x - shift
    return s - s.exp().sum(axes=axis, keepdims=True).log()


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return log_softmax(x, axis).exp()


def cross_entropy(logits: Tensor, labels, ignore: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log p(label).

    logits: (N,C,H,W); labels: (N,H,W) integers in [0,C) or `ignore`.
    """
    logits = as_tensor(logits)
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    lab = lab.astype(np.int64)
    n, c, h, w = logits.shape
    if lab.shape != (n, h, w):
        raise ValueError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    valid = lab != ignore
    if np.any((lab < 0) | ((lab >= c) & valid)):
        bad = lab[(lab < 0) | ((lab >= c) & valid)][0]
        raise ValueError(f"label {bad} outside [0,{c}) and not ignore={ignore}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels ignored: cross-entropy undefined")
    onehot = np.zeros((n, c, h, w))
    nn, hh, ww = np.nonzero(valid)
    onehot[nn, lab[valid], hh, ww] = 1.0
    picked = (log_softmax(logits, axis=1) * Tensor(onehot)).sum()
    return -(picked / float(n_valid))


# -- gradient-sweep registry --------------------------------------------------

def _register_layer_primitives():
    def entry(name, builder):
        PRIMITIVE_CHECKS.append((name, builder))

    entry("relu", lambda rng: (lambda t: (relu(t) * relu(t)).sum(), Tensor(rng.normal(size=(3, 4)) + 0.1)))
    entry("sigmoid", lambda rng: (lambda t: (sigmoid(t) ** 2.0).sum(), Tensor(rng.normal(size=(3, 4)))))

    def conv_builder(rng):
        wt = Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.5)
        b = Tensor(rng.normal(size=2) * 0.1)
        return lambda t: (conv2d(t, wt, b, stride=1, pad=1) ** 2.0).sum(), Tensor(rng.normal(size=(2, 3, 5, 5)))

    entry("conv2d", conv_builder)

    def conv_weight_builder(rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        b = Tensor(np.zeros(2))
        return lambda t: (conv2d(x, t, b, stride=2, pad=1) ** 2.0).sum(), Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.5)

    entry("conv2d_weight", conv_weight_builder)

    def bn_gamma_builder(rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def f(t):
            bn = BatchNorm2D(3)
            bn.mode = "adapt"
            bn.gamma = t
            return (bn(x) ** 2.0).sum()

        return f, Tensor(rng.normal(size=3) + 1.5)

    entry("batchnorm_gamma", bn_gamma_builder)

    def bn_input_builder(rng):
        def f(t):
            bn = BatchNorm2D(2)
            bn.mode = "adapt"
            return (bn(t) ** 2.0).sum()

        return f, Tensor(rng.normal(size=(2, 2, 3, 3)))

    entry("batchnorm_input", bn_input_builder)

    entry("maxpool2", lambda rng: (lambda t: (maxpool2(t) ** 2.0).sum(), Tensor(rng.normal(size=(2, 2, 4, 4)))))
    entry("global_maxpool", lambda rng: (lambda t: (global_maxpool(t) ** 2.0).sum(), Tensor(rng.normal(size=(2, 2, 4, 4)))))
    entry("upsample2", lambda rng: (lambda t: (nearest_upsample2(t) ** 2.0).sum(), Tensor(rng.normal(size=(2, 2, 3, 3)))))
    entry("log_softmax", lambda rng: (lambda t: (log_softmax(t, axis=1) ** 2.0).sum(), Tensor(rng.normal(size=(2, 4, 3, 3)))))

    def dense_builder(rng):
        layer = DenseLayer(4, 3, rng=rng)
        return lambda t: (layer(t) ** 2.0).sum(), Tensor(rng.normal(size=(2, 4)))

    entry("dense", dense_builder)

    def ce_builder(rng):
        labels = rng.integers(0, 3, size=(2, 4, 4))
        return lambda t: cross_entropy(t, labels), Tensor(rng.normal(size=(2, 3, 4, 4)))

    entry("cross_entropy", ce_builder)


_register_layer_primitives()
