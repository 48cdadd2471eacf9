"""Minimal network blocks with closed-form backward passes.

The trainable layers realize the generic linear map z_r = sum_n K_n (x_n -
mu) + b: a dense layer is the single-column case and a convolution is the
weight-shared, spatially unrolled case.  Kernels are stored as an (N, S, M)
family of S x M blocks so the per-block gradient preconditioning is a clean
matrix product.  All passes are pure functions of (parameters, inputs).
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .counters import add_macs


@dataclass
class LayerGradients:
    """Batch-summed parameter gradients mirroring a layer's shapes."""

    kernels: np.ndarray  # (N, S, M)
    bias: np.ndarray  # (S,)


def _center(x, mean):
    if mean is None:
        return x
    return x - mean


class DenseLayer:
    """Fully-connected layer: z = W (x - mu) + b with N = R = 1."""

    def __init__(self, weight, bias):
        weight = np.asarray(weight, dtype=float)
        if weight.ndim != 2:
            raise ValueError("dense weight must be 2-D (S, M)")
        self.kernels = weight[None, :, :].copy()
        self.bias = np.asarray(bias, dtype=float).copy()
        if self.bias.shape != (weight.shape[0],):
            raise ValueError("bias shape mismatch")

    @property
    def in_features(self):
        return self.kernels.shape[2]

    @property
    def spatial_out(self):
        return 1

    def forward(self, x, mean=None):
        xc = _center(np.asarray(x, dtype=float), mean)
        if xc.shape[1] != self.in_features:
            raise ValueError("input feature dimension mismatch")
        return xc @ self.kernels[0].T + self.bias

    def backward(self, x, dz, mean=None):
        xc = _center(np.asarray(x, dtype=float), mean)
        dz = np.asarray(dz, dtype=float)
        gk = (dz.T @ xc)[None, :, :]
        db = dz.sum(axis=0)
        dx = dz @ self.kernels[0]
        return LayerGradients(kernels=gk, bias=db), dx


@dataclass
class ConvSpec:
    """Geometry of a 2-D convolution viewed as a generic linear layer."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    input_h: int
    input_w: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError("convolution output is empty for this geometry")

    @property
    def taps(self):
        return self.kernel_h * self.kernel_w

    @property
    def out_h(self):
        return (self.input_h + 2 * self.padding - self.kernel_h) // self.stride + 1

    @property
    def out_w(self):
        return (self.input_w + 2 * self.padding - self.kernel_w) // self.stride + 1

    @property
    def spatial_out(self):
        return self.out_h * self.out_w


class ConvLayer:
    """Convolution with N = kernel taps of shared S x M kernels.

    Mean subtraction happens before zero padding, so padded taps contribute
    exactly zero (the mean is never subtracted at synthetic positions).
    """

    def __init__(self, spec, kernels=None, bias=None):
        self.spec = spec
        n, s, m = spec.taps, spec.out_channels, spec.in_channels
        if kernels is None:
            kernels = np.zeros((n, s, m))
        self.kernels = np.asarray(kernels, dtype=float).copy()
        if self.kernels.shape != (n, s, m):
            raise ValueError("kernel family must have shape (N, S, M)")
        self.bias = (
            np.zeros(s) if bias is None else np.asarray(bias, dtype=float).copy()
        )

    @property
    def in_features(self):
        return self.spec.in_channels

    @property
    def spatial_out(self):
        return self.spec.spatial_out

    def _patches(self, x, mean):
        sp = self.spec
        x = np.asarray(x, dtype=float)
        b = x.shape[0]
        if x.shape[1:] != (sp.in_channels, sp.input_h, sp.input_w):
            raise ValueError("input shape mismatch for ConvSpec")
        xc = x if mean is None else x - mean[:, None, None]
        if sp.padding:
            p = sp.padding
            xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((b, sp.in_channels, sp.taps, sp.spatial_out))
        for idx, (ki, kj) in enumerate(
            itertools.product(range(sp.kernel_h), range(sp.kernel_w))
        ):
            window = xc[
                :,
                :,
                ki : ki + sp.stride * sp.out_h : sp.stride,
                kj : kj + sp.stride * sp.out_w : sp.stride,
            ]
            cols[:, :, idx, :] = window.reshape(b, sp.in_channels, sp.spatial_out)
        return cols

    def forward(self, x, mean=None):
        sp = self.spec
        cols = self._patches(x, mean)
        z = np.einsum("nsm,bmnr->bsr", self.kernels, cols)
        z += self.bias[None, :, None]
        return z.reshape(x.shape[0], sp.out_channels, sp.out_h, sp.out_w)

    def backward(self, x, dz, mean=None):
        sp = self.spec
        b = x.shape[0]
        cols = self._patches(x, mean)
        dzf = np.asarray(dz, dtype=float).reshape(b, sp.out_channels, sp.spatial_out)
        gk = np.einsum("bsr,bmnr->nsm", dzf, cols)
        db = dzf.sum(axis=(0, 2))
        dcols = np.einsum("nsm,bsr->bmnr", self.kernels, dzf)
        p = sp.padding
        hp, wp = sp.input_h + 2 * p, sp.input_w + 2 * p
        dxp = np.zeros((b, sp.in_channels, hp, wp))
        for idx, (ki, kj) in enumerate(
            itertools.product(range(sp.kernel_h), range(sp.kernel_w))
        ):
            dxp[
                :,
                :,
                ki : ki + sp.stride * sp.out_h : sp.stride,
                kj : kj + sp.stride * sp.out_w : sp.stride,
            ] += dcols[:, :, idx, :].reshape(b, sp.in_channels, sp.out_h, sp.out_w)
        dx = dxp if p == 0 else dxp[:, :, p:-p, p:-p]
        return LayerGradients(kernels=gk, bias=db), dx


class WhitenLayer:
    """Direct whitening: y = T (x - mu) per column, dx = T^T dy.

    T is treated as a constant with respect to the data; no gradient flows
    into the transform.  Used by the reference path and its tests.
    """

    def __init__(self, t, mean, counter=None):
        self.t = np.asarray(t, dtype=float).copy()
        self.mean = np.asarray(mean, dtype=float).copy()
        self.counter = counter

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        m = self.t.shape[0]
        if x.ndim == 2:
            add_macs(self.counter, x.shape[0] * m * m)
            return (x - self.mean) @ self.t.T
        xc = x - self.mean[:, None, None]
        add_macs(self.counter, x.shape[0] * x.shape[2] * x.shape[3] * m * m)
        return np.einsum("ij,bjhw->bihw", self.t, xc)

    def backward(self, x, dy):
        dy = np.asarray(dy, dtype=float)
        m = self.t.shape[0]
        if dy.ndim == 2:
            add_macs(self.counter, dy.shape[0] * m * m)
            return dy @ self.t
        add_macs(self.counter, dy.shape[0] * dy.shape[2] * dy.shape[3] * m * m)
        return np.einsum("ji,bjhw->bihw", self.t, dy)


class ReLU:
    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, dy):
        return dy * (x > 0.0)


class Flatten:
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, dy):
        return dy.reshape(x.shape)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Stable softmax cross-entropy; returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError("labels must be a vector matching the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(b)
    nll = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return float(nll.mean()), grad / b
    if reduction == "sum":
        return float(nll.sum()), grad
    raise ValueError("unknown reduction %r" % (reduction,))


def accuracy(logits, labels):
    return float((np.argmax(logits, axis=1) == labels).mean())


def init_dense(rng, in_features, out_features):
    """He-style initialization."""
    w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features))
    return DenseLayer(w, np.zeros(out_features))


def init_conv(rng, spec):
    fan_in = spec.in_channels * spec.taps
    k = rng.normal(
        0.0,
        np.sqrt(2.0 / fan_in),
        size=(spec.taps, spec.out_channels, spec.in_channels),
    )
    return ConvLayer(spec, kernels=k, bias=np.zeros(spec.out_channels))


def build_mlp(dims, rng):
    """Dense stack with ReLU between layers; ``dims`` includes input/output."""
    layers = []
    for i in range(len(dims) - 1):
        layers.append(init_dense(rng, dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return layers


def build_convnet(classes, rng, input_hw=32, in_channels=3):
    """Small 2-conv + 1-fc network (stride-2 convs, no padding)."""
    spec1 = ConvSpec(in_channels, 8, 3, 3, 2, 0, input_hw, input_hw)
    spec2 = ConvSpec(8, 16, 3, 3, 2, 0, spec1.out_h, spec1.out_w)
    fc_in = 16 * spec2.spatial_out
    return [
        init_conv(rng, spec1),
        ReLU(),
        init_conv(rng, spec2),
        ReLU(),
        Flatten(),
        init_dense(rng, fc_in, classes),
    ]
