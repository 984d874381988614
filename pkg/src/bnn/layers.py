"""Quantized and supporting layers.

Binarized convolution and dense layers keep full-precision latent
weights for the optimizer; the forward pass uses their signs, packed and
multiplied with the XNOR/popcount kernel (im2col turns convolution into
the same GEMM).  Gradients reach the latent weights through the
straight-through estimator.

Scaling modes (single scalar per layer, the mean absolute latent
weight):
  N  - no scaling anywhere (default),
  B  - weight gradient multiplied by the factor in backward only,
  FB - forward output and weight gradient both multiplied by the factor.
The activation gradient is never scaled.

Spatial padding is applied after binarization with the value +1, which
is identical to padding the pre-sign activations with 0 (sign(0) = +1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import autodiff, bittensor
from .autodiff import STEConfig, Slot, Tape
from .errors import ShapeError

SCALING_MODES = ("N", "B", "FB")


@dataclass
class QLayerConfig:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    scaling_mode: str = "N"
    binarize_input: bool = True

    def __post_init__(self):
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(
                f"scaling_mode must be one of {SCALING_MODES}, "
                f"got {self.scaling_mode!r}"
            )
        if min(self.kernel) < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")


class Param(Slot):
    """A learnable slot; binary=True marks latent binary weights."""

    __slots__ = ("binary",)

    def __init__(self, value, name, binary=False):
        super().__init__(np.asarray(value, dtype=np.float32), name)
        self.binary = binary


def compute_scaling_factor(w: np.ndarray) -> float:
    """Single per-layer scalar: mean absolute value over all entries."""
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("cannot compute scaling factor of empty weights")
    return float(np.mean(np.abs(w)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,C,H,W) -> (N*OH*OW, C*kh*kw) patch matrix (row per output pixel)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x, (n, c, oh, ow, kh, kw), (sn, sc, sh * stride, sw * stride, sh, sw)
    )
    return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )


_col2im_index_cache: dict = {}


def col2im(
    g_cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int
) -> np.ndarray:
    """Scatter-add patch gradients back to the (padded) input."""
    n, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    key = (n, c, h, w, kh, kw, stride)
    flat_idx = _col2im_index_cache.get(key)
    if flat_idx is None:
        ci, ki, kj = np.meshgrid(
            np.arange(c), np.arange(kh), np.arange(kw), indexing="ij"
        )
        per_patch = (ci * h * w + ki * w + kj).reshape(-1)  # (c*kh*kw,)
        ohi, owi = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        patch_origin = (ohi * stride * w + owi * stride).reshape(-1)
        per_image = patch_origin[:, None] + per_patch[None, :]
        flat_idx = (
            np.arange(n)[:, None, None] * (c * h * w) + per_image[None, :, :]
        ).reshape(-1)
        if len(_col2im_index_cache) > 32:
            _col2im_index_cache.clear()
        _col2im_index_cache[key] = flat_idx
    acc = np.bincount(
        flat_idx, weights=g_cols.astype(np.float64).ravel(), minlength=n * c * h * w
    )
    return acc.reshape(x_shape).astype(g_cols.dtype)


def _pad_spatial(x: np.ndarray, p: int, value: float) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


class Layer:
    """Base class: parameters, buffers and a serialization descriptor."""

    name = ""

    def params(self):
        return []

    def buffers(self):
        return {}

    def forward(self, tape: Tape, x: Slot, training: bool = True) -> Slot:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class QConv2d(Layer):
    """Convolution over sign-binarized operands via im2col + packed GEMM.

    With binary=False the layer is an ordinary full-precision convolution
    (used for the network stem).
    """

    def __init__(self, cfg: QLayerConfig, binary=True, ste=None, rng=None, name="qconv"):
        self.cfg = cfg
        self.binary = binary
        self.ste = ste or STEConfig()
        self.name = name
        rng = rng or np.random.default_rng(0)
        kh, kw = cfg.kernel
        fan_in = cfg.in_channels * kh * kw
        scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, (cfg.out_channels, cfg.in_channels, kh, kw))
        if binary:
            w = np.clip(w, -1.0, 1.0)
        self.weight = Param(w, f"{name}.weight", binary=binary)

    def params(self):
        return [self.weight]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.cfg.kernel
        p, s = self.cfg.padding, self.cfg.stride
        return (
            self.cfg.out_channels,
            (h + 2 * p - kh) // s + 1,
            (w + 2 * p - kw) // s + 1,
        )

    def forward(self, tape, x, training=True):
        cfg = self.cfg
        kh, kw = cfg.kernel
        if x.value.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"{self.name}: expected {cfg.in_channels} input channels, "
                f"got {x.value.shape[1]}"
            )
        if cfg.binarize_input:
            x = autodiff.sign(tape, x, self.ste)
            padded = _pad_spatial(x.value, cfg.padding, 1.0)
        else:
            padded = _pad_spatial(x.value, cfg.padding, 0.0)
        n = padded.shape[0]
        oh = (padded.shape[2] - kh) // cfg.stride + 1
        ow = (padded.shape[3] - kw) // cfg.stride + 1
        cols = im2col(padded, kh, kw, cfg.stride)

        w_flat = self.weight.value.reshape(cfg.out_channels, -1)
        if self.binary:
            wb = autodiff.sign_forward(w_flat)
            if cfg.binarize_input:
                out_mat = bittensor.binary_gemm(
                    bittensor.pack(cols), bittensor.pack(wb)
                )
            else:
                out_mat = cols @ wb.T
        else:
            wb = w_flat
            out_mat = cols @ wb.T

        alpha = compute_scaling_factor(self.weight.value)
        if self.binary and cfg.scaling_mode == "FB":
            out_mat = out_mat * alpha
        y = out_mat.reshape(n, oh, ow, cfg.out_channels).transpose(0, 3, 1, 2)
        out = Slot(np.ascontiguousarray(y), name=self.name)

        padded_shape = padded.shape

        def backward_fn(g_y):
            g_mat = np.ascontiguousarray(
                g_y.transpose(0, 2, 3, 1)
            ).reshape(-1, cfg.out_channels)
            # activation gradient: never scaled by alpha
            g_cols = g_mat @ wb
            g_padded = col2im(g_cols, padded_shape, kh, kw, cfg.stride)
            p = cfg.padding
            g_x = g_padded[:, :, p: g_padded.shape[2] - p, p: g_padded.shape[3] - p] if p else g_padded
            # weight gradient through the weight-sign STE
            g_wb = g_mat.T @ cols
            if self.binary:
                g_w = autodiff.sign_backward(
                    g_wb.reshape(self.weight.value.shape),
                    self.weight.value,
                    self.ste,
                )
                if cfg.scaling_mode in ("B", "FB"):
                    g_w = g_w * alpha
            else:
                g_w = g_wb.reshape(self.weight.value.shape)
            return (g_x, g_w)

        return tape.record(out, (x, self.weight), backward_fn)

    def spec(self):
        cfg = self.cfg
        return {
            "kind": "qconv",
            "name": self.name,
            "in_channels": cfg.in_channels,
            "out_channels": cfg.out_channels,
            "kernel": list(cfg.kernel),
            "stride": cfg.stride,
            "padding": cfg.padding,
            "binary": self.binary,
            "binarize_input": cfg.binarize_input,
        }


class QDense(Layer):
    """Dense analogue of QConv2d (kernel 1x1 over flattened features)."""

    def __init__(self, in_features, out_features, binary=True, bias=False,
                 binarize_input=True, scaling_mode="N", ste=None, rng=None,
                 name="qdense"):
        if scaling_mode not in SCALING_MODES:
            raise ValueError(f"bad scaling_mode {scaling_mode!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.binary = binary
        self.binarize_input = binarize_input
        self.scaling_mode = scaling_mode
        self.ste = ste or STEConfig()
        self.name = name
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_features)
        w = rng.normal(0.0, scale, (out_features, in_features))
        if binary:
            w = np.clip(w, -1.0, 1.0)
        self.weight = Param(w, f"{name}.weight", binary=binary)
        self.bias = (
            Param(np.zeros(out_features), f"{name}.bias") if bias else None
        )

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, tape, x, training=True):
        if x.value.ndim != 2 or x.value.shape[1] != self.in_features:
            raise ShapeError(
                f"{self.name}: expected (N, {self.in_features}) input, "
                f"got {x.value.shape}"
            )
        if self.binarize_input:
            x = autodiff.sign(tape, x, self.ste)
        xin = x.value
        if self.binary:
            wb = autodiff.sign_forward(self.weight.value)
            if self.binarize_input:
                out = bittensor.binary_gemm(
                    bittensor.pack(xin), bittensor.pack(wb)
                )
            else:
                out = xin @ wb.T
        else:
            wb = self.weight.value
            out = xin @ wb.T
        alpha = compute_scaling_factor(self.weight.value)
        if self.binary and self.scaling_mode == "FB":
            out = out * alpha
        if self.bias is not None:
            out = out + self.bias.value
        slot = Slot(out, name=self.name)

        def backward_fn(g_y):
            g_x = g_y @ wb
            g_wb = g_y.T @ xin
            if self.binary:
                g_w = autodiff.sign_backward(
                    g_wb, self.weight.value, self.ste
                )
                if self.scaling_mode in ("B", "FB"):
                    g_w = g_w * alpha
            else:
                g_w = g_wb
            g_b = g_y.sum(axis=0) if self.bias is not None else None
            grads = (g_x, g_w) + ((g_b,) if self.bias is not None else ())
            return grads

        inputs = (x, self.weight) + (
            (self.bias,) if self.bias is not None else ()
        )
        return tape.record(slot, inputs, backward_fn)

    def spec(self):
        return {
            "kind": "qdense",
            "name": self.name,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "binary": self.binary,
            "bias": self.bias is not None,
            "binarize_input": self.binarize_input,
        }


class BatchNorm(Layer):
    """Batch normalization over (N,) or (N,H,W) per channel, with running
    statistics for inference."""

    def __init__(self, num_features, momentum=0.9, eps=1e-5, name="bn"):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Param(np.ones(num_features), f"{name}.gamma")
        self.beta = Param(np.zeros(num_features), f"{name}.beta")
        self.running_mean = np.zeros(num_features, dtype=np.float32)
        self.running_var = np.ones(num_features, dtype=np.float32)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def forward(self, tape, x, training=True):
        v = x.value
        if v.ndim == 4:
            axes, shape = (0, 2, 3), (1, -1, 1, 1)
        elif v.ndim == 2:
            axes, shape = (0,), (1, -1)
        else:
            raise ShapeError(f"{self.name}: unsupported input ndim {v.ndim}")
        if v.shape[1] != self.num_features:
            raise ShapeError(
                f"{self.name}: expected {self.num_features} channels, "
                f"got {v.shape[1]}"
            )
        if training:
            mean = v.mean(axis=axes)
            var = v.var(axis=axes)
            self.running_mean[:] = (
                self.momentum * self.running_mean + (1 - self.momentum) * mean
            )
            self.running_var[:] = (
                self.momentum * self.running_var + (1 - self.momentum) * var
            )
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (v - mean.reshape(shape)) * inv_std.reshape(shape)
        y = self.gamma.value.reshape(shape) * xhat + self.beta.value.reshape(shape)
        out = Slot(y.astype(v.dtype), name=self.name)

        m = v.size // self.num_features

        def backward_fn(g_y):
            g_beta = g_y.sum(axis=axes)
            g_gamma = (g_y * xhat).sum(axis=axes)
            g_xhat = g_y * self.gamma.value.reshape(shape)
            if training:
                g_x = (
                    inv_std.reshape(shape)
                    / m
                    * (
                        m * g_xhat
                        - g_xhat.sum(axis=axes, keepdims=True)
                        - xhat * (g_xhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
            else:
                g_x = g_xhat * inv_std.reshape(shape)
            return (g_x.astype(v.dtype), g_gamma, g_beta)

        return tape.record(out, (x, self.gamma, self.beta), backward_fn)

    def spec(self):
        return {
            "kind": "batchnorm",
            "name": self.name,
            "num_features": self.num_features,
            "momentum": self.momentum,
            "eps": self.eps,
        }


class MaxPool2d(Layer):
    def __init__(self, kernel=2, stride=None, name="maxpool"):
        self.kernel = kernel
        self.stride = stride or kernel
        self.name = name

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, (h - self.kernel) // self.stride + 1,
                (w - self.kernel) // self.stride + 1)

    def forward(self, tape, x, training=True):
        k, s = self.kernel, self.stride
        n, c, h, w = x.value.shape
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        sn, sc, sh, sw = x.value.strides
        view = as_strided(
            x.value, (n, c, oh, ow, k, k), (sn, sc, sh * s, sw * s, sh, sw)
        ).reshape(n, c, oh, ow, k * k)
        arg = view.argmax(axis=-1)
        y = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]
        out = Slot(np.ascontiguousarray(y), name=self.name)

        def backward_fn(g_y):
            ki, kj = np.divmod(arg, k)
            ohi = np.arange(oh)[None, None, :, None]
            owi = np.arange(ow)[None, None, None, :]
            rows = ohi * s + ki
            cols_ = owi * s + kj
            base = (
                np.arange(n)[:, None, None, None] * (c * h * w)
                + np.arange(c)[None, :, None, None] * (h * w)
            )
            flat = (base + rows * w + cols_).ravel()
            g_x = np.bincount(
                flat, weights=g_y.astype(np.float64).ravel(), minlength=n * c * h * w
            )
            return (g_x.reshape(n, c, h, w).astype(g_y.dtype),)

        return tape.record(out, (x,), backward_fn)

    def spec(self):
        return {"kind": "maxpool", "name": self.name,
                "kernel": self.kernel, "stride": self.stride}


class AvgPool2d(Layer):
    def __init__(self, kernel=2, stride=None, name="avgpool"):
        self.kernel = kernel
        self.stride = stride or kernel
        self.name = name

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, (h - self.kernel) // self.stride + 1,
                (w - self.kernel) // self.stride + 1)

    def forward(self, tape, x, training=True):
        k, s = self.kernel, self.stride
        if s != k:
            raise ShapeError("AvgPool2d supports stride == kernel only")
        n, c, h, w = x.value.shape
        oh, ow = h // k, w // k
        y = x.value[:, :, : oh * k, : ow * k].reshape(n, c, oh, k, ow, k).mean(
            axis=(3, 5)
        )
        out = Slot(y, name=self.name)

        def backward_fn(g_y):
            g = np.zeros((n, c, h, w), dtype=g_y.dtype)
            expanded = np.repeat(np.repeat(g_y, k, axis=2), k, axis=3) / (k * k)
            g[:, :, : oh * k, : ow * k] = expanded
            return (g,)

        return tape.record(out, (x,), backward_fn)

    def spec(self):
        return {"kind": "avgpool", "name": self.name,
                "kernel": self.kernel, "stride": self.stride}


class GlobalAvgPool(Layer):
    def __init__(self, name="gap"):
        self.name = name

    def forward(self, tape, x, training=True):
        n, c, h, w = x.value.shape
        y = x.value.mean(axis=(2, 3))
        out = Slot(y, name=self.name)

        def backward_fn(g_y):
            g = np.broadcast_to(
                g_y[:, :, None, None] / (h * w), (n, c, h, w)
            )
            return (np.ascontiguousarray(g),)

        return tape.record(out, (x,), backward_fn)

    def spec(self):
        return {"kind": "global_avgpool", "name": self.name}


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name

    def forward(self, tape, x, training=True):
        shape = x.value.shape
        out = Slot(x.value.reshape(shape[0], -1), name=self.name)

        def backward_fn(g_y):
            return (g_y.reshape(shape),)

        return tape.record(out, (x,), backward_fn)

    def spec(self):
        return {"kind": "flatten", "name": self.name}


def concat(tape: Tape, inputs, name="concat") -> Slot:
    """Concatenate along the channel axis; output channels are the sum."""
    values = [s.value for s in inputs]
    out = Slot(np.concatenate(values, axis=1), name=name)
    sizes = [v.shape[1] for v in values]

    def backward_fn(g_y):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(g_y, splits, axis=1))

    return tape.record(out, tuple(inputs), backward_fn)


def residual_add(tape: Tape, a: Slot, b: Slot, name="add") -> Slot:
    if a.value.shape != b.value.shape:
        raise ShapeError(
            f"residual_add shape mismatch: {a.value.shape} vs {b.value.shape}"
        )
    out = Slot(a.value + b.value, name=name)

    def backward_fn(g_y):
        return (g_y, g_y.copy())

    return tape.record(out, (a, b), backward_fn)
