"""
Module for differentiable layers.

Every layer is a pair of functions: `<layer>(...)` returns the output and a :class:`LayerCtx`, and
`<layer>_backward(ctx, grad)` returns the gradients with respect to the inputs and parameters. Layers hold no state of
their own, so one set of parameters can be evaluated from several threads at once.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pyactqa.exceptions import ConfigurationException, ShapeException, NumericalException
from pyactqa.tensor import Tensor, check_finite, matmul

FUSION_VARIANTS = ("Fusion1", "Fusion2")


@dataclass
class LayerCtx:
    """
    Values saved by a forward call for its backward call
    """
    layer: str
    saved: Dict[str, object] = field(default_factory=dict)
    consumed: bool = False

    def consume(self) -> Dict[str, object]:
        if self.consumed:
            raise NumericalException(f"backward already ran for this {self.layer} forward", self.layer)
        self.consumed = True

        return self.saved


@dataclass(frozen=True)
class Roi:
    """
    Region of interest in feature-map coordinates. x0/y0 are inclusive, x1/y1 exclusive; fractions are allowed.
    """
    x0: float
    y0: float
    x1: float
    y1: float

    @classmethod
    def full(cls, width: int, height: int) -> "Roi":
        return cls(0.0, 0.0, float(width), float(height))

    @classmethod
    def from_image_box(cls, box, stride: int, width: int, height: int) -> "Roi":
        """
        Map an image-space box [x0, y0, x1, y1] onto a feature map downsampled by :param stride:.
        Starts are floored, ends are ceiled, both are clamped and the result spans at least one cell.
        """
        x0, y0, x1, y1 = (float(v) for v in box)
        fx0 = min(max(math.floor(x0 / stride), 0), width - 1)
        fy0 = min(max(math.floor(y0 / stride), 0), height - 1)
        fx1 = min(max(math.ceil(x1 / stride), fx0 + 1), width)
        fy1 = min(max(math.ceil(y1 / stride), fy0 + 1), height)

        return cls(float(fx0), float(fy0), float(fx1), float(fy1))

    def clamped(self, width: int, height: int) -> "Roi":
        roi = Roi(min(max(self.x0, 0.0), width), min(max(self.y0, 0.0), height),
                  min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height))

        if roi.x1 <= roi.x0 or roi.y1 <= roi.y0:
            raise ShapeException(f"Degenerate roi {self} on a {width}x{height} map", self)

        return roi

    def as_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2 if kernel > 1 else 0
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(inputs: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tuple[Tensor, LayerCtx]:
    """
    2-D convolution with same-padding for odd kernels and no padding for 1x1 kernels

    :param inputs: C_in x H x W
    :param weights: C_out x C_in x k x k
    :param bias: C_out
    :param stride: Step between output positions

    :return: C_out x H' x W' output and its context
    """
    c_out, c_in, k, k2 = weights.shape
    if inputs.ndim != 3 or inputs.shape[0] != c_in:
        raise ShapeException(f"conv2d input {inputs.shape} does not match weights {weights.shape}",
                             (inputs.shape, weights.shape))
    if k != k2 or (k > 1 and k % 2 == 0):
        raise ShapeException(f"conv2d kernels must be square and odd, got {k}x{k2}", weights.shape)
    if bias.shape != (c_out,):
        raise ShapeException(f"conv2d bias {bias.shape} does not match {c_out} output channels", bias.shape)
    if inputs.shape[1] < k or inputs.shape[2] < k:
        raise ShapeException(f"conv2d input {inputs.shape} smaller than kernel {k}", inputs.shape)

    pad = k // 2 if k > 1 else 0
    padded = np.pad(inputs, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]

    out = check_finite(np.einsum("oikl,ihwkl->ohw", weights, windows, optimize=True) + bias[:, None, None], "conv2d")
    ctx = LayerCtx("conv2d", {"windows": windows, "weights": weights, "stride": stride, "pad": pad,
                              "shape": inputs.shape})

    return out, ctx


def conv2d_backward(ctx: LayerCtx, grad: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """
    :return: (d_inputs, d_weights, d_bias)
    """
    saved = ctx.consume()
    windows, weights, stride, pad = saved["windows"], saved["weights"], saved["stride"], saved["pad"]
    c_in, height, width = saved["shape"]
    k = weights.shape[2]
    out_h, out_w = grad.shape[1:]

    d_weights = np.einsum("ohw,ihwkl->oikl", grad, windows, optimize=True)
    d_bias = grad.sum(axis=(1, 2))

    d_windows = np.einsum("oikl,ohw->ihwkl", weights, grad, optimize=True)
    d_padded = np.zeros((c_in, height + 2 * pad, width + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            d_padded[:, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride] += d_windows[:, :, :, ki, kj]

    d_inputs = d_padded[:, pad:pad + height, pad:pad + width]

    return np.ascontiguousarray(d_inputs), d_weights, d_bias


def fully_connected(inputs: Tensor, weights: Tensor, bias: Tensor) -> Tuple[Tensor, LayerCtx]:
    """
    weights . inputs + bias for a rank-1 input
    """
    if inputs.ndim != 1 or weights.ndim != 2 or weights.shape[1] != inputs.shape[0]:
        raise ShapeException(f"fully_connected input {inputs.shape} does not match weights {weights.shape}",
                             (inputs.shape, weights.shape))
    if bias.shape != (weights.shape[0],):
        raise ShapeException(f"fully_connected bias {bias.shape} does not match weights {weights.shape}",
                             (bias.shape, weights.shape))

    out = check_finite(matmul(weights, inputs[:, None])[:, 0] + bias, "fully_connected")

    return out, LayerCtx("fully_connected", {"inputs": inputs, "weights": weights})


def fully_connected_backward(ctx: LayerCtx, grad: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    saved = ctx.consume()

    return saved["weights"].T @ grad, np.outer(grad, saved["inputs"]), grad.copy()


def relu(inputs: Tensor) -> Tuple[Tensor, LayerCtx]:
    return np.maximum(inputs, 0.0), LayerCtx("relu", {"inputs": inputs})


def relu_backward(ctx: LayerCtx, grad: Tensor) -> Tensor:
    return grad * (ctx.consume()["inputs"] > 0.0)


def stable_sigmoid(inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    out = np.empty_like(inputs)
    positive = inputs >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-inputs[positive]))
    exp = np.exp(inputs[~positive])
    out[~positive] = exp / (1.0 + exp)

    return out


def sigmoid(inputs: Tensor) -> Tuple[Tensor, LayerCtx]:
    return stable_sigmoid(inputs), LayerCtx("sigmoid", {"inputs": inputs})


def sigmoid_backward(ctx: LayerCtx, grad: Tensor) -> Tensor:
    out = stable_sigmoid(ctx.consume()["inputs"])

    return grad * out * (1.0 - out)


def roi_bins(start: float, end: float, bins: int, limit: int):
    """
    Integer [lo, hi) edges of :param bins: bins spanning [start, end), clamped to [0, limit].
    A bin that quantizes to nothing takes the single cell at its clamped start.
    """
    edges = []
    step = (end - start) / bins
    for i in range(bins):
        lo = min(max(math.floor(start + i * step), 0), limit)
        hi = min(max(math.ceil(start + (i + 1) * step), 0), limit)
        if hi <= lo:
            lo = min(lo, limit - 1)
            hi = lo + 1
        edges.append((lo, hi))

    return edges


def roi_max_pool(fmap: Tensor, roi: Roi, out_h: int, out_w: int) -> Tuple[Tensor, LayerCtx]:
    """
    Adaptive max pooling of :param roi: into a fixed out_h x out_w grid, per channel

    :param fmap: C x H x W feature map
    :param roi: Region in feature-map coordinates
    :param out_h: Output rows
    :param out_w: Output columns

    :return: C x out_h x out_w
    """
    if fmap.ndim != 3:
        raise ShapeException(f"roi_max_pool expects a C x H x W map, got {fmap.shape}", fmap.shape)
    if out_h < 1 or out_w < 1:
        raise ShapeException(f"roi_max_pool output must be at least 1x1, got {out_h}x{out_w}", (out_h, out_w))

    channels, height, width = fmap.shape
    roi = roi.clamped(width, height)

    out = np.empty((channels, out_h, out_w))
    arg_y = np.empty((channels, out_h, out_w), dtype=np.intp)
    arg_x = np.empty((channels, out_h, out_w), dtype=np.intp)
    rows = np.arange(channels)

    for i, (y_lo, y_hi) in enumerate(roi_bins(roi.y0, roi.y1, out_h, height)):
        for j, (x_lo, x_hi) in enumerate(roi_bins(roi.x0, roi.x1, out_w, width)):
            region = fmap[:, y_lo:y_hi, x_lo:x_hi].reshape(channels, -1)
            # first occurrence in row-major order wins ties
            best = np.argmax(region, axis=1)
            out[:, i, j] = region[rows, best]
            arg_y[:, i, j] = y_lo + best // (x_hi - x_lo)
            arg_x[:, i, j] = x_lo + best % (x_hi - x_lo)

    return out, LayerCtx("roi_max_pool", {"shape": fmap.shape, "arg_y": arg_y, "arg_x": arg_x})


def roi_max_pool_backward(ctx: LayerCtx, grad: Tensor) -> Tensor:
    saved = ctx.consume()
    channels = saved["shape"][0]
    d_fmap = np.zeros(saved["shape"])
    channel_index = np.broadcast_to(np.arange(channels)[:, None, None], grad.shape)
    np.add.at(d_fmap, (channel_index, saved["arg_y"], saved["arg_x"]), grad)

    return d_fmap


def fusion_parameter_shapes(variant: str, channels: int) -> Dict[str, tuple]:
    """
    Parameter shapes for a fusion combiner over :param channels: channel ROI features
    """
    if variant == "Fusion1":
        return {"reduce.weight": (channels, 2 * channels, 1, 1), "reduce.bias": (channels,)}
    if variant == "Fusion2":
        if channels % 2:
            raise ConfigurationException(f"Fusion2 needs an even channel count, got {channels}", channels)
        half = channels // 2
        return {"box_reduce.weight": (half, channels, 1, 1), "box_reduce.bias": (half,),
                "image_reduce.weight": (half, channels, 1, 1), "image_reduce.bias": (half,)}

    raise ConfigurationException(f"Unknown fusion variant {variant}, expected one of {FUSION_VARIANTS}", variant)


def fusion_combine(variant: str, box_feat: Tensor, img_feat: Tensor,
                   params: Dict[str, Tensor]) -> Tuple[Tensor, LayerCtx]:
    """
    Early fusion of the person-box and full-image ROI features.

    Fusion1 stacks both along channels and reduces 2C -> C with a 1x1 convolution. Fusion2 reduces each C -> C/2 with
    its own 1x1 convolution and stacks the results. Either way the output has C channels.
    """
    if box_feat.shape != img_feat.shape:
        raise ShapeException(f"fusion inputs differ: {box_feat.shape} vs {img_feat.shape}",
                             (box_feat.shape, img_feat.shape))

    fusion_parameter_shapes(variant, box_feat.shape[0])

    if variant == "Fusion1":
        stacked = np.concatenate([box_feat, img_feat], axis=0)
        out, reduce_ctx = conv2d(stacked, params["reduce.weight"], params["reduce.bias"])
        return out, LayerCtx("fusion_combine", {"variant": variant, "reduce": reduce_ctx,
                                                "channels": box_feat.shape[0]})

    box_out, box_ctx = conv2d(box_feat, params["box_reduce.weight"], params["box_reduce.bias"])
    img_out, img_ctx = conv2d(img_feat, params["image_reduce.weight"], params["image_reduce.bias"])

    return np.concatenate([box_out, img_out], axis=0), LayerCtx(
        "fusion_combine", {"variant": variant, "box": box_ctx, "image": img_ctx, "half": box_out.shape[0]})


def fusion_combine_backward(ctx: LayerCtx, grad: Tensor) -> Tuple[Tensor, Tensor, Dict[str, Tensor]]:
    """
    :return: (d_box_feat, d_img_feat, parameter gradients keyed like the forward params)
    """
    saved = ctx.consume()

    if saved["variant"] == "Fusion1":
        d_stacked, d_weight, d_bias = conv2d_backward(saved["reduce"], grad)
        channels = saved["channels"]
        return d_stacked[:channels], d_stacked[channels:], {"reduce.weight": d_weight, "reduce.bias": d_bias}

    half = saved["half"]
    d_box, d_box_w, d_box_b = conv2d_backward(saved["box"], np.ascontiguousarray(grad[:half]))
    d_img, d_img_w, d_img_b = conv2d_backward(saved["image"], np.ascontiguousarray(grad[half:]))

    return d_box, d_img, {"box_reduce.weight": d_box_w, "box_reduce.bias": d_box_b,
                          "image_reduce.weight": d_img_w, "image_reduce.bias": d_img_b}
