"""
Module for assembling the activity networks.

Every variant shares a small convolutional backbone and a fully connected head. They differ in what the head sees for
each person instance:

- BboxOnly: the ROI-pooled person box
- FullImageOnly: the ROI-pooled full image (one instance per image, boxes are ignored)
- Fusion1 / Fusion2: both, combined by :func:`pyactqa.layers.fusion_combine` and a relu
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pyactqa import layers as L
from pyactqa.exceptions import ConfigurationException, ShapeException, SerializerException
from pyactqa.layers import Roi
from pyactqa.losses import InstanceScores, mil_max_aggregate
from pyactqa.params import ParameterStore, layer_of
from pyactqa.registry import Registry
from pyactqa.tensor import Tensor, freeze

logger = logging.getLogger("model")

VARIANTS = ("BboxOnly", "FullImageOnly", "Fusion1", "Fusion2")
DISPLAY_THRESHOLD = 0.5


@dataclass
class ModelConfig:
    """
    Architecture of one network. Defaults are the desk-scale backbone: two 3x3 conv + relu stages of 8 and 16
    channels, each downsampling by 2, a 3x3 ROI grid and one 64-unit hidden layer.
    """
    variant: str = "Fusion2"
    num_classes: int = 8
    in_channels: int = 3
    backbone_widths: List[int] = field(default_factory=lambda: [8, 16])
    backbone_strides: List[int] = field(default_factory=lambda: [2, 2])
    kernel: int = 3
    roi_out: int = 3
    head_widths: List[int] = field(default_factory=lambda: [64])
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigurationException(f"Unknown variant {self.variant}, expected one of {VARIANTS}", self.variant)
        if self.num_classes < 1:
            raise ConfigurationException(f"num_classes must be >= 1, got {self.num_classes}", self.num_classes)
        if not self.backbone_widths or any(w < 1 for w in self.backbone_widths):
            raise ConfigurationException(f"Invalid backbone widths {self.backbone_widths}", self.backbone_widths)
        if len(self.backbone_strides) != len(self.backbone_widths) or any(s < 1 for s in self.backbone_strides):
            raise ConfigurationException(f"Need one positive stride per backbone stage, got {self.backbone_strides}",
                                         self.backbone_strides)
        if self.kernel < 1 or (self.kernel > 1 and self.kernel % 2 == 0):
            raise ConfigurationException(f"Backbone kernel must be 1 or odd, got {self.kernel}", self.kernel)
        if self.roi_out < 1:
            raise ConfigurationException(f"roi_out must be >= 1, got {self.roi_out}", self.roi_out)
        if not self.head_widths or any(w < 1 for w in self.head_widths):
            raise ConfigurationException(f"Invalid head widths {self.head_widths}", self.head_widths)
        if self.variant == "Fusion2" and self.channels % 2:
            raise ConfigurationException(f"Fusion2 needs an even backbone output width, got {self.channels}",
                                         self.backbone_widths)

        return self

    @property
    def channels(self) -> int:
        return self.backbone_widths[-1]

    @property
    def stride(self) -> int:
        return int(np.prod(self.backbone_strides))

    @property
    def uses_boxes(self) -> bool:
        return self.variant != "FullImageOnly"

    @property
    def uses_image(self) -> bool:
        return self.variant != "BboxOnly"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ConfigurationException(f"Unknown model settings {sorted(unknown)}", sorted(unknown))

        return cls(**values).validate()


@dataclass
class Tape:
    """
    Everything one forward pass saved for its backward pass
    """
    image_shape: tuple
    backbone: List[Tuple[L.LayerCtx, L.LayerCtx]]
    fmap_shape: tuple
    image_pool: Optional[L.LayerCtx]
    image_feat: Optional[Tensor]
    instances: List[dict]
    logits: Tensor
    hidden: Tensor


class Network:
    """
    A configured network: its config, its parameters and the ordered registry of its layers
    """

    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config.validate()
        self.params = params
        self.frozen = set()

        self.layers = Registry()
        for name in layer_names(config):
            self.layers.add(name)

    def run(self, image: Tensor, boxes: Sequence[Roi] = ()) -> Tape:
        """
        Forward pass keeping what backward needs

        :param image: in_channels x H x W
        :param boxes: person boxes in image coordinates

        :return: the tape; `tape.logits` is N x C
        """
        config = self.config
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != config.in_channels:
            raise ShapeException(f"Expected a {config.in_channels} x H x W image, got {image.shape}", image.shape)

        height, width = image.shape[1:]
        boxes = list(boxes)
        if config.uses_boxes and not boxes:
            raise ShapeException(f"{config.variant} needs at least one person box", config.variant)

        x, backbone = image, []
        for stage, stride in enumerate(config.backbone_strides, start=1):
            conv_out, conv_ctx = L.conv2d(x, self.params.get(f"backbone_conv{stage}.weight"),
                                          self.params.get(f"backbone_conv{stage}.bias"), stride)
            x, relu_ctx = L.relu(conv_out)
            backbone.append((conv_ctx, relu_ctx))

        fmap = x
        feat_h, feat_w = fmap.shape[1:]
        size = config.roi_out

        image_feat, image_pool = None, None
        if config.uses_image:
            image_feat, image_pool = L.roi_max_pool(fmap, Roi.full(feat_w, feat_h), size, size)

        rois = [None] if not config.uses_boxes else [
            Roi.from_image_box(box_in_image(box, width, height).as_list(), config.stride, feat_w, feat_h)
            for box in boxes]

        instances, logits, hidden = [], [], []
        for roi in rois:
            record = {}
            if config.variant == "FullImageOnly":
                feat = image_feat
            else:
                box_feat, record["box_pool"] = L.roi_max_pool(fmap, roi, size, size)
                if config.variant == "BboxOnly":
                    feat = box_feat
                else:
                    fused, record["fusion"] = L.fusion_combine(config.variant, box_feat, image_feat,
                                                               self.fusion_params())
                    feat, record["fusion_relu"] = L.relu(fused)

            out, record["head"], activation = self._head(feat.reshape(-1))
            logits.append(out)
            hidden.append(activation)
            instances.append(record)

        return Tape(image.shape, backbone, fmap.shape, image_pool, image_feat, instances,
                    freeze(np.stack(logits)), freeze(np.stack(hidden)))

    def _head(self, flat: Tensor):
        """
        :return: (logits, per-layer contexts, activation of the last hidden layer)
        """
        contexts = []
        hidden_layers = len(self.config.head_widths)
        x = activation = flat
        for index in range(1, hidden_layers + 2):
            x, fc_ctx = L.fully_connected(x, self.params.get(f"head_fc{index}.weight"),
                                          self.params.get(f"head_fc{index}.bias"))
            relu_ctx = None
            if index <= hidden_layers:
                x, relu_ctx = L.relu(x)
                activation = x
            contexts.append((fc_ctx, relu_ctx))

        return x, contexts, activation

    def backward(self, tape: Tape, d_logits: Tensor) -> Dict[str, np.ndarray]:
        """
        Gradients of a loss with respect to every parameter, given its gradient over the tape's logits (N x C).
        Instances whose row of :param d_logits: is all zero are skipped.
        """
        config = self.config
        grads = OrderedDict((name, np.zeros_like(value)) for name, value in self.params.items())
        d_fmap = np.zeros(tape.fmap_shape)
        d_image_feat = np.zeros_like(tape.image_feat) if tape.image_feat is not None else None
        image_used = False

        for record, d_out in zip(tape.instances, d_logits):
            if not np.any(d_out):
                continue

            d_feat = self._head_backward(record["head"], d_out, grads).reshape(
                config.channels, config.roi_out, config.roi_out)

            if config.variant == "FullImageOnly":
                d_image_feat += d_feat
                image_used = True
            elif config.variant == "BboxOnly":
                d_fmap += L.roi_max_pool_backward(record["box_pool"], d_feat)
            else:
                d_fused = L.relu_backward(record["fusion_relu"], d_feat)
                d_box, d_img, d_fusion = L.fusion_combine_backward(record["fusion"], d_fused)
                for key, value in d_fusion.items():
                    grads[f"fusion.{key}"] += value
                d_fmap += L.roi_max_pool_backward(record["box_pool"], d_box)
                d_image_feat += d_img
                image_used = True

        if image_used:
            d_fmap += L.roi_max_pool_backward(tape.image_pool, d_image_feat)

        d_x = d_fmap
        for stage in range(len(tape.backbone), 0, -1):
            conv_ctx, relu_ctx = tape.backbone[stage - 1]
            d_x, d_w, d_b = L.conv2d_backward(conv_ctx, L.relu_backward(relu_ctx, d_x))
            grads[f"backbone_conv{stage}.weight"] += d_w
            grads[f"backbone_conv{stage}.bias"] += d_b

        return grads

    def _head_backward(self, contexts, d_out: Tensor, grads: Dict[str, np.ndarray]) -> Tensor:
        d_x = d_out
        for index in range(len(contexts), 0, -1):
            fc_ctx, relu_ctx = contexts[index - 1]
            if relu_ctx is not None:
                d_x = L.relu_backward(relu_ctx, d_x)
            d_x, d_w, d_b = L.fully_connected_backward(fc_ctx, d_x)
            grads[f"head_fc{index}.weight"] += d_w
            grads[f"head_fc{index}.bias"] += d_b

        return d_x

    def fusion_params(self) -> Dict[str, Tensor]:
        return {name.split(".", 1)[1]: value for name, value in self.params.items() if layer_of(name) == "fusion"}

    def parameter_count(self, layer: str = None) -> int:
        """
        :param layer: Count only this layer's parameters
        """
        return int(sum(value.size for name, value in self.params.items()
                       if layer is None or layer_of(name) == layer))

    def trainable(self, name: str) -> bool:
        return layer_of(name) not in self.frozen


def layer_names(config: ModelConfig) -> List[str]:
    names = [f"backbone_conv{stage}" for stage in range(1, len(config.backbone_widths) + 1)]
    if config.variant in L.FUSION_VARIANTS:
        names.append("fusion")
    names.extend(f"head_fc{index}" for index in range(1, len(config.head_widths) + 2))

    return names


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    shapes = OrderedDict()
    c_in = config.in_channels
    for stage, width in enumerate(config.backbone_widths, start=1):
        shapes[f"backbone_conv{stage}.weight"] = (width, c_in, config.kernel, config.kernel)
        shapes[f"backbone_conv{stage}.bias"] = (width,)
        c_in = width

    if config.variant in L.FUSION_VARIANTS:
        for name, shape in L.fusion_parameter_shapes(config.variant, config.channels).items():
            shapes[f"fusion.{name}"] = shape

    fan_in = config.channels * config.roi_out * config.roi_out
    for index, width in enumerate(list(config.head_widths) + [config.num_classes], start=1):
        shapes[f"head_fc{index}.weight"] = (width, fan_in)
        shapes[f"head_fc{index}.bias"] = (width,)
        fan_in = width

    return shapes


def build(config: ModelConfig) -> Network:
    """
    Create a network with seeded He-style uniform weights in +-sqrt(6 / fan_in) and zero biases.
    The same config (seed included) always gives identical parameters.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = ParameterStore()

    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            params.add(name, np.zeros(shape))
        else:
            limit = np.sqrt(6.0 / int(np.prod(shape[1:])))
            params.add(name, rng.uniform(-limit, limit, size=shape))

    net = Network(config, params)
    logger.info("Built %s network with %d parameters", config.variant, net.parameter_count())

    return net


def box_in_image(box: Roi, width: int, height: int) -> Roi:
    try:
        return box.clamped(width, height)
    except ShapeException as error:
        raise ShapeException(f"Box {box.as_list()} lies outside the {width}x{height} image", box) from error


def forward_instances(net: Network, image: Tensor, boxes: Sequence[Roi] = ()) -> InstanceScores:
    """
    Per-instance logits. FullImageOnly networks return a single instance whatever boxes are given.
    """
    tape = net.run(image, boxes)

    return InstanceScores(tape.logits, list(boxes) if net.config.uses_boxes else [])


def predict_image(net: Network, image: Tensor, boxes: Sequence[Roi] = ()) -> Tuple[Tensor, np.ndarray]:
    """
    :return: (sigmoid of the MIL-aggregated logits, winning instance per class)
    """
    scores, winners = mil_max_aggregate(forward_instances(net, image, boxes))

    return freeze(L.stable_sigmoid(scores)), winners


def predict_instances(net: Network, image: Tensor, boxes: Sequence[Roi] = ()) -> Tensor:
    """
    :return: N x C per-person probabilities
    """
    return freeze(L.stable_sigmoid(forward_instances(net, image, boxes).scores))


def top_labels(probs: Tensor, class_names: Sequence[str], k: int = 5,
               threshold: float = DISPLAY_THRESHOLD) -> List[Tuple[str, float]]:
    """
    Up to :param k: (class name, probability) pairs at or above :param threshold:, most confident first
    """
    order = np.argsort(-np.asarray(probs), kind="stable")

    return [(class_names[i], float(probs[i])) for i in order[:k] if probs[i] >= threshold]


CONFIG_PREFIX = "meta."


def network_entries(net: Network) -> Dict[str, np.ndarray]:
    """
    Named tensors for a checkpoint: the config as "meta.*" entries followed by the parameters
    """
    config = net.config
    entries = OrderedDict()
    entries["meta.variant"] = np.array([float(VARIANTS.index(config.variant))])
    for key in ("num_classes", "in_channels", "kernel", "roi_out", "seed"):
        entries[CONFIG_PREFIX + key] = np.array([float(getattr(config, key))])
    for key in ("backbone_widths", "backbone_strides", "head_widths"):
        entries[CONFIG_PREFIX + key] = np.array(getattr(config, key), dtype=np.float64)

    entries.update(net.params.items())

    return entries


def network_from_entries(entries: Dict[str, np.ndarray]) -> Network:
    try:
        values = {key[len(CONFIG_PREFIX):]: value for key, value in entries.items() if key.startswith(CONFIG_PREFIX)}
        config = ModelConfig(
            variant=VARIANTS[int(values["variant"][0])],
            backbone_widths=[int(v) for v in values["backbone_widths"]],
            backbone_strides=[int(v) for v in values["backbone_strides"]],
            head_widths=[int(v) for v in values["head_widths"]],
            **{key: int(values[key][0]) for key in ("num_classes", "in_channels", "kernel", "roi_out", "seed")})
    except (KeyError, IndexError) as error:
        raise SerializerException(f"Checkpoint is missing model settings: {error}", sorted(entries)) from error

    expected = parameter_shapes(config.validate())
    params = ParameterStore()
    for name, shape in expected.items():
        if name not in entries:
            raise SerializerException(f"Checkpoint is missing parameter {name}", name)
        if tuple(entries[name].shape) != tuple(shape):
            raise SerializerException(f"Parameter {name} has shape {entries[name].shape}, expected {shape}", name)
        params.add(name, entries[name])

    extra = set(entries) - set(expected) - {key for key in entries if key.startswith(CONFIG_PREFIX)}
    if extra:
        raise SerializerException(f"Unknown tensors in checkpoint {sorted(extra)}", sorted(extra))

    return Network(config, params)
