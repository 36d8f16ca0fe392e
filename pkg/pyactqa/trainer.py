"""
Module for training networks with SGD and momentum.

One iteration is one batch of `batch_images` images. The learning rate at iteration t is
lr * lr_decay_factor ** floor(t / lr_decay_every); the update is v <- momentum * v - lr * g, theta <- theta + v, with g
the mean gradient over the batch's images.
"""
import csv
import logging
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from pyactqa.dataset import Corpus, Sample
from pyactqa.exceptions import ConfigurationException, NumericalException, ValidationException
from pyactqa.losses import InstanceScores, LossWeights, PLAIN_WEIGHTS, mil_max_aggregate, mil_max_backward, \
    single_label, softmax_ce, weighted_bce_with_logits
from pyactqa.metrics import EvalReport, mean_ap
from pyactqa.model import Network, forward_instances

logger = logging.getLogger("trainer")

LOSS_MODES = ("WeightedBCE", "PlainBCE", "SoftmaxCE")
SUPERVISION_MODES = ("MIL", "PerInstance")


@dataclass
class TrainConfig:
    lr: float = 0.003
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 1000
    momentum: float = 0.9
    total_iters: int = 1500
    batch_images: int = 10
    max_boxes_per_image: int = 6
    loss_mode: str = "WeightedBCE"
    w_p: float = 10.0
    w_n: float = 1.0
    supervision: str = "MIL"
    seed: int = 0
    prefetch: int = 0
    log_every: int = 100
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigurationException(f"lr must be > 0, got {self.lr}", "lr")
        if not 0 <= self.momentum < 1:
            raise ConfigurationException(f"momentum must lie in [0, 1), got {self.momentum}", "momentum")
        if self.batch_images < 1 or self.max_boxes_per_image < 1:
            raise ConfigurationException("batch_images and max_boxes_per_image must be >= 1",
                                         (self.batch_images, self.max_boxes_per_image))
        if self.total_iters < 0 or self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigurationException("Invalid iteration schedule",
                                         (self.total_iters, self.lr_decay_every, self.lr_decay_factor))
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationException(f"Unknown loss mode {self.loss_mode}, expected one of {LOSS_MODES}",
                                         self.loss_mode)
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigurationException(f"Unknown supervision {self.supervision}, expected one of "
                                         f"{SUPERVISION_MODES}", self.supervision)
        if self.prefetch < 0:
            raise ConfigurationException("prefetch must be >= 0", self.prefetch)
        self.weights()

        return self

    def weights(self) -> LossWeights:
        if self.loss_mode == "WeightedBCE":
            return LossWeights(self.w_p, self.w_n)
        return PLAIN_WEIGHTS

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay_factor ** (iteration // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: Dict[str, TrainConfig] = {
    # HICO protocol: image-level labels, MIL, weighted loss
    "hico": TrainConfig(lr=1e-5, lr_decay_factor=0.1, lr_decay_every=30000, momentum=0.9, total_iters=60000,
                        batch_images=10, max_boxes_per_image=6, loss_mode="WeightedBCE", w_p=10.0, w_n=1.0,
                        supervision="MIL", log_every=1000),
    # MPII protocol: one label per ground-truth person, no loss weighting
    "mpii": TrainConfig(lr=1e-4, lr_decay_factor=0.1, lr_decay_every=12000, momentum=0.9, total_iters=40000,
                        batch_images=10, max_boxes_per_image=6, loss_mode="SoftmaxCE", supervision="PerInstance",
                        log_every=1000),
    "hico_desk": TrainConfig(lr=0.003, lr_decay_factor=0.1, lr_decay_every=1000, momentum=0.9, total_iters=1500,
                             batch_images=10, max_boxes_per_image=6, loss_mode="WeightedBCE", w_p=10.0, w_n=1.0,
                             supervision="MIL"),
    "mpii_desk": TrainConfig(lr=0.01, lr_decay_factor=0.1, lr_decay_every=400, momentum=0.9, total_iters=600,
                             batch_images=10, max_boxes_per_image=6, loss_mode="SoftmaxCE",
                             supervision="PerInstance"),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigurationException(f"Unknown preset {name}, expected one of {sorted(PRESETS)}", name)

    return replace(PRESETS[name], **overrides).validate()


@dataclass
class TracePoint:
    iteration: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    net: Network
    trace: List[TracePoint] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([point.loss for point in self.trace])

    def write_trace(self, path):
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(["iteration", "lr", "loss"])
            for point in self.trace:
                writer.writerow([point.iteration, repr(point.lr), repr(point.loss)])


@dataclass
class BatchItem:
    sample: Sample
    box_index: np.ndarray


def freeze_below(net: Network, layer_name: str) -> Network:
    """
    Stop updates to :param layer_name: and every layer beneath it

    :raises RegistrationException: for an unknown layer name
    """
    depth = net.layers.get(layer_name)
    net.frozen = {name for name, layer_depth in net.layers.items() if layer_depth <= depth}
    logger.info("Frozen layers: %s", sorted(net.frozen))

    return net


class BatchStream:
    """
    Deterministic stream of batches. Images are visited in seeded random order, epoch after epoch; boxes beyond
    `max_boxes_per_image` are subsampled afresh on every visit.

    With `prefetch` > 0 a single producer thread fills a bounded queue ahead of the consumer. The plan is drawn from
    the generator in the same order either way, so the batches do not depend on the prefetch depth.
    """

    def __init__(self, samples: List[Sample], cfg: TrainConfig, rng: np.random.Generator):
        self.samples = samples
        self.cfg = cfg
        self.rng = rng
        self._order = []

    def _next_index(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.samples)))
        return int(self._order.pop(0))

    def _plan(self) -> List[BatchItem]:
        batch = []
        for _ in range(self.cfg.batch_images):
            sample = self.samples[self._next_index()]
            count = len(sample.boxes)
            if count > self.cfg.max_boxes_per_image:
                index = np.sort(self.rng.choice(count, size=self.cfg.max_boxes_per_image, replace=False))
            else:
                index = np.arange(count)
            batch.append(BatchItem(sample, index))
        return batch

    def batches(self, count: int):
        if self.cfg.prefetch == 0:
            for _ in range(count):
                yield self._plan()
            return

        buffer = queue.Queue(maxsize=self.cfg.prefetch)
        stop = threading.Event()

        def produce():
            for _ in range(count):
                if stop.is_set():
                    return
                buffer.put(self._plan())

        producer = threading.Thread(target=produce, name="batch-producer", daemon=True)
        producer.start()
        try:
            for _ in range(count):
                yield buffer.get()
        finally:
            stop.set()
            while producer.is_alive():
                try:
                    buffer.get_nowait()
                except queue.Empty:
                    producer.join(timeout=0.01)


def image_loss(net: Network, item: BatchItem, cfg: TrainConfig):
    """
    Loss and parameter gradients for one image

    MIL: the loss is taken on the per-class max over instances. PerInstance: the loss is the mean of the instances'
    own losses.
    """
    sample = item.sample
    boxes = [sample.boxes[i] for i in item.box_index]
    tape = net.run(sample.image, boxes)
    logits = tape.logits
    weights = cfg.weights()

    if cfg.supervision == "MIL":
        image_scores, winners = mil_max_aggregate(InstanceScores(logits, boxes))
        if cfg.loss_mode == "SoftmaxCE":
            loss, grad = softmax_ce(image_scores, single_label(sample.image_labels, sample.id))
        else:
            loss, grad = weighted_bce_with_logits(image_scores, sample.image_labels, weights)
        d_logits = mil_max_backward(grad, winners, logits.shape[0])
    else:
        labels = sample.per_box_labels[item.box_index]
        d_logits = np.zeros_like(logits)
        losses = []
        for row, (instance_logits, instance_labels) in enumerate(zip(logits, labels)):
            if cfg.loss_mode == "SoftmaxCE":
                value, grad = softmax_ce(instance_logits, single_label(instance_labels, sample.id))
            else:
                value, grad = weighted_bce_with_logits(instance_logits, instance_labels, weights)
            losses.append(value)
            d_logits[row] = grad / logits.shape[0]
        loss = sum(losses) / logits.shape[0]

    return loss, net.backward(tape, d_logits)


def _usable_samples(net: Network, corpus: Corpus, cfg: TrainConfig) -> List[Sample]:
    if not corpus.samples:
        raise ValidationException("Cannot train on an empty corpus", corpus.split)

    if cfg.supervision == "PerInstance":
        missing = [s.id for s in corpus.samples if s.per_box_labels is None]
        if missing:
            raise ValidationException(f"PerInstance training needs per-box labels, missing on {len(missing)} "
                                      f"sample(s)", missing[0])
        if not net.config.uses_boxes:
            raise ConfigurationException("PerInstance training needs a box-based variant", net.config.variant)

    usable = [s for s in corpus.samples if s.boxes]
    if len(usable) < len(corpus.samples):
        logger.warning("Skipping %d image(s) without person boxes", len(corpus.samples) - len(usable))
    if not usable:
        raise ValidationException("No image in the corpus has a person box", corpus.split)

    return usable


def train(net: Network, corpus: Corpus, cfg: TrainConfig, rng: Optional[np.random.Generator] = None,
          on_checkpoint: Callable[[Network, int], None] = None) -> TrainResult:
    """
    Train :param net: in place

    :param net: Network to update; layers in `net.frozen` are left untouched
    :param corpus: Training corpus
    :param cfg: Training settings
    :param rng: Generator for batch order and box sampling, seeded from `cfg.seed` if omitted
    :param on_checkpoint: Called as (net, iteration) every `cfg.checkpoint_every` iterations

    :return: the trained network and its per-iteration loss trace
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    samples = _usable_samples(net, corpus, cfg)

    velocity = {name: np.zeros_like(value) for name, value in net.params.items() if net.trainable(name)}
    result = TrainResult(net)

    for iteration, batch in enumerate(BatchStream(samples, cfg, rng).batches(cfg.total_iters)):
        lr = cfg.lr_at(iteration)
        total = {name: np.zeros_like(value) for name, value in velocity.items()}
        batch_loss = 0.0

        for item in batch:
            loss, grads = image_loss(net, item, cfg)
            batch_loss += loss
            for name in total:
                total[name] += grads[name]

        batch_loss /= len(batch)
        if not np.isfinite(batch_loss):
            raise NumericalException(f"Loss became {batch_loss} at iteration {iteration}", iteration)

        mean_grads = {name: grad / len(batch) for name, grad in total.items()}
        current = {name: net.params.get(name) for name in velocity}
        for name, value in sgd_step(current, mean_grads, velocity, lr, cfg.momentum).items():
            net.params.set(name, value)

        result.trace.append(TracePoint(iteration, lr, batch_loss))
        if cfg.log_every and iteration % cfg.log_every == 0:
            logger.info("iter %d lr %.3g loss %.5f", iteration, lr, batch_loss)
        if on_checkpoint is not None and cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(net, iteration + 1)

    return result


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
             lr: float, momentum: float) -> Dict[str, np.ndarray]:
    """
    One momentum update on plain arrays, as applied by :func:`train`

    :return: the updated parameters; :param velocity: is updated in place
    """
    updated = {}
    for name, value in params.items():
        velocity[name] = momentum * velocity[name] - lr * grads[name]
        updated[name] = value + velocity[name]

    return updated


def evaluate(net: Network, corpus: Corpus) -> EvalReport:
    """
    mAP of MIL image scores (max over each image's person boxes) against the corpus image labels. Images without
    boxes are left out for box-based variants.
    """
    scored = [s for s in corpus.samples if s.boxes or not net.config.uses_boxes]
    if len(scored) < len(corpus.samples):
        logger.warning("Scoring %d of %d images; the rest have no person box", len(scored), len(corpus.samples))
    if not scored:
        raise ValidationException("No image can be scored", corpus.split)

    scores = np.stack([mil_max_aggregate(forward_instances(net, s.image, s.boxes))[0] for s in scored])
    report = mean_ap(scores, np.stack([s.image_labels for s in scored]), corpus.class_names)
    report.extra = {"variant": net.config.variant, "unscored_images": len(corpus.samples) - len(scored)}

    return report
