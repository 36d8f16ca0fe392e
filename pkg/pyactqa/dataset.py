"""
Module for corpora: the JSON corpus format, the synthetic scene generator and per-class statistics.

Synthetic classes pair a pose with an object: class c is pose c % P acting on object c // P. People stand in the lower
half of the image and show their pose as a pattern on the head. Everyone acting in a scene acts on the same object,
drawn either inside each actor's box or once, anywhere in the upper half. How often the object leaves the box is the
scene's context dependence: at 1 a model that only looks inside person boxes cannot tell the object. Empty places may
hold decoys, posed figures that act on nothing and get no box, so only a model that knows where the people are can
tell which poses count.
"""
import base64
import colorsys
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from pyactqa.exceptions import ConfigurationException, FileException, ShapeException, ValidationException
from pyactqa.layers import Roi
from pyactqa.model import box_in_image

logger = logging.getLogger("dataset")

SUPERVISION_LEVELS = ("ImageLevel", "PerInstance")
SPLITS = ("train", "val", "test")
DETECTOR_META = {"source": "synthetic", "threshold": 0.8}

GLYPH = 4
PERSON_TOP_FRACTION = 0.5
BODY_SHADE = 0.5
HEAD_SHADE = 0.75
POSE_SHADE = 0.15


@dataclass
class Sample:
    id: str
    image: np.ndarray
    boxes: List[Roi]
    image_labels: np.ndarray
    per_box_labels: Optional[np.ndarray] = None
    detector_meta: Optional[dict] = None

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class Corpus:
    samples: List[Sample]
    class_names: List[str]
    supervision: str = "ImageLevel"
    split: str = "train"

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.stack([sample.image_labels for sample in self.samples]).astype(np.float64)

    def by_id(self) -> Dict[str, Sample]:
        return {sample.id: sample for sample in self.samples}

    def validate(self) -> "Corpus":
        if self.supervision not in SUPERVISION_LEVELS:
            raise ValidationException(f"Unknown supervision {self.supervision}", self.supervision)
        if self.split not in SPLITS:
            raise ValidationException(f"Unknown split {self.split}", self.split)

        seen = set()
        for sample in self.samples:
            if sample.id in seen:
                raise ValidationException("Duplicate sample id", sample.id)
            seen.add(sample.id)
            validate_sample(sample, self.num_classes, self.supervision)

        return self


def validate_sample(sample: Sample, num_classes: int, supervision: str):
    """
    :raises ValidationException: naming the sample when any corpus invariant fails
    """
    image = sample.image
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValidationException(f"image must be 3 x H x W, got {image.shape}", sample.id)
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValidationException("pixel values must lie in [0, 1]", sample.id)

    for box in sample.boxes:
        try:
            box_in_image(box, sample.width, sample.height)
        except ShapeException as error:
            raise ValidationException(error.message, sample.id) from error

    labels = sample.image_labels
    if labels.shape != (num_classes,):
        raise ValidationException(f"image_labels has length {labels.size}, expected {num_classes}", sample.id)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationException("image_labels must be 0/1", sample.id)

    if sample.per_box_labels is None:
        if supervision == "PerInstance":
            raise ValidationException("PerInstance corpora need per_box_labels", sample.id)
        return

    per_box = sample.per_box_labels
    if per_box.shape != (len(sample.boxes), num_classes):
        raise ValidationException(f"per_box_labels has shape {per_box.shape}, expected "
                                  f"({len(sample.boxes)}, {num_classes})", sample.id)
    if not np.all((per_box == 0) | (per_box == 1)):
        raise ValidationException("per_box_labels must be 0/1", sample.id)
    if len(sample.boxes) and not np.array_equal(per_box.max(axis=0), labels):
        raise ValidationException("image_labels is not the OR of per_box_labels", sample.id)


def encode_pixels(image: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(image, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(text: str, width: int, height: int, sample_id) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as error:
        raise ValidationException("pixels are not valid base64", sample_id) from error
    if len(raw) != 4 * 3 * width * height:
        raise ValidationException(f"pixels hold {len(raw)} bytes, expected {12 * width * height}", sample_id)

    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(3, height, width)


def sample_to_dict(sample: Sample) -> dict:
    record = {"id": sample.id, "width": sample.width, "height": sample.height,
              "pixels": encode_pixels(sample.image),
              "boxes": [box.as_list() for box in sample.boxes],
              "image_labels": [int(v) for v in sample.image_labels]}
    if sample.per_box_labels is not None:
        record["per_box_labels"] = [[int(v) for v in row] for row in sample.per_box_labels]
    if sample.detector_meta is not None:
        record["detector_meta"] = dict(sample.detector_meta)

    return record


def sample_from_dict(record: dict, num_classes: int) -> Sample:
    sample_id = record.get("id") if isinstance(record, dict) else None
    try:
        width, height = int(record["width"]), int(record["height"])
        image = decode_pixels(record["pixels"], width, height, sample_id)
        boxes = [Roi(*(float(v) for v in box)) for box in record["boxes"]]
        labels = np.array(record["image_labels"], dtype=np.int64).reshape(-1)
        per_box = record.get("per_box_labels")
        if per_box is not None:
            per_box = np.array(per_box, dtype=np.int64).reshape(len(boxes), -1) if boxes \
                else np.zeros((0, num_classes), dtype=np.int64)
    except (KeyError, TypeError, ValueError) as error:
        raise ValidationException(f"schema violation: {error}", sample_id) from error

    return Sample(str(sample_id), image, boxes, labels, per_box, record.get("detector_meta"))


def load_corpus(path) -> Corpus:
    """
    Read and validate a corpus JSON file

    :raises FileException: if the file is missing or not JSON
    :raises ValidationException: naming the offending sample on any schema or invariant violation
    """
    if not Path(path).is_file():
        raise FileException("Invalid file path specified!", path)

    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise FileException(f"Corpus is not valid JSON: {error}", path) from error

    if not isinstance(document, dict) or not isinstance(document.get("classes"), list) \
            or not isinstance(document.get("samples"), list):
        raise ValidationException("corpus needs 'classes' and 'samples' lists", path)

    class_names = [str(name) for name in document["classes"]]
    samples = [sample_from_dict(record, len(class_names)) for record in document["samples"]]
    corpus = Corpus(samples, class_names, document.get("supervision", "ImageLevel"), document.get("split", "train"))

    return corpus.validate()


def save_corpus(corpus: Corpus, path):
    document = {"classes": list(corpus.class_names), "supervision": corpus.supervision, "split": corpus.split,
                "samples": [sample_to_dict(sample) for sample in corpus.samples]}
    Path(path).write_text(json.dumps(document), encoding="utf-8")


@dataclass
class SynthSpec:
    """
    Settings of the synthetic scene generator.

    `skew` asks for an imbalanced corpus: class imbalance ratios (negatives per positive image) rise geometrically
    from min(skew, C - 1) for class 0 to `skew` for the last class. `decoys` is the chance that a place left empty
    by the people of a scene holds a decoy figure.
    """
    n_images: int = 300
    n_test: int = 100
    num_classes: int = 8
    min_people: int = 1
    max_people: int = 3
    image_size: int = 32
    context_dependence: float = 1.0
    decoys: float = 0.75
    skew: Optional[float] = None
    supervision: str = "ImageLevel"
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.num_classes < 2:
            raise ConfigurationException(f"Need at least 2 classes, got {self.num_classes}", self.num_classes)
        if not 1 <= self.min_people <= self.max_people:
            raise ConfigurationException(f"Need 1 <= min_people <= max_people, got {self.min_people}, "
                                         f"{self.max_people}", (self.min_people, self.max_people))
        if not 0.0 <= self.context_dependence <= 1.0:
            raise ConfigurationException("context_dependence must lie in [0, 1]", self.context_dependence)
        if not 0.0 <= self.decoys <= 1.0:
            raise ConfigurationException("decoys must lie in [0, 1]", self.decoys)
        if self.n_images < 1 or self.n_test < 1:
            raise ConfigurationException("Need at least one train and one test image", (self.n_images, self.n_test))
        if self.image_size < 24 or self.image_size // self.max_people < GLYPH + 2:
            raise ConfigurationException(f"A {self.image_size}px image is too small for {self.max_people} people",
                                         self.image_size)
        if self.skew is not None and self.skew < 1.0:
            raise ConfigurationException(f"skew must be >= 1, got {self.skew}", self.skew)
        if self.supervision not in SUPERVISION_LEVELS:
            raise ConfigurationException(f"Unknown supervision {self.supervision}", self.supervision)

        return self

    def to_dict(self) -> dict:
        return asdict(self)


def class_factors(num_classes: int) -> Tuple[int, int]:
    """
    :return: (poses, objects), the smallest near-square grid holding every class
    """
    objects = int(np.ceil(np.sqrt(num_classes)))
    return int(np.ceil(num_classes / objects)), objects


def object_palette(num_objects: int) -> np.ndarray:
    """
    One fully saturated RGB color per object, evenly spaced in hue
    """
    return np.array([colorsys.hsv_to_rgb(o / num_objects, 1.0, 1.0) for o in range(num_objects)])


def pose_pattern(pose: int) -> np.ndarray:
    """
    GLYPH x GLYPH mask of the pose's head pattern; distinct for every pose below 2 ** 16
    """
    code = (pose * 40503 + 21845) % 65536
    return np.unpackbits(np.array([code >> 8, code & 0xFF], dtype=np.uint8)).reshape(GLYPH, GLYPH).astype(bool)


VERBS = ("riding", "holding", "feeding", "carrying", "washing", "throwing", "repairing", "kicking", "walking",
         "pushing", "catching", "painting")
OBJECTS = ("bicycle", "horse", "kite", "umbrella", "skateboard", "dog", "ball", "boat", "surfboard", "cake", "book",
           "bench")


def class_names_for(num_classes: int) -> List[str]:
    """
    "<verb> <object>" action names, unique for up to len(VERBS) * len(OBJECTS) classes
    """
    if num_classes > len(VERBS) * len(OBJECTS):
        raise ConfigurationException(f"At most {len(VERBS) * len(OBJECTS)} named classes", num_classes)

    names = []
    for c in range(num_classes):
        block, verb = divmod(c, len(VERBS))
        names.append(f"{VERBS[verb]} {OBJECTS[(5 * verb + block) % len(OBJECTS)]}")

    return names


def split_phrase(phrase: str) -> Tuple[str, str]:
    verb, _, obj = phrase.partition(" ")
    if not obj:
        raise ValidationException(f"{phrase!r} is not a verb-object phrase", phrase)
    return verb, obj


def skewed_positive_counts(n_images: int, num_classes: int, skew: float) -> np.ndarray:
    base = min(skew, num_classes - 1)
    ratios = base * (skew / base) ** (np.arange(num_classes) / (num_classes - 1))

    return np.maximum(1, np.round(n_images / (1.0 + ratios))).astype(np.int64)


def _object_classes(cls: int, num_classes: int) -> range:
    """
    Every class acting on the same object as :param cls:
    """
    poses, _ = class_factors(num_classes)
    start = cls // poses * poses
    return range(start, min(start + poses, num_classes))


def _assign_actions(spec: SynthSpec, n_images: int, rng: np.random.Generator) -> List[List[int]]:
    """
    Per image, the action of each person (-1 for a person doing none of the labelled actions). Actors of one image
    share an object.
    """
    people = rng.integers(spec.min_people, spec.max_people + 1, size=n_images)

    if spec.skew is None:
        actions = []
        for count in people:
            first = int(rng.integers(0, spec.num_classes))
            row = [first] + [int(c) for c in rng.choice(_object_classes(first, spec.num_classes), size=count - 1)]
            rng.shuffle(row)
            actions.append(row)
        return actions

    actions = [[-1] * count for count in people]
    counts = skewed_positive_counts(n_images, spec.num_classes, spec.skew)
    if counts.sum() > people.sum():
        raise ConfigurationException(f"skew {spec.skew} needs {counts.sum()} actors but scenes hold only "
                                     f"{people.sum()} people", spec.skew)

    # rarest classes first, so they still find room
    for cls in range(spec.num_classes - 1, -1, -1):
        same_object = set(_object_classes(cls, spec.num_classes))
        free = np.array([i for i in range(n_images) if -1 in actions[i] and cls not in actions[i]
                         and all(a < 0 or a in same_object for a in actions[i])])
        if free.size < counts[cls]:
            raise ConfigurationException(f"Not enough free people for class {cls}", cls)
        for index in rng.choice(free, size=counts[cls], replace=False):
            slot = actions[index].index(-1)
            actions[index][slot] = cls

    for row in actions:
        rng.shuffle(row)

    return actions


def _figure_box(spec: SynthSpec, slot: int, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    size = spec.image_size
    strip = size // spec.max_people
    x0 = int(slot * strip + rng.integers(0, 2))
    x1 = min(x0 + strip - 2, size)
    y0 = int(size * PERSON_TOP_FRACTION) + int(rng.integers(0, 2))
    y1 = size - int(rng.integers(0, 3))

    return x0, y0, x1, y1


def _paint_figure(image: np.ndarray, corners: Tuple[int, int, int, int], pose: Optional[int],
                  rng: np.random.Generator):
    """
    A body with a head on top; the head carries the pose pattern, or none for a person who does nothing
    """
    x0, y0, x1, y1 = corners
    image[:, y0:y1, x0:x1] = BODY_SHADE + rng.uniform(-0.05, 0.05, size=(3, y1 - y0, x1 - x0))
    head = HEAD_SHADE if pose is None else np.where(pose_pattern(pose), POSE_SHADE, HEAD_SHADE)
    hx = (x0 + x1 - GLYPH) // 2
    image[:, y0:y0 + GLYPH, hx:hx + GLYPH] = head


def _paint_scene(spec: SynthSpec, actions: List[int], palette: np.ndarray, rng: np.random.Generator):
    size = spec.image_size
    poses, _ = class_factors(spec.num_classes)
    image = rng.uniform(0.0, 0.1, size=(3, size, size))
    slots = rng.permutation(spec.max_people)
    person_slots, empty_slots = np.sort(slots[:len(actions)]), np.sort(slots[len(actions):])

    for slot in empty_slots:
        if rng.random() < spec.decoys:
            _paint_figure(image, _figure_box(spec, slot, rng), int(rng.integers(0, poses)), rng)

    boxes, per_box = [], np.zeros((len(actions), spec.num_classes), dtype=np.int64)
    scene_object = None
    for person, (slot, action) in enumerate(zip(person_slots, actions)):
        x0, y0, x1, y1 = _figure_box(spec, slot, rng)
        _paint_figure(image, (x0, y0, x1, y1), None if action < 0 else action % poses, rng)
        boxes.append(Roi(float(x0), float(y0), float(x1), float(y1)))

        if action < 0:
            continue

        per_box[person, action] = 1
        color = palette[action // poses][:, None, None]
        if rng.random() < spec.context_dependence:
            scene_object = color
        else:
            gx, gy = (x0 + x1 - GLYPH) // 2, min(y0 + GLYPH + 1, y1 - GLYPH)
            image[:, gy:gy + GLYPH, gx:gx + GLYPH] = color

    if scene_object is not None:
        gx = int(rng.integers(1, size - GLYPH))
        gy = max(1, int(size * PERSON_TOP_FRACTION) // 2 - GLYPH)
        image[:, gy:gy + GLYPH, gx:gx + GLYPH] = scene_object

    return np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64), boxes, per_box


def _generate_split(spec: SynthSpec, split: str, n_images: int, seed_seq: np.random.SeedSequence) -> Corpus:
    children = seed_seq.spawn(n_images + 1)
    actions = _assign_actions(spec, n_images, np.random.default_rng(children[0]))
    palette = object_palette(class_factors(spec.num_classes)[1])

    samples = []
    for index in range(n_images):
        image, boxes, per_box = _paint_scene(spec, actions[index], palette, np.random.default_rng(children[index + 1]))
        samples.append(Sample(f"{split}-{index:05d}", image, boxes, per_box.max(axis=0), per_box,
                              dict(DETECTOR_META)))

    return Corpus(samples, class_names_for(spec.num_classes), spec.supervision, split).validate()


def synth_generate(spec: SynthSpec) -> Tuple[Corpus, Corpus]:
    """
    Generate a (train, test) pair of synthetic corpora. Deterministic given the SynthSpec; every scene of either split
    draws from its own spawned seed, so no scene seed is shared between splits.
    """
    spec.validate()
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train = _generate_split(spec, "train", spec.n_images, train_seq)
    test = _generate_split(spec, "test", spec.n_test, test_seq)
    logger.info("Generated %d train and %d test scenes with %d classes", len(train.samples), len(test.samples),
                spec.num_classes)

    return train, test


@dataclass
class ClassStats:
    class_names: List[str]
    positives: List[int]
    negatives: List[int]
    ratios: List[Optional[float]] = field(default_factory=list)
    empty_classes: List[str] = field(default_factory=list)
    single_positive_classes: List[str] = field(default_factory=list)

    @property
    def max_ratio(self) -> Optional[float]:
        defined = [r for r in self.ratios if r is not None]
        return max(defined) if defined else None

    @property
    def mean_ratio(self) -> Optional[float]:
        defined = [r for r in self.ratios if r is not None]
        return float(np.mean(defined)) if defined else None

    def to_dict(self) -> dict:
        record = asdict(self)
        record.update(max_ratio=self.max_ratio, mean_ratio=self.mean_ratio)
        return record


def class_stats(corpus: Corpus) -> ClassStats:
    """
    Image-level positive/negative counts per class and the negative:positive ratio. Classes with no positives have
    no ratio and are listed in `empty_classes`.
    """
    labels = corpus.labels() if corpus.samples else np.zeros((0, corpus.num_classes))
    positives = labels.sum(axis=0).astype(np.int64)
    negatives = len(corpus.samples) - positives

    stats = ClassStats(list(corpus.class_names), positives.tolist(), negatives.tolist())
    for name, pos, neg in zip(corpus.class_names, positives, negatives):
        stats.ratios.append(float(neg / pos) if pos else None)
        if pos == 0:
            stats.empty_classes.append(name)
        elif pos == 1:
            stats.single_positive_classes.append(name)

    if stats.empty_classes:
        logger.warning("%d class(es) have no positive images", len(stats.empty_classes))

    return stats
