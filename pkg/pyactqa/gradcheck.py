"""
Module for checking analytic gradients against central finite differences.

Each check draws a few seeded random instances, evaluates a scalar objective and compares the analytic gradient
with (f(x + h) - f(x - h)) / 2h on a sample of coordinates of every input. The error of one instance is
||analytic - numeric|| / max(||analytic||, ||numeric||) over the sampled coordinates.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from pyactqa import layers as L
from pyactqa.exceptions import ConfigurationException
from pyactqa.layers import Roi
from pyactqa.losses import InstanceScores, LossWeights, mil_max_aggregate, mil_max_backward, softmax_ce, \
    weighted_bce, weighted_bce_with_logits
from pyactqa.model import ModelConfig, build

logger = logging.getLogger("gradcheck")

STEP = 1e-5
TOLERANCE = 1e-3
INSTANCES = 5
COORDINATES = 24

Objective = Callable[[Dict[str, np.ndarray]], float]


@dataclass
class CheckResult:
    name: str
    errors: List[float] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE

    def to_dict(self) -> dict:
        return {"name": self.name, "max_relative_error": self.max_error, "instances": len(self.errors),
                "passed": self.passed}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def compare(objective: Objective, inputs: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
            rng: np.random.Generator, coordinates: int = COORDINATES, step: float = STEP) -> float:
    """
    Worst relative error over the inputs named in :param analytic:

    :param objective: Scalar function of the full input dict
    :param inputs: Point of evaluation; left unchanged
    """
    worst = 0.0
    for name, grad in analytic.items():
        point = {key: np.array(value, dtype=np.float64) for key, value in inputs.items()}
        flat = point[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(coordinates, flat.size), replace=False)

        numeric = np.empty(picks.size)
        for slot, index in enumerate(picks):
            original = flat[index]
            flat[index] = original + step
            upper = objective(point)
            flat[index] = original - step
            lower = objective(point)
            flat[index] = original
            numeric[slot] = (upper - lower) / (2.0 * step)

        worst = max(worst, relative_error(np.asarray(grad).reshape(-1)[picks], numeric))

    return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.where(np.abs(values) < margin, np.sign(values + 1e-300) * margin + values, values)


def _conv2d(rng):
    stride = int(rng.integers(1, 3))
    inputs = {"x": rng.standard_normal((2, 6, 7)), "w": rng.standard_normal((3, 2, 3, 3)),
              "b": rng.standard_normal(3)}
    out, _ = L.conv2d(inputs["x"], inputs["w"], inputs["b"], stride)
    probe = rng.standard_normal(out.shape)

    def objective(p):
        return float(np.sum(L.conv2d(p["x"], p["w"], p["b"], stride)[0] * probe))

    _, ctx = L.conv2d(inputs["x"], inputs["w"], inputs["b"], stride)
    dx, dw, db = L.conv2d_backward(ctx, probe)
    return objective, inputs, {"x": dx, "w": dw, "b": db}


def _fully_connected(rng):
    inputs = {"x": rng.standard_normal(5), "w": rng.standard_normal((4, 5)), "b": rng.standard_normal(4)}
    probe = rng.standard_normal(4)

    def objective(p):
        return float(np.sum(L.fully_connected(p["x"], p["w"], p["b"])[0] * probe))

    _, ctx = L.fully_connected(inputs["x"], inputs["w"], inputs["b"])
    dx, dw, db = L.fully_connected_backward(ctx, probe)
    return objective, inputs, {"x": dx, "w": dw, "b": db}


def _relu(rng):
    inputs = {"x": _away_from_zero(rng, (3, 4))}
    probe = rng.standard_normal((3, 4))
    _, ctx = L.relu(inputs["x"])

    return (lambda p: float(np.sum(L.relu(p["x"])[0] * probe))), inputs, {"x": L.relu_backward(ctx, probe)}


def _sigmoid(rng):
    inputs = {"x": 3.0 * rng.standard_normal((3, 4))}
    probe = rng.standard_normal((3, 4))
    _, ctx = L.sigmoid(inputs["x"])

    return (lambda p: float(np.sum(L.sigmoid(p["x"])[0] * probe))), inputs, {"x": L.sigmoid_backward(ctx, probe)}


def _roi_max_pool(rng):
    inputs = {"fmap": rng.standard_normal((2, 7, 8))}
    x0, y0 = rng.uniform(0, 4), rng.uniform(0, 3)
    roi = Roi(x0, y0, x0 + rng.uniform(2, 4), y0 + rng.uniform(2, 4))
    out, ctx = L.roi_max_pool(inputs["fmap"], roi, 2, 2)
    probe = rng.standard_normal(out.shape)

    def objective(p):
        return float(np.sum(L.roi_max_pool(p["fmap"], roi, 2, 2)[0] * probe))

    return objective, inputs, {"fmap": L.roi_max_pool_backward(ctx, probe)}


def _fusion(variant: str):
    def make(rng):
        channels, size = 4, 3
        inputs = {"box": rng.standard_normal((channels, size, size)),
                  "img": rng.standard_normal((channels, size, size))}
        for name, shape in L.fusion_parameter_shapes(variant, channels).items():
            inputs[name] = rng.standard_normal(shape)
        param_names = [name for name in inputs if name not in ("box", "img")]
        probe = rng.standard_normal((channels, size, size))

        def objective(p):
            out, _ = L.fusion_combine(variant, p["box"], p["img"], {name: p[name] for name in param_names})
            return float(np.sum(out * probe))

        _, ctx = L.fusion_combine(variant, inputs["box"], inputs["img"], {name: inputs[name] for name in param_names})
        d_box, d_img, d_params = L.fusion_combine_backward(ctx, probe)
        return objective, inputs, {"box": d_box, "img": d_img, **d_params}

    return make


def _labels(rng, size):
    labels = (rng.random(size) < 0.4).astype(np.float64)
    labels[rng.integers(size)] = 1.0
    return labels


def _weighted_bce(rng):
    labels, weights = _labels(rng, 6), LossWeights(rng.uniform(1, 10), rng.uniform(0.5, 2))
    inputs = {"p": rng.uniform(0.05, 0.95, 6)}

    return (lambda p: weighted_bce(p["p"], labels, weights)[0]), inputs, \
        {"p": weighted_bce(inputs["p"], labels, weights)[1]}


def _weighted_bce_with_logits(rng):
    labels, weights = _labels(rng, 6), LossWeights(rng.uniform(1, 10), rng.uniform(0.5, 2))
    inputs = {"z": 2.0 * rng.standard_normal(6)}

    return (lambda p: weighted_bce_with_logits(p["z"], labels, weights)[0]), inputs, \
        {"z": weighted_bce_with_logits(inputs["z"], labels, weights)[1]}


def _softmax_ce(rng):
    label = int(rng.integers(6))
    inputs = {"z": 2.0 * rng.standard_normal(6)}

    return (lambda p: softmax_ce(p["z"], label)[0]), inputs, {"z": softmax_ce(inputs["z"], label)[1]}


def _mil_loss(rng):
    labels, weights = _labels(rng, 5), LossWeights(10.0, 1.0)
    inputs = {"scores": rng.standard_normal((3, 5))}

    def objective(p):
        image_scores, _ = mil_max_aggregate(InstanceScores(p["scores"], []))
        return weighted_bce_with_logits(image_scores, labels, weights)[0]

    image_scores, winners = mil_max_aggregate(InstanceScores(inputs["scores"], []))
    grad = weighted_bce_with_logits(image_scores, labels, weights)[1]
    return objective, inputs, {"scores": mil_max_backward(grad, winners, 3)}


def _model(variant: str):
    def make(rng):
        config = ModelConfig(variant=variant, num_classes=4, backbone_widths=[4, 6], head_widths=[8],
                             seed=int(rng.integers(1 << 31)))
        net = build(config)
        image = rng.uniform(0.0, 1.0, size=(3, 12, 12))
        boxes = [Roi(0.0, 2.0, 7.0, 12.0), Roi(5.0, 0.0, 12.0, 9.0)]
        labels = _labels(rng, 4)
        weights = LossWeights(10.0, 1.0)
        inputs = dict(net.params.items())

        def objective(p):
            for name, value in p.items():
                net.params.set(name, value)
            scores, _ = mil_max_aggregate(InstanceScores(net.run(image, boxes).logits, boxes))
            return weighted_bce_with_logits(scores, labels, weights)[0]

        tape = net.run(image, boxes)
        scores, winners = mil_max_aggregate(InstanceScores(tape.logits, boxes))
        grad = weighted_bce_with_logits(scores, labels, weights)[1]
        analytic = net.backward(tape, mil_max_backward(grad, winners, len(boxes)))
        return objective, inputs, analytic

    return make


CHECKS: Dict[str, Callable[[np.random.Generator], Tuple[Objective, dict, dict]]] = {
    "conv2d": _conv2d,
    "fully_connected": _fully_connected,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "roi_max_pool": _roi_max_pool,
    "fusion_combine[Fusion1]": _fusion("Fusion1"),
    "fusion_combine[Fusion2]": _fusion("Fusion2"),
    "weighted_bce": _weighted_bce,
    "weighted_bce_with_logits": _weighted_bce_with_logits,
    "softmax_ce": _softmax_ce,
    "mil_max+weighted_bce": _mil_loss,
    "model[Fusion2]": _model("Fusion2"),
}


def run_check(name: str, seed: int = 0, instances: int = INSTANCES) -> CheckResult:
    if name not in CHECKS:
        raise ConfigurationException(f"Unknown gradient check {name}", name)

    rng = np.random.default_rng([seed, sum(map(ord, name))])
    result = CheckResult(name)
    for _ in range(instances):
        objective, inputs, analytic = CHECKS[name](rng)
        result.errors.append(compare(objective, inputs, analytic, rng))

    logger.info("%-28s max relative error %.3e", name, result.max_error)
    return result


def run_suite(seed: int = 0, instances: int = INSTANCES, names=None) -> List[CheckResult]:
    return [run_check(name, seed, instances) for name in (names or CHECKS)]


def format_table(results: List[CheckResult]) -> str:
    lines = [f"{'check':<28} {'max rel err':>12}  status"]
    for result in results:
        lines.append(f"{result.name:<28} {result.max_error:>12.3e}  {'ok' if result.passed else 'FAIL'}")
    return "\n".join(lines)
