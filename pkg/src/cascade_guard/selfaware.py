"""Predict-or-abstain decisions on a mixture of normal and adversarial inputs.

A logistic map calibrated on detector scores estimates the probability that
an input came from the normal distribution. Predicting on a normal input
costs its misclassification probability, predicting on an adversarial input
costs e_q, abstaining always costs e_a; the optimal rule predicts exactly
when the expected prediction cost beats e_a.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cascade import detector_score_batch
from .errors import ValidationError
from .tensor import Tensor
from .victim import predict_batch

__all__ = [
    "OmegaCalibration",
    "ErrorTable",
    "SelfAwarePolicy",
    "MixtureItem",
    "SweepPoint",
    "calibrate_omega",
    "abstain_decide",
    "selfaware_sweep",
    "random_guess_error",
]

_RIDGE = 1e-6  # tiny L2 penalty keeps the fit finite under perfect separation


@dataclass(frozen=True)
class OmegaCalibration:
    """Monotone logistic map from detector score to P(normal | score).

    slope <= 0: higher adversarialness never raises the normal probability.
    """

    slope: float
    intercept: float

    def __post_init__(self):
        if self.slope > 0:
            raise ValidationError("calibration slope must be non-positive")

    def p_normal(self, scores) -> np.ndarray:
        z = self.slope * np.asarray(scores, dtype=np.float64) + self.intercept
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def _penalized_nll(a, b, scores, normal):
    z = np.clip(a * scores + b, -500.0, 500.0)
    # log(1 + exp(-z)) for normals, log(1 + exp(z)) for adversarials
    nll = np.where(normal, np.logaddexp(0.0, -z), np.logaddexp(0.0, z)).mean()
    return nll + _RIDGE * (a * a + b * b)


def calibrate_omega(scores, labels) -> OmegaCalibration:
    """Maximum-likelihood logistic fit of P(normal) against detector scores.

    labels mark adversarials (truthy). Newton iterations on the ridge-penalized
    mean log-loss; if the fitted slope turns out positive it is clamped to 0
    with the matching base-rate intercept.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("need aligned 1-D scores and labels")
    normal = ~labels
    if normal.all() or labels.all():
        raise ValidationError("calibration needs both classes present")
    t = normal.astype(np.float64)
    design = np.stack([scores, np.ones_like(scores)], axis=1)
    theta = np.zeros(2)
    n = len(scores)
    for _ in range(100):
        z = np.clip(design @ theta, -500.0, 500.0)
        p = 1.0 / (1.0 + np.exp(-z))
        grad = design.T @ (p - t) / n + 2.0 * _RIDGE * theta
        w = p * (1.0 - p)
        hess = (design * w[:, None]).T @ design / n + 2.0 * _RIDGE * np.eye(2)
        step = np.linalg.solve(hess, grad)
        theta = theta - step
        if np.abs(step).max() < 1e-12:
            break
    a, b = float(theta[0]), float(theta[1])
    if a > 0:
        base = float(t.mean())
        base = min(max(base, 1e-12), 1.0 - 1e-12)
        a, b = 0.0, float(np.log(base / (1.0 - base)))
    return OmegaCalibration(slope=a, intercept=b)


@dataclass
class ErrorTable:
    """Victim misclassification rate per predicted class, with a global fallback.

    Classes predicted fewer than min_count times on the validation set fall
    back to the global error rate.
    """

    per_class: np.ndarray
    counts: np.ndarray
    global_rate: float
    min_count: int = 30

    @classmethod
    def from_validation(cls, network, images, labels, min_count: int = 30):
        labels = np.asarray(labels, dtype=np.int64)
        if len(images) == 0:
            raise ValidationError("validation set is empty")
        _, _, pred = predict_batch(network, images)
        classes = network.spec.classes
        per_class = np.zeros(classes)
        counts = np.zeros(classes, dtype=np.int64)
        for c in range(classes):
            mask = pred == c
            counts[c] = int(mask.sum())
            if counts[c]:
                per_class[c] = float((labels[mask] != c).mean())
        return cls(per_class=per_class, counts=counts,
                   global_rate=float((pred != labels).mean()), min_count=min_count)

    def p_err(self, predicted_class: int) -> float:
        c = int(predicted_class)
        if self.counts[c] < self.min_count:
            return self.global_rate
        return float(self.per_class[c])


def random_guess_error(classes: int) -> float:
    """Error of guessing uniformly among the classes: (C - 1) / C."""
    if classes < 1:
        raise ValidationError("class count must be positive")
    return (classes - 1) / classes


def abstain_decide(p_omega: float, p_err: float, e_q: float, e_a: float) -> str:
    """Predict iff p_omega * p_err + (1 - p_omega) * e_q < e_a, strictly.

    Equality abstains.
    """
    if not 0.0 <= p_omega <= 1.0 or not 0.0 <= p_err <= 1.0:
        raise ValidationError("probabilities must lie in [0, 1]")
    if e_q <= 0 or e_a <= 0:
        raise ValidationError("costs must be positive")
    expected_predict = p_omega * p_err + (1.0 - p_omega) * e_q
    return "predict" if expected_predict < e_a else "abstain"


@dataclass(frozen=True)
class SelfAwarePolicy:
    """Bundle of the abstain rule's ingredients for one deployment.

    e_q defaults to 10; pass random_guess_error(classes) for the
    uniform-guessing fallback (C - 1) / C.
    """

    e_a: float
    calibration: OmegaCalibration
    error_table: ErrorTable
    e_q: float = 10.0

    def __post_init__(self):
        if self.e_q <= 0 or self.e_a <= 0:
            raise ValidationError("costs must be positive")

    def decide(self, score: float, predicted_class: int) -> str:
        p_omega = float(self.calibration.p_normal(score))
        return abstain_decide(p_omega, self.error_table.p_err(predicted_class),
                              self.e_q, self.e_a)


@dataclass(frozen=True)
class MixtureItem:
    """One test input: the image, whether it is adversarial, true label if known."""

    image: Tensor
    is_adversarial: bool
    label: int | None


@dataclass
class SweepPoint:
    e_a: float
    abstain_fraction: float
    retained_accuracy: float
    expected_loss: float
    adversarial_abstain_rate: float
    normal_retain_rate: float


def selfaware_sweep(items, network, detector, calibration: OmegaCalibration,
                    error_table: ErrorTable, e_q: float, e_a_values) -> list[SweepPoint]:
    """Apply the abstain rule per item for each abstain cost in the sweep.

    Retained accuracy counts a kept item as correct only when the victim's
    argmax equals its true label; retained adversarials without one count as
    wrong. Expected loss charges e_a per abstention, e_q per retained
    adversarial and the 0/1 error per retained normal.
    """
    items = list(items)
    if not items:
        raise ValidationError("mixture is empty")
    batch = np.stack([it.image.array for it in items])
    scores = detector_score_batch(detector, network, batch)
    _, _, pred = predict_batch(network, batch)
    p_omega = calibration.p_normal(scores)
    p_err = np.array([error_table.p_err(c) for c in pred])
    is_adv = np.array([it.is_adversarial for it in items], dtype=bool)
    correct = np.array(
        [it.label is not None and int(pred[i]) == int(it.label)
         for i, it in enumerate(items)], dtype=bool)
    expected_predict = p_omega * p_err + (1.0 - p_omega) * e_q

    points = []
    n = len(items)
    for e_a in np.asarray(e_a_values, dtype=np.float64):
        predicts = expected_predict < e_a
        abstains = ~predicts
        retained = int(predicts.sum())
        retained_acc = float(correct[predicts].mean()) if retained else float("nan")
        loss = float(
            (abstains * e_a
             + predicts * np.where(is_adv, e_q, (~correct).astype(np.float64))).mean())
        adv_total = int(is_adv.sum())
        norm_total = n - adv_total
        points.append(SweepPoint(
            e_a=float(e_a),
            abstain_fraction=float(abstains.mean()),
            retained_accuracy=retained_acc,
            expected_loss=loss,
            adversarial_abstain_rate=(
                float(abstains[is_adv].mean()) if adv_total else float("nan")),
            normal_retain_rate=(
                float(predicts[~is_adv].mean()) if norm_total else float("nan")),
        ))
    return points
