"""Prediction parameterizations and the linear algebra connecting them.

A denoising network observing x_t = alpha * x0 + sigma * eps can be trained to
output any of several equivalent targets.  At a fixed observation all of them
are affine re-expressions of the posterior-mean prediction f ~ E[x0 | x_t]:

    kind      value                      recover x0 from value
    -------   ------------------------   -----------------------------------
    x0        f                          f
    eps       (x_t - alpha f) / sigma    (x_t - sigma e) / alpha
    v         (alpha x_t - c2 f)/sigma   (alpha x_t - sigma v) / c2
    vfm       (x_t - c1 f) / sigma       (x_t - sigma u) / c1
    trig      v / sqrt(c2)               (alpha x_t - sigma sqrt(c2) F) / c2
    score     -(x_t - alpha f)/sigma^2   (x_t + sigma^2 S) / alpha

with c1 = alpha + sigma and c2 = alpha**2 + sigma**2.  The vfm row is the
flow-matching velocity (eps - x0 at the optimum); the trig row is the
v-prediction in angle coordinates, whose value is scale-free while its loss
carries the data-scale factor sigma_d**2.

Squared-error losses against these targets differ from the x0 loss only by an
analytic multiplicative factor (see loss_ratio).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DomainError
from .schedule import Schedule

KINDS = ("x0", "eps", "v", "vfm", "trig", "score")

#: Max allowed residual of ||x_t - alpha x0 - sigma eps|| in loss_value.
CONSISTENCY_TOL = 1e-8


def _check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise DomainError(f"unknown prediction kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class At:
    """Where a prediction lives: observation x_t at unit time t of a schedule.

    x_t is expressed in the schedule's own scale, x_t = alpha x0 + sigma eps
    with (alpha, sigma) = schedule.alpha_sigma(t).
    """

    x_t: np.ndarray
    t: float
    schedule: Schedule


@dataclass(frozen=True)
class Prediction:
    """A model output of a given kind, tagged with its observation point."""

    kind: str
    value: np.ndarray
    at: At

    def __post_init__(self):
        _check_kind(self.kind)
        value = np.asarray(self.value, dtype=float)
        x_t = np.asarray(self.at.x_t, dtype=float)
        if value.shape != x_t.shape:
            raise ConsistencyError(
                f"value shape {value.shape} does not match x_t shape {x_t.shape}"
            )


def to_x0(kind: str, value, x_t, alpha, sigma):
    """Recover the x0-kind value from any kind at fixed (x_t, alpha, sigma)."""
    _check_kind(kind)
    value = np.asarray(value, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    c2 = alpha * alpha + sigma * sigma
    if kind == "x0":
        return value
    if kind == "eps":
        return (x_t - sigma * value) / alpha
    if kind == "v":
        return (alpha * x_t - sigma * value) / c2
    if kind == "vfm":
        return (x_t - sigma * value) / (alpha + sigma)
    if kind == "trig":
        return (alpha * x_t - sigma * np.sqrt(c2) * value) / c2
    # score
    return (x_t + sigma * sigma * value) / alpha


def from_x0(kind: str, f, x_t, alpha, sigma):
    """Re-express an x0-kind value as any kind at fixed (x_t, alpha, sigma)."""
    _check_kind(kind)
    f = np.asarray(f, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    c2 = alpha * alpha + sigma * sigma
    if kind == "x0":
        return f
    if kind == "eps":
        return (x_t - alpha * f) / sigma
    if kind == "v":
        return (alpha * x_t - c2 * f) / sigma
    if kind == "vfm":
        return (x_t - (alpha + sigma) * f) / sigma
    if kind == "trig":
        return (alpha * x_t - c2 * f) / (sigma * np.sqrt(c2))
    # score
    return -(x_t - alpha * f) / (sigma * sigma)


def convert(pred: Prediction, kind: str) -> Prediction:
    """Re-express a prediction in another kind at the same observation point."""
    _check_kind(kind)
    if kind == pred.kind:
        return pred
    alpha, sigma = pred.at.schedule.alpha_sigma(pred.at.t)
    f = to_x0(pred.kind, pred.value, pred.at.x_t, alpha, sigma)
    value = from_x0(kind, f, pred.at.x_t, alpha, sigma)
    return Prediction(kind=kind, value=value, at=pred.at)


def x0_from_vfm(x_t, t, velocity):
    """The rectified-flow shortcut x0 = x_t - t * velocity (alpha + sigma = 1)."""
    x_t = np.asarray(x_t, dtype=float)
    return x_t - t * np.asarray(velocity, dtype=float)


def vfm_from_v(v, x_t, alpha, sigma):
    """Flow-matching velocity from a v-prediction:
    ((sigma - alpha) x_t + (alpha + sigma) v) / (alpha**2 + sigma**2)."""
    v = np.asarray(v, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    c2 = alpha * alpha + sigma * sigma
    return ((sigma - alpha) * x_t + (alpha + sigma) * v) / c2


@dataclass(frozen=True)
class LossSpec:
    """Which kind a squared-error loss targets, on which schedule."""

    kind: str
    schedule: Schedule

    def __post_init__(self):
        _check_kind(self.kind)


def kind_target(kind: str, x0, eps, alpha, sigma):
    """Regression target of the given kind for a consistent (x0, eps) pair.

    alpha/sigma may be scalars or per-row columns broadcastable against x0.
    """
    if kind == "x0":
        return np.asarray(x0, dtype=float)
    if kind == "eps":
        return np.asarray(eps, dtype=float)
    if kind in ("v", "trig"):
        return alpha * np.asarray(eps, float) - sigma * np.asarray(x0, float)
    if kind == "vfm":
        return np.asarray(eps, float) - np.asarray(x0, float)
    raise DomainError(f"kind {kind!r} has no regression target (score is not trained directly)")


def loss_value(spec: LossSpec, model_out, x0, eps, x_t, t) -> float:
    """Squared-Euclidean loss of the given kind against its target.

    The (x0, eps, x_t, t) tuple must be consistent with the schedule's
    corruption, x_t = alpha x0 + sigma eps; otherwise a ConsistencyError is
    raised.  For the trig kind the target uses the angle-coordinate
    (alpha, sigma) pair and the loss carries the sigma_d**2 data-scale factor.
    """
    model_out = np.asarray(model_out, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    alpha, sigma = spec.schedule.alpha_sigma(t)
    resid = x_t - alpha * x0 - sigma * eps
    if float(np.max(np.abs(resid), initial=0.0)) > CONSISTENCY_TOL:
        raise ConsistencyError(
            "x_t is not the schedule corruption of (x0, eps): "
            f"max residual {np.max(np.abs(resid)):.3g}"
        )
    target = kind_target(spec.kind, x0, eps, alpha, sigma)
    scale = spec.schedule.sigma_d**2 if spec.kind == "trig" else 1.0
    diff = model_out - target
    return float(scale * np.sum(diff * diff))


def loss_ratio(kind: str, t, schedule: Schedule):
    """Analytic factor relating the kind loss to the x0 loss at time t.

    eps: alpha**2/sigma**2; v: (alpha**2+sigma**2)**2/sigma**2;
    vfm: ((alpha+sigma)/sigma)**2, which reduces to sigma**-2 on
    alpha + sigma = 1 families; x0: 1.

    The trig kind follows a different convention: its factor is stated
    relative to the *flow-matching* (vfm) loss and equals
    sigma_d**2 * (t**2 + (1-t)**2).
    """
    _check_kind(kind)
    if kind == "trig":
        tt = np.asarray(t, dtype=float)
        out = schedule.sigma_d**2 * (tt**2 + (1.0 - tt) ** 2)
        return float(out) if out.ndim == 0 else out
    alpha, sigma = schedule.alpha_sigma(t)
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if kind == "x0":
        out = np.ones_like(alpha)
    elif kind == "eps":
        out = (alpha / sigma) ** 2
    elif kind == "v":
        out = ((alpha * alpha + sigma * sigma) / sigma) ** 2
    elif kind == "vfm":
        out = ((alpha + sigma) / sigma) ** 2
    else:
        raise DomainError("score predictions have no squared-error training loss")
    return float(out) if out.ndim == 0 else out
