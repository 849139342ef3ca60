"""Analytic Gaussian-mixture data distributions and their diffusion posteriors.

A mixture component k has weight w_k, mean mu_k and covariance S_k.  Under the
forward corruption x_t = alpha x0 + sigma eps the corrupted marginal is again
a Gaussian mixture with component laws Normal(alpha mu_k, C_k) where
C_k = alpha^2 S_k + sigma^2 I, so everything a denoiser could learn about the
distribution has a closed form:

  responsibilities   r_k(x_t)  proportional to  w_k Normal(x_t; alpha mu_k, C_k)
  posterior mean     E[x0 | x_t] = sum_k r_k m_k,
                     m_k = mu_k + alpha S_k C_k^{-1} (x_t - alpha mu_k)
  score              grad log p_t(x_t) = -(x_t - alpha E[x0 | x_t]) / sigma^2

Covariances are eigendecomposed once at construction, so batched queries
reduce to diagonal operations in the component eigenbases (S_k and C_k
commute, C_k being a polynomial in S_k).

The posterior mean also has a closed-form Jacobian with respect to x_t,

  J = sum_k r_k A_k + sum_k r_k m_k (g_k - gbar)^T,
  A_k = alpha S_k C_k^{-1},   g_k = -C_k^{-1} (x_t - alpha mu_k),

with gbar the responsibility average of the g_k.  `posterior_mean_vjp`
contracts a cotangent against J without materialising it (A_k is symmetric
because S_k and C_k commute), which is what lets training losses
differentiate through the teacher's output.
"""

from __future__ import annotations

import hashlib
import math
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ConsistencyError, DomainError

_LOG_2PI = math.log(2.0 * math.pi)

__all__ = ["MixtureTeacher", "gaussian_ring", "from_flat_config"]


def _as_mean(value) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ConfigError(f"component mean must be a vector, got shape {arr.shape}")
    return arr


def _as_cov(value, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr * np.eye(d)
    if arr.shape != (d, d):
        raise ConfigError(f"covariance must be {d}x{d}, got shape {arr.shape}")
    if not np.allclose(arr, arr.T, rtol=0.0, atol=1e-12):
        raise ConfigError("covariance must be symmetric")
    return arr


class MixtureTeacher:
    """Gaussian mixture over data space with exact denoising queries.

    `components` is an iterable of tuples `(weight, mean, covariance)` or
    `(weight, mean, covariance, class_label)`.  Class labels must be given
    for all components or none.  If `class_priors` is given, component
    weights are rescaled within each class block so the per-class mass
    matches the prior (the joint stays a coherent mixture).

    All query methods accept a single point of shape (d,) or a batch (n, d),
    with `t` a scalar or a length-n array, and return matching shapes.
    Instances are immutable after construction; queries are pure.
    """

    def __init__(self, components: Sequence, class_priors: Optional[Sequence[float]] = None):
        comps = list(components)
        if not comps:
            raise ConfigError("mixture needs at least one component")

        labels: list = []
        weights: list = []
        means: list = []
        covs: list = []
        for comp in comps:
            if len(comp) == 3:
                w, mu, cov = comp
                label = None
            elif len(comp) == 4:
                w, mu, cov, label = comp
            else:
                raise ConfigError("component must be (weight, mean, cov[, class_label])")
            mu = _as_mean(mu)
            weights.append(float(w))
            means.append(mu)
            covs.append(_as_cov(cov, mu.shape[0]))
            labels.append(None if label is None else int(label))

        d = means[0].shape[0]
        if any(m.shape[0] != d for m in means):
            raise ConfigError("all component means must share one dimension")

        self.dimension = d
        self._weights = np.asarray(weights, dtype=float)
        if np.any(self._weights < 0.0):
            raise ConfigError("component weights must be nonnegative")
        if abs(self._weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"component weights must sum to 1, got {self._weights.sum()!r}")
        self._means = np.stack(means)
        self._covs = np.stack(covs)

        labeled = [lab is not None for lab in labels]
        if any(labeled) and not all(labeled):
            raise ConfigError("either all components carry a class label or none do")
        self.class_labels = tuple(labels) if all(labeled) else None

        if class_priors is not None:
            if self.class_labels is None:
                raise ConfigError("class_priors given but components are unlabeled")
            priors = np.asarray(class_priors, dtype=float)
            if priors.ndim != 1 or np.any(priors < 0.0) or abs(priors.sum() - 1.0) > 1e-12:
                raise ConfigError("class_priors must be a probability vector")
            if any(lab < 0 or lab >= priors.shape[0] for lab in self.class_labels):
                raise ConfigError("class label out of range of class_priors")
            lab_arr = np.asarray(self.class_labels)
            for c, prior in enumerate(priors):
                mask = lab_arr == c
                mass = self._weights[mask].sum()
                if prior > 0.0 and mass == 0.0:
                    raise ConfigError(f"class {c} has prior {prior} but no components")
                if mass > 0.0:
                    self._weights = np.where(mask, self._weights * (prior / mass), self._weights)

        # PD validation (per the construction contract) plus cached factors
        try:
            self._chols = np.linalg.cholesky(self._covs)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("every covariance must be positive-definite") from exc
        self._evals, self._evecs = np.linalg.eigh(self._covs)  # (K,d), (K,d,d)

        with np.errstate(divide="ignore"):
            self._log_weights = np.log(self._weights)
        self._class_views: dict = {}

    # -- introspection ------------------------------------------------------

    @property
    def component_count(self) -> int:
        return self._weights.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return self._weights.copy()

    @property
    def means(self) -> np.ndarray:
        return self._means.copy()

    @property
    def covariances(self) -> np.ndarray:
        return self._covs.copy()

    @property
    def class_count(self) -> int:
        if self.class_labels is None:
            return 0
        return max(self.class_labels) + 1

    def class_masses(self) -> np.ndarray:
        """Total mixture weight per class (the implied class priors)."""
        if self.class_labels is None:
            raise ConfigError("teacher has no class labels")
        out = np.zeros(self.class_count)
        for w, lab in zip(self._weights, self.class_labels):
            out[lab] += w
        return out

    def restricted_to_class(self, class_label: int) -> "MixtureTeacher":
        """The class-conditional mixture (weights renormalized within the class)."""
        if self.class_labels is None:
            raise ConfigError("teacher has no class labels to condition on")
        c = int(class_label)
        if c in self._class_views:
            return self._class_views[c]
        idx = [k for k, lab in enumerate(self.class_labels) if lab == c]
        if not idx:
            raise ConfigError(f"no components with class label {c}")
        mass = self._weights[idx].sum()
        comps = [(self._weights[k] / mass, self._means[k], self._covs[k], c) for k in idx]
        view = MixtureTeacher(comps)
        self._class_views[c] = view
        return view

    def __repr__(self) -> str:
        return (
            f"MixtureTeacher(components={self.component_count}, dimension={self.dimension}, "
            f"classes={self.class_count or None})"
        )

    def fingerprint(self) -> str:
        """Content hash of the full definition; training loops assert it is
        unchanged across a run."""
        h = hashlib.sha256()
        h.update(self._weights.tobytes())
        h.update(self._means.tobytes())
        h.update(self._covs.tobytes())
        h.update(repr(self.class_labels).encode())
        return h.hexdigest()

    # -- core batched machinery ---------------------------------------------

    def _prep(self, x_t, t, schedule):
        x = np.asarray(x_t, dtype=float)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.dimension:
            raise ConsistencyError(
                f"x_t must have trailing dimension {self.dimension}, got shape {x.shape}"
            )
        if not np.all(np.isfinite(xb)):
            raise ConsistencyError("x_t must be finite")
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            t_arr = np.full(xb.shape[0], float(t_arr))
        elif t_arr.shape != (xb.shape[0],):
            raise ConsistencyError("t must be scalar or one value per row of x_t")
        alpha, sigma = schedule.alpha_sigma(t_arr)
        return xb, np.asarray(alpha, float), np.asarray(sigma, float), single

    def _stats(self, xb, alpha, sigma):
        """Eigenbasis coordinates, per-eigendirection corrupted variances and
        per-component log joint densities log(w_k N(x_t; alpha mu_k, C_k))."""
        diff = xb[:, None, :] - alpha[:, None, None] * self._means[None, :, :]
        z = np.einsum("kij,nki->nkj", self._evecs, diff)
        denom = (alpha**2)[:, None, None] * self._evals[None, :, :] + (sigma**2)[:, None, None]
        log_joint = self._log_weights[None, :] - 0.5 * (
            np.sum(z * z / denom, axis=2)
            + np.sum(np.log(denom), axis=2)
            + self.dimension * _LOG_2PI
        )
        return z, denom, log_joint

    def _component_means(self, z, denom, alpha):
        y = self._evals[None, :, :] * z / denom
        return self._means[None, :, :] + alpha[:, None, None] * np.einsum(
            "kij,nkj->nki", self._evecs, y
        )

    # -- queries -------------------------------------------------------------

    def responsibilities(self, x_t, t, schedule) -> np.ndarray:
        """Posterior component probabilities r_k(x_t), shape (..., K)."""
        xb, alpha, sigma, single = self._prep(x_t, t, schedule)
        _, _, log_joint = self._stats(xb, alpha, sigma)
        r = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        return r[0] if single else r

    def log_marginal(self, x_t, t, schedule, class_label: Optional[int] = None) -> np.ndarray:
        """Log density of the corrupted marginal at time t."""
        if class_label is not None:
            return self.restricted_to_class(class_label).log_marginal(x_t, t, schedule)
        xb, alpha, sigma, single = self._prep(x_t, t, schedule)
        _, _, log_joint = self._stats(xb, alpha, sigma)
        out = logsumexp(log_joint, axis=1)
        return out[0] if single else out

    def posterior_mean(self, x_t, t, schedule, class_label: Optional[int] = None) -> np.ndarray:
        """E[x0 | x_t] under the (optionally class-conditional) mixture."""
        if class_label is not None:
            return self.restricted_to_class(class_label).posterior_mean(x_t, t, schedule)
        xb, alpha, sigma, single = self._prep(x_t, t, schedule)
        z, denom, log_joint = self._stats(xb, alpha, sigma)
        r = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        m = self._component_means(z, denom, alpha)
        pm = np.einsum("nk,nki->ni", r, m)
        return pm[0] if single else pm

    def score(self, x_t, t, schedule, class_label: Optional[int] = None) -> np.ndarray:
        """Gradient of the corrupted-marginal log density, via the posterior mean."""
        if class_label is not None:
            return self.restricted_to_class(class_label).score(x_t, t, schedule)
        xb, alpha, sigma, single = self._prep(x_t, t, schedule)
        pm = self.posterior_mean(xb, t, schedule)
        out = -(xb - alpha[:, None] * pm) / (sigma**2)[:, None]
        return out[0] if single else out

    def posterior_mean_vjp(
        self, x_t, t, schedule, cotangent, class_label: Optional[int] = None
    ) -> np.ndarray:
        """cotangent^T d(posterior_mean)/d(x_t), same shape as x_t."""
        if class_label is not None:
            return self.restricted_to_class(class_label).posterior_mean_vjp(
                x_t, t, schedule, cotangent
            )
        xb, alpha, sigma, single = self._prep(x_t, t, schedule)
        v = np.asarray(cotangent, dtype=float)
        vb = v[None, :] if single else v
        if vb.shape != xb.shape:
            raise ConsistencyError("cotangent must match x_t's shape")

        z, denom, log_joint = self._stats(xb, alpha, sigma)
        r = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
        m = self._component_means(z, denom, alpha)

        zv = np.einsum("kij,ni->nkj", self._evecs, vb)
        av = alpha[:, None, None] * np.einsum(
            "kij,nkj->nki", self._evecs, self._evals[None, :, :] * zv / denom
        )
        g = -np.einsum("kij,nkj->nki", self._evecs, z / denom)
        gbar = np.einsum("nk,nki->ni", r, g)

        term1 = np.einsum("nk,nki->ni", r, av)
        vm = np.einsum("ni,nki->nk", vb, m)
        term2 = np.einsum("nk,nki->ni", r * vm, g - gbar[:, None, :])
        out = term1 + term2
        return out[0] if single else out

    def cfg_x0(self, x_t, t, schedule, class_label: int, scale: float) -> np.ndarray:
        """Guided x0 prediction: uncond + scale * (cond - uncond)."""
        if scale < 0.0:
            raise ConfigError("guidance scale must be nonnegative")
        uncond = self.posterior_mean(x_t, t, schedule)
        if scale == 0.0:
            return uncond
        cond = self.posterior_mean(x_t, t, schedule, class_label=class_label)
        return uncond + scale * (cond - uncond)

    def cfg_x0_vjp(
        self, x_t, t, schedule, cotangent, class_label: int, scale: float
    ) -> np.ndarray:
        """VJP of cfg_x0 wrt x_t (linearity in the two posterior means)."""
        if scale < 0.0:
            raise ConfigError("guidance scale must be nonnegative")
        out = (1.0 - scale) * self.posterior_mean_vjp(x_t, t, schedule, cotangent)
        if scale != 0.0:
            out = out + scale * self.posterior_mean_vjp(
                x_t, t, schedule, cotangent, class_label=class_label
            )
        return out

    # -- brute-force oracle ---------------------------------------------------

    def quadrature_posterior_mean(self, x_t, t, schedule, points: int = 2001) -> np.ndarray:
        """E[x0 | x_t] by direct tensor-grid integration (1-D and 2-D only).

        Serves as the independent oracle for `posterior_mean`: it never touches
        the closed-form conditioning path, only the prior density and the
        Gaussian corruption kernel.
        """
        if self.dimension > 2:
            raise DomainError("quadrature oracle supports dimension <= 2 only")
        x = np.asarray(x_t, dtype=float)
        if x.shape != (self.dimension,):
            raise ConsistencyError("quadrature oracle takes a single point")
        alpha, sigma = schedule.alpha_sigma(float(t))
        alpha = float(alpha)
        sigma = float(sigma)

        stds = np.sqrt(np.einsum("kii->ki", self._covs))  # (K,d) per-axis stds
        lows, highs = [], []
        for axis in range(self.dimension):
            lo = np.min(self._means[:, axis] - 8.0 * stds[:, axis])
            hi = np.max(self._means[:, axis] + 8.0 * stds[:, axis])
            lo = min(lo, x[axis] / alpha - 8.0 * sigma / alpha)
            hi = max(hi, x[axis] / alpha + 8.0 * sigma / alpha)
            lows.append(lo)
            highs.append(hi)

        trap = getattr(np, "trapezoid", np.trapz)
        if self.dimension == 1:
            grid = np.linspace(lows[0], highs[0], points)
            log_w = self._log_prior_1d(grid) - 0.5 * ((x[0] - alpha * grid) / sigma) ** 2
            w = np.exp(log_w - log_w.max())
            return np.array([trap(w * grid, grid) / trap(w, grid)])

        g0 = np.linspace(lows[0], highs[0], points)
        g1 = np.linspace(lows[1], highs[1], points)
        p0, p1 = np.meshgrid(g0, g1, indexing="ij")
        flat = np.stack([p0.ravel(), p1.ravel()], axis=1)
        log_w = self._log_prior_flat(flat)
        log_w -= 0.5 * np.sum((x[None, :] - alpha * flat) ** 2, axis=1) / sigma**2
        w = np.exp(log_w - log_w.max()).reshape(points, points)
        denom = trap(trap(w, g1, axis=1), g0)
        num0 = trap(trap(w * p0, g1, axis=1), g0)
        num1 = trap(trap(w * p1, g1, axis=1), g0)
        return np.array([num0 / denom, num1 / denom])

    def _log_prior_1d(self, grid: np.ndarray) -> np.ndarray:
        acc = np.full(grid.shape, -np.inf)
        for k in range(self.component_count):
            var = self._covs[k, 0, 0]
            log_nk = (
                self._log_weights[k]
                - 0.5 * ((grid - self._means[k, 0]) ** 2 / var + math.log(var) + _LOG_2PI)
            )
            acc = np.logaddexp(acc, log_nk)
        return acc

    def _log_prior_flat(self, flat: np.ndarray) -> np.ndarray:
        # streaming logsumexp over components keeps memory at O(grid) not O(grid*K)
        acc = np.full(flat.shape[0], -np.inf)
        for k in range(self.component_count):
            diff = flat - self._means[k][None, :]
            zk = diff @ self._evecs[k]
            quad = np.sum(zk * zk / self._evals[k][None, :], axis=1)
            log_nk = self._log_weights[k] - 0.5 * (
                quad + np.sum(np.log(self._evals[k])) + self.dimension * _LOG_2PI
            )
            acc = np.logaddexp(acc, log_nk)
        return acc

    # -- sampling --------------------------------------------------------------

    def sample(self, n: int, rng, class_label: Optional[int] = None) -> np.ndarray:
        """Ancestral draws from the (optionally class-conditional) mixture."""
        if class_label is not None:
            return self.restricted_to_class(class_label).sample(n, rng)
        return self.sample_labeled(n, rng)[0]

    def sample_labeled(self, n: int, rng):
        """Draws plus per-draw class labels (-1 when the teacher is unlabeled)."""
        if n < 1:
            raise ConfigError("sample count must be >= 1")
        gen = np.random.default_rng(rng)
        idx = gen.choice(self.component_count, size=n, p=self._weights)
        eps = gen.standard_normal((n, self.dimension))
        x = self._means[idx] + np.einsum("nij,nj->ni", self._chols[idx], eps)
        if self.class_labels is None:
            labels = np.full(n, -1, dtype=int)
        else:
            labels = np.asarray(self.class_labels, dtype=int)[idx]
        return x, labels


def gaussian_ring(
    component_count: int = 8,
    radius: float = 4.0,
    component_std: float = 0.3,
    class_count: int = 2,
) -> MixtureTeacher:
    """Equal-weight 2-D Gaussian ring; component k sits at angle 2 pi k / K and
    carries class label k mod class_count (no labels when class_count is 0)."""
    if component_count < 1:
        raise ConfigError("ring needs at least one component")
    comps = []
    cov = component_std**2 * np.eye(2)
    for k in range(component_count):
        angle = 2.0 * math.pi * k / component_count
        mean = np.array([radius * math.cos(angle), radius * math.sin(angle)])
        label = k % class_count if class_count else None
        comps.append((1.0 / component_count, mean, cov, label))
    return MixtureTeacher(comps)


def _floats(text: str) -> list:
    return [float(p) for p in text.split(",") if p.strip()]


def _ints(text: str) -> list:
    return [int(p) for p in text.split(",") if p.strip()]


def from_flat_config(cfg: Mapping[str, str]) -> MixtureTeacher:
    """Build a teacher from flat string key/value pairs.

    kind = ring (default): components, radius, std, classes.
    kind = mixture: dimension, weights, means (K*d numbers, row-major),
    covariances (K*d*d numbers row-major, or K isotropic variances),
    plus optional class_labels (K ints) and class_priors.
    Unknown keys are rejected.
    """
    cfg = dict(cfg)
    kind = cfg.pop("kind", "ring")
    if kind == "ring":
        known = {"components", "radius", "std", "classes"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown teacher keys: {sorted(unknown)}")
        return gaussian_ring(
            component_count=int(cfg.get("components", "8")),
            radius=float(cfg.get("radius", "4.0")),
            component_std=float(cfg.get("std", "0.3")),
            class_count=int(cfg.get("classes", "2")),
        )
    if kind != "mixture":
        raise ConfigError(f"unknown teacher kind {kind!r}")

    known = {"dimension", "weights", "means", "covariances", "class_labels", "class_priors"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown teacher keys: {sorted(unknown)}")
    try:
        d = int(cfg["dimension"])
        weights = _floats(cfg["weights"])
        means = _floats(cfg["means"])
        covs = _floats(cfg["covariances"])
    except KeyError as exc:
        raise ConfigError(f"mixture teacher config missing key {exc.args[0]!r}") from exc
    k = len(weights)
    if len(means) != k * d:
        raise ConfigError(f"means must hold {k * d} numbers, got {len(means)}")
    mean_rows = np.asarray(means).reshape(k, d)
    if len(covs) == k:
        cov_mats = [v * np.eye(d) for v in covs]
    elif len(covs) == k * d * d:
        cov_mats = list(np.asarray(covs).reshape(k, d, d))
    else:
        raise ConfigError(
            f"covariances must hold {k} isotropic variances or {k * d * d} numbers"
        )
    labels = _ints(cfg["class_labels"]) if "class_labels" in cfg else [None] * k
    if len(labels) != k:
        raise ConfigError(f"class_labels must hold {k} entries")
    priors = _floats(cfg["class_priors"]) if "class_priors" in cfg else None
    comps = [(w, m, c, lab) for w, m, c, lab in zip(weights, mean_rows, cov_mats, labels)]
    return MixtureTeacher(comps, class_priors=priors)
