"""Noise schedules aligned on a shared unit-time axis.

Every Gaussian corruption considered here has the form

    x_t = alpha_t * x0 + sigma_t * eps,    eps ~ N(0, I),

and is summarized by its signal-to-noise ratio SNR_t = alpha_t**2 / sigma_t**2,
strictly decreasing in t.  Schedules written in different conventions are
compared by mapping their native coordinate (a flow-matching time, a trig
angle, a discrete denoising step, a log noise level) onto the unit time

    t = 1 / (1 + sqrt(SNR)),

so that on the unit axis every family satisfies SNR(t) = (1 - t)**2 / t**2 and
families differ only in (a) the scale convention fixing (alpha, sigma) given
their ratio and (b) the distribution over t induced by the family's native
sampling rule.

A :class:`TimestepLaw` combines a density p(t), a scalar weight w(t), and a
range restriction into the weight-normalized training distribution

    pi(t) = w(t) p(t) / integral(w p),

which is what a weighted denoising objective effectively trains under.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

from .errors import ConfigError, DomainError

# Clamped unit-time domain: schedule quantities are evaluated only here.
T_LO = 1e-3
T_HI = 1.0 - 1e-3

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# numpy renamed trapz -> trapezoid in 2.0; support both.
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _scalar_like(value: np.ndarray, reference: np.ndarray):
    """Return a python float when the original input was scalar."""
    if np.ndim(reference) == 0:
        return float(value)
    return value


def _eval_on_interval(t, lo: float, hi: float, fn, *, open_ends: bool = False):
    """Evaluate fn on the points of t inside [lo, hi] (or (lo, hi)); 0 elsewhere."""
    arr = _as_array(t)
    scalar = arr.ndim == 0
    a = np.atleast_1d(arr).astype(float)
    out = np.zeros_like(a)
    inside = (a > lo) & (a < hi) if open_ends else (a >= lo) & (a <= hi)
    if np.any(inside):
        out[inside] = fn(a[inside])
    return float(out[0]) if scalar else out


def check_unit_time(t, lo: float = T_LO, hi: float = T_HI) -> np.ndarray:
    """Validate unit times against the clamped domain [lo, hi]."""
    arr = _as_array(t)
    if not np.all(np.isfinite(arr)):
        raise DomainError("unit time must be finite")
    if np.any(arr < lo) or np.any(arr > hi):
        raise DomainError(
            f"unit time outside clamped domain [{lo:g}, {hi:g}]: "
            f"min={arr.min():g}, max={arr.max():g}"
        )
    return arr


def t_from_snr(snr):
    """Map a signal-to-noise ratio to unit time, t = 1 / (1 + sqrt(SNR)).

    SNR = 0 maps to t = 1 (pure noise) and SNR -> inf to t -> 0; the output
    is not clamped.
    """
    arr = _as_array(snr)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError("SNR must be finite and >= 0")
    out = 1.0 / (1.0 + np.sqrt(arr))
    return _scalar_like(out, snr)


def trig_time(t):
    """Unit time -> trig angle in (0, pi/2), via tan(angle) = t / (1 - t)."""
    arr = _as_array(t)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("unit time must lie strictly inside (0, 1)")
    out = np.arctan2(arr, 1.0 - arr)
    return _scalar_like(out, t)


def rf_time(t_trig):
    """Trig angle -> unit time, t = sin / (sin + cos).  Inverse of trig_time."""
    arr = _as_array(t_trig)
    if np.any(arr <= 0.0) or np.any(arr >= 0.5 * math.pi):
        raise DomainError("trig time must lie strictly inside (0, pi/2)")
    s, c = np.sin(arr), np.cos(arr)
    out = s / (s + c)
    return _scalar_like(out, t_trig)


# ---------------------------------------------------------------------------
# Weight families (rows of the density/weight grid).

WEIGHTS = {
    "one": lambda t: np.ones_like(_as_array(t)),
    "inv_t": lambda t: 1.0 / _as_array(t),
    "one_minus_t": lambda t: 1.0 - _as_array(t),
    "one_minus_t_sq": lambda t: (1.0 - _as_array(t)) ** 2,
    "ratio": lambda t: (1.0 - _as_array(t)) / _as_array(t),
    "ratio_sq": lambda t: ((1.0 - _as_array(t)) / _as_array(t)) ** 2,
}

WEIGHT_NAMES = tuple(WEIGHTS)


def weight_value(name: str, t):
    """Evaluate a named weight family at unit times t."""
    if name not in WEIGHTS:
        raise ConfigError(f"unknown weight {name!r}; expected one of {WEIGHT_NAMES}")
    out = WEIGHTS[name](t)
    return _scalar_like(out, t)


# ---------------------------------------------------------------------------
# Internal logit-normal law shared by several families.


@dataclass(frozen=True)
class _LogitNormal:
    """Law of sigmoid(Z), Z ~ N(mu, s**2); density, CDF and quantiles on (0, 1)."""

    mu: float
    s: float

    def pdf(self, t: np.ndarray) -> np.ndarray:
        def inner(ti):
            z = (logit(ti) - self.mu) / self.s
            return _INV_SQRT_2PI * np.exp(-0.5 * z * z) / (self.s * ti * (1.0 - ti))

        return _eval_on_interval(t, 0.0, 1.0, inner, open_ends=True)

    def cdf(self, t: np.ndarray) -> np.ndarray:
        t = np.clip(_as_array(t), 1e-300, 1.0 - 1e-16)
        return ndtr((logit(t) - self.mu) / self.s)

    def ppf(self, q: np.ndarray) -> np.ndarray:
        return expit(self.mu + self.s * ndtri(_as_array(q)))


# ---------------------------------------------------------------------------
# Schedule families.


class Schedule(ABC):
    """A corruption schedule mapped onto the unit-time axis.

    Subclasses provide the native<->unit coordinate maps and the density that
    the family's native sampling rule induces over unit time.  (alpha, sigma)
    at unit time follows from the family's scale convention alone, because SNR
    alignment already fixes alpha/sigma = (1 - t)/t.
    """

    family: str = "?"
    #: Data scale carried by trig-parameterized predictions; 1 elsewhere.
    sigma_d: float = 1.0

    # -- scale convention ---------------------------------------------------

    @abstractmethod
    def alpha_sigma(self, t):
        """(alpha, sigma) at unit time t, in the family's native scale."""

    def snr(self, t):
        """Signal-to-noise ratio at unit time t (= alpha**2 / sigma**2)."""
        a, s = self.alpha_sigma(t)
        a, s = _as_array(a), _as_array(s)
        out = (a / s) ** 2
        return _scalar_like(out, t)

    # -- coordinate maps ----------------------------------------------------

    @abstractmethod
    def map_to_unit(self, native_t):
        """Native coordinate -> unit time.  Strictly monotone."""

    @abstractmethod
    def native_from_unit(self, t):
        """Unit time -> native coordinate.  Inverse of map_to_unit."""

    # -- induced timestep distribution --------------------------------------

    @abstractmethod
    def induced_support(self) -> tuple[float, float]:
        """Open interval of unit times reachable by the native sampling rule."""

    @abstractmethod
    def induced_pdf(self, t) -> np.ndarray:
        """Density over unit time induced by the native sampling rule."""

    @abstractmethod
    def induced_cdf(self, t) -> np.ndarray:
        ...

    @abstractmethod
    def induced_ppf(self, q) -> np.ndarray:
        ...

    def __repr__(self) -> str:  # keep manifests readable
        fields = {k: v for k, v in vars(self).items() if not k.startswith("_")}
        inner = ", ".join(f"{k}={v!r}" for k, v in fields.items())
        return f"{type(self).__name__}({inner})"


def _sum_one_alpha_sigma(t):
    """alpha + sigma = 1 convention: (1 - t, t)."""
    t = check_unit_time(t)
    return 1.0 - t, t.copy() if t.ndim else t


def _norm_one_alpha_sigma(t):
    """alpha**2 + sigma**2 = 1 convention: ((1 - t), t) / hypot(t, 1 - t)."""
    t = check_unit_time(t)
    r = np.hypot(t, 1.0 - t)
    return (1.0 - t) / r, t / r


def _alpha_one_alpha_sigma(t):
    """alpha = 1 convention: sigma = t / (1 - t)."""
    t = check_unit_time(t)
    return np.ones_like(t), t / (1.0 - t)


@dataclass(frozen=True, repr=False)
class RectifiedFlow(Schedule):
    """alpha = 1 - t, sigma = t; native time is unit time itself.

    The native sampling rule is uniform on (0, 1)."""

    sigma_d: float = 1.0
    family = "rectified_flow"

    def alpha_sigma(self, t):
        a, s = _sum_one_alpha_sigma(t)
        return _scalar_like(a, t), _scalar_like(s, t)

    def map_to_unit(self, native_t):
        out = check_unit_time(native_t)
        return _scalar_like(out, native_t)

    def native_from_unit(self, t):
        out = check_unit_time(t)
        return _scalar_like(out, t)

    def induced_support(self):
        return (0.0, 1.0)

    def induced_pdf(self, t):
        return _eval_on_interval(t, 0.0, 1.0, np.ones_like, open_ends=True)

    def induced_cdf(self, t):
        return np.clip(_as_array(t), 0.0, 1.0)

    def induced_ppf(self, q):
        return _as_array(q)


@dataclass(frozen=True, repr=False)
class TrigFlow(Schedule):
    """alpha = cos(angle), sigma = sin(angle) with tan(angle) = t / (1 - t).

    Values predicted against this schedule carry the data scale sigma_d; the
    (alpha, sigma) pair itself stays on the unit circle.  The native sampling
    rule draws tau ~ N(tau_mean, tau_std**2) and sets tan(angle) = exp(tau),
    which lands on unit time as a logit-normal law.
    """

    sigma_d: float = 1.0
    tau_mean: float = -1.0
    tau_std: float = 1.4
    family = "trigflow"

    def __post_init__(self):
        if self.sigma_d <= 0 or self.tau_std <= 0:
            raise ConfigError("sigma_d and tau_std must be positive")

    @cached_property
    def _law(self) -> _LogitNormal:
        return _LogitNormal(self.tau_mean, self.tau_std)

    def alpha_sigma(self, t):
        a, s = _norm_one_alpha_sigma(t)
        return _scalar_like(a, t), _scalar_like(s, t)

    def map_to_unit(self, native_t):
        return rf_time(native_t)

    def native_from_unit(self, t):
        return trig_time(t)

    def induced_support(self):
        return (0.0, 1.0)

    def induced_pdf(self, t):
        return self._law.pdf(t)

    def induced_cdf(self, t):
        return self._law.cdf(t)

    def induced_ppf(self, q):
        return self._law.ppf(q)


@dataclass(frozen=True, repr=False)
class SanaShifted(Schedule):
    """alpha + sigma = 1 family whose native time is slid toward higher noise.

    The native draw is t0 ~ LogitNormal(0, 1); the shift reduces the SNR at a
    given native time by shift**2, i.e. unit time becomes
    t = shift * t0 / (1 + (shift - 1) * t0).  Composing the two, the induced
    unit-time law is LogitNormal(ln(shift), 1).
    """

    shift: float = 3.0
    sigma_d: float = 1.0
    family = "sana_shifted"

    def __post_init__(self):
        if self.shift <= 0:
            raise ConfigError("shift must be positive")

    @cached_property
    def _law(self) -> _LogitNormal:
        return _LogitNormal(math.log(self.shift), 1.0)

    def alpha_sigma(self, t):
        a, s = _sum_one_alpha_sigma(t)
        return _scalar_like(a, t), _scalar_like(s, t)

    def map_to_unit(self, native_t):
        t0 = _as_array(native_t)
        if np.any(t0 <= 0.0) or np.any(t0 >= 1.0):
            raise DomainError("native time must lie strictly inside (0, 1)")
        out = self.shift * t0 / (1.0 + (self.shift - 1.0) * t0)
        return _scalar_like(out, native_t)

    def native_from_unit(self, t):
        arr = _as_array(t)
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise DomainError("unit time must lie strictly inside (0, 1)")
        out = arr / (self.shift - (self.shift - 1.0) * arr)
        return _scalar_like(out, t)

    def induced_support(self):
        return (0.0, 1.0)

    def induced_pdf(self, t):
        return self._law.pdf(t)

    def induced_cdf(self, t):
        return self._law.cdf(t)

    def induced_ppf(self, q):
        return self._law.ppf(q)


@dataclass(frozen=True, repr=False)
class DdpmLinear(Schedule):
    """Variance-preserving discrete schedule with linearly spaced betas.

    abar_i = prod_{j<=i} (1 - beta_j) defines alpha = sqrt(abar) and
    sigma = sqrt(1 - abar) at integer steps.  Fractional steps interpolate the
    log-SNR with a monotone C1 cubic (PCHIP): exact at integer steps, and
    smooth enough that the induced density has no derivative kinks, which the
    normalization quadrature tolerances rely on.  The native sampling rule is
    uniform over steps.
    """

    beta_min: float = 1e-4
    beta_max: float = 0.02
    n_steps: int = 1000
    sigma_d: float = 1.0
    family = "ddpm_linear"

    def __post_init__(self):
        if self.n_steps < 2:
            raise ConfigError("ddpm_linear needs at least 2 steps")
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise ConfigError("betas must satisfy 0 < beta_min <= beta_max < 1")

    @cached_property
    def _log_snr(self) -> np.ndarray:
        betas = np.linspace(self.beta_min, self.beta_max, self.n_steps)
        abar = np.cumprod(1.0 - betas)
        return np.log(abar) - np.log1p(-abar)

    @cached_property
    def _lam_of_u(self):
        from scipy.interpolate import PchipInterpolator

        return PchipInterpolator(np.arange(self.n_steps), self._log_snr)

    @cached_property
    def _dlam_du(self):
        return self._lam_of_u.derivative()

    @cached_property
    def _t_steps(self) -> np.ndarray:
        return expit(-0.5 * self._log_snr)

    def alpha_sigma(self, t):
        a, s = _norm_one_alpha_sigma(t)
        return _scalar_like(a, t), _scalar_like(s, t)

    def map_to_unit(self, native_t):
        u = _as_array(native_t)
        if np.any(u < 0.0) or np.any(u > self.n_steps - 1):
            raise DomainError(f"step index must lie in [0, {self.n_steps - 1}]")
        out = expit(-0.5 * self._lam_of_u(u))
        return _scalar_like(out, native_t)

    def native_from_unit(self, t):
        arr = _as_array(t)
        lo, hi = self._t_steps[0], self._t_steps[-1]
        if np.any(arr < lo) or np.any(arr > hi):
            raise DomainError(
                f"unit time outside the step table range [{lo:.6g}, {hi:.6g}]"
            )
        target = -2.0 * logit(arr)
        lam = self._log_snr
        # Newton iteration on the strictly monotone interpolant, seeded by the
        # linear inverse (log-SNR decreases with the step index).
        u = np.interp(target, lam[::-1], np.arange(self.n_steps)[::-1])
        for _ in range(30):
            resid = self._lam_of_u(u) - target
            step = resid / self._dlam_du(u)
            u = np.clip(u - step, 0.0, self.n_steps - 1)
            if np.all(np.abs(step) < 1e-13):
                break
        return _scalar_like(np.asarray(u, dtype=float), t)

    def induced_support(self):
        return (float(self._t_steps[0]), float(self._t_steps[-1]))

    def induced_pdf(self, t):
        def inner(ti):
            u = _as_array(self.native_from_unit(ti))
            slope = np.abs(self._dlam_du(u))
            return 2.0 / ((self.n_steps - 1) * ti * (1.0 - ti) * slope)

        lo, hi = self.induced_support()
        return _eval_on_interval(t, lo, hi, inner)

    def induced_cdf(self, t):
        arr = np.clip(_as_array(t), *self.induced_support())
        return _as_array(self.native_from_unit(arr)) / (self.n_steps - 1)

    def induced_ppf(self, q):
        u = _as_array(q) * (self.n_steps - 1)
        return _as_array(self.map_to_unit(u))


@dataclass(frozen=True, repr=False)
class EdmTrain(Schedule):
    """alpha = 1 family trained with log sigma ~ N(log_sigma_mean, log_sigma_std**2).

    Since sigma = t / (1 - t) on the unit axis, log sigma = logit(t), so the
    induced unit-time law is logit-normal with the same parameters.
    """

    log_sigma_mean: float = -1.2
    log_sigma_std: float = 1.2
    sigma_d: float = 1.0
    family = "edm_train"

    def __post_init__(self):
        if self.log_sigma_std <= 0:
            raise ConfigError("log_sigma_std must be positive")

    @cached_property
    def _law(self) -> _LogitNormal:
        return _LogitNormal(self.log_sigma_mean, self.log_sigma_std)

    def alpha_sigma(self, t):
        a, s = _alpha_one_alpha_sigma(t)
        return _scalar_like(a, t), _scalar_like(s, t)

    def map_to_unit(self, native_t):
        out = expit(_as_array(native_t))
        return _scalar_like(out, native_t)

    def native_from_unit(self, t):
        arr = _as_array(t)
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise DomainError("unit time must lie strictly inside (0, 1)")
        return _scalar_like(logit(arr), t)

    def induced_support(self):
        return (0.0, 1.0)

    def induced_pdf(self, t):
        return self._law.pdf(t)

    def induced_cdf(self, t):
        return self._law.cdf(t)

    def induced_ppf(self, q):
        return self._law.ppf(q)


@dataclass(frozen=True, repr=False)
class EdmSampleTruncated(Schedule):
    """The deterministic sampling ladder sigma_i = (smax^(1/rho) + frac * (smin^(1/rho)
    - smax^(1/rho)))**rho with alpha = 1, viewed as a distribution over unit time
    by drawing the ladder fraction uniformly, truncated to t < t_cut.
    """

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    t_cut: float = 0.8
    sigma_d: float = 1.0
    family = "edm_sample_truncated"

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        t_min = self.sigma_min / (1.0 + self.sigma_min)
        if not t_min < self.t_cut <= 1.0:
            raise ConfigError("t_cut must exceed the unit time of sigma_min")

    @cached_property
    def _roots(self) -> tuple[float, float]:
        return self.sigma_min ** (1.0 / self.rho), self.sigma_max ** (1.0 / self.rho)

    def alpha_sigma(self, t):
        a, s = _alpha_one_alpha_sigma(t)
        return _scalar_like(a, t), _scalar_like(s, t)

    def map_to_unit(self, native_t):
        out = expit(_as_array(native_t))
        return _scalar_like(out, native_t)

    def native_from_unit(self, t):
        arr = _as_array(t)
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise DomainError("unit time must lie strictly inside (0, 1)")
        return _scalar_like(logit(arr), t)

    # -- ladder fraction <-> unit time --------------------------------------

    def _t_of_frac(self, u: np.ndarray) -> np.ndarray:
        smin_r, smax_r = self._roots
        sigma = (smax_r + _as_array(u) * (smin_r - smax_r)) ** self.rho
        return sigma / (1.0 + sigma)

    def _frac_of_t(self, t: np.ndarray) -> np.ndarray:
        smin_r, smax_r = self._roots
        sigma = _as_array(t) / (1.0 - _as_array(t))
        return (sigma ** (1.0 / self.rho) - smax_r) / (smin_r - smax_r)

    @cached_property
    def _frac_cut(self) -> float:
        top = self._t_of_frac(0.0)
        if self.t_cut >= top:
            return 0.0
        return float(self._frac_of_t(self.t_cut))

    def induced_support(self):
        lo = float(self._t_of_frac(1.0))
        hi = min(self.t_cut, float(self._t_of_frac(0.0)))
        return (lo, hi)

    def induced_pdf(self, t):
        def inner(ti):
            smin_r, smax_r = self._roots
            sigma = ti / (1.0 - ti)
            du_dt = sigma ** (1.0 / self.rho - 1.0) / (
                self.rho * (smax_r - smin_r) * (1.0 - ti) ** 2
            )
            return du_dt / (1.0 - self._frac_cut)

        lo, hi = self.induced_support()
        return _eval_on_interval(t, lo, hi, inner)

    def induced_cdf(self, t):
        lo, hi = self.induced_support()
        arr = np.clip(_as_array(t), lo, hi)
        # t increases as the ladder fraction decreases.
        return (1.0 - self._frac_of_t(arr)) / (1.0 - self._frac_cut)

    def induced_ppf(self, q):
        u = 1.0 - _as_array(q) * (1.0 - self._frac_cut)
        return self._t_of_frac(u)


_FAMILIES = {
    cls.family: cls
    for cls in (
        RectifiedFlow,
        TrigFlow,
        SanaShifted,
        DdpmLinear,
        EdmTrain,
        EdmSampleTruncated,
    )
}

FAMILY_NAMES = tuple(_FAMILIES)


def make_schedule(family: str, **params) -> Schedule:
    """Construct a schedule by family name; unknown names or params raise."""
    if family not in _FAMILIES:
        raise ConfigError(f"unknown schedule family {family!r}; expected one of {FAMILY_NAMES}")
    try:
        return _FAMILIES[family](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for schedule {family!r}: {exc}") from None


# ---------------------------------------------------------------------------
# Timestep densities usable inside a TimestepLaw.


class Density(ABC):
    """A probability density over unit time with exact CDF and quantiles."""

    @abstractmethod
    def support(self) -> tuple[float, float]:
        ...

    @abstractmethod
    def pdf(self, t) -> np.ndarray:
        ...

    @abstractmethod
    def cdf(self, t) -> np.ndarray:
        ...

    @abstractmethod
    def ppf(self, q) -> np.ndarray:
        ...


@dataclass(frozen=True)
class LogitNormalDensity(Density):
    mu: float = math.log(2.0)
    s: float = 1.6

    def __post_init__(self):
        if self.s <= 0:
            raise ConfigError("logit-normal scale must be positive")

    def support(self):
        return (0.0, 1.0)

    def pdf(self, t):
        return _LogitNormal(self.mu, self.s).pdf(t)

    def cdf(self, t):
        return _LogitNormal(self.mu, self.s).cdf(t)

    def ppf(self, q):
        return _LogitNormal(self.mu, self.s).ppf(q)


@dataclass(frozen=True)
class UniformDensity(Density):
    def support(self):
        return (0.0, 1.0)

    def pdf(self, t):
        return _eval_on_interval(t, 0.0, 1.0, np.ones_like, open_ends=True)

    def cdf(self, t):
        return np.clip(_as_array(t), 0.0, 1.0)

    def ppf(self, q):
        return _as_array(q)


@dataclass(frozen=True)
class ScheduleInducedDensity(Density):
    """The unit-time distribution induced by a schedule's native sampling rule."""

    schedule: Schedule

    def support(self):
        return self.schedule.induced_support()

    def pdf(self, t):
        return self.schedule.induced_pdf(t)

    def cdf(self, t):
        return self.schedule.induced_cdf(t)

    def ppf(self, q):
        return self.schedule.induced_ppf(q)


def logit_normal(mu: float = math.log(2.0), s: float = 1.6) -> LogitNormalDensity:
    return LogitNormalDensity(mu, s)


def uniform() -> UniformDensity:
    return UniformDensity()


def schedule_induced(schedule: Schedule) -> ScheduleInducedDensity:
    return ScheduleInducedDensity(schedule)


# ---------------------------------------------------------------------------
# Weighted timestep law.


def logit_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """n points spanning [lo, hi], uniform in logit(t); dense near both ends."""
    if not (0.0 < lo < hi < 1.0):
        raise DomainError(f"grid bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")
    grid = expit(np.linspace(logit(lo), logit(hi), n))
    # Guard the exact endpoints against round-off through the double logistic.
    grid[0], grid[-1] = lo, hi
    return grid


@dataclass(frozen=True)
class TimestepLaw:
    """Density p(t), weight w(t), and range restriction for timestep sampling.

    ``pi(t) = w(t) p(t) / C`` is the weight-normalized training distribution;
    C is computed by composite trapezoid quadrature on a grid uniform in
    logit(t) over the effective range (the requested range intersected with
    the density's support).  Sampling draws from p restricted to the range;
    the weight enters losses multiplicatively, never the sampler.
    """

    density: Density
    weight: str = "one"
    t_range: tuple[float, float] = (T_LO, T_HI)
    grid: int = 4096

    def __post_init__(self):
        if self.weight not in WEIGHTS:
            raise ConfigError(
                f"unknown weight {self.weight!r}; expected one of {WEIGHT_NAMES}"
            )
        lo, hi = self.t_range
        if not (T_LO <= lo < hi <= T_HI):
            raise ConfigError(
                f"t_range must satisfy {T_LO} <= lo < hi <= {T_HI}, got ({lo}, {hi})"
            )
        if self.grid < 16:
            raise ConfigError("normalization grid must have at least 16 points")
        s_lo, s_hi = self.density.support()
        if max(lo, s_lo) >= min(hi, s_hi):
            raise ConfigError(
                f"range ({lo}, {hi}) does not intersect density support ({s_lo}, {s_hi})"
            )

    @cached_property
    def effective_range(self) -> tuple[float, float]:
        lo, hi = self.t_range
        s_lo, s_hi = self.density.support()
        return (max(lo, s_lo), min(hi, s_hi))

    @cached_property
    def _range_mass(self) -> float:
        lo, hi = self.effective_range
        mass = float(self.density.cdf(hi) - self.density.cdf(lo))
        if mass <= 0.0:
            raise ConfigError("density carries no mass on the requested range")
        return mass

    def _check_range(self, t) -> np.ndarray:
        arr = _as_array(t)
        lo, hi = self.t_range
        if np.any(arr < lo) or np.any(arr > hi):
            raise DomainError(f"t outside law range [{lo:g}, {hi:g}]")
        return arr

    def p(self, t):
        """Range-truncated, renormalized density."""
        arr = self._check_range(t)
        out = self.density.pdf(arr) / self._range_mass
        return _scalar_like(np.asarray(out, dtype=float), t)

    def weight_at(self, t):
        arr = self._check_range(t)
        return _scalar_like(WEIGHTS[self.weight](arr), t)

    @cached_property
    def normalizer(self) -> float:
        """C = integral of w * p over the effective range.

        Exactly 1 for the unit weight (p is normalized by construction), so
        pi coincides with p bit-for-bit in that case.
        """
        if self.weight == "one":
            return 1.0
        return float(self._quadrature(self.grid))

    def _quadrature(self, n: int) -> float:
        lo, hi = self.effective_range
        ts = logit_grid(lo, hi, n)
        y = self.density.pdf(ts) / self._range_mass * WEIGHTS[self.weight](ts)
        return float(_trapezoid(y, ts))

    def pi(self, t):
        """Weight-normalized density w(t) p(t) / C."""
        arr = self._check_range(t)
        out = WEIGHTS[self.weight](arr) * (self.density.pdf(arr) / self._range_mass)
        out = out / self.normalizer
        return _scalar_like(np.asarray(out, dtype=float), t)

    def pi_table(self, n: int = 512) -> dict[str, np.ndarray]:
        """Tabulate (t, p, w, pi) on a logit-uniform grid over the effective range."""
        if n < 2:
            raise ConfigError("table needs at least 2 rows")
        lo, hi = self.effective_range
        ts = logit_grid(lo, hi, n)
        return {
            "t": ts,
            "p": np.asarray(self.p(ts), dtype=float),
            "w": np.asarray(self.weight_at(ts), dtype=float),
            "pi": np.asarray(self.pi(ts), dtype=float),
        }

    def sample(self, rng: np.random.Generator, n: int):
        """n draws from p restricted to the range, by exact inverse transform."""
        if n < 1:
            raise ConfigError("need n >= 1 samples")
        lo, hi = self.effective_range
        q_lo = float(self.density.cdf(lo))
        u = q_lo + rng.random(n) * self._range_mass
        t = np.asarray(self.density.ppf(u), dtype=float)
        return np.clip(t, lo, hi)
