"""Few-step generator distillation against an analytic mixture teacher.

The generator G maps noise to data in K evaluations along a fixed time
ladder.  Training alternates two phases on the shared reverse-mode tape:

* generator phase: corrupt the generator's output, query the frozen analytic
  teacher and the frozen learned fake-score net on the corrupted point, and
  step the generator on the score-difference objective
  ``scale/d * mean_i[ w(t_i) (f_teacher - f_fake)^T (f_fake - x_g) ]``
  with gradients flowing into x_g both directly and through the corruption.
* fake phase: re-fit the fake net to the *current* generator's outputs with a
  plain flow-matching velocity regression on freshly corrupted samples.

Corruption always uses the straight-interpolation form
``x_t = (1 - t) x + t eps`` regardless of which schedule family produced the
timestep density; times are unit-scaled throughout.  Classifier-free guidance
with one shared scale is applied to the fake net in both phases, so the
generator chases the guided score while the fake net is fit to reproduce its
own guided field on generator samples.  An optional non-saturating logistic
critic on corrupted samples can be mixed into the generator objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .errors import ConfigError, ConsistencyError, DivergenceError, DomainError
from .eval import energy_distance, sliced_w2
from .param import kind_target
from .schedule import (
    T_HI,
    T_LO,
    Density,
    RectifiedFlow,
    TimestepLaw,
    logit_normal,
    make_schedule,
    weight_value,
)
from .teacher import MixtureTeacher

__all__ = [
    "DistillConfig",
    "PretrainConfig",
    "DistillResult",
    "DistillState",
    "TIMELINE_HEADER",
    "step_times",
    "generate",
    "diffuse_output",
    "teacher_x0_node",
    "fake_velocity_node",
    "generator_loss_node",
    "generator_update",
    "fake_update",
    "adversarial_update",
    "pretrain_student",
    "make_state",
    "distill_run",
]

# Corruption frame for distillation: straight interpolation to white noise.
_RF = RectifiedFlow()

_LOSS_CEILING = 1e6
_T_HIST_BINS = 32

TIMELINE_HEADER = "iter,gen_loss,fake_loss,adv_loss,energy_distance,w2_sliced"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PretrainConfig:
    """Settings for fitting a student net to the analytic teacher directly."""

    iterations: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    hidden: Tuple[int, ...] = (128, 128, 128)
    time_features: int = 8
    class_embed_dim: int = 16
    conditional: bool = False
    null_class_prob: float = 0.1
    schedule_family: str = "rectified_flow"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.iterations < 0:
            raise ConfigError("pretrain iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0):
            raise ConfigError("beta1 must lie in [0, 1)")
        if not (0.0 <= self.null_class_prob <= 1.0):
            raise ConfigError("null_class_prob must lie in [0, 1]")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    """Everything a distillation run depends on.

    `t_max` records the native integer-step horizon the unit times stand in
    for; it only matters for reporting since all internal times are unit
    scaled already.  `weight`, `density`, and `t_range` define the timestep
    law shared by both training phases.  `cfg_scale` is applied to the fake
    net in both phases (and to the teacher for conditional runs).
    """

    steps: int = 4
    t_max: float = 1000.0
    cfg_scale: float = 4.5
    weight: str = "one_minus_t"
    loss_scale: float = 100.0
    alpha_term: bool = False
    alpha_scale: float = 1.0
    alpha_sign: float = 1.0
    density: Optional[Density] = None
    t_range: Tuple[float, float] = (T_LO, T_HI)
    lr: float = 1e-3
    fake_lr: Optional[float] = None
    batch_size: int = 256
    update_ratio: int = 1
    iterations: int = 20000
    seed: int = 0
    eval_interval: int = 500
    eval_samples: int = 4096
    eval_projections: int = 64
    stop_below_energy: Optional[float] = None
    conditional: bool = False
    hidden: Tuple[int, ...] = (128, 128, 128)
    time_features: int = 8
    class_embed_dim: int = 16
    generator_init: str = "pretrained"
    pretrain_iterations: int = 4000
    pretrain_lr: float = 1e-3
    null_class_prob: float = 0.1
    adv_enabled: bool = False
    adv_weight: float = 0.01
    adv_hidden: Tuple[int, ...] = (64, 64, 64)
    adv_lr: Optional[float] = None
    lr_decay_at: Tuple[float, ...] = ()
    lr_decay_factor: float = 0.1
    law: TimestepLaw = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "adv_hidden", tuple(int(h) for h in self.adv_hidden))
        object.__setattr__(self, "lr_decay_at", tuple(float(f) for f in self.lr_decay_at))
        if self.density is None:
            object.__setattr__(self, "density", logit_normal())
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.cfg_scale < 0.0:
            raise ConfigError("cfg_scale must be nonnegative")
        if self.loss_scale <= 0.0:
            raise ConfigError("loss_scale must be positive")
        if self.alpha_sign not in (-1.0, 1.0):
            raise ConfigError("alpha_sign must be -1.0 or +1.0")
        if self.lr <= 0.0 or (self.fake_lr is not None and self.fake_lr <= 0.0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.update_ratio < 0:
            raise ConfigError("update_ratio must be >= 0")
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.eval_samples < 2:
            raise ConfigError("eval_samples must be >= 2")
        if self.generator_init not in ("pretrained", "identity"):
            raise ConfigError(
                f"generator_init must be 'pretrained' or 'identity', got {self.generator_init!r}"
            )
        if self.adv_weight < 0.0:
            raise ConfigError("adv_weight must be nonnegative")
        if self.adv_lr is not None and self.adv_lr <= 0.0:
            raise ConfigError("adv_lr must be positive")
        if any(not 0.0 < f < 1.0 for f in self.lr_decay_at):
            raise ConfigError("lr_decay_at entries must be fractions in (0, 1)")
        if any(b <= a for a, b in zip(self.lr_decay_at, self.lr_decay_at[1:])):
            raise ConfigError("lr_decay_at must be strictly increasing")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")
        # validates weight name and range; the law object is reused everywhere
        object.__setattr__(
            self, "law", TimestepLaw(self.density, weight=self.weight, t_range=self.t_range)
        )


# ---------------------------------------------------------------------------
# generator


def step_times(steps: int) -> Tuple[float, ...]:
    """The K-step sampling ladder 1, 1 - 1/K, ..., 1/K (descending)."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    return tuple(1.0 - k / steps for k in range(steps))


def _rollout(spec, params, n, steps, class_idx, gen, upto=None):
    """Plain (untaped) generator rollout; returns the per-step outputs.

    Each step re-corrupts the previous output with fresh noise at the ladder
    time and moves to the step's data estimate.  The first step starts from
    pure noise because the ladder opens at t = 1.
    """
    d = spec.input_dim
    x = np.zeros((n, d))
    outs = []
    for t_k in step_times(steps)[:upto]:
        z = gen.standard_normal((n, d))
        x_in = (1.0 - t_k) * x + t_k * z
        x = x_in - t_k * nn.forward(spec, params, x_in, t_k, class_idx)
        outs.append(x)
    return outs


def generate(spec, params, n, rng, steps: int = 4, class_idx=None):
    """Draw n samples in `steps` evaluations; returns (samples, trajectory).

    `trajectory` holds the generator output after each ladder step, so
    `trajectory[-1] is samples`.
    """
    if n < 1:
        raise ConfigError("need n >= 1 samples")
    gen = np.random.default_rng(rng)
    outs = _rollout(spec, params, n, steps, class_idx, gen)
    return outs[-1], outs


def diffuse_output(x, t, rng):
    """Corrupt samples with the straight interpolation x_t = (1-t) x + t eps.

    Returns (x_t, eps); `t` may be a scalar or one value per row.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ConsistencyError(f"x must be a sample matrix, got shape {x.shape}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < T_LO) or np.any(t_arr > T_HI):
        raise DomainError(f"t outside [{T_LO:g}, {T_HI:g}]")
    gen = np.random.default_rng(rng)
    eps = gen.standard_normal(x.shape)
    t_col = t_arr if t_arr.ndim == 0 else t_arr[:, None]
    return (1.0 - t_col) * x + t_col * eps, eps


# ---------------------------------------------------------------------------
# taped building blocks


def _teacher_x0_batch(teacher, x, t, labels, scale, vjp_of=None):
    """Teacher x0 prediction (or its VJP) for a batch with per-row labels."""
    if labels is None:
        if vjp_of is None:
            return teacher.posterior_mean(x, t, _RF)
        return teacher.posterior_mean_vjp(x, t, _RF, vjp_of)
    labels = np.asarray(labels, dtype=int)
    out = np.empty_like(x) if vjp_of is None else np.empty_like(vjp_of)
    for c in np.unique(labels):
        m = labels == c
        if vjp_of is None:
            out[m] = teacher.cfg_x0(x[m], t[m], _RF, class_label=int(c), scale=scale)
        else:
            out[m] = teacher.cfg_x0_vjp(
                x[m], t[m], _RF, vjp_of[m], class_label=int(c), scale=scale
            )
    return out


def teacher_x0_node(teacher, x_t_node: nn.Node, t, labels, scale) -> nn.Node:
    """Analytic teacher as a tape op: exact value, exact VJP wrt x_t."""
    x_val = x_t_node.value
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x_val.shape[0],))
    value = _teacher_x0_batch(teacher, x_val, t_arr, labels, scale)

    def vjp(g):
        return _teacher_x0_batch(teacher, x_val, t_arr, labels, scale, vjp_of=g)

    return nn.custom_op(x_t_node, value, vjp)


def fake_velocity_node(spec, params, x_t, t, labels, scale) -> nn.Node:
    """Fake net's velocity with classifier-free guidance composed on the tape."""
    if spec.class_count == 0 or labels is None:
        return nn.tape_forward(spec, params, x_t, t, None)
    cond = nn.tape_forward(spec, params, x_t, t, labels)
    if scale == 1.0:
        return cond
    uncond = nn.tape_forward(spec, params, x_t, t, None)
    return nn.add(uncond, nn.mul(scale, nn.sub(cond, uncond)))


def generator_loss_node(
    config: DistillConfig,
    teacher: MixtureTeacher,
    fake_spec: nn.NetSpec,
    fake_pnodes: Dict[str, nn.Node],
    x_g: nn.Node,
    t: np.ndarray,
    eps: np.ndarray,
    labels,
) -> Tuple[nn.Node, nn.Node]:
    """Score-difference generator objective on the tape.

    Returns (loss, x_t) so the corrupted batch can be reused (e.g. by the
    adversarial term).  Gradient reaches x_g directly through the second
    factor and through the corruption into both score estimates; the fake
    parameters stay frozen because only x_g's ancestors are differentiated.
    """
    n, dim = x_g.value.shape
    t_col = t[:, None]
    x_t = nn.add(nn.mul(1.0 - t_col, x_g), t_col * eps)
    f_teacher = teacher_x0_node(teacher, x_t, t, labels, config.cfg_scale)
    v_fake = fake_velocity_node(fake_spec, fake_pnodes, x_t, t, labels, config.cfg_scale)
    # x0 from the straight-interpolation velocity: f = x_t - t v
    f_fake = nn.sub(x_t, nn.mul(t_col, v_fake))
    first = nn.sub(f_teacher, f_fake)
    second = nn.sub(f_fake, x_g)
    w_col = np.asarray(weight_value(config.weight, t), dtype=float)[:, None]
    core = nn.sum_all(nn.mul(nn.mul(first, second), w_col))
    if config.alpha_term:
        norm = nn.sum_all(nn.mul(nn.mul(first, first), w_col))
        core = nn.add(core, nn.mul(config.alpha_sign * config.alpha_scale, norm))
    return nn.mul(config.loss_scale / (n * dim), core), x_t


# ---------------------------------------------------------------------------
# pretraining a student against the analytic teacher


def pretrain_student(
    teacher: MixtureTeacher,
    law: TimestepLaw,
    kind: str = "vfm",
    config: Optional[PretrainConfig] = None,
):
    """Regress a fresh net onto exact targets from the teacher's samples.

    Draws (x0, label) from the teacher, corrupts at law-sampled times under
    the configured schedule family, and minimizes the w(t)-weighted squared
    error against the requested prediction kind.  Conditional students see
    the null class on a `null_class_prob` fraction of rows so guidance has a
    trained unconditional branch.  Returns (spec, params, timeline) where
    timeline holds (iteration, loss) rows every `log_every` steps plus the
    final one.
    """
    if kind not in ("x0", "eps", "v", "vfm"):
        raise ConfigError(f"cannot pretrain on kind {kind!r}")
    cfg = config if config is not None else PretrainConfig()
    if cfg.conditional and teacher.class_count == 0:
        raise ConfigError("conditional pretraining needs a labeled teacher")
    spec = nn.NetSpec(
        input_dim=teacher.dimension,
        hidden=cfg.hidden,
        time_features=cfg.time_features,
        class_count=teacher.class_count if cfg.conditional else 0,
        class_embed_dim=cfg.class_embed_dim,
        output_kind=kind,
    )
    gen = np.random.default_rng(cfg.seed)
    params = nn.init_params(spec, gen)
    opt = nn.adam_init(params.size, lr=cfg.lr, beta1=cfg.beta1)
    sched = make_schedule(cfg.schedule_family)
    n, d = cfg.batch_size, teacher.dimension
    timeline = []

    for it in range(1, cfg.iterations + 1):
        x0, labs = teacher.sample_labeled(n, gen)
        t = law.sample(gen, n)
        alpha, sigma = sched.alpha_sigma(t)
        a_col, s_col = alpha[:, None], sigma[:, None]
        eps = gen.standard_normal((n, d))
        x_t = a_col * x0 + s_col * eps
        target = kind_target(kind, x0, eps, a_col, s_col)
        w_col = np.asarray(law.weight_at(t), dtype=float)[:, None]
        if cfg.conditional:
            drop = gen.random(n) < cfg.null_class_prob
            class_idx = np.where(drop, spec.class_count, labs)
        else:
            class_idx = None

        def closure(pnodes):
            out = nn.tape_forward(spec, pnodes, x_t, t, class_idx)
            diff = nn.sub(out, target)
            return nn.mul(1.0 / (n * d), nn.sum_all(nn.mul(nn.mul(diff, diff), w_col)))

        loss, g = nn.grad(spec, params, closure)
        _guard(loss, "pretrain", it)
        nn.adam_step(opt, params, g)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            timeline.append((it, loss))
    return spec, params, tuple(timeline)


# ---------------------------------------------------------------------------
# training state


@dataclass
class DistillState:
    """Mutable state of one distillation run."""

    config: DistillConfig
    teacher: MixtureTeacher
    gen_spec: nn.NetSpec
    gen_params: np.ndarray
    fake_spec: nn.NetSpec
    fake_params: np.ndarray
    gen_opt: nn.AdamState
    fake_opt: nn.AdamState
    rng: np.random.Generator
    teacher_hash: str
    disc_spec: Optional[nn.NetSpec] = None
    disc_params: Optional[np.ndarray] = None
    disc_opt: Optional[nn.AdamState] = None
    real_data: Optional[np.ndarray] = None
    real_labels: Optional[np.ndarray] = None
    iteration: int = 0
    t_counts: np.ndarray = field(default_factory=lambda: np.zeros(_T_HIST_BINS, dtype=np.int64))


def make_state(
    config: DistillConfig,
    teacher: MixtureTeacher,
    real_data: Optional[np.ndarray] = None,
    real_labels: Optional[np.ndarray] = None,
) -> DistillState:
    """Pretrain the fake net, initialize the generator, build optimizers.

    `real_data` (with optional per-row `real_labels`) feeds the adversarial
    critic's real side; without it the critic falls back to fresh teacher
    samples, keeping the library usable in the fully data-free regime.
    """
    if config.conditional and teacher.class_count == 0:
        raise ConfigError("conditional distillation needs a labeled teacher")
    if real_data is not None:
        real_data = np.asarray(real_data, dtype=float)
        if real_data.ndim != 2 or real_data.shape[1] != teacher.dimension:
            raise ConsistencyError(
                f"real data must be (n, {teacher.dimension}), got {real_data.shape}"
            )
        if real_labels is not None:
            real_labels = np.asarray(real_labels, dtype=int)
            if real_labels.shape != (real_data.shape[0],):
                raise ConsistencyError("real labels must be one per real row")
    pre = PretrainConfig(
        iterations=config.pretrain_iterations,
        batch_size=config.batch_size,
        lr=config.pretrain_lr,
        hidden=config.hidden,
        time_features=config.time_features,
        class_embed_dim=config.class_embed_dim,
        conditional=config.conditional,
        null_class_prob=config.null_class_prob,
        seed=config.seed,
    )
    fake_spec, fake_params, _ = pretrain_student(teacher, config.law, "vfm", pre)
    gen_spec = replace(fake_spec, output_kind="generator")
    if config.generator_init == "pretrained":
        gen_params = fake_params.copy()
    else:
        gen_params = nn.init_params(gen_spec, np.random.default_rng(config.seed + 1))

    state = DistillState(
        config=config,
        teacher=teacher,
        gen_spec=gen_spec,
        gen_params=gen_params,
        fake_spec=fake_spec,
        fake_params=fake_params,
        gen_opt=nn.adam_init(gen_params.size, lr=config.lr),
        fake_opt=nn.adam_init(
            fake_params.size, lr=config.lr if config.fake_lr is None else config.fake_lr
        ),
        rng=np.random.default_rng(config.seed),
        teacher_hash=teacher.fingerprint(),
        real_data=real_data,
        real_labels=real_labels,
    )
    if config.adv_enabled:
        state.disc_spec = nn.NetSpec(
            input_dim=teacher.dimension,
            hidden=config.adv_hidden,
            time_features=config.time_features,
            class_count=teacher.class_count if config.conditional else 0,
            class_embed_dim=config.class_embed_dim,
            output_kind="logit",
            output_dim=1,
        )
        state.disc_params = nn.init_params(state.disc_spec, np.random.default_rng(config.seed + 2))
        state.disc_opt = nn.adam_init(
            state.disc_params.size,
            lr=config.lr if config.adv_lr is None else config.adv_lr,
        )
    return state


def _guard(value: float, phase: str, iteration: int) -> None:
    if not math.isfinite(value) or abs(value) > _LOSS_CEILING:
        raise DivergenceError(f"{phase} loss diverged at iteration {iteration}: {value!r}")


def _record_t(state: DistillState, t: np.ndarray) -> None:
    counts, _ = np.histogram(t, bins=_T_HIST_BINS, range=(0.0, 1.0))
    state.t_counts += counts


def _draw_labels(state: DistillState, n: int):
    if not state.config.conditional:
        return None
    masses = state.teacher.class_masses()
    return state.rng.choice(masses.size, size=n, p=masses)


def _partial_rollout(state: DistillState, n: int, k: int, labels):
    """Detached generator output after k ladder steps (k >= 1)."""
    outs = _rollout(
        state.gen_spec, state.gen_params, n, state.config.steps, labels, state.rng, upto=k
    )
    return outs[-1]


# ---------------------------------------------------------------------------
# training phases


def generator_update(state: DistillState) -> Tuple[float, float]:
    """One generator step at a uniformly drawn ladder position.

    The rollout up to step k-1 is detached (each step trains in its own
    frame); only the k-th evaluation is on the tape.  Returns the
    score-difference loss and the adversarial term's value (0 when disabled).
    """
    cfg = state.config
    n, d = cfg.batch_size, state.gen_spec.input_dim
    labels = _draw_labels(state, n)
    k = int(state.rng.integers(1, cfg.steps + 1))
    x_prev = _partial_rollout(state, n, k - 1, labels) if k > 1 else np.zeros((n, d))
    t_k = step_times(cfg.steps)[k - 1]
    z = state.rng.standard_normal((n, d))
    x_in = (1.0 - t_k) * x_prev + t_k * z

    t = cfg.law.sample(state.rng, n)
    _record_t(state, t)
    eps = state.rng.standard_normal((n, d))

    pnodes = nn.param_nodes(state.gen_spec, state.gen_params)
    fake_pnodes = nn.param_nodes(state.fake_spec, state.fake_params)
    net_out = nn.tape_forward(state.gen_spec, pnodes, x_in, t_k, labels)
    x_g = nn.sub(nn.lift(x_in), nn.mul(t_k, net_out))
    loss, x_t = generator_loss_node(
        cfg, state.teacher, state.fake_spec, fake_pnodes, x_g, t, eps, labels
    )

    score_diff = float(loss.value)
    adv_value = 0.0
    if cfg.adv_enabled:
        disc_pnodes = nn.param_nodes(state.disc_spec, state.disc_params)
        logits = nn.tape_forward(state.disc_spec, disc_pnodes, x_t, t, labels)
        adv = nn.mean_all(nn.softplus(nn.mul(-1.0, logits)))
        adv_value = float(adv.value)
        loss = nn.add(loss, nn.mul(cfg.adv_weight, adv))

    _guard(float(loss.value), "generator", state.iteration)
    names = [name for name, _, _ in nn.layout(state.gen_spec)]
    gs = nn.gradients(loss, [pnodes[name] for name in names])
    nn.adam_step(state.gen_opt, state.gen_params, np.concatenate([g.ravel() for g in gs]))
    return score_diff, adv_value


def fake_update(state: DistillState) -> float:
    """One flow-matching step for the fake net on fresh generator samples.

    The generator rollout is fully detached; the guided (CFG-combined)
    velocity is regressed onto eps - x_g so the same composed field the
    generator sees is what gets fit.
    """
    cfg = state.config
    n, d = cfg.batch_size, state.gen_spec.input_dim
    labels = _draw_labels(state, n)
    k = int(state.rng.integers(1, cfg.steps + 1))
    x_g = _partial_rollout(state, n, k, labels)
    t = cfg.law.sample(state.rng, n)
    _record_t(state, t)
    eps = state.rng.standard_normal((n, d))
    x_t = (1.0 - t[:, None]) * x_g + t[:, None] * eps
    target = eps - x_g

    def closure(pnodes):
        v = fake_velocity_node(state.fake_spec, pnodes, x_t, t, labels, cfg.cfg_scale)
        diff = nn.sub(v, target)
        return nn.mean_all(nn.mul(diff, diff))

    loss, g = nn.grad(state.fake_spec, state.fake_params, closure)
    _guard(loss, "fake", state.iteration)
    nn.adam_step(state.fake_opt, state.fake_params, g)
    return loss


def adversarial_update(
    state: DistillState,
    real_batch: np.ndarray,
    fake_batch: np.ndarray,
    t_real: np.ndarray,
    t_fake: np.ndarray,
    real_labels=None,
    fake_labels=None,
) -> Tuple[float, float]:
    """Non-saturating logistic critic step on corrupted real/fake batches.

    Both batches are freshly corrupted here (noise from the run's stream).
    Returns (critic loss, generator-term value after the step); the
    differentiable generator path lives in `generator_update`.
    """
    if state.disc_spec is None:
        raise ConfigError("adversarial training is not enabled in this run")
    xr, _ = diffuse_output(real_batch, t_real, state.rng)
    xf, _ = diffuse_output(fake_batch, t_fake, state.rng)

    def closure(pnodes):
        lr_ = nn.tape_forward(state.disc_spec, pnodes, xr, t_real, real_labels)
        lf_ = nn.tape_forward(state.disc_spec, pnodes, xf, t_fake, fake_labels)
        return nn.add(
            nn.mean_all(nn.softplus(nn.mul(-1.0, lr_))),
            nn.mean_all(nn.softplus(lf_)),
        )

    loss, g = nn.grad(state.disc_spec, state.disc_params, closure)
    _guard(loss, "critic", state.iteration)
    nn.adam_step(state.disc_opt, state.disc_params, g)
    after = nn.forward(state.disc_spec, state.disc_params, xf, t_fake, fake_labels)
    gen_term = float(np.mean(np.logaddexp(0.0, -after)))
    return loss, gen_term


def _critic_step(state: DistillState) -> float:
    cfg = state.config
    n = cfg.batch_size
    real_labels = None
    if state.real_data is not None:
        rows = state.rng.integers(0, state.real_data.shape[0], size=n)
        real = state.real_data[rows]
        if cfg.conditional:
            if state.real_labels is None:
                raise ConfigError("conditional adversarial training needs labeled real data")
            real_labels = state.real_labels[rows]
    elif cfg.conditional:
        real, real_labels = state.teacher.sample_labeled(n, state.rng)
    else:
        real = state.teacher.sample(n, state.rng)
    fake_labels = _draw_labels(state, n)
    k = int(state.rng.integers(1, cfg.steps + 1))
    fake = _partial_rollout(state, n, k, fake_labels)
    t_real = cfg.law.sample(state.rng, n)
    t_fake = cfg.law.sample(state.rng, n)
    _record_t(state, t_real)
    _record_t(state, t_fake)
    loss, _ = adversarial_update(state, real, fake, t_real, t_fake, real_labels, fake_labels)
    return loss


# ---------------------------------------------------------------------------
# the full run


@dataclass(frozen=True)
class DistillResult:
    """Outputs of `distill_run`: trained nets plus the metric timeline."""

    config: DistillConfig
    gen_spec: nn.NetSpec
    gen_params: np.ndarray
    fake_spec: nn.NetSpec
    fake_params: np.ndarray
    timeline: Tuple[Tuple[float, ...], ...]
    t_hist_counts: np.ndarray
    t_hist_edges: np.ndarray
    iterations_run: int
    stopped_early: bool
    disc_spec: Optional[nn.NetSpec] = None
    disc_params: Optional[np.ndarray] = None

    @property
    def final_energy(self) -> float:
        return self.timeline[-1][4] if self.timeline else math.nan

    def timeline_csv(self) -> str:
        lines = [TIMELINE_HEADER]
        for it, gl, fl, al, e, w in self.timeline:
            lines.append(f"{int(it)},{gl:.9g},{fl:.9g},{al:.9g},{e:.9g},{w:.9g}")
        return "\n".join(lines) + "\n"


def _evaluate(state: DistillState, iteration: int):
    """Energy distance and sliced W2 of fresh generator samples vs teacher.

    Uses rngs keyed off (seed, iteration) so evaluation never perturbs the
    training stream and re-runs reproduce the same rows bit for bit.
    """
    cfg = state.config
    n = cfg.eval_samples
    egen = np.random.default_rng((cfg.seed, iteration, 101))
    labels = None
    if cfg.conditional:
        masses = state.teacher.class_masses()
        labels = egen.choice(masses.size, size=n, p=masses)
    samples, _ = generate(state.gen_spec, state.gen_params, n, egen, cfg.steps, labels)
    ref = state.teacher.sample(n, np.random.default_rng((cfg.seed, iteration, 102)))
    e = energy_distance(samples, ref)
    w2 = sliced_w2(samples, ref, cfg.eval_projections, rng=(cfg.seed, iteration, 103))
    return e, w2


def lr_factor(config: DistillConfig, iteration: int) -> float:
    """Staged decay: multiply by lr_decay_factor past each lr_decay_at point.

    The decay points are fractions of the full iteration budget, so the same
    settings shape short ablation runs and long production runs alike.
    """
    passed = sum(1 for f in config.lr_decay_at if iteration > f * config.iterations)
    return config.lr_decay_factor ** passed


def _apply_lr(state: DistillState, iteration: int) -> None:
    """Decay the generator's learning rate only.

    The fake net and the critic stay on their full rates: they chase a moving
    target, and their tracking error (which biases the generator's gradient)
    shrinks when the generator slows down relative to them.  Decaying them in
    lockstep just freezes whatever mismatch existed at the decay point.
    """
    state.gen_opt.lr = state.config.lr * lr_factor(state.config, iteration)


def distill_run(
    config: DistillConfig,
    teacher: MixtureTeacher,
    real_data: Optional[np.ndarray] = None,
    real_labels: Optional[np.ndarray] = None,
) -> DistillResult:
    """Alternate generator and fake-net updates, logging metrics periodically.

    Each iteration runs one generator step, `update_ratio` fake steps, and
    (when enabled) one critic step.  Metric rows land every `eval_interval`
    iterations and at the end; `stop_below_energy` allows stopping at the
    first row whose energy distance clears the bar.  Raises DivergenceError
    if any phase's loss explodes; raises ConsistencyError if the teacher's
    definition changed mid-run.
    """
    state = make_state(config, teacher, real_data=real_data, real_labels=real_labels)
    rows = []
    stopped = False
    iterations_run = 0
    for i in range(1, config.iterations + 1):
        state.iteration = i
        _apply_lr(state, i)
        gen_loss, adv_term = generator_update(state)
        fake_loss = 0.0
        for _ in range(config.update_ratio):
            fake_loss = fake_update(state)
        if config.adv_enabled:
            _critic_step(state)
        iterations_run = i
        if i % config.eval_interval == 0 or i == config.iterations:
            e, w2 = _evaluate(state, i)
            rows.append((float(i), gen_loss, fake_loss, adv_term, e, w2))
            if config.stop_below_energy is not None and e < config.stop_below_energy:
                stopped = True
                break
    if teacher.fingerprint() != state.teacher_hash:
        raise ConsistencyError("teacher definition changed during the run")
    edges = np.linspace(0.0, 1.0, _T_HIST_BINS + 1)
    return DistillResult(
        config=config,
        gen_spec=state.gen_spec,
        gen_params=state.gen_params,
        fake_spec=state.fake_spec,
        fake_params=state.fake_params,
        timeline=tuple(rows),
        t_hist_counts=state.t_counts.copy(),
        t_hist_edges=edges,
        iterations_run=iterations_run,
        stopped_early=stopped,
        disc_spec=state.disc_spec,
        disc_params=None if state.disc_params is None else state.disc_params.copy(),
    )
