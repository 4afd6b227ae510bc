"""Distillation gradients and the optimization loop.

Four gradient flavors over one mixing backbone:

* ``sds_grad``       -- single sample, residual against the drawn noise
* ``csd_grads``      -- N particles, residuals kernel-mixed across the set
* ``csd_edit_delta`` -- editing residual: dual-guided estimate at the noised
                        target minus image-only estimate at the noised source
                        (same draw), the variance-reduced baseline
* ``csd_edit_grads`` -- kernel mixing with edit deltas (or ablation baselines)

Sign convention: these are *descent* gradients (the loop applies
x <- x - eta * grad). The kernel-gradient term therefore enters as
grad_{x_i} k(x_i, x_j), whose subtraction pushes particles apart; the
ascent-form mixing in :mod:`csd.svgd` uses the opposite slot. With N=1 the
kernel terms drop out exactly and ``csd_grads`` reproduces ``sds_grad``
bit for bit.

One timestep is drawn per step and shared by all particles; the noise is
shared by default with a per-particle option.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .kernel import KernelSpec, kernel_matrices
from .oracle import IMAGE_TEXT, Condition, GuidanceParams
from .parallel import map_indexed
from .schedule import NoiseSchedule, StepDraw, alpha_sigma, noise_sample, sample_timestep
from .svgd import ParticleSet, mix_directions

EpsFn = Callable[[np.ndarray, float, Condition, GuidanceParams], np.ndarray]

RANDOM_NOISE = "random-noise"
SOURCE_CONDITIONAL = "source-conditional"
WEIGHT_POLICIES = ("constant-one", "sigma-squared")
NOISE_SHARING = ("shared", "per-particle")
KERNEL_ON = ("noised", "clean")


@dataclass(frozen=True)
class DdsBaseline:
    """Prompt-to-prompt baseline: subtract the source-text estimate at the
    noised source instead of the image-only estimate."""

    source_text_ref: str
    target_text_ref: str


@dataclass(frozen=True)
class LrDecay:
    """Step decay: multiply the learning rate by ``factor`` every ``every`` steps."""

    every: int = 100
    factor: float = 1.0

    def __post_init__(self):
        if self.every < 1:
            raise ValueError(f"lr_decay.every must be >= 1, got {self.every}")
        if not (0.0 < self.factor <= 1.0):
            raise ValueError(f"lr_decay.factor must lie in (0, 1], got {self.factor}")


@dataclass(frozen=True)
class DistillConfig:
    """Everything one distillation run needs besides the problem itself.

    ``svgd=False`` disables kernel mixing (per-particle updates only), the
    ablation arm of the consistency experiments. The timestep is always
    shared per step; that is not configurable.
    """

    guidance: GuidanceParams = GuidanceParams()
    schedule: NoiseSchedule = NoiseSchedule()
    weight_policy: str = "constant-one"
    noise_sharing: str = "shared"
    baseline: str | DdsBaseline = SOURCE_CONDITIONAL
    kernel: KernelSpec = KernelSpec()
    kernel_on: str = "noised"
    svgd: bool = True
    eta: float = 0.05
    lr_decay: LrDecay = LrDecay()
    steps: int = 100

    def __post_init__(self):
        if self.weight_policy not in WEIGHT_POLICIES:
            raise ValueError(f"weight_policy must be one of {WEIGHT_POLICIES}, got {self.weight_policy!r}")
        if self.noise_sharing not in NOISE_SHARING:
            raise ValueError(f"noise_sharing must be one of {NOISE_SHARING}, got {self.noise_sharing!r}")
        if self.kernel_on not in KERNEL_ON:
            raise ValueError(f"kernel_on must be one of {KERNEL_ON}, got {self.kernel_on!r}")
        if isinstance(self.baseline, str) and self.baseline not in (RANDOM_NOISE, SOURCE_CONDITIONAL):
            raise ValueError(
                f"baseline must be {RANDOM_NOISE!r}, {SOURCE_CONDITIONAL!r} or a DdsBaseline, got {self.baseline!r}"
            )
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class EditProblem:
    """Frozen sources, evolving targets, one condition per particle.

    Targets start as a copy of the sources; ``from_source`` builds that state.
    """

    source: ParticleSet
    target: ParticleSet
    conditions: tuple
    oracle: EpsFn

    def __post_init__(self):
        conds = tuple(self.conditions)
        object.__setattr__(self, "conditions", conds)
        if self.source.particles.shape != self.target.particles.shape:
            raise ValueError(
                f"source shape {self.source.particles.shape} != target shape {self.target.particles.shape}"
            )
        if len(conds) != self.source.n:
            raise ValueError(f"{len(conds)} conditions for {self.source.n} particles")

    @classmethod
    def from_source(cls, source: ParticleSet, conditions, oracle: EpsFn) -> "EditProblem":
        if isinstance(conditions, Condition):
            conditions = (conditions,) * source.n
        return cls(
            source=source,
            target=ParticleSet(source.particles.copy()),
            conditions=tuple(conditions),
            oracle=oracle,
        )


@dataclass(frozen=True)
class StepMetrics:
    step: int
    eta: float
    t: float
    mean_grad_norm: float
    mean_pairwise_distance: float
    min_pairwise_distance: float
    wall_ms: float


@dataclass(frozen=True)
class Trajectory:
    final: ParticleSet
    metrics: list = field(default_factory=list)


def weight_for(config: DistillConfig, t: float) -> float:
    """The per-step loss weight w(t)."""
    if config.weight_policy == "constant-one":
        return 1.0
    _, sigma = alpha_sigma(config.schedule, t)
    return sigma * sigma


def draw_step(rng: np.random.Generator, config: DistillConfig, n: int, dim: int) -> StepDraw:
    """One step's (t, eps): t shared, eps shared or per particle per config."""
    t = sample_timestep(rng, config.schedule)
    if config.noise_sharing == "shared":
        eps = rng.standard_normal(dim)
    else:
        eps = rng.standard_normal((n, dim))
    return StepDraw(t=t, eps=eps)


def sds_grad(
    x: np.ndarray,
    eps_fn: EpsFn,
    cond: Condition,
    g: GuidanceParams,
    draw: StepDraw,
    w: float,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """w * (eps_hat(x_t) - eps), the single-sample distillation gradient.

    The renderer Jacobian is the caller's job; for identity rendering this is
    already the parameter gradient.
    """
    eps = draw.eps
    if eps.ndim != 1:
        raise ValueError("sds_grad expects a single noise vector")
    x_t = noise_sample(schedule, x, draw.t, eps)
    e_hat = np.asarray(eps_fn(x_t, draw.t, cond, g), dtype=float)
    return w * (e_hat - eps)


def _as_conditions(conds, n: int) -> tuple:
    if isinstance(conds, Condition):
        return (conds,) * n
    conds = tuple(conds)
    if len(conds) != n:
        raise ValueError(f"{len(conds)} conditions for {n} particles")
    return conds


def _noised(particles: np.ndarray, draw: StepDraw, schedule: NoiseSchedule) -> np.ndarray:
    alpha, sigma = alpha_sigma(schedule, draw.t)
    if draw.shared:
        return alpha * particles + sigma * draw.eps[None, :]
    return alpha * particles + sigma * draw.eps


def _check_finite(rows: Sequence[np.ndarray], dim: int, what: str) -> np.ndarray:
    out = np.empty((len(rows), dim))
    for i, r in enumerate(rows):
        r = np.asarray(r, dtype=float)
        if r.shape != (dim,):
            raise ValueError(f"{what} for particle {i} has shape {r.shape}, expected ({dim},)")
        if not np.all(np.isfinite(r)):
            raise NumericError(f"non-finite {what} for particle {i}")
        out[i] = r
    return out


def _mixed_gradients(
    payload: np.ndarray,
    particles: np.ndarray,
    x_t: np.ndarray,
    w: float,
    config: DistillConfig,
) -> np.ndarray:
    """Kernel-mix payload vectors into descent gradients (or pass through)."""
    if not config.svgd:
        return w * payload
    pts = x_t if config.kernel_on == "noised" else particles
    K, gradK, _ = kernel_matrices(pts, config.kernel)
    attraction, repulsion = mix_directions(K, gradK, payload)
    # descent form: subtracting -repulsion pushes particles apart
    return w * (attraction - repulsion)


def csd_grads(
    pset: ParticleSet,
    eps_fn: EpsFn,
    conds,
    g: GuidanceParams,
    draw: StepDraw,
    config: DistillConfig,
) -> np.ndarray:
    """Per-particle descent gradients with residuals mixed across the set.

    grad_i = (w/N) sum_j [ k(x_t_j, x_t_i) (eps_hat(x_t_j) - eps_j)
                           + grad_{x_t_i} k(x_t_i, x_t_j) ]
    """
    conds = _as_conditions(conds, pset.n)
    x_t = _noised(pset.particles, draw, config.schedule)
    w = weight_for(config, draw.t)

    def residual(i: int) -> np.ndarray:
        e_hat = np.asarray(eps_fn(x_t[i], draw.t, conds[i], g), dtype=float)
        return e_hat - draw.eps_for(i)

    resid = _check_finite(map_indexed(residual, range(pset.n)), pset.dim, "residual")
    return _mixed_gradients(resid, pset.particles, x_t, w, config)


def csd_edit_delta(
    x: np.ndarray,
    x_src: np.ndarray,
    eps_fn: EpsFn,
    cond: Condition,
    g: GuidanceParams,
    draw: StepDraw,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """The editing residual for one particle:

    eps^{omega_y,omega_s}(x_t; src, text) - eps^{omega_s}(src_t; src)

    with x_t and src_t noised by the *same* (t, eps). Evaluating the baseline
    at the noised source under the same draw is the variance-reduction
    mechanism and is not configurable.
    """
    if cond.kind != IMAGE_TEXT:
        raise ValueError("csd_edit_delta requires an image_text condition")
    eps = draw.eps
    if eps.ndim != 1:
        raise ValueError("csd_edit_delta expects a single noise vector")
    x_t = noise_sample(schedule, x, draw.t, eps)
    src_t = noise_sample(schedule, x_src, draw.t, eps)
    full = np.asarray(eps_fn(x_t, draw.t, cond, g), dtype=float)
    base = np.asarray(eps_fn(src_t, draw.t, cond.drop_text(), g), dtype=float)
    return full - base


def _edit_deltas(problem: EditProblem, g: GuidanceParams, draw: StepDraw, config: DistillConfig) -> np.ndarray:
    x = problem.target.particles
    x_src = problem.source.particles
    schedule = config.schedule
    baseline = config.baseline

    def delta(i: int) -> np.ndarray:
        sub = StepDraw(t=draw.t, eps=draw.eps_for(i))
        cond = problem.conditions[i]
        if baseline == SOURCE_CONDITIONAL:
            return csd_edit_delta(x[i], x_src[i], problem.oracle, cond, g, sub, schedule)
        x_t = noise_sample(schedule, x[i], draw.t, sub.eps)
        if baseline == RANDOM_NOISE:
            e_hat = np.asarray(problem.oracle(x_t, draw.t, cond, g), dtype=float)
            return e_hat - sub.eps
        # DDS: both terms under full guidance, source/target text refs swapped in
        if cond.source_ref is None:
            raise ValueError(f"dds baseline needs a source_ref on condition {i}")
        tgt_cond = Condition.image_text(cond.source_ref, baseline.target_text_ref)
        src_cond = Condition.image_text(cond.source_ref, baseline.source_text_ref)
        src_t = noise_sample(schedule, x_src[i], draw.t, sub.eps)
        e_tgt = np.asarray(problem.oracle(x_t, draw.t, tgt_cond, g), dtype=float)
        e_src = np.asarray(problem.oracle(src_t, draw.t, src_cond, g), dtype=float)
        return e_tgt - e_src

    rows = map_indexed(delta, range(problem.target.n))
    return _check_finite(rows, problem.target.dim, "edit delta")


def csd_edit_grads(
    problem: EditProblem,
    g: GuidanceParams,
    draw: StepDraw,
    config: DistillConfig,
) -> np.ndarray:
    """Editing gradients: the residual mixing of ``csd_grads`` with the
    per-particle payload chosen by ``config.baseline``."""
    deltas = _edit_deltas(problem, g, draw, config)
    x_t = _noised(problem.target.particles, draw, config.schedule)
    w = weight_for(config, draw.t)
    return _mixed_gradients(deltas, problem.target.particles, x_t, w, config)


def _pairwise_stats(particles: np.ndarray) -> tuple[float, float]:
    n = len(particles)
    if n < 2:
        return 0.0, 0.0
    diff = particles[:, None, :] - particles[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    iu = np.triu_indices(n, k=1)
    d = np.sqrt(np.maximum(sq[iu], 0.0))
    return float(d.mean()), float(d.min())


def _run_loop(
    grad_fn: Callable[[ParticleSet, StepDraw], np.ndarray],
    start: ParticleSet,
    config: DistillConfig,
    rng: np.random.Generator,
) -> Trajectory:
    x = start.particles.copy()
    metrics: list[StepMetrics] = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        draw = draw_step(rng, config, n=len(x), dim=x.shape[1])
        try:
            grads = grad_fn(ParticleSet(x), draw)
        except NumericError as e:
            if e.step is None:
                raise NumericError(str(e), step=step) from None
            raise
        eta_step = config.eta * config.lr_decay.factor ** (step // config.lr_decay.every)
        x = x - eta_step * grads
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite particle values after update", step=step)
        mean_d, min_d = _pairwise_stats(x)
        metrics.append(
            StepMetrics(
                step=step,
                eta=eta_step,
                t=draw.t,
                mean_grad_norm=float(np.mean(np.sqrt(np.einsum("id,id->i", grads, grads)))),
                mean_pairwise_distance=mean_d,
                min_pairwise_distance=min_d,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    return Trajectory(final=ParticleSet(x), metrics=metrics)


def optimize(problem: EditProblem, config: DistillConfig, rng: np.random.Generator) -> Trajectory:
    """Run the editing loop for ``config.steps`` steps; deterministic per seed."""

    def grad_fn(current: ParticleSet, draw: StepDraw) -> np.ndarray:
        return csd_edit_grads(replace(problem, target=current), config.guidance, draw, config)

    return _run_loop(grad_fn, problem.target, config, rng)


def optimize_particles(
    pset: ParticleSet,
    eps_fn: EpsFn,
    conds,
    config: DistillConfig,
    rng: np.random.Generator,
) -> Trajectory:
    """Generation mode: the same loop driven by ``csd_grads``."""
    conds = _as_conditions(conds, pset.n)

    def grad_fn(current: ParticleSet, draw: StepDraw) -> np.ndarray:
        return csd_grads(current, eps_fn, conds, config.guidance, draw, config)

    return _run_loop(grad_fn, pset, config, rng)
