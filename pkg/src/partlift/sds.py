"""Score distillation steps over a renderable asset field.

Each step renders the asset, perturbs the render with scheduled noise,
asks a frozen guidance model for the noise it believes was added, and
backpropagates the weighted residual through the renderer only. The
guidance output is treated as a constant: the surrogate loss is
sum(residual * x) with the residual detached, whose gradient with respect
to the field parameters is exactly residual * dx/dtheta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .cameras import CameraPose, rays_for
from .extraction import PartSpec
from .field import (
    FieldParams,
    RenderConfig,
    field_callable,
    init_field,
    render_rays,
    render_view,
)
from .guidance import CapabilityError, GuidanceModel, ModulationInputs
from .modulation import ModulationConfig, resample_affinity
from .schedule import NoiseSchedule, add_noise, sample_timestep

log = logging.getLogger(__name__)

ASSET_CHANNELS = ("r", "g", "b")


class SDSError(ValueError):
    """Invalid distillation configuration or inputs."""


def init_asset_field(hidden: int = 64, octaves: int = 6, seed: int = 0) -> FieldParams:
    """Fresh asset field: one density head plus RGB emission heads."""
    return init_field(ASSET_CHANNELS, hidden=hidden, octaves=octaves, seed=seed)


@dataclass(frozen=True)
class SDSConfig:
    render: RenderConfig = field(default_factory=RenderConfig)
    learning_rate: float = 1e-2
    timestep_fraction: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise SDSError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.timestep_fraction <= 1.0:
            raise SDSError(
                f"timestep_fraction must lie in (0, 1], got {self.timestep_fraction}"
            )


@dataclass(frozen=True)
class StepResult:
    params: FieldParams
    t: int
    residual_norm: float
    surrogate: float
    aborted: bool = False


def sds_step(
    params: FieldParams,
    pose: CameraPose,
    guidance: GuidanceModel,
    schedule: NoiseSchedule,
    config: SDSConfig,
    adam: ad.AdamState,
    rng_t: np.random.Generator,
    rng_eps: np.random.Generator,
    modulation: Optional[ModulationInputs] = None,
) -> StepResult:
    """One distillation update from a single pose.

    A non-finite residual aborts the step: parameters and optimizer state
    are left untouched and the event is logged.
    """
    bundle = rays_for(pose, config.render.resolution)
    near = config.render.near if config.render.near is not None else bundle.near
    far = config.render.far if config.render.far is not None else bundle.far
    origins, dirs = bundle.flat()
    with ad.Tape() as tape:
        x = render_rays(field_callable(params), origins, dirs, near, far, config.render)
        t = sample_timestep(rng_t, schedule, config.timestep_fraction)
        eps = rng_eps.standard_normal(x.data.shape)
        x_t = add_noise(x.data, t, eps, schedule)
        eps_hat = guidance.predict_noise(x_t, t, schedule, pose=pose, modulation=modulation)
        residual = schedule.weight(t) * (eps_hat - eps)
        if not np.isfinite(residual).all():
            log.warning("non-finite residual at t=%d from pose %d; step aborted", t, pose.id)
            return StepResult(params, t, float("nan"), float("nan"), aborted=True)
        surrogate = ad.tsum(x * ad.asconst(residual))
    tensors = params.tensors()
    grads = ad.backward(tape, surrogate, params=tensors)
    updated = ad.adam_step(tensors, [grads[p] for p in tensors], adam)
    return StepResult(
        params=params.with_tensors(updated),
        t=t,
        residual_norm=float(np.sqrt((residual**2).sum())),
        surrogate=float(surrogate.item()),
    )


def render_asset(params: FieldParams, pose: CameraPose, config: RenderConfig) -> np.ndarray:
    """Plain-numpy RGB grid (res, res, 3) of the asset from one pose."""
    return render_view(params, pose, config).grids


@dataclass(frozen=True)
class OptimizeResult:
    params: FieldParams
    views: dict
    residual_trace: np.ndarray
    timesteps: np.ndarray


def partial_optimize(
    params: FieldParams,
    guidance: GuidanceModel,
    schedule: NoiseSchedule,
    train_poses: Sequence[CameraPose],
    extraction_poses: Sequence[CameraPose],
    config: SDSConfig,
    steps: int,
    rng_t: np.random.Generator,
    rng_eps: np.random.Generator,
    rng_pose: np.random.Generator,
) -> OptimizeResult:
    """Run a budget of SDS steps, then render the extraction view set."""
    if steps < 1:
        raise SDSError(f"steps must be >= 1, got {steps}")
    if not train_poses:
        raise SDSError("need at least one training pose")
    adam = ad.AdamState(lr=config.learning_rate)
    trace = np.empty(steps)
    ts = np.empty(steps, dtype=np.int64)
    for k in range(steps):
        pose = train_poses[int(rng_pose.integers(len(train_poses)))]
        result = sds_step(params, pose, guidance, schedule, config, adam, rng_t, rng_eps)
        if not result.aborted:
            params = result.params
        trace[k] = result.residual_norm
        ts[k] = result.t
    views = {p.id: render_asset(params, p, config.render) for p in extraction_poses}
    return OptimizeResult(params=params, views=views, residual_trace=trace, timesteps=ts)


def affinity_modulation_inputs(
    affinity_params: FieldParams,
    pose: CameraPose,
    parts: Sequence[PartSpec],
    target_hw: int,
    modulation_config: ModulationConfig,
    affinity_render: RenderConfig,
) -> ModulationInputs:
    """Render part affinities from a pose and resample them to hw vectors."""
    view = render_view(affinity_params, pose, affinity_render)
    pairs = []
    for spec in sorted(parts, key=lambda s: s.label):
        grid = view.grid(spec.label)
        pairs.append((spec, resample_affinity(grid, target_hw, modulation_config)))
    return ModulationInputs(parts=tuple(pairs), config=modulation_config)


def modulated_sds_step(
    params: FieldParams,
    affinity_params: FieldParams,
    guidance: GuidanceModel,
    modulation_config: ModulationConfig,
    pose: CameraPose,
    schedule: NoiseSchedule,
    config: SDSConfig,
    affinity_render: RenderConfig,
    parts: Sequence[PartSpec],
    adam: ad.AdamState,
    rng_t: np.random.Generator,
    rng_eps: np.random.Generator,
) -> StepResult:
    """SDS step whose guidance attention is steered by rendered affinities.

    The same pose object drives both the asset render inside sds_step and
    the affinity render here, so the two views can never drift apart.
    """
    if not guidance.exposes_attention:
        raise CapabilityError(
            "guidance model does not expose attention scores; cannot modulate"
        )
    hw = config.render.resolution * config.render.resolution
    modulation = affinity_modulation_inputs(
        affinity_params, pose, parts, hw, modulation_config, affinity_render
    )
    return sds_step(
        params, pose, guidance, schedule, config, adam, rng_t, rng_eps, modulation=modulation
    )
