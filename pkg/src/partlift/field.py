"""MLP radiance fields over positionally encoded points, with volume rendering.

One substrate serves two uses: an affinity field (1 density + one emission
channel per part) and an RGB asset field (1 density + 3 color channels).
The density head is shared across channels: one physical surface carries
every emission. Rendering composites stratified samples with the usual
transmittance recursion, expressed through exp/cumsum so the whole render
stays differentiable on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .cameras import CameraPose, rays_for
from .extraction import PartAffinityMap

DEFAULT_OCTAVES = 6
DEFAULT_HIDDEN = 64


@dataclass(frozen=True)
class RenderConfig:
    """Volume rendering knobs. near/far of None defer to the pose bundle."""

    samples_per_ray: int = 128
    resolution: int = 64
    near: Optional[float] = None
    far: Optional[float] = None
    density_floor: float = 0.0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError(f"samples_per_ray must be >= 2, got {self.samples_per_ray}")
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")


@dataclass
class FieldParams:
    """One-hidden-layer MLP: encoded point -> density logit + emission logits."""

    octaves: int
    hidden: int
    emission_labels: tuple[str, ...]
    w1: Tensor
    b1: Tensor
    w_density: Tensor
    b_density: Tensor
    w_emit: Tensor
    b_emit: Tensor

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.octaves

    @property
    def n_channels(self) -> int:
        return len(self.emission_labels)

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w_density, self.b_density, self.w_emit, self.b_emit]

    def tensor_names(self) -> list[str]:
        return ["w1", "b1", "w_density", "b_density", "w_emit", "b_emit"]

    def with_tensors(self, tensors: Sequence[Tensor]) -> "FieldParams":
        w1, b1, wd, bd, we, be = tensors
        return FieldParams(self.octaves, self.hidden, self.emission_labels, w1, b1, wd, bd, we, be)


def init_field(
    emission_labels: Sequence[str],
    hidden: int = DEFAULT_HIDDEN,
    octaves: int = DEFAULT_OCTAVES,
    seed: int = 0,
    zero_heads: bool = False,
) -> FieldParams:
    """He-style random init; ``zero_heads`` zeroes the output layers so a
    fresh field evaluates to density softplus(0) and emissions 0.5."""
    labels = tuple(emission_labels)
    if not labels:
        raise ValueError("need at least one emission channel")
    if hidden < 1 or octaves < 0:
        raise ValueError(f"bad architecture: hidden={hidden}, octaves={octaves}")
    rng = np.random.default_rng(seed)
    in_dim = 3 + 6 * octaves
    scale1 = np.sqrt(2.0 / in_dim)
    scale2 = np.sqrt(1.0 / hidden)

    def head(shape, scale):
        if zero_heads:
            return Tensor(np.zeros(shape), requires_grad=True)
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

    return FieldParams(
        octaves=octaves,
        hidden=hidden,
        emission_labels=labels,
        w1=Tensor(rng.normal(0.0, scale1, (in_dim, hidden)), requires_grad=True),
        b1=Tensor(np.zeros((1, hidden)), requires_grad=True),
        w_density=head((hidden, 1), scale2),
        b_density=Tensor(np.zeros((1, 1)), requires_grad=True),
        w_emit=head((hidden, len(labels)), scale2),
        b_emit=Tensor(np.zeros((1, len(labels))), requires_grad=True),
    )


def init_affinity_field(part_labels: Sequence[str], hidden: int = DEFAULT_HIDDEN,
                        octaves: int = DEFAULT_OCTAVES, seed: int = 0) -> FieldParams:
    return init_field(part_labels, hidden=hidden, octaves=octaves, seed=seed)


def positional_encode(points: np.ndarray, octaves: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x) for k < octaves], per coordinate."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("points must be finite")
    out = np.empty((pts.shape[0], 3 + 6 * octaves))
    out[:, :3] = pts
    if octaves == 0:
        return out
    # Angle doubling: sin/cos of pi*x once, then sin(2a) = 2 sin a cos a,
    # cos(2a) = cos^2 a - sin^2 a per octave. One transcendental pass total.
    s = np.sin(np.pi * pts)
    c = np.cos(np.pi * pts)
    col = 3
    for k in range(octaves):
        out[:, col : col + 3] = s
        out[:, col + 3 : col + 6] = c
        col += 6
        if k + 1 < octaves:
            s, c = 2.0 * s * c, c * c - s * s
    return out


def field_eval(params: FieldParams, points: np.ndarray) -> tuple[Tensor, Tensor]:
    """Evaluate the MLP at (N, 3) points.

    Returns (density (N, 1), emissions (N, channels)); density is
    softplus-activated, emissions sigmoid-activated, both on the tape.
    """
    enc = ad.asconst(positional_encode(points, params.octaves))
    h = ad.relu(ad.matmul(enc, params.w1) + params.b1)
    density = ad.softplus(ad.matmul(h, params.w_density) + params.b_density)
    emissions = ad.sigmoid(ad.matmul(h, params.w_emit) + params.b_emit)
    return density, emissions


def _sample_depths(
    n_rays: int, near: float, far: float, samples: int, jitter_rng: Optional[np.random.Generator]
) -> tuple[np.ndarray, float]:
    """Depths (n_rays, samples): one per uniform bin, jittered or midpoint."""
    delta = (far - near) / samples
    base = near + delta * np.arange(samples)
    if jitter_rng is None:
        ts = np.broadcast_to(base + 0.5 * delta, (n_rays, samples)).copy()
    else:
        ts = base[None, :] + delta * jitter_rng.random((n_rays, samples))
    return ts, delta


def composite(sigma_delta: Tensor, emissions: Tensor) -> Tensor:
    """Composite (N, S) per-sample optical depths with (N, S, C) emissions.

    alpha_i = 1 - exp(-sigma_i * delta_i); T_i = prod_{j<i} (1 - alpha_j).
    Since 1 - alpha_j is exactly exp(-sd_j), the product is the exp of an
    exclusive cumulative sum, which keeps the backward pass free of
    cumulative products. Returns (N, C) = sum_i T_i alpha_i a_i.
    """
    n_rays, s = sigma_delta.shape
    csum = ad.cumsum(sigma_delta, axis=1)
    # weight_i = T_i * alpha_i = exp(sd_i - csum_i) - exp(-csum_i)
    weights = ad.exp(sigma_delta - csum) - ad.exp(ad.neg(csum))
    chans = emissions.shape[2]
    weighted = ad.reshape(weights, (n_rays, s, 1)) * emissions
    return ad.tsum(weighted, axis=1)


def render_rays(
    field_fn,
    origins: np.ndarray,
    directions: np.ndarray,
    near: float,
    far: float,
    config: RenderConfig,
    jitter_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Render rays against a field callback, returning (n_rays, channels).

    ``field_fn(points (M, 3)) -> (density (M, 1), emissions (M, C))`` as
    tape tensors; use ``field_callable(params)`` for MLP fields or wrap an
    analytic scene for oracle comparisons.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n_rays = origins.shape[0]
    s = config.samples_per_ray
    ts, delta = _sample_depths(n_rays, near, far, s, jitter_rng)
    pts = origins[:, None, :] + ts[:, :, None] * directions[:, None, :]
    density, emissions = field_fn(pts.reshape(-1, 3))
    if config.density_floor:
        density = density + Tensor(np.full((1, 1), config.density_floor))
    sd = ad.reshape(density, (n_rays, s)) * Tensor(np.full((1, 1), delta))
    chans = emissions.shape[1]
    return composite(sd, ad.reshape(emissions, (n_rays, s, chans)))


def field_callable(params: FieldParams):
    """Adapter: FieldParams -> the callback shape render_rays expects."""
    return lambda pts: field_eval(params, pts)


@dataclass(frozen=True)
class RenderedAffinity:
    """Per-channel grids rendered from one pose, clipped into [0, 1]."""

    pose: CameraPose
    labels: tuple[str, ...]
    grids: np.ndarray  # (res, res, channels)

    def grid(self, label: str) -> np.ndarray:
        return self.grids[:, :, self.labels.index(label)]


def render_view(
    params: FieldParams,
    pose: CameraPose,
    config: RenderConfig,
    jitter_rng: Optional[np.random.Generator] = None,
) -> RenderedAffinity:
    """Render a full image grid outside any tape (plain numpy result)."""
    bundle = rays_for(pose, config.resolution)
    near = config.near if config.near is not None else bundle.near
    far = config.far if config.far is not None else bundle.far
    origins, dirs = bundle.flat()
    vals = render_rays(field_callable(params), origins, dirs, near, far, config, jitter_rng).data
    grids = np.clip(vals.reshape(config.resolution, config.resolution, params.n_channels), 0.0, 1.0)
    return RenderedAffinity(pose=pose, labels=params.emission_labels, grids=grids)


# ---------------------------------------------------------------------------
# Fitting to affinity maps


@dataclass(frozen=True)
class AffinityTrainConfig:
    steps: int = 2000
    learning_rate: float = 5e-3
    rays_per_batch: int = 512
    seed: int = 0
    heldout_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.rays_per_batch < 1:
            raise ValueError(f"rays_per_batch must be >= 1, got {self.rays_per_batch}")


@dataclass
class FitResult:
    params: FieldParams
    final_loss: float
    loss_trace: list[float] = dc_field(default_factory=list)


class FitError(ValueError):
    """Inconsistent fitting inputs: poses, resolutions, or part sets."""


def _group_maps(
    maps: Sequence[PartAffinityMap], poses: Sequence[CameraPose]
) -> tuple[tuple[str, ...], dict[int, dict[str, PartAffinityMap]], dict[int, CameraPose]]:
    pose_by_id = {p.id: p for p in poses}
    by_cam: dict[int, dict[str, PartAffinityMap]] = {}
    for m in maps:
        if m.camera_id not in pose_by_id:
            raise FitError(f"map for part {m.part_label!r} references unknown camera {m.camera_id}")
        by_cam.setdefault(m.camera_id, {})
        if m.part_label in by_cam[m.camera_id]:
            raise FitError(f"duplicate map for part {m.part_label!r}, camera {m.camera_id}")
        by_cam[m.camera_id][m.part_label] = m
    if not by_cam:
        raise FitError("no affinity maps supplied")
    label_sets = {tuple(sorted(d)) for d in by_cam.values()}
    if len(label_sets) != 1:
        raise FitError(f"inconsistent part sets across cameras: {sorted(label_sets)}")
    labels = label_sets.pop()
    shapes = {m.shape for d in by_cam.values() for m in d.values()}
    if len(shapes) != 1:
        raise FitError(f"inconsistent map resolutions: {sorted(shapes)}")
    res_h, res_w = shapes.pop()
    if res_h != res_w:
        raise FitError(f"maps must be square, got {res_h}x{res_w}")
    return labels, by_cam, pose_by_id


def fit(
    maps: Sequence[PartAffinityMap],
    poses: Sequence[CameraPose],
    train_config: AffinityTrainConfig,
    render_config: Optional[RenderConfig] = None,
    init_params: Optional[FieldParams] = None,
    hidden: int = DEFAULT_HIDDEN,
    octaves: int = DEFAULT_OCTAVES,
) -> FitResult:
    """Fit the field to affinity maps by random-ray MSE descent.

    Each step draws ``rays_per_batch`` rays uniformly from the pooled
    training pixels (held-out cameras excluded), renders them with jittered
    stratified samples, and Adam-steps the parameters. The loss is the mean
    over batch pixels and channels, a constant rescale of the summed
    per-view objective.
    """
    labels, by_cam, pose_by_id = _group_maps(maps, poses)
    train_cams = [c for c in sorted(by_cam) if c not in set(train_config.heldout_ids)]
    if not train_cams:
        raise FitError("all supplied cameras are held out")
    resolution = by_cam[train_cams[0]][labels[0]].shape[0]
    cfg = render_config if render_config is not None else RenderConfig(resolution=resolution)
    if cfg.resolution != resolution:
        raise FitError(f"render resolution {cfg.resolution} != map resolution {resolution}")

    if init_params is not None:
        if tuple(init_params.emission_labels) != labels:
            raise FitError(
                f"init field channels {init_params.emission_labels} != map parts {labels}"
            )
        params = init_params
    else:
        params = init_field(labels, hidden=hidden, octaves=octaves, seed=train_config.seed)

    # Pool every training ray with its per-pixel target vector.
    origins_list, dirs_list, targets_list, near_list, far_list = [], [], [], [], []
    for cam in train_cams:
        bundle = rays_for(pose_by_id[cam], resolution)
        o, d = bundle.flat()
        origins_list.append(o)
        dirs_list.append(d)
        near_list.append(np.full(o.shape[0], cfg.near if cfg.near is not None else bundle.near))
        far_list.append(np.full(o.shape[0], cfg.far if cfg.far is not None else bundle.far))
        targets_list.append(
            np.stack([by_cam[cam][lab].values.reshape(-1) for lab in labels], axis=1)
        )
    all_origins = np.concatenate(origins_list)
    all_dirs = np.concatenate(dirs_list)
    all_targets = np.concatenate(targets_list)
    all_near = np.concatenate(near_list)
    all_far = np.concatenate(far_list)

    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 0x41F17]))
    state = AdamState(lr=train_config.learning_rate)
    tensors = params.tensors()
    trace: list[float] = []
    for _ in range(train_config.steps):
        idx = rng.integers(0, all_origins.shape[0], size=train_config.rays_per_batch)
        near = float(all_near[idx].min())
        far = float(all_far[idx].max())
        current = params.with_tensors(tensors)
        with Tape() as tape:
            pred = render_rays(
                field_callable(current), all_origins[idx], all_dirs[idx], near, far, cfg,
                jitter_rng=rng,
            )
            loss = ad.mse(pred, Tensor(all_targets[idx]))
        grads = backward(tape, loss, params=tensors)
        tensors = adam_step(tensors, [grads[t] for t in tensors], state)
        trace.append(loss.item())
    final = params.with_tensors(tensors)
    return FitResult(params=final, final_loss=trace[-1], loss_trace=trace)


@dataclass
class HeldoutReport:
    mse: float
    per_view: dict[int, float]


def evaluate_heldout(
    params: FieldParams,
    maps: Sequence[PartAffinityMap],
    poses: Sequence[CameraPose],
    render_config: Optional[RenderConfig] = None,
) -> HeldoutReport:
    """Mean squared error of deterministic renders against held-out maps."""
    labels, by_cam, pose_by_id = _group_maps(maps, poses)
    if tuple(params.emission_labels) != labels:
        raise FitError(f"field channels {params.emission_labels} != map parts {labels}")
    resolution = next(iter(by_cam.values()))[labels[0]].shape[0]
    cfg = render_config if render_config is not None else RenderConfig(resolution=resolution)
    per_view: dict[int, float] = {}
    for cam in sorted(by_cam):
        rendered = render_view(params, pose_by_id[cam], cfg)
        target = np.stack([by_cam[cam][lab].values for lab in labels], axis=2)
        per_view[cam] = float(np.mean((rendered.grids - target) ** 2))
    return HeldoutReport(mse=float(np.mean(list(per_view.values()))), per_view=per_view)


# ---------------------------------------------------------------------------
# Checkpoint adapters (formats live in artifacts.py)


def field_checkpoint_payload(params: FieldParams, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {
        "kind": kind,
        "octaves": params.octaves,
        "hidden": params.hidden,
        "labels": list(params.emission_labels),
    }
    arrays = {name: t.data for name, t in zip(params.tensor_names(), params.tensors())}
    return meta, arrays


def field_from_checkpoint(meta: dict, arrays: dict[str, np.ndarray]) -> FieldParams:
    labels = tuple(meta["labels"])
    tensors = [Tensor(arrays[name], requires_grad=True) for name in
               ["w1", "b1", "w_density", "b_density", "w_emit", "b_emit"]]
    params = FieldParams(int(meta["octaves"]), int(meta["hidden"]), labels, *tensors)
    if params.w1.shape != (params.input_dim, params.hidden):
        raise ValueError(
            f"checkpoint weight shape {params.w1.shape} does not match architecture "
            f"(octaves={params.octaves}, hidden={params.hidden})"
        )
    return params
