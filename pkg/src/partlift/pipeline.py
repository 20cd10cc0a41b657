"""Four-stage part-aware distillation pipeline on the synthetic scene.

Stage 1 partially optimizes an asset field against oracle guidance whose
targets are colorless renders, so geometry forms without part colors.
Stage 2 produces per-view attention containers (synthetic painter or user
files), aggregates them into part affinity maps, and writes both. Stage 3
fits the affinity field to those maps. Stage 4 runs modulated distillation
with the toy attention guidance, whose token colors are the only source
of part-specific appearance; rendered affinities steer that attention.
"""

from __future__ import annotations

import dataclasses
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import artifacts
from . import autodiff as ad
from .cameras import CameraPose, sample_sphere_poses
from .extraction import (
    AttentionRecord,
    ExtractionWindow,
    PartAffinityMap,
    PromptSpec,
    aggregate,
    normalize,
    resolve_part_indices,
    whitespace_tokenize,
)
from .field import (
    AffinityTrainConfig,
    FieldParams,
    RenderConfig,
    field_checkpoint_payload,
    fit,
    render_view,
)
from .guidance import ModulationInputs, SyntheticOracleGuidance, ToyAttentionGuidance
from .modulation import ModulationConfig
from .schedule import linear_beta_schedule
from .sds import (
    SDSConfig,
    affinity_modulation_inputs,
    init_asset_field,
    partial_optimize,
    render_asset,
    sds_step,
)
from .synthetic import SyntheticScene, part_masks, render_scene

STAGES = ("partial", "extraction", "affinity_fit", "modulated")

# Quadrature sample count for ground-truth scene renders (targets, masks).
ORACLE_SAMPLES = 256

# Pose id bases keep the three pose sets disjoint in artifact keyspaces.
_EXTRACTION_ID_BASE = 0
_TRAIN_ID_BASE = 1000
_EVAL_ID_BASE = 2000


class StageFailure(RuntimeError):
    """A pipeline stage failed; carries the stage tag and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage_guard(stage: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(stage, exc) from exc


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs; JSON-friendly and echoed in metrics."""

    partial_steps: int = 1000
    affinity_steps: int = 2000
    modulated_steps: int = 4000
    extraction_views: int = 76
    window_t_start: int = 450
    window_t_end: int = 100
    window_layers: tuple = (11,)
    attention_source: str = "synthetic"
    attention_dir: Optional[str] = None
    attention_resolution: int = 24
    attention_timesteps: int = 8
    attention_blur_sigma: float = 2.0
    asset_resolution: int = 24
    asset_samples: int = 32
    affinity_samples: int = 32
    train_pose_count: int = 24
    eval_pose_count: int = 8
    field_hidden: int = 32
    field_octaves: int = 4
    sds_learning_rate: float = 0.01
    modulated_learning_rate: float = 0.005
    affinity_learning_rate: float = 0.005
    affinity_rays_per_batch: int = 256
    alpha_cross: float = 0.8
    alpha_self: float = 0.9
    eps_floor: float = 1e-4
    weight_mode: str = "constant"
    timestep_fraction: float = 1.0
    prompt: str = "a blob with an upper lobe and a lower lobe"
    part_phrases: tuple = ("upper lobe", "lower lobe")
    seed: int = 0

    def __post_init__(self):
        for name in ("partial_steps", "affinity_steps", "modulated_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("extraction_views", "train_pose_count", "eval_pose_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.attention_source not in ("synthetic", "files"):
            raise ValueError(
                f"attention_source must be 'synthetic' or 'files', got {self.attention_source!r}"
            )
        if self.attention_source == "files" and not self.attention_dir:
            raise ValueError("attention_source 'files' requires attention_dir")
        if self.attention_timesteps < 1:
            raise ValueError("attention_timesteps must be >= 1")
        if not self.part_phrases:
            raise ValueError("need at least one part phrase")
        if len(set(self.part_phrases)) != len(self.part_phrases):
            raise ValueError("part phrases must be unique")
        object.__setattr__(self, "window_layers", tuple(int(l) for l in self.window_layers))
        object.__setattr__(self, "part_phrases", tuple(str(p) for p in self.part_phrases))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["window_layers"] = list(self.window_layers)
        out["part_phrases"] = list(self.part_phrases)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def window(self) -> ExtractionWindow:
        return ExtractionWindow(
            t_start=self.window_t_start, t_end=self.window_t_end, layers=self.window_layers
        )

    def modulation(self) -> ModulationConfig:
        return ModulationConfig(
            alpha_cross=self.alpha_cross, alpha_self=self.alpha_self, eps_floor=self.eps_floor
        )


@dataclass
class PipelineResult:
    asset_params: FieldParams
    affinity_params: FieldParams
    metrics: dict
    out_dir: Path


def _reid(poses: Sequence[CameraPose], base: int) -> list[CameraPose]:
    return [dataclasses.replace(p, id=base + i) for i, p in enumerate(poses)]


def _derive_streams(seed: int) -> dict:
    """Named RNG streams split from one seed; order here is load-bearing."""
    names = (
        "asset_init",
        "affinity_fit",
        "guidance_init",
        "stage1_t",
        "stage1_eps",
        "stage1_pose",
        "stage4_t",
        "stage4_eps",
        "stage4_pose",
        "pose_extraction",
        "pose_train",
        "pose_eval",
    )
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children))


def _int_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def build_prompt(config: PipelineConfig) -> PromptSpec:
    tokens = tuple(whitespace_tokenize(config.prompt))
    parts = tuple(resolve_part_indices(tokens, phrase) for phrase in config.part_phrases)
    return PromptSpec(tokens=tokens, parts=parts)


def _scene_part_color(scene: SyntheticScene, label: str) -> np.ndarray:
    idx = scene.part_labels.index(label)
    return np.asarray(scene.part_colors[idx], dtype=np.float64)


def build_toy_guidance(
    prompt: PromptSpec,
    scene: SyntheticScene,
    resolution: int,
    seed: int,
    bias_strong: float = 1.6,
    bias_weak: float = 0.8,
) -> ToyAttentionGuidance:
    """Toy guidance whose part tokens carry the scene's part colors.

    Part tokens get descending logit biases in part order, so without
    modulation the first part's color dominates everywhere; modulation is
    what confines each color to its own region.
    """
    n = len(prompt.tokens)
    colors = np.full((n, 3), 0.5)
    bias = np.zeros(n)
    biases = np.linspace(bias_strong, bias_weak, num=len(prompt.parts))
    for k, part in enumerate(prompt.parts):
        color = _scene_part_color(scene, part.label)
        for i in part.indices:
            colors[i] = color
            bias[i] = biases[k]
    return ToyAttentionGuidance(prompt, colors, resolution, seed=seed, token_bias=bias)


def ground_truth_masks(
    scene: SyntheticScene, pose: CameraPose, resolution: int, samples: int = ORACLE_SAMPLES
) -> np.ndarray:
    """Boolean (res, res, parts) masks from quadrature affinity renders."""
    grids = render_scene(scene, pose, resolution, "affinity", samples=samples)
    return part_masks(grids)


def synthetic_attention_records(
    scene: SyntheticScene,
    pose: CameraPose,
    prompt: PromptSpec,
    window: ExtractionWindow,
    resolution: int,
    timesteps: int,
    blur_sigma: float = 2.0,
    background: float = 0.05,
) -> list[AttentionRecord]:
    """Paint per-token attention from blurred ground-truth part masks.

    Part tokens receive their part's blurred mask; every other token gets
    a flat background level. One record per (timestep, layer) pair within
    the window.
    """
    masks = ground_truth_masks(scene, pose, resolution)
    n = len(prompt.tokens)
    values = np.full((resolution, resolution, n), background)
    for part in prompt.parts:
        channel = scene.part_labels.index(part.label)
        blurred = ndimage.gaussian_filter(masks[:, :, channel].astype(np.float64), blur_sigma)
        for i in part.indices:
            values[:, :, i] = blurred
    ts = np.unique(np.round(np.linspace(window.t_end, window.t_start, timesteps)).astype(int))
    return [
        AttentionRecord(t=int(t), l=int(layer), camera_id=pose.id, values=values)
        for t in ts
        for layer in window.layers
    ]


def _write_field_checkpoint(path: Path, params: FieldParams, kind: str) -> None:
    meta, arrays = field_checkpoint_payload(params, kind)
    artifacts.write_checkpoint(path, meta, arrays)


def _heatmap_bytes(grid: np.ndarray) -> np.ndarray:
    """Affinity grid in [0,1] to the documented byte mapping round(255 v)."""
    return np.round(255.0 * np.clip(grid, 0.0, 1.0)).astype(np.uint8)


def _label_slug(label: str) -> str:
    return label.replace(" ", "_")


def _photometric(by_pose_render: dict, by_pose_target: dict) -> dict:
    return {
        str(pid): float(((by_pose_render[pid].reshape(-1, 3) - by_pose_target[pid]) ** 2).mean())
        for pid in sorted(by_pose_render)
    }


def run_pipeline(config: PipelineConfig, out_dir) -> PipelineResult:
    """Execute all four stages, writing artifacts and a metrics report.

    Any exception inside a stage is re-raised as StageFailure with that
    stage's tag; later stages never run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    (out / "renders").mkdir(exist_ok=True)

    streams = _derive_streams(config.seed)
    scene = SyntheticScene()
    gray = dataclasses.replace(
        scene, part_colors=tuple(scene.base_color for _ in scene.part_colors)
    )
    schedule = linear_beta_schedule(weight_mode=config.weight_mode)
    prompt = build_prompt(config)
    for part in prompt.parts:
        if part.label not in scene.part_labels:
            raise ValueError(
                f"part phrase {part.label!r} has no ground-truth scene part "
                f"(available: {', '.join(scene.part_labels)})"
            )

    extraction_poses = _reid(
        sample_sphere_poses(config.extraction_views, seed=_int_seed(streams["pose_extraction"])),
        _EXTRACTION_ID_BASE,
    )
    train_poses = _reid(
        sample_sphere_poses(config.train_pose_count, seed=_int_seed(streams["pose_train"])),
        _TRAIN_ID_BASE,
    )
    eval_poses = _reid(
        sample_sphere_poses(config.eval_pose_count, seed=_int_seed(streams["pose_eval"])),
        _EVAL_ID_BASE,
    )

    asset_rc = RenderConfig(
        resolution=config.asset_resolution, samples_per_ray=config.asset_samples
    )
    affinity_rc = RenderConfig(
        resolution=config.attention_resolution, samples_per_ray=config.affinity_samples
    )
    metrics: dict = {"config_echo": config.to_dict(), "stages": {}}
    timings: dict = {}

    # Stage 1: partial optimization toward colorless oracle targets.
    t0 = time.perf_counter()
    with _stage_guard("partial"):
        gray_targets = {
            p.id: render_scene(gray, p, config.asset_resolution, "rgb", samples=ORACLE_SAMPLES).reshape(-1, 3)
            for p in train_poses + eval_poses
        }
        oracle = SyntheticOracleGuidance(gray_targets)
        asset = init_asset_field(
            hidden=config.field_hidden,
            octaves=config.field_octaves,
            seed=_int_seed(streams["asset_init"]),
        )
        eval_before = {p.id: render_asset(asset, p, asset_rc) for p in eval_poses}
        stage1 = partial_optimize(
            asset,
            oracle,
            schedule,
            train_poses,
            extraction_poses,
            SDSConfig(
                render=asset_rc,
                learning_rate=config.sds_learning_rate,
                timestep_fraction=config.timestep_fraction,
            ),
            steps=config.partial_steps,
            rng_t=np.random.default_rng(streams["stage1_t"]),
            rng_eps=np.random.default_rng(streams["stage1_eps"]),
            rng_pose=np.random.default_rng(streams["stage1_pose"]),
        )
        asset = stage1.params
        eval_after = {p.id: render_asset(asset, p, asset_rc) for p in eval_poses}
        _write_field_checkpoint(out / "checkpoints" / "asset_partial.json", asset, "asset")
        metrics["stages"]["partial"] = {
            "steps": config.partial_steps,
            "residual_trace": [float(v) for v in stage1.residual_trace],
            "photometric_before": _photometric(eval_before, gray_targets),
            "photometric_after": _photometric(eval_after, gray_targets),
        }
    timings["partial_s"] = time.perf_counter() - t0

    # Stage 2: attention capture (or ingest) and affinity aggregation.
    t0 = time.perf_counter()
    with _stage_guard("extraction"):
        window = config.window()
        if config.attention_source == "synthetic":
            attention_dir = out / "attention"
            attention_dir.mkdir(exist_ok=True)
            for pose in extraction_poses:
                records = synthetic_attention_records(
                    scene,
                    pose,
                    prompt,
                    window,
                    config.attention_resolution,
                    config.attention_timesteps,
                    blur_sigma=config.attention_blur_sigma,
                )
                artifacts.write_attention_container(
                    attention_dir / f"cam{pose.id:04d}.pam", records
                )
            artifacts.write_camera_manifest(attention_dir / "cameras.json", extraction_poses)
        else:
            attention_dir = Path(config.attention_dir)
            extraction_poses = artifacts.read_camera_manifest(attention_dir / "cameras.json")
        container_paths = sorted(attention_dir.glob("*.pam"))
        if not container_paths:
            raise FileNotFoundError(f"no attention containers found in {attention_dir}")
        artifacts.write_prompt_spec(out / "prompt.json", prompt)
        artifacts.write_camera_manifest(out / "cameras.json", extraction_poses)
        maps: list[PartAffinityMap] = []
        total_records = 0
        for path in container_paths:
            records = artifacts.read_attention_container(path)
            total_records += len(records)
            for part in prompt.parts:
                pam = normalize(aggregate(records, window, part))
                maps.append(pam)
                artifacts.write_affinity_map(
                    out / "maps" / f"cam{pam.camera_id:04d}_{_label_slug(pam.part_label)}.paf",
                    pam,
                )
        metrics["stages"]["extraction"] = {
            "containers": len(container_paths),
            "records": total_records,
            "maps": len(maps),
            "window": {
                "t_start": window.t_start,
                "t_end": window.t_end,
                "layers": list(window.layers),
            },
        }
    timings["extraction_s"] = time.perf_counter() - t0

    # Stage 3: fit the affinity field to the aggregated maps.
    t0 = time.perf_counter()
    with _stage_guard("affinity_fit"):
        fit_result = fit(
            maps,
            extraction_poses,
            AffinityTrainConfig(
                steps=config.affinity_steps,
                learning_rate=config.affinity_learning_rate,
                rays_per_batch=config.affinity_rays_per_batch,
                seed=_int_seed(streams["affinity_fit"]),
            ),
            render_config=affinity_rc,
            hidden=config.field_hidden,
            octaves=config.field_octaves,
        )
        affinity = fit_result.params
        _write_field_checkpoint(out / "checkpoints" / "affinity.json", affinity, "affinity")
        iou_by_part: dict = {p.label: [] for p in prompt.parts}
        for pose in eval_poses:
            rendered = render_view(affinity, pose, affinity_rc)
            gt = ground_truth_masks(scene, pose, config.attention_resolution)
            predicted = part_masks(rendered.grids)
            for part in prompt.parts:
                ch = list(affinity.emission_labels).index(part.label)
                gt_ch = scene.part_labels.index(part.label)
                inter = np.logical_and(predicted[:, :, ch], gt[:, :, gt_ch]).sum()
                union = np.logical_or(predicted[:, :, ch], gt[:, :, gt_ch]).sum()
                iou_by_part[part.label].append(float(inter / union) if union else 0.0)
        metrics["stages"]["affinity_fit"] = {
            "steps": config.affinity_steps,
            "final_loss": float(fit_result.final_loss),
            "loss_trace": [float(v) for v in fit_result.loss_trace],
            "eval_iou": {label: vals for label, vals in iou_by_part.items()},
        }
    timings["affinity_fit_s"] = time.perf_counter() - t0

    # Stage 4: modulated distillation with the toy attention guidance.
    t0 = time.perf_counter()
    with _stage_guard("modulated"):
        guidance = build_toy_guidance(
            prompt, scene, config.asset_resolution, seed=_int_seed(streams["guidance_init"])
        )
        mod_cfg = config.modulation()
        sds_cfg = SDSConfig(
            render=asset_rc,
            learning_rate=config.modulated_learning_rate,
            timestep_fraction=config.timestep_fraction,
        )
        hw = config.asset_resolution * config.asset_resolution
        # The affinity field is frozen here, so per-pose modulation inputs
        # are constants; cache them instead of re-rendering every step.
        inputs_cache: dict[int, ModulationInputs] = {}

        def inputs_for(pose: CameraPose) -> ModulationInputs:
            if pose.id not in inputs_cache:
                inputs_cache[pose.id] = affinity_modulation_inputs(
                    affinity, pose, prompt.parts, hw, mod_cfg, affinity_rc
                )
            return inputs_cache[pose.id]

        adam = ad.AdamState(lr=sds_cfg.learning_rate)
        rng_t = np.random.default_rng(streams["stage4_t"])
        rng_eps = np.random.default_rng(streams["stage4_eps"])
        rng_pose = np.random.default_rng(streams["stage4_pose"])
        trace = np.empty(config.modulated_steps)
        for k in range(config.modulated_steps):
            pose = train_poses[int(rng_pose.integers(len(train_poses)))]
            result = sds_step(
                asset, pose, guidance, schedule, sds_cfg, adam, rng_t, rng_eps,
                modulation=inputs_for(pose),
            )
            if not result.aborted:
                asset = result.params
            trace[k] = result.residual_norm
        _write_field_checkpoint(out / "checkpoints" / "asset_final.json", asset, "asset")

        color_report: dict = {}
        final_renders = {}
        for pose in eval_poses:
            img = render_asset(asset, pose, asset_rc)
            final_renders[pose.id] = img
            artifacts.write_ppm(
                out / "renders" / f"eval{pose.id:04d}.ppm", _heatmap_bytes(img)
            )
            heat = render_view(affinity, pose, affinity_rc)
            for part in prompt.parts:
                artifacts.write_pgm(
                    out / "renders" / f"eval{pose.id:04d}_{_label_slug(part.label)}.pgm",
                    _heatmap_bytes(heat.grid(part.label)),
                )
        part_colors = {
            p.label: _scene_part_color(scene, p.label) for p in prompt.parts
        }
        for part in prompt.parts:
            own = part_colors[part.label]
            means = []
            for pose in eval_poses:
                gt = ground_truth_masks(scene, pose, config.asset_resolution)
                mask = gt[:, :, scene.part_labels.index(part.label)]
                if mask.any():
                    means.append(final_renders[pose.id][mask].mean(axis=0))
            mean_rgb = np.mean(means, axis=0) if means else np.full(3, np.nan)
            dists = {
                other: float(np.linalg.norm(mean_rgb - c))
                for other, c in part_colors.items()
            }
            color_report[part.label] = {
                "mean_rgb": [float(v) for v in mean_rgb],
                "distances": dists,
                "closest": min(dists, key=dists.get),
            }
        colored_targets = {
            p.id: render_scene(scene, p, config.asset_resolution, "rgb", samples=ORACLE_SAMPLES).reshape(-1, 3)
            for p in eval_poses
        }
        metrics["stages"]["modulated"] = {
            "steps": config.modulated_steps,
            "residual_trace": [float(v) for v in trace],
            "part_color_assignment": color_report,
            "photometric_vs_scene": _photometric(final_renders, colored_targets),
        }
    timings["modulated_s"] = time.perf_counter() - t0

    artifacts.write_metrics(out / "metrics.json", metrics)
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return PipelineResult(
        asset_params=asset, affinity_params=affinity, metrics=metrics, out_dir=out
    )
