"""Bridge contract tests against the mock diffusion pipeline.

The consumer package (partlift) is imported here, and only here, to prove
the cross-component file contract: everything the bridge writes must parse
through the consumer's readers. The bridge package itself never imports
partlift.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from attention_bridge import (
    BridgeConfig,
    BridgeError,
    MockPipeline,
    condition_on_views,
    export_attention,
)
from attention_bridge.mockmodel import BOS, EOS

from partlift.artifacts import (
    attention_container_bytes,
    read_attention_container,
    read_prompt_spec,
)
from partlift.extraction import (
    AttentionRecord,
    ExtractionWindow,
    NotASubsequence,
    aggregate,
    normalize,
    resolve_part_indices,
)

PROMPT = "a blob with an upper lobe and a lower lobe"


def write_test_ppm(path: Path, seed: int, size: int = 48) -> None:
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    header = f"P6\n{size} {size}\n255\n".encode()
    path.write_bytes(header + base.tobytes())


@pytest.fixture()
def view_files(tmp_path):
    paths = []
    for i in range(3):
        p = tmp_path / f"view{i}.ppm"
        write_test_ppm(p, seed=40 + i)
        paths.append(str(p))
    return paths


def make_config(tmp_path, view_files, **overrides):
    base = dict(
        views=tuple(view_files),
        output_dir=str(tmp_path / "out"),
        prompt=PROMPT,
        num_steps=5,
        layers=(11,),
    )
    base.update(overrides)
    return BridgeConfig(**base)


# ---------------------------------------------------------------------------
# Configuration


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = BridgeConfig(views=("a.ppm",), output_dir="o")
    again = BridgeConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(BridgeError, match="unknown config keys: warp"):
        BridgeConfig.from_dict({"warp": 9})


def test_config_window_and_layer_validation():
    with pytest.raises(BridgeError, match="t_start >= t_end"):
        BridgeConfig(window_t_start=50, window_t_end=100)
    with pytest.raises(BridgeError, match="non-empty"):
        BridgeConfig(layers=())
    with pytest.raises(BridgeError, match="num_steps"):
        BridgeConfig(num_steps=0)


def test_default_window_and_layers_match_canonical_config():
    cfg = BridgeConfig()
    assert (cfg.window_t_start, cfg.window_t_end) == (450, 100)
    assert cfg.layers == (11,)


# ---------------------------------------------------------------------------
# Conditioning


def test_condition_noises_then_preserves_latent_shape(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files)
    pipe = MockPipeline()
    views = condition_on_views(cfg, pipe)
    assert len(views) == 3
    for v in views:
        assert v.latent.shape == (16, 16, 4)
        assert v.noised.shape == v.latent.shape
        assert not np.array_equal(v.noised, v.latent)


def test_zero_start_timestep_leaves_latent_unchanged(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1], window_t_start=0, window_t_end=0, num_steps=1)
    pipe = MockPipeline()
    views = condition_on_views(cfg, pipe)
    np.testing.assert_array_equal(views[0].noised, views[0].latent)
    # and the schedule itself is exactly noiseless at t=0
    eps = np.random.default_rng(0).standard_normal(views[0].latent.shape)
    np.testing.assert_array_equal(
        pipe.scheduler.add_noise(views[0].latent, eps, 0), views[0].latent
    )


def test_hooks_capture_exactly_the_configured_layers(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1], layers=(3, 7))
    views = condition_on_views(cfg, MockPipeline())
    captured_layers = {layer for _, layer, _ in views[0].records}
    assert captured_layers == {3, 7}


def test_layer_out_of_range_rejected(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1], layers=(99,))
    with pytest.raises(BridgeError, match="out of range"):
        condition_on_views(cfg, MockPipeline())


def test_encode_rejects_tiny_or_malformed_images(tmp_path):
    pipe = MockPipeline()
    with pytest.raises(BridgeError, match="smaller than native"):
        pipe.encode(np.zeros((4, 4, 3)))
    with pytest.raises(BridgeError, match="image"):
        pipe.encode(np.zeros((8, 8)))


# ---------------------------------------------------------------------------
# Export: files the consumer can actually read


def test_export_containers_parse_with_consumer_reader(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files)
    summary = export_attention(cfg, MockPipeline())
    assert len(summary["containers"]) == 3
    for path in summary["containers"]:
        records = read_attention_container(path)
        assert records, "container is empty"
        for rec in records:
            assert cfg.window_t_end <= rec.t <= cfg.window_t_start
            assert rec.l in cfg.layers
            assert rec.values.shape == (16, 16, len(PROMPT.split()) + 2)


def test_record_count_formula(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files, layers=(5, 11), num_steps=6)
    pipe = MockPipeline()
    summary = export_attention(cfg, pipe)
    steps = pipe.scheduler.timesteps(450, 100, 6)
    assert summary["records"] == len(steps) * 2 * 3
    per_container = [len(read_attention_container(p)) for p in summary["containers"]]
    assert per_container == [len(steps) * 2] * 3


def test_constant_attention_aggregates_to_constant_map(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1])
    summary = export_attention(cfg, MockPipeline(attention_mode="constant"))
    records = read_attention_container(summary["containers"][0])
    spec = read_prompt_spec(summary["prompt_spec"])
    window = ExtractionWindow(t_start=450, t_end=100, layers=(11,))
    pam = normalize(aggregate(records, window, spec.parts[0]))
    np.testing.assert_allclose(pam.values, 1.0, atol=1e-12)


def test_prompt_spec_passes_consumer_checker(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1])
    summary = export_attention(cfg, MockPipeline())
    spec = read_prompt_spec(summary["prompt_spec"])
    assert spec.tokens[0] == BOS and spec.tokens[-1] == EOS
    for part in spec.parts:
        resolved = resolve_part_indices(spec.tokens, part.label)
        assert resolved.indices == part.indices
    # sentinel tokens shift everything one right of a bare whitespace split
    assert spec.parts[0].indices == (5, 6)


def test_made_up_phrase_rejected_before_export(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1], part_phrases=("upper lobe", "dorsal fin"))
    with pytest.raises(BridgeError, match="dorsal fin"):
        export_attention(cfg, MockPipeline())
    with pytest.raises(NotASubsequence):
        resolve_part_indices(MockPipeline().tokenizer.tokenize(PROMPT), "dorsal fin")


def test_capture_manifest_records_model_scheduler_steps(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files)
    pipe = MockPipeline()
    summary = export_attention(cfg, pipe)
    manifest = json.loads(Path(summary["manifest"]).read_text())
    assert manifest["model_id"] == pipe.model_id
    assert manifest["scheduler"]["num_train_timesteps"] == 1000
    assert manifest["steps"] == summary["steps"]
    assert manifest["window"] == [450, 100]
    assert manifest["config_echo"]["num_steps"] == cfg.num_steps


def test_writer_bytes_match_consumer_writer(tmp_path, view_files):
    cfg = make_config(tmp_path, view_files[:1])
    summary = export_attention(cfg, MockPipeline())
    blob = Path(summary["containers"][0]).read_bytes()
    records = read_attention_container(summary["containers"][0])
    assert attention_container_bytes(records) == blob
    # and the consumer dataclass round-trips the same payload
    again = [
        AttentionRecord(t=r.t, l=r.l, camera_id=r.camera_id, values=r.values) for r in records
    ]
    assert attention_container_bytes(again) == blob


def test_export_is_deterministic(tmp_path, view_files):
    cfg_a = make_config(tmp_path, view_files, output_dir=str(tmp_path / "a"))
    cfg_b = make_config(tmp_path, view_files, output_dir=str(tmp_path / "b"))
    sa = export_attention(cfg_a, MockPipeline())
    sb = export_attention(cfg_b, MockPipeline())
    for pa, pb in zip(sa["containers"], sb["containers"]):
        assert Path(pa).read_bytes() == Path(pb).read_bytes()
    assert Path(sa["prompt_spec"]).read_text() == Path(sb["prompt_spec"]).read_text()


def test_camera_manifest_assigns_ids(tmp_path, view_files):
    manifest = [
        {"id": 30, "radius": 2.5, "elevation_deg": 10.0, "azimuth_deg": 0.0, "fov_deg": 40.0},
        {"id": 31, "radius": 2.5, "elevation_deg": 10.0, "azimuth_deg": 120.0, "fov_deg": 40.0},
        {"id": 32, "radius": 2.5, "elevation_deg": 10.0, "azimuth_deg": 240.0, "fov_deg": 40.0},
    ]
    cam_path = tmp_path / "cameras.json"
    cam_path.write_text(json.dumps(manifest))
    cfg = make_config(tmp_path, view_files, cameras=str(cam_path))
    summary = export_attention(cfg, MockPipeline())
    names = sorted(Path(p).name for p in summary["containers"])
    assert names == ["cam0030.pam", "cam0031.pam", "cam0032.pam"]
    assert read_attention_container(summary["containers"][0])[0].camera_id == 30


def test_cli_export(tmp_path, view_files):
    config_path = tmp_path / "bridge.json"
    config_path.write_text(
        json.dumps(
            {
                "views": view_files,
                "output_dir": str(tmp_path / "cli_out"),
                "prompt": PROMPT,
                "num_steps": 4,
            }
        )
    )
    proc = subprocess.run(
        [sys.executable, "-m", "attention_bridge.cli", "export", "--config", str(config_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    summary = json.loads(proc.stdout)
    assert len(summary["containers"]) == 3
    assert (tmp_path / "cli_out" / "capture_manifest.json").exists()


def test_cli_bad_config_exits_2(tmp_path):
    config_path = tmp_path / "bridge.json"
    config_path.write_text(json.dumps({"warp": 1}))
    proc = subprocess.run(
        [sys.executable, "-m", "attention_bridge.cli", "export", "--config", str(config_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert "unknown config keys" in json.loads(proc.stderr)["error"]
