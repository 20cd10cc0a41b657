"""Bit-exact file formats shared across the toolchain.

Two magic-tagged binary containers (attention records, affinity maps),
a JSON-plus-binary checkpoint pair, PPM/PGM images, camera manifests,
prompt specs, and canonical metrics JSON. All binary payloads are
little-endian 32-bit floats regardless of host; in-memory values are
float64 and are narrowed with round-to-nearest-even on write.

Byte layouts are documented in docs/formats.md next to the golden files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .cameras import CameraPose
from .extraction import AttentionRecord, PartAffinityMap, PartSpec, PromptSpec

ATTENTION_MAGIC = b"PAM1"
AFFINITY_MAGIC = b"PAF1"
FORMAT_VERSION = 1
DEFAULT_SIZE_CAP = 1 << 30  # 1 GiB: refuse larger declared payloads


class FormatError(ValueError):
    """Malformed container: bad magic, version, size, or payload values."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise FormatError(message)


class _Cursor:
    """Bounds-checked forward reader over an in-memory byte buffer."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        _require(count >= 0, f"negative size for {what}")
        _require(
            self.pos + count <= len(self.buf),
            f"truncated file: {what} needs {count} bytes, {len(self.buf) - self.pos} left",
        )
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def done(self, what: str) -> None:
        _require(self.pos == len(self.buf), f"{what}: {len(self.buf) - self.pos} trailing bytes")


def _read_capped(path, size_cap: int) -> bytes:
    path = Path(path)
    actual = path.stat().st_size
    _require(actual <= size_cap, f"{path.name} is {actual} bytes, over the {size_cap}-byte cap")
    return path.read_bytes()


def _f32_bytes(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    _require(np.isfinite(arr).all(), "payload contains NaN/Inf")
    return arr.astype("<f4").tobytes()


def _f32_parse(raw: bytes, count: int, what: str) -> np.ndarray:
    arr = np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)
    _require(np.isfinite(arr).all(), f"{what}: payload contains NaN/Inf")
    return arr


# ---------------------------------------------------------------------------
# Attention containers ("PAM1")


def attention_container_bytes(records: Sequence[AttentionRecord]) -> bytes:
    """Serialize records: magic, version, count, then header+payload each."""
    chunks = [ATTENTION_MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for rec in records:
        h, w, n = rec.shape
        chunks.append(struct.pack("<6I", rec.t, rec.l, rec.camera_id, h, w, n))
        chunks.append(_f32_bytes(rec.values))
    return b"".join(chunks)


def write_attention_container(path, records: Sequence[AttentionRecord]) -> None:
    Path(path).write_bytes(attention_container_bytes(records))


def parse_attention_container(buf: bytes, size_cap: int = DEFAULT_SIZE_CAP) -> list[AttentionRecord]:
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    _require(magic == ATTENTION_MAGIC, f"bad magic {magic!r}, expected {ATTENTION_MAGIC!r}")
    version = cur.u32("version")
    _require(version == FORMAT_VERSION, f"unsupported version {version}")
    count = cur.u32("record count")
    records = []
    for k in range(count):
        t = cur.u32(f"record {k}: t")
        l = cur.u32(f"record {k}: l")
        camera_id = cur.u32(f"record {k}: camera_id")
        h = cur.u32(f"record {k}: H")
        w = cur.u32(f"record {k}: W")
        n = cur.u32(f"record {k}: n")
        _require(h > 0 and w > 0 and n > 0, f"record {k}: zero extent ({h}, {w}, {n})")
        payload = h * w * n * 4
        _require(payload <= size_cap, f"record {k} declares {payload} bytes, over the cap")
        raw = cur.take(payload, f"record {k} payload")
        values = _f32_parse(raw, h * w * n, f"record {k}").reshape(h, w, n)
        _require((values >= 0).all(), f"record {k}: negative attention value")
        records.append(AttentionRecord(t=t, l=l, camera_id=camera_id, values=values))
    cur.done("attention container")
    return records


def read_attention_container(path, size_cap: int = DEFAULT_SIZE_CAP) -> list[AttentionRecord]:
    return parse_attention_container(_read_capped(path, size_cap), size_cap)


def import_npy_attention(path, t: int, l: int, camera_id: int, size_cap: int = DEFAULT_SIZE_CAP) -> AttentionRecord:
    """One-way import of a (H, W, n) float array saved in .npy layout."""
    path = Path(path)
    actual = path.stat().st_size
    _require(actual <= size_cap, f"{path.name} is {actual} bytes, over the {size_cap}-byte cap")
    try:
        arr = np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise FormatError(f"not a loadable array file: {exc}") from exc
    _require(arr.ndim == 3, f"expected (H, W, n) array, got shape {arr.shape}")
    return AttentionRecord(t=t, l=l, camera_id=camera_id, values=np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# Affinity map files ("PAF1")


def affinity_map_bytes(pam: PartAffinityMap) -> bytes:
    label = pam.part_label.encode("utf-8")
    _require(len(label) <= 0xFFFF, f"label is {len(label)} UTF-8 bytes, max 65535")
    _require(
        float(pam.values.max(initial=0.0)) <= 1.0,
        "affinity values must lie in [0,1] on write; normalize first",
    )
    h, w = pam.shape
    return b"".join(
        [
            AFFINITY_MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<H", len(label)),
            label,
            struct.pack("<3I", pam.camera_id, h, w),
            _f32_bytes(pam.values),
        ]
    )


def write_affinity_map(path, pam: PartAffinityMap) -> None:
    Path(path).write_bytes(affinity_map_bytes(pam))


def parse_affinity_map(buf: bytes, size_cap: int = DEFAULT_SIZE_CAP) -> PartAffinityMap:
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    _require(magic == AFFINITY_MAGIC, f"bad magic {magic!r}, expected {AFFINITY_MAGIC!r}")
    version = cur.u32("version")
    _require(version == FORMAT_VERSION, f"unsupported version {version}")
    label_len = cur.u16("label length")
    label = cur.take(label_len, "label").decode("utf-8")
    camera_id = cur.u32("camera_id")
    h = cur.u32("H")
    w = cur.u32("W")
    _require(h > 0 and w > 0, f"zero extent ({h}, {w})")
    payload = h * w * 4
    _require(payload <= size_cap, f"map declares {payload} bytes, over the cap")
    raw = cur.take(payload, "map payload")
    values = _f32_parse(raw, h * w, "affinity map").reshape(h, w)
    _require((values >= 0).all() and (values <= 1.0).all(), "affinity values outside [0,1]")
    cur.done("affinity map file")
    return PartAffinityMap(part_label=label, camera_id=camera_id, values=values)


def read_affinity_map(path, size_cap: int = DEFAULT_SIZE_CAP) -> PartAffinityMap:
    return parse_affinity_map(_read_capped(path, size_cap), size_cap)


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + little-endian f32 weight blob


def write_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``path`` (JSON) and a ``.bin`` sidecar with weights in order.

    ``arrays`` insertion order is the declaration order; the header records
    each name and shape so the blob parses unambiguously.
    """
    path = Path(path)
    blob_name = path.stem + ".bin"
    header = {
        "meta": meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "blob": blob_name,
    }
    blob = b"".join(_f32_bytes(np.asarray(v)) for v in arrays.values())
    (path.parent / blob_name).write_bytes(blob)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path, size_cap: int = DEFAULT_SIZE_CAP) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    for key in ("meta", "arrays", "blob"):
        _require(key in header, f"checkpoint header missing {key!r}")
    blob_path = path.parent / header["blob"]
    _require(blob_path.exists(), f"weight blob {header['blob']!r} missing")
    blob = _read_capped(blob_path, size_cap)
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        _require(nbytes <= size_cap, f"array {entry['name']!r} declares {nbytes} bytes, over the cap")
        _require(offset + nbytes <= len(blob), f"weight blob truncated at array {entry['name']!r}")
        arrays[entry["name"]] = _f32_parse(blob[offset : offset + nbytes], count, entry["name"]).reshape(shape)
        offset += nbytes
    _require(offset == len(blob), f"weight blob has {len(blob) - offset} trailing bytes")
    return header["meta"], arrays


# ---------------------------------------------------------------------------
# Images: binary PPM (P6) and PGM (P5), maxval 255


def _image_bytes(magic: bytes, pixels: np.ndarray, channels: int) -> bytes:
    arr = np.asarray(pixels)
    expected_ndim = 3 if channels == 3 else 2
    _require(arr.ndim == expected_ndim, f"expected {expected_ndim}-D pixel array, got {arr.shape}")
    if channels == 3:
        _require(arr.shape[2] == 3, f"expected trailing RGB axis, got {arr.shape}")
    _require(arr.dtype == np.uint8, f"pixels must be uint8, got {arr.dtype}")
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    return header + arr.tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(_image_bytes(b"P6", rgb, 3))


def write_pgm(path, gray: np.ndarray) -> None:
    Path(path).write_bytes(_image_bytes(b"P5", gray, 1))


def _parse_image(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    _require(buf[:2] == magic, f"bad image magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":  # comment line
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        _require(pos > start, "image header ended early")
        fields.append(buf[start:pos])
    _require(pos < len(buf), "image header not followed by payload")
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"non-numeric image header field: {exc}") from exc
    _require(maxval == 255, f"unsupported maxval {maxval}")
    _require(w > 0 and h > 0, f"zero image extent ({w}, {h})")
    expected = h * w * channels
    payload = buf[pos:]
    _require(
        len(payload) == expected,
        f"image payload is {len(payload)} bytes, header declares {expected}",
    )
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_ppm(path, size_cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
    return _parse_image(_read_capped(path, size_cap), b"P6", 3)


def read_pgm(path, size_cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
    return _parse_image(_read_capped(path, size_cap), b"P5", 1)


# ---------------------------------------------------------------------------
# JSON artifacts: camera manifests, prompt specs, metrics


def write_camera_manifest(path, poses: Sequence[CameraPose]) -> None:
    doc = [p.to_dict() for p in poses]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_camera_manifest(path) -> list[CameraPose]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"camera manifest is not valid JSON: {exc}") from exc
    _require(isinstance(doc, list), "camera manifest must be a JSON array")
    try:
        return [CameraPose.from_dict(d) for d in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad camera manifest entry: {exc}") from exc


def write_prompt_spec(path, spec: PromptSpec) -> None:
    doc = {
        "tokens": list(spec.tokens),
        "parts": [{"label": p.label, "indices": list(p.indices)} for p in spec.parts],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_prompt_spec(path) -> PromptSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"prompt spec is not valid JSON: {exc}") from exc
    try:
        parts = tuple(
            PartSpec(label=p["label"], indices=tuple(int(i) for i in p["indices"]))
            for p in doc["parts"]
        )
        return PromptSpec(tokens=tuple(doc["tokens"]), parts=parts)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad prompt spec: {exc}") from exc


def metrics_bytes(metrics: dict) -> bytes:
    """Canonical metrics serialization: sorted keys, fixed layout, newline."""
    return (json.dumps(metrics, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_bytes(metrics_bytes(metrics))


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text())
