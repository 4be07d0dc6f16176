"""File formats: OVOL volumes, model checkpoints, metric reports and PGM montages.

OVOL layout (all little-endian)::

    "OVOL" | version u8 = 1 | nz u32 | ny u32 | nx u32 | dtype u8 = 1 (float32)
    | nz*ny*nx float32 values, z outermost, x innermost

Each ``<name>.ovol`` may carry a ``<name>.json`` sidecar with ``subject``,
``contrast``, ``scale_max`` and ``seed``.

Checkpoint layout::

    "OCKP" | version u8 = 1 | header length u32 | UTF-8 JSON header
    | per parameter, in header order: ndim u8 | dims u32 * ndim | float32 values
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import jsonschema
import numpy as np
import torch

from progsynth.engine import LayerSpec, Model
from progsynth.metrics import MetricReport
from progsynth.pipeline import Contrast, PipelineConfig, PipelineModels, SubjectVolumes
from progsynth.volume import Orientation, Volume, normalize_volume

OVOL_MAGIC = b"OVOL"
OVOL_VERSION = 1
OVOL_DTYPE_F32 = 1
_OVOL_HEADER = struct.Struct("<4sBIIIB")

CKPT_MAGIC = b"OCKP"
CKPT_VERSION = 1
CKPT_FORMAT = "progsynth-checkpoint"
PIPELINE_FORMAT = "progsynth-pipeline"
STAGE_FILES = {"axial": "g_axial.ckpt", "coronal": "g_coronal.ckpt", "sagittal": "g_sagittal.ckpt"}
VOLUMETRIC_FILE = "g_volumetric.ckpt"


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_volume(v: Volume) -> bytes:
    nz, ny, nx = v.dims
    header = _OVOL_HEADER.pack(OVOL_MAGIC, OVOL_VERSION, nz, ny, nx, OVOL_DTYPE_F32)
    return header + v.data.astype("<f4").tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < _OVOL_HEADER.size:
        if buf[:4] != OVOL_MAGIC[: len(buf[:4])]:
            raise FormatError("bad magic: not an OVOL file")
        raise FormatError(f"truncated header: {len(buf)} bytes, need {_OVOL_HEADER.size}")
    magic, version, nz, ny, nx, dtype = _OVOL_HEADER.unpack_from(buf)
    if magic != OVOL_MAGIC:
        raise FormatError(f"bad magic: {magic!r}")
    if version != OVOL_VERSION:
        raise FormatError(f"bad version: {version} (supported: {OVOL_VERSION})")
    if dtype != OVOL_DTYPE_F32:
        raise FormatError(f"bad dtype: code {dtype} (supported: {OVOL_DTYPE_F32} = float32)")
    if min(nz, ny, nx) < 1:
        raise FormatError(f"bad dims: {(nz, ny, nx)}")
    expected = nz * ny * nx * 4
    got = len(buf) - _OVOL_HEADER.size
    if got < expected:
        raise FormatError(f"truncated payload: payload length {got} bytes, expected {expected}")
    if got > expected:
        raise FormatError(f"payload length mismatch: {got} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_OVOL_HEADER.size).reshape(nz, ny, nx)
    return Volume(data.astype(np.float32))


def write_volume(path, v: Volume, sidecar: dict | None = None):
    path = Path(path)
    path.write_bytes(encode_volume(v))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else {}


# -- checkpoints --------------------------------------------------------------


def encode_model(m: Model) -> bytes:
    names = list(m.params)
    header = {
        "format": CKPT_FORMAT,
        "layers": [s.to_dict() for s in m.layers],
        "in_channels": m.in_channels,
        "spatial_dims": m.spatial_dims,
        "residual": m.residual,
        "seed": m.seed,
        "config": m.config,
        "params": names,
    }
    head = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(head)), head]
    for name in names:
        arr = m.params[name].detach().to(torch.float32).numpy()
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode_model(buf: bytes) -> Model:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad magic: not a checkpoint")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"bad version: checkpoint version {version}")
    pos = 9
    header = json.loads(buf[pos : pos + hlen])
    pos += hlen
    if header.get("format") != CKPT_FORMAT:
        raise FormatError("bad format tag in checkpoint header")
    params = {}
    try:
        for name in header["params"]:
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape))
            if pos + 4 * count > len(buf):
                raise FormatError(f"truncated payload for parameter {name}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            params[name] = torch.from_numpy(arr.astype(np.float32))
            pos += 4 * count
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise FormatError("payload length mismatch: trailing bytes in checkpoint")
    return Model(
        [LayerSpec.from_dict(s) for s in header["layers"]],
        in_channels=header["in_channels"],
        spatial_dims=header["spatial_dims"],
        residual=header["residual"],
        seed=header["seed"],
        config=header["config"],
        params=params,
    )


def save_model(path, m: Model):
    Path(path).write_bytes(encode_model(m))


def load_model(path) -> Model:
    return decode_model(Path(path).read_bytes())


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def save_pipeline(out_dir, models: PipelineModels, history=None, method: str = "progressive"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = [("axial", models.g_axial)] + [(o.value, g) for o, g in models.refiners()]
    for name, g in stages:
        save_model(out / STAGE_FILES[name], g)
    _write_json(out / "manifest.json", {
        "format": PIPELINE_FORMAT,
        "method": method,
        "stage_order": [name for name, _ in stages],
        "files": {name: STAGE_FILES[name] for name, _ in stages},
        "seeds": {name: g.seed for name, g in stages},
        "config": models.config.to_dict(),
    })
    if history is not None:
        _write_json(out / "history.json", history.to_dict())


def read_manifest(model_dir) -> dict:
    path = Path(model_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json in {model_dir}")
    return json.loads(path.read_text())


def load_pipeline(model_dir) -> PipelineModels:
    manifest = read_manifest(model_dir)
    if manifest.get("format") != PIPELINE_FORMAT:
        raise FormatError(f"{model_dir} is not a pipeline checkpoint")
    cfg = PipelineConfig.from_dict(manifest["config"])
    order = manifest["stage_order"]
    if not order or order[0] != "axial":
        raise FormatError("pipeline stage order must start with axial")
    models = PipelineModels(load_model(Path(model_dir) / manifest["files"]["axial"]), config=cfg)
    for name in order[1:]:
        models.set_refiner(Orientation(name), load_model(Path(model_dir) / manifest["files"][name]))
    return models


def save_volumetric(out_dir, m: Model, history=None, method: str = "3d-gan"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / VOLUMETRIC_FILE, m)
    _write_json(out / "manifest.json", {
        "format": PIPELINE_FORMAT,
        "method": method,
        "stage_order": ["volumetric"],
        "files": {"volumetric": VOLUMETRIC_FILE},
        "seeds": {"volumetric": m.seed},
        "config": m.config,
    })
    if history is not None:
        _write_json(out / "history.json", history.to_dict())


# -- datasets -----------------------------------------------------------------


def _load_normalized(path) -> Volume:
    v = read_volume(path)
    if float(v.data.min()) < 0.0 or float(v.data.max()) > 1.0:
        v, _ = normalize_volume(v)
    return v


def load_subject(subject_dir) -> SubjectVolumes:
    d = Path(subject_dir)
    sources = {}
    for c in (Contrast.PD, Contrast.T2):
        p = d / f"{c.value}.ovol"
        if p.exists():
            sources[c] = _load_normalized(p)
    t1 = d / f"{Contrast.T1.value}.ovol"
    return SubjectVolumes(d.name, sources, _load_normalized(t1) if t1.exists() else None)


def subject_dirs(split_dir) -> list[Path]:
    d = Path(split_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(p for p in d.iterdir() if p.is_dir())


def load_split(split_dir) -> list[SubjectVolumes]:
    return [load_subject(p) for p in subject_dirs(split_dir)]


def load_volume_set(set_dir, name: str = "T1") -> dict[str, Volume]:
    """``{subject: volume}`` for every ``<set_dir>/<subject>/<name>.ovol``."""
    out = {}
    for p in subject_dirs(set_dir):
        f = p / f"{name}.ovol"
        if f.exists():
            out[p.name] = read_volume(f)
    return out


def read_dataset_manifest(dataset_dir) -> dict | None:
    p = Path(dataset_dir) / "manifest.json"
    return json.loads(p.read_text()) if p.exists() else None


# -- reports ------------------------------------------------------------------

_finite = {"type": "number"}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["psnr_mean", "psnr_std", "psnr_per_subject", "fid", "di_delta", "method",
                 "dataset_id", "seed", "wall_seconds"],
    "properties": {
        "psnr_mean": _finite,
        "psnr_std": {"type": "number", "minimum": 0},
        "psnr_per_subject": {"type": "array", "items": _finite, "minItems": 1},
        "fid": {"type": "number", "minimum": 0},
        "di_delta": {
            "type": "object",
            "required": ["axial", "coronal", "sagittal"],
            "properties": {o.value: {"type": "number", "minimum": 0} for o in Orientation},
        },
        "method": {"type": "string"},
        "dataset_id": {"type": "string"},
        "seed": {"type": ["integer", "null"]},
        "subjects": {"type": "array", "items": {"type": "string"}},
        "wall_seconds": {"type": "number", "minimum": 0},
    },
}


def validate_report(d: dict):
    try:
        jsonschema.validate(d, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"invalid report: {exc.message}") from None
    numbers = [d["psnr_mean"], d["psnr_std"], d["fid"], d["wall_seconds"], *d["psnr_per_subject"],
               *d["di_delta"].values()]
    if not all(math.isfinite(x) for x in numbers):
        raise FormatError("invalid report: non-finite number")


def report_bytes(report: MetricReport, include_wall: bool = True) -> bytes:
    d = report.to_dict()
    if not include_wall:
        d.pop("wall_seconds")
    return (json.dumps(d, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def write_report(path, report: MetricReport):
    validate_report(report.to_dict())
    Path(path).write_bytes(report_bytes(report))


def read_report(path) -> MetricReport:
    d = json.loads(Path(path).read_text())
    validate_report(d)
    return MetricReport.from_dict(d)


# -- montage ------------------------------------------------------------------


def center_slices(v: Volume) -> list[np.ndarray]:
    """Centre axial (y, x), coronal (z, x) and sagittal (z, y) planes."""
    nz, ny, nx = v.dims
    return [v.data[nz // 2], v.data[:, ny // 2, :], v.data[:, :, nx // 2]]


def montage_array(volumes) -> np.ndarray:
    """Grid of 8-bit tiles: one row per volume, columns axial | coronal | sagittal.

    Tiles are placed edge to edge with no separators. A row is as tall as its
    tallest tile; shorter tiles are top-aligned and padded with 0.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("montage needs at least one volume")
    dims = {v.dims for _, v in volumes}
    if len(dims) != 1:
        raise ValueError(f"montage volumes differ in dims: {sorted(dims)}")
    nz, ny, nx = dims.pop()
    row_h = max(ny, nz)
    widths = (nx, nx, ny)
    canvas = np.zeros((row_h * len(volumes), sum(widths)), dtype=np.uint8)
    for r, (_, v) in enumerate(volumes):
        col = 0
        for tile, w in zip(center_slices(v), widths):
            pix = np.rint(np.clip(tile.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
            canvas[r * row_h : r * row_h + pix.shape[0], col : col + w] = pix
            col += w
    return canvas


def write_montage(volumes, path):
    """Write a binary PGM (P5) montage of labelled ``(label, Volume)`` pairs."""
    img = montage_array(volumes)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    labels_path = Path(path).with_suffix(".txt")
    labels_path.write_text("".join(f"row {i}: {label}\n" for i, (label, _) in enumerate(volumes)))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("bad magic: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
