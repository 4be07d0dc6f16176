"""Synthetic multi-contrast ellipsoid phantoms (PD, T2 sources; T1 target)."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from progsynth.volume import Volume

BLUR_RADIUS = 1
CONTRASTS = ("PD", "T2", "T1")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TissueTable:
    """Per-class ``(pd, t2, t1)`` intensities; class 0 is background."""

    names: tuple[str, ...]
    pd: tuple[float, ...]
    t2: tuple[float, ...]
    t1: tuple[float, ...]

    def __post_init__(self):
        triples = list(zip(self.pd, self.t2, self.t1))
        if not (len(self.names) == len(self.pd) == len(self.t2) == len(self.t1)):
            raise ValueError("tissue table columns differ in length")
        if len(set(triples)) != len(triples):
            raise ValueError("tissue intensity triples must be distinct")
        if not all(0.0 <= x <= 1.0 for t in triples for x in t):
            raise ValueError("tissue intensities must lie in [0, 1]")

    def column(self, contrast: str) -> np.ndarray:
        return np.asarray(getattr(self, contrast.lower()), dtype=np.float64)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "pd": list(self.pd), "t2": list(self.t2), "t1": list(self.t1)}


# PD and T2 bright for fluid, T1 bright for white matter. Values are kept off
# round fractions so blurred mixtures rarely coincide with a pure entry.
DEFAULT_TABLE = TissueTable(
    names=("background", "csf", "gm", "wm", "lesion"),
    pd=(0.0, 0.947, 0.781, 0.643, 0.869),
    t2=(0.0, 0.963, 0.577, 0.419, 0.797),
    t1=(0.0, 0.213, 0.547, 0.829, 0.361),
)


@dataclass(frozen=True)
class PhantomSubject:
    id: str
    seed: int
    volumes: dict  # contrast name -> Volume
    labels: np.ndarray  # tissue class per voxel, before blurring

    @property
    def pd(self) -> Volume:
        return self.volumes["PD"]

    @property
    def t2(self) -> Volume:
        return self.volumes["T2"]

    @property
    def t1(self) -> Volume:
        return self.volumes["T1"]


def _ellipsoid_labels(rng: np.random.Generator, size: int, n_classes: int) -> np.ndarray:
    n = int(rng.integers(3, 7))
    grid = np.arange(size) + 0.5
    z, y, x = np.meshgrid(grid, grid, grid, indexing="ij")
    labels = np.zeros((size,) * 3, dtype=np.int8)
    c = size / 2
    # a large head-like ellipsoid first, then smaller structures painted inside it
    for k in range(n):
        if k == 0:
            radii = rng.uniform(0.32, 0.44, 3) * size
            centre = c + rng.uniform(-0.03, 0.03, 3) * size
            cls = 2
        else:
            radii = rng.uniform(0.08, 0.22, 3) * size
            centre = c + rng.uniform(-0.18, 0.18, 3) * size
            cls = int(rng.integers(1, n_classes))
        radii = np.maximum(radii, 2.0)
        rot = _random_rotation(rng)
        d = np.stack([z - centre[0], y - centre[1], x - centre[2]], axis=-1) @ rot
        inside = ((d / radii) ** 2).sum(axis=-1) <= 1.0
        labels[inside] = cls
    return labels


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def box_blur(a: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(a, size=2 * BLUR_RADIUS + 1, mode="nearest")


def generate_phantom(
    seed: int,
    size: int = 32,
    table: TissueTable = DEFAULT_TABLE,
    noise_std: float = 0.02,
    subject_id: str | None = None,
) -> PhantomSubject:
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    if not 0.0 <= noise_std <= 0.1:
        raise ValueError(f"noise_std must lie in [0, 0.1], got {noise_std}")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = _ellipsoid_labels(rng, size, len(table.names))
    volumes = {}
    for contrast in CONTRASTS:
        clean = box_blur(table.column(contrast)[labels])
        if noise_std > 0:
            clean = clean + rng.normal(0.0, noise_std, clean.shape)
        volumes[contrast] = Volume(np.clip(clean, 0.0, 1.0))
    return PhantomSubject(subject_id or f"phantom-{seed}", seed, volumes, labels)


def blurred_table(table: TissueTable = DEFAULT_TABLE) -> np.ndarray:
    """Every ``(pd, t2, t1)`` value a box-blurred label map can produce.

    Rows are the mixtures ``sum_k n_k * table_k / W`` over all class counts
    ``n_k >= 0`` with ``sum n_k = W``, ``W`` the blur window size.
    """
    window = (2 * BLUR_RADIUS + 1) ** 3
    k = len(table.names)
    cols = np.stack([table.column(c) for c in CONTRASTS], axis=1)
    counts = []
    # stars and bars over k classes
    for bars in itertools.combinations(range(window + k - 1), k - 1):
        edges = (-1,) + bars + (window + k - 1,)
        counts.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    counts = np.asarray(counts, dtype=np.float64)
    return counts @ cols / window


def nearest_table_predictor(pd: Volume, t2: Volume, table: TissueTable = DEFAULT_TABLE,
                            chunk: int = 256) -> Volume:
    """Predict T1 from the closest blurred-table ``(pd, t2)`` entry, by exhaustive search."""
    entries = blurred_table(table)
    src = entries[:, :2]
    # mixtures with identical (pd, t2) predict the mean of their t1 values
    keys, inverse = np.unique(np.round(src, 12), axis=0, return_inverse=True)
    t1 = np.bincount(inverse.ravel(), weights=entries[:, 2]) / np.bincount(inverse.ravel())
    query = np.stack([pd.data.ravel(), t2.data.ravel()], axis=1).astype(np.float64)
    uniq, back = np.unique(query, axis=0, return_inverse=True)
    best = np.empty(len(uniq), dtype=np.int64)
    for start in range(0, len(uniq), chunk):
        q = uniq[start : start + chunk]
        dist = ((q[:, None, :] - keys[None, :, :]) ** 2).sum(axis=-1)
        best[start : start + chunk] = np.argmin(dist, axis=1)
    return Volume(t1[best][back.ravel()].reshape(pd.dims))


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    master_seed: int
    size: int
    noise_std: float
    splits: dict  # split -> list of {"id", "seed"}
    table: dict

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "master_seed": self.master_seed,
            "size": self.size,
            "noise_std": self.noise_std,
            "split_sizes": [len(self.splits[s]) for s in SPLITS],
            "splits": self.splits,
            "table": self.table,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["dataset_id"], d["master_seed"], d["size"], d["noise_std"], d["splits"], d["table"])


def subject_seeds(master_seed: int, count: int) -> list[int]:
    """``count`` distinct subject seeds derived from ``master_seed``."""
    seeds: list[int] = []
    seen = set()
    ss = np.random.SeedSequence(master_seed)
    while len(seeds) < count:
        for child in ss.spawn(count - len(seeds)):
            s = int(child.generate_state(1)[0])
            if s not in seen:
                seen.add(s)
                seeds.append(s)
    return seeds


def generate_dataset(
    n_train: int = 35,
    n_val: int = 5,
    n_test: int = 10,
    size: int = 32,
    master_seed: int = 7,
    out_dir: str | Path | None = None,
    noise_std: float = 0.02,
    table: TissueTable = DEFAULT_TABLE,
    overwrite: bool = False,
) -> DatasetManifest:
    """Generate train/val/test phantoms and write them under ``out_dir``.

    Layout: ``<out_dir>/manifest.json`` and
    ``<out_dir>/<split>/<subject>/{PD,T2,T1}.ovol`` with JSON sidecars.
    """
    from progsynth import io  # io depends on this module

    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise ValueError("every split needs at least one subject")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"output directory {out} is not empty (pass overwrite)")
    seeds = iter(subject_seeds(master_seed, sum(counts.values())))
    splits = {}
    for split in SPLITS:
        splits[split] = []
        for i in range(counts[split]):
            splits[split].append({"id": f"{split}-{i:03d}", "seed": next(seeds)})
    manifest = DatasetManifest(
        dataset_id=f"phantom-s{master_seed}-n{size}-{n_train}.{n_val}.{n_test}",
        master_seed=master_seed,
        size=size,
        noise_std=noise_std,
        splits=splits,
        table=table.to_dict(),
    )
    if out is None:
        return manifest
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        for entry in splits[split]:
            subj = generate_phantom(entry["seed"], size, table, noise_std, entry["id"])
            sdir = out / split / entry["id"]
            sdir.mkdir(parents=True, exist_ok=True)
            for contrast, vol in subj.volumes.items():
                io.write_volume(
                    sdir / f"{contrast}.ovol",
                    vol,
                    {"subject": entry["id"], "contrast": contrast, "scale_max": 1.0, "seed": entry["seed"]},
                )
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest
