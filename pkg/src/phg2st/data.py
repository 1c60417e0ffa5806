"""Slide bundles: data model, on-disk format, preprocessing, synthetic slides."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import make_rng

SPOT_PX = 224
NEIGHBOR_PX = 1120
NEIGHBOR_SPAN = NEIGHBOR_PX // SPOT_PX  # 5x5 neighbor window
N_NEIGHBORS = NEIGHBOR_SPAN * NEIGHBOR_SPAN
CENTER_SLOT = N_NEIGHBORS // 2
CPM_SCALE = 1e6

PHGF_MAGIC = b"PHGF"
PHGF_VERSION = 1


class FormatError(ValueError):
    """A bundle file is malformed or inconsistent with its siblings."""


class ValidationError(ValueError):
    """Bundle content violates a data-model invariant."""


@dataclass(frozen=True, eq=False)
class SlideBundle:
    slide_id: str
    patient_id: str
    coords: np.ndarray  # n x 2 float, slide pixel units
    grid: np.ndarray  # n x 2 int, (row, col)
    spot_features: np.ndarray  # n x d
    counts: np.ndarray  # n x m_raw int
    gene_names: tuple[str, ...]
    spot_ids: tuple[str, ...] = ()
    # ground truth from the synthetic generator; never written to disk
    truth: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = self.coords.shape[0]
        for label, arr in (("grid", self.grid), ("spot_features", self.spot_features), ("counts", self.counts)):
            if arr.shape[0] != n:
                raise ValidationError(f"{label} has {arr.shape[0]} rows, expected {n}")
        if self.counts.shape[1] != len(self.gene_names):
            raise ValidationError("counts columns do not match gene_names")
        if not np.all(np.isfinite(self.coords)):
            raise ValidationError("coords must be finite")
        if not np.all(np.isfinite(self.spot_features)):
            raise ValidationError("spot_features contain NaN or inf")
        if np.any(self.counts < 0):
            raise ValidationError("counts must be non-negative")
        if len({tuple(g) for g in self.grid.tolist()}) != n:
            raise ValidationError("duplicate grid positions")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.spot_features.shape[1]


@dataclass(frozen=True)
class NeighborTensor:
    values: np.ndarray  # n x 25 x d
    valid: np.ndarray  # n x 25 bool


@dataclass(frozen=True)
class ExpressionMatrix:
    values: np.ndarray  # n x m
    gene_index: np.ndarray  # m indices into the raw panel


# ---------------------------------------------------------------------------
# features.phgf


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(PHGF_MAGIC)
        fh.write(struct.pack("<IQQ", PHGF_VERSION, n, d))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != PHGF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header")
    version, n, d = struct.unpack("<IQQ", raw[4:24])
    if version != PHGF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[24:]
    if len(payload) != 4 * n * d:
        raise FormatError(f"{path}: expected {n}x{d} floats, found {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)


# ---------------------------------------------------------------------------
# bundle directories


def load_slide_bundle(path) -> SlideBundle:
    root = Path(path)
    files = {name: root / name for name in ("spots.csv", "counts.csv", "genes.txt", "meta.json", "features.phgf")}
    for name, fpath in files.items():
        if not fpath.is_file():
            raise FileNotFoundError(f"{root}: missing {name}")

    with open(files["spots.csv"], newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["spot_id", "x", "y", "row", "col"]:
            raise FormatError(f"spots.csv: unexpected header {header}")
        spots = [r for r in reader if r]
    spot_ids = tuple(r[0] for r in spots)
    coords = np.array([[float(r[1]), float(r[2])] for r in spots], dtype=np.float64).reshape(-1, 2)
    grid = np.array([[int(r[3]), int(r[4])] for r in spots], dtype=np.int64).reshape(-1, 2)

    genes = tuple(line.strip() for line in files["genes.txt"].read_text(encoding="utf-8").splitlines() if line.strip())
    with open(files["counts.csv"], newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None) or []
        rows = [r for r in reader if r]
    if tuple(header) != genes:
        raise FormatError("counts.csv header disagrees with genes.txt")
    counts = np.array([[int(v) for v in r] for r in rows], dtype=np.int64).reshape(-1, len(genes))

    features = read_features(files["features.phgf"])
    meta = json.loads(files["meta.json"].read_text(encoding="utf-8"))

    n = len(spots)
    if counts.shape[0] != n:
        raise FormatError(f"counts.csv has {counts.shape[0]} rows but spots.csv has {n}")
    if features.shape[0] != n:
        raise FormatError(f"features.phgf has {features.shape[0]} rows but spots.csv has {n}")
    if not np.all(np.isfinite(features)):
        raise ValidationError(f"{root}: features contain NaN or inf")

    return SlideBundle(
        slide_id=str(meta["slide_id"]),
        patient_id=str(meta["patient_id"]),
        coords=coords,
        grid=grid,
        spot_features=features,
        counts=counts,
        gene_names=genes,
        spot_ids=spot_ids,
    )


def save_slide_bundle(bundle: SlideBundle, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ids = bundle.spot_ids or tuple(f"s{i}" for i in range(bundle.n))
    with open(root / "spots.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["spot_id", "x", "y", "row", "col"])
        for sid, (x, y), (r, c) in zip(ids, bundle.coords.tolist(), bundle.grid.tolist()):
            w.writerow([sid, repr(x), repr(y), r, c])
    with open(root / "counts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(bundle.gene_names)
        w.writerows(bundle.counts.tolist())
    (root / "genes.txt").write_text("".join(g + "\n" for g in bundle.gene_names), encoding="utf-8")
    (root / "meta.json").write_text(
        json.dumps({"slide_id": bundle.slide_id, "patient_id": bundle.patient_id}, indent=2) + "\n",
        encoding="utf-8",
    )
    write_features(root / "features.phgf", bundle.spot_features)
    return root


def find_bundles(root) -> list[Path]:
    """Bundle directories under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if (root / "meta.json").is_file():
        return [root]
    return sorted(p.parent for p in root.glob("*/meta.json"))


# ---------------------------------------------------------------------------
# preprocessing


def log_normalize(counts: np.ndarray) -> np.ndarray:
    """ln(1 + count * 1e6 / spot_total) over the full panel; zero-total spots map to zeros."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    return np.log1p(counts * (CPM_SCALE / safe))


def normalize_counts(counts: np.ndarray, selected) -> ExpressionMatrix:
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size and (selected.min() < 0 or selected.max() >= counts.shape[1]):
        raise IndexError("selected gene index out of range")
    values = log_normalize(counts)[:, selected]
    return ExpressionMatrix(values=values, gene_index=selected)


def select_hvg(bundles: Sequence[SlideBundle], k: int, mode: str = "lognorm") -> np.ndarray:
    """Indices of the ``k`` most variable genes, pooled over all spots of ``bundles``.

    ``mode="lognorm"`` ranks by variance of log-normalized expression,
    ``mode="raw"`` by variance of raw counts.  Ties go to the lexicographically
    smaller gene name.
    """
    if not bundles:
        raise ValueError("select_hvg needs at least one bundle")
    names = bundles[0].gene_names
    for b in bundles[1:]:
        if b.gene_names != names:
            raise ValidationError(f"gene panel of {b.slide_id} differs from {bundles[0].slide_id}")
    if not 1 <= k <= len(names):
        raise ValueError(f"k={k} outside [1, {len(names)}]")
    if mode == "lognorm":
        pooled = np.concatenate([log_normalize(b.counts) for b in bundles])
    elif mode == "raw":
        pooled = np.concatenate([b.counts.astype(np.float64) for b in bundles])
    else:
        raise ValueError(f"unknown HVG mode {mode!r}")
    variance = pooled.var(axis=0)
    order = sorted(range(len(names)), key=lambda j: (-variance[j], names[j]))
    return np.array(order[:k], dtype=np.int64)


def assemble_neighbor_features(bundle: SlideBundle) -> NeighborTensor:
    """Gather the 5x5 block of grid neighbors around every spot (row-major, center slot 12)."""
    grid = bundle.grid
    lo = grid.min(axis=0) - 2
    extent = grid.max(axis=0) - lo + 3
    lookup = np.full(tuple(extent), -1, dtype=np.int64)
    lookup[grid[:, 0] - lo[0], grid[:, 1] - lo[1]] = np.arange(bundle.n)

    offsets = np.array([(dr, dc) for dr in range(-2, 3) for dc in range(-2, 3)])
    pos = grid[:, None, :] - lo + offsets[None, :, :]  # n x 25 x 2, always in range thanks to the margin
    idx = lookup[pos[..., 0], pos[..., 1]]
    valid = idx >= 0
    values = np.where(valid[..., None], bundle.spot_features[np.where(valid, idx, 0)], 0.0)
    return NeighborTensor(values=values, valid=valid)


# ---------------------------------------------------------------------------
# synthetic slides


@dataclass(frozen=True)
class SynthConfig:
    n_rows: int = 10
    n_cols: int = 10
    d: int = 16
    m: int = 20
    latent_dim: int = 4
    noise_sigma: float = 0.1
    amplitude: float = 0.6
    n_waves: int = 3
    max_frequency: float = 1.5
    map_seed: int = 0


def _synth_maps(cfg: SynthConfig):
    """Slide-independent linear maps shared by every slide drawn from ``cfg``."""
    rng = make_rng(cfg.map_seed)
    k = cfg.latent_dim + 1
    feature_map = rng.normal(size=(k, cfg.d)) / np.sqrt(k)
    gene_map = rng.normal(size=(cfg.latent_dim, cfg.m))
    # equal signal amplitude per gene
    gene_map *= cfg.amplitude / np.linalg.norm(gene_map, axis=0)
    baseline = rng.uniform(-1.0, 1.0, size=cfg.m)
    size_ref = np.log(CPM_SCALE + cfg.m) - np.log(np.exp(baseline).sum())
    return feature_map, gene_map, baseline, size_ref


def generate_synthetic_slide(
    cfg: SynthConfig,
    seed: int,
    slide_id: str | None = None,
    patient_id: str | None = None,
) -> SlideBundle:
    """Draw one slide whose features and expression share a smooth latent tissue field.

    The latent field holds ``latent_dim`` smooth coordinates (sums of random
    low-frequency plane waves) plus one per-spot size coordinate chosen so that
    the expected counts sum to 1e6.  Log-normalized expression is then linear
    in the full latent vector up to count rounding, and spot features are a
    second linear map of the same vector.
    """
    if cfg.n_rows * cfg.n_cols < N_NEIGHBORS:
        raise ValueError(f"grid {cfg.n_rows}x{cfg.n_cols} is smaller than one {NEIGHBOR_SPAN}x{NEIGHBOR_SPAN} window")
    if cfg.latent_dim < 1 or cfg.d < 1 or cfg.m < 1 or cfg.noise_sigma < 0:
        raise ValueError("latent_dim, d and m must be positive and noise_sigma non-negative")

    feature_map, gene_map, baseline, size_ref = _synth_maps(cfg)
    rng = make_rng(seed)
    rows, cols = np.meshgrid(np.arange(cfg.n_rows), np.arange(cfg.n_cols), indexing="ij")
    grid = np.stack([rows.ravel(), cols.ravel()], axis=1)
    unit = grid / np.array([cfg.n_rows, cfg.n_cols], dtype=np.float64)

    field_ = np.zeros((grid.shape[0], cfg.latent_dim))
    for j in range(cfg.latent_dim):
        for _ in range(cfg.n_waves):
            freq = rng.uniform(-cfg.max_frequency, cfg.max_frequency, size=2)
            phase = rng.uniform(0.0, 2 * np.pi)
            field_[:, j] += np.cos(2 * np.pi * unit @ freq + phase)
    field_ = (field_ - field_.mean(axis=0)) / np.maximum(field_.std(axis=0), 1e-12)

    expr_noise = cfg.noise_sigma * rng.normal(size=(grid.shape[0], cfg.m))
    raw = baseline + field_ @ gene_map + expr_noise
    top = raw.max(axis=1, keepdims=True)
    size = np.log(CPM_SCALE + cfg.m) - (top + np.log(np.exp(raw - top).sum(axis=1, keepdims=True)))
    expression = raw + size
    latent = np.concatenate([field_, size - size_ref], axis=1)

    feature_noise = cfg.noise_sigma * rng.normal(size=(grid.shape[0], cfg.d))
    features = (latent @ feature_map + feature_noise).astype(np.float32).astype(np.float64)
    counts = np.rint(np.expm1(expression)).astype(np.int64)

    sid = slide_id or f"synth_{seed}"
    coords = (grid[:, ::-1] * SPOT_PX + SPOT_PX / 2).astype(np.float64)
    return SlideBundle(
        slide_id=sid,
        patient_id=patient_id or sid,
        coords=coords,
        grid=grid.astype(np.int64),
        spot_features=features,
        counts=counts,
        gene_names=tuple(f"G{j:04d}" for j in range(cfg.m)),
        spot_ids=tuple(f"{sid}_{r}x{c}" for r, c in grid.tolist()),
        truth={"latent": latent, "expression": expression, "gene_map": gene_map},
    )


def generate_synthetic_cohort(cfg: SynthConfig, n_patients: int, slides_per_patient: int, seed: int) -> list[SlideBundle]:
    bundles = []
    for p in range(n_patients):
        for s in range(slides_per_patient):
            slide_seed = seed * 10_007 + p * 101 + s
            bundles.append(
                generate_synthetic_slide(cfg, slide_seed, slide_id=f"P{p:02d}_S{s:02d}", patient_id=f"P{p:02d}")
            )
    return bundles


# ---------------------------------------------------------------------------
# heatmaps


def write_heatmap(values, grid, path, scale: int = 1) -> Path:
    """Write per-spot ``values`` as a binary PGM, one (scaled) pixel block per grid cell.

    Values are min-max scaled to 0..255; constant input renders mid-gray (128).
    Grid cells without a spot are black.
    """
    values = np.asarray(values, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.int64)
    if values.shape[0] != grid.shape[0]:
        raise ValueError(f"{values.shape[0]} values for {grid.shape[0]} spots")
    lo, hi = values.min(), values.max()
    if hi > lo:
        levels = np.rint((values - lo) / (hi - lo) * 255.0)
    else:
        levels = np.full(values.shape, 128.0)
    origin = grid.min(axis=0)
    h, w = grid.max(axis=0) - origin + 1
    image = np.zeros((h, w), dtype=np.uint8)
    image[grid[:, 0] - origin[0], grid[:, 1] - origin[1]] = levels.astype(np.uint8)
    if scale > 1:
        image = np.kron(image, np.ones((scale, scale), dtype=np.uint8))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
