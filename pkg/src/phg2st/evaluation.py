"""MAE / PCC / CCC, per-slide scoring, leave-one-patient-out CV and sweeps."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SlideBundle, select_hvg
from .model import ConfigError, GraphConfig, ModelConfig, PreparedSlide, forward, prepare_slide
from .tensor import make_rng
from .training import TrainConfig, fit

METRICS = ("mae", "pcc", "ccc")


# ---------------------------------------------------------------------------
# metrics


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("mae of empty vectors")
    return float(np.abs(pred - truth).mean())


def _moments(x: np.ndarray, y: np.ndarray):
    mx, my = x.mean(axis=0), y.mean(axis=0)
    # exact-constant columns get exactly zero spread, not rounding residue
    cx = np.ptp(x, axis=0) == 0
    cy = np.ptp(y, axis=0) == 0
    xc = np.where(cx, 0.0, x - mx)
    yc = np.where(cy, 0.0, y - my)
    return mx, my, (xc * xc).mean(axis=0), (yc * yc).mean(axis=0), (xc * yc).mean(axis=0), cx, cy


def pcc_columns(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _, _, vx, vy, cov, cx, cy = _moments(x, y)
    zero = cx | cy
    r = cov / np.sqrt(np.where(zero, 1.0, vx * vy))
    return np.where(zero, 0.0, np.clip(r, -1.0, 1.0))


def ccc_columns(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    mx, my, vx, vy, cov, cx, cy = _moments(x, y)
    denom = vx + vy + (mx - my) ** 2
    both_equal = cx & cy & (x[0] == y[0])
    out = np.where(denom > 0, 2.0 * cov / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(both_equal, 1.0, np.clip(out, -1.0, 1.0))


def pcc(x, y) -> float:
    """Pearson correlation with population moments; 0 when either input is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pcc needs two equal-length vectors with n >= 2")
    return float(pcc_columns(x[:, None], y[:, None])[0])


def ccc(x, y) -> float:
    """Lin's concordance correlation coefficient with population moments."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("ccc needs two equal-length vectors with n >= 2")
    return float(ccc_columns(x[:, None], y[:, None])[0])


def per_gene_metrics(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """(m, 3) array of per-gene (mae, pcc, ccc), computed over spots."""
    return np.stack(
        [np.abs(pred - truth).mean(axis=0), pcc_columns(pred, truth), ccc_columns(pred, truth)],
        axis=1,
    )


def _aggregate(per_gene: np.ndarray) -> dict[str, float]:
    return {k: float(v) for k, v in zip(METRICS, per_gene.mean(axis=0))}


# ---------------------------------------------------------------------------
# reports


@dataclass
class SlideReport:
    slide_id: str
    per_gene: np.ndarray  # scored on masked (non-prompt) spots
    per_gene_all: np.ndarray  # scored on every spot
    n_scored: int

    @property
    def aggregate(self) -> dict[str, float]:
        return _aggregate(self.per_gene)

    @property
    def aggregate_all(self) -> dict[str, float]:
        return _aggregate(self.per_gene_all)


def evaluate_slide(params, slide: PreparedSlide, mcfg: ModelConfig, prompt_ratio: float, seed: int) -> SlideReport:
    """Score fused predictions with a fixed seeded prompt set.

    The primary score excludes prompted spots; if fewer than two spots remain
    unprompted, every spot is scored.
    """
    out = forward(slide, params, mcfg, prompt_ratio, False, make_rng([seed, 3]))
    pred = out.p_fused.data
    scored = ~out.kept
    if scored.sum() < 2:
        scored = np.ones_like(scored)
    return SlideReport(
        slide_id=slide.slide_id,
        per_gene=per_gene_metrics(pred[scored], slide.expr[scored]),
        per_gene_all=per_gene_metrics(pred, slide.expr),
        n_scored=int(scored.sum()),
    )


def mean_slide_metrics(reports: Sequence[SlideReport], all_spots: bool = False) -> dict[str, float]:
    key = "aggregate_all" if all_spots else "aggregate"
    return {k: float(np.mean([getattr(r, key)[k] for r in reports])) for k in METRICS}


@dataclass
class EvalReport:
    gene_names: list[str]
    per_gene: np.ndarray  # m x 3
    aggregate: dict[str, float]
    per_fold: list[dict]
    summary: dict[str, dict[str, float]]
    aggregate_all_spots: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "metrics": list(METRICS),
            "aggregate": self.aggregate,
            "aggregate_all_spots": self.aggregate_all_spots,
            "summary": self.summary,
            "per_fold": self.per_fold,
            "per_gene": [
                {"gene": g, **{k: float(v) for k, v in zip(METRICS, row)}}
                for g, row in zip(self.gene_names, self.per_gene)
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def summarize(rows: Sequence[dict]) -> dict[str, dict[str, float]]:
    """Mean and population std of each metric over ``rows``."""
    out = {}
    for k in METRICS:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def report_from_slides(reports: Sequence[SlideReport], gene_names: Sequence[str], fold: str = "all") -> EvalReport:
    per_gene = np.mean([r.per_gene for r in reports], axis=0)
    rows = [{"fold": r.slide_id, **r.aggregate} for r in reports]
    agg = mean_slide_metrics(reports)
    return EvalReport(
        gene_names=list(gene_names),
        per_gene=per_gene,
        aggregate=agg,
        per_fold=[{"fold": fold, **agg}],
        summary=summarize(rows),
        aggregate_all_spots=mean_slide_metrics(reports, all_spots=True),
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class Fold:
    test_patient: str
    val_patient: str
    train_patients: tuple[str, ...]


def patient_folds(patients: Sequence[str]) -> list[Fold]:
    """Leave-one-patient-out folds; the next remaining patient (rotating) is held for validation.

    With only two patients the single remaining patient both trains and validates.
    """
    patients = sorted(set(patients))
    if len(patients) < 2:
        raise ConfigError("cross-validation needs at least two patients")
    folds = []
    for i, test in enumerate(patients):
        rest = [p for p in patients if p != test]
        val = rest[i % len(rest)]
        train = tuple(p for p in rest if p != val) or (val,)
        folds.append(Fold(test, val, train))
    return folds


@dataclass(frozen=True)
class CVSettings:
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    graph: GraphConfig = GraphConfig()
    n_genes: int | None = None
    hvg_mode: str = "lognorm"
    std_over: str = "folds"  # or "slides"


def run_fold(bundles: Sequence[SlideBundle], fold: Fold, settings: CVSettings) -> dict:
    train_b = [b for b in bundles if b.patient_id in fold.train_patients]
    val_b = [b for b in bundles if b.patient_id == fold.val_patient]
    test_b = [b for b in bundles if b.patient_id == fold.test_patient]
    names = train_b[0].gene_names
    k = min(settings.n_genes or len(names), len(names))
    genes = select_hvg(train_b, k, settings.hvg_mode)
    graph = replace(settings.graph, k_hyper=settings.train.k_hyper)
    prep = lambda bs: [prepare_slide(b, genes, graph) for b in bs]  # noqa: E731
    result = fit(prep(train_b), prep(val_b), settings.train, settings.model)
    reports = [
        evaluate_slide(result.params, s, settings.model, settings.train.eval_prompt_ratio, settings.train.seed)
        for s in prep(test_b)
    ]
    return {
        "fold": fold.test_patient,
        "val_patient": fold.val_patient,
        "train_patients": list(fold.train_patients),
        "test_slides": [r.slide_id for r in reports],
        "train_slides": [b.slide_id for b in train_b],
        "val_slides": [b.slide_id for b in val_b],
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "genes": [names[j] for j in genes],
        "per_gene": np.mean([r.per_gene for r in reports], axis=0),
        "slides": [{"slide": r.slide_id, **r.aggregate} for r in reports],
        **mean_slide_metrics(reports),
        "all_spots": mean_slide_metrics(reports, all_spots=True),
    }


def _run_fold_star(args):
    return run_fold(*args)


def cross_validate(bundles: Sequence[SlideBundle], settings: CVSettings = CVSettings(), jobs: int = 1) -> EvalReport:
    folds = patient_folds([b.patient_id for b in bundles])
    work = [(bundles, f, settings) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_star, work))
    else:
        results = [_run_fold_star(w) for w in work]

    gene_sums: dict[str, np.ndarray] = {}
    gene_counts: dict[str, int] = {}
    for r in results:
        for g, row in zip(r["genes"], r["per_gene"]):
            gene_sums[g] = gene_sums.get(g, 0.0) + row
            gene_counts[g] = gene_counts.get(g, 0) + 1
    gene_names = sorted(gene_sums)
    per_gene = np.array([gene_sums[g] / gene_counts[g] for g in gene_names])

    per_fold = [{k: v for k, v in r.items() if k not in ("per_gene", "genes")} for r in results]
    if settings.std_over == "slides":
        summary = summarize([s for r in results for s in r["slides"]])
    elif settings.std_over == "folds":
        summary = summarize(per_fold)
    else:
        raise ConfigError(f"unknown std_over {settings.std_over!r}")
    return EvalReport(
        gene_names=gene_names,
        per_gene=per_gene,
        aggregate={k: float(np.mean([r[k] for r in results])) for k in METRICS},
        per_fold=per_fold,
        summary=summary,
        aggregate_all_spots={k: float(np.mean([r["all_spots"][k] for r in results])) for k in METRICS},
    )


# ---------------------------------------------------------------------------
# ablations


def prompt_ratio_sweep(params, slides: Sequence[PreparedSlide], mcfg: ModelConfig, ratios: Sequence[float], seed: int) -> list[dict]:
    """Evaluate at each inference prompt ratio with one shared seed."""
    rows = []
    for ratio in ratios:
        reports = [evaluate_slide(params, s, mcfg, ratio, seed) for s in slides]
        masked = mean_slide_metrics(reports)
        everything = mean_slide_metrics(reports, all_spots=True)
        rows.append({"ratio": float(ratio), **masked, **{f"{k}_all": v for k, v in everything.items()}})
    return rows


SWEEP_FIELDS = ("ratio", "mae", "pcc", "ccc", "mae_all", "pcc_all", "ccc_all")


def write_sweep_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(row[k]) for k in SWEEP_FIELDS})
    return path


BRANCH_VARIANTS = {
    "full": {},
    "spot_only": {"use_neighbor_branch": False},
    "neighbor_only": {"use_spot_branch": False},
}


def branch_ablation(
    train: Sequence[PreparedSlide],
    val: Sequence[PreparedSlide],
    test: Sequence[PreparedSlide],
    tcfg: TrainConfig,
    mcfg: ModelConfig,
) -> dict[str, dict[str, float]]:
    """Train the full model and each single-branch variant; score on ``test``."""
    out = {}
    for name, flags in BRANCH_VARIANTS.items():
        variant = replace(mcfg, **flags)
        result = fit(train, val, tcfg, variant)
        reports = [evaluate_slide(result.params, s, variant, tcfg.eval_prompt_ratio, tcfg.seed) for s in test]
        out[name] = mean_slide_metrics(reports)
    return out
