"""``phg2st`` command line: synth / train / eval / sweep / cv.

Exit codes: 0 success, 1 numerical failure, 2 config or input error,
3 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .data import (
    FormatError,
    ValidationError,
    find_bundles,
    generate_synthetic_cohort,
    load_slide_bundle,
    save_slide_bundle,
    select_hvg,
    write_heatmap,
)
from .evaluation import (
    METRICS,
    CVSettings,
    cross_validate,
    evaluate_slide,
    prompt_ratio_sweep,
    report_from_slides,
    write_sweep_csv,
)
from .model import (
    CheckpointError,
    ConfigError,
    GraphConfig,
    ModelConfig,
    forward,
    load_checkpoint,
    prepare_slide,
    save_checkpoint,
)
from .tensor import make_rng
from .training import AdamState, NumericalError, fit, read_history, write_history

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_CHECKPOINT = 0, 1, 2, 3

log = logging.getLogger("phg2st")


def _echo(cfg: RunConfig) -> None:
    print("# resolved config")
    print(dump_config(cfg), end="")
    print("# ---")


def _load_many(paths) -> list:
    dirs = []
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"bundle path not found: {p}")
        found = find_bundles(p)
        if not found:
            raise FileNotFoundError(f"no slide bundles under: {p}")
        dirs.extend(found)
    return [load_slide_bundle(d) for d in dirs]


def _gene_panel(bundles, cfg: RunConfig) -> np.ndarray:
    names = bundles[0].gene_names
    k = min(cfg.data.n_genes or len(names), len(names))
    return select_hvg(bundles, k, cfg.data.hvg_mode)


# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out_dir: str) -> int:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    bundles = generate_synthetic_cohort(cfg.synth, cfg.cohort.n_patients, cfg.cohort.slides_per_patient, cfg.seed)
    for b in bundles:
        save_slide_bundle(b, out / b.slide_id)
        print(f"{b.slide_id} patient={b.patient_id} n={b.n} d={b.d} m={len(b.gene_names)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: str | None = None) -> int:
    train_b = _load_many(cfg.data.train)
    val_b = _load_many(cfg.data.val) if cfg.data.val else train_b
    if not train_b:
        raise ConfigError("data.train lists no bundles")

    init = adam = None
    start_epoch, best_pcc = 0, -np.inf
    if resume:
        params, meta, extra = load_checkpoint(resume)
        genes = np.array(meta["gene_index"], dtype=np.int64)
        final = {k[len("final."):]: v for k, v in extra.items() if k.startswith("final.")}
        for name, arr in final.items():
            params[name].data = arr.copy()
        init, adam = params, AdamState.from_arrays(extra)
        start_epoch, best_pcc = meta["epoch"] + 1, meta["best_pcc"]
    else:
        genes = _gene_panel(train_b, cfg)

    prep = lambda bs: [prepare_slide(b, genes, cfg.graph) for b in bs]  # noqa: E731
    result = fit(prep(train_b), prep(val_b), cfg.train, cfg.model, init, adam, start_epoch, best_pcc)

    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {f"final.{k}": v.data for k, v in result.final_params.items()}
    extra.update(result.adam.to_arrays())
    meta = {
        "config": cfg.to_dict(),
        "gene_index": genes.tolist(),
        "gene_names": [train_b[0].gene_names[j] for j in genes],
        "d_in": train_b[0].d,
        "epoch": result.last_epoch,
        "best_epoch": result.best_epoch,
        "best_pcc": result.best_pcc,
    }
    save_checkpoint(cfg.output.path("checkpoint"), result.params, meta, extra)
    history = result.history
    hist_path = cfg.output.path("history")
    if resume and hist_path.is_file():
        history = [h for h in read_history(hist_path) if h["epoch"] < start_epoch] + history
    write_history(history, hist_path)
    print(f"trained {len(result.history)} epoch(s); best epoch {result.best_epoch} val_pcc {result.best_pcc:.4f}")
    print(f"checkpoint: {cfg.output.path('checkpoint')}")
    print(f"history: {hist_path}")
    return EXIT_OK


def _load_for_eval(cfg: RunConfig, checkpoint: str):
    params, meta, _ = load_checkpoint(checkpoint)
    try:
        mcfg = ModelConfig(**meta["config"]["model"])
        graph = GraphConfig(**meta["config"]["graph"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header lacks a usable config: {exc}") from exc
    bundles = _load_many(cfg.data.test or cfg.data.train)
    names = tuple(meta["gene_names"])
    for b in bundles:
        if b.d != meta["d_in"]:
            raise CheckpointError(f"{b.slide_id}: feature width {b.d} but checkpoint expects {meta['d_in']}")
        missing = set(names) - set(b.gene_names)
        if missing:
            raise CheckpointError(f"{b.slide_id}: lacks {len(missing)} checkpoint gene(s)")
    if params["head.fused.w"].shape[1] != len(names):
        raise CheckpointError("checkpoint head width disagrees with its gene panel")
    slides = []
    for b in bundles:
        lookup = {g: j for j, g in enumerate(b.gene_names)}
        slides.append(prepare_slide(b, np.array([lookup[g] for g in names]), graph))
    return params, meta, mcfg, slides, names


def _print_table(rows: list[tuple[str, dict]]) -> None:
    print(f"{'slide':<20} {'MAE(↓)':>9} {'CCC(↑)':>9} {'PCC(↑)':>9}")
    for label, agg in rows:
        print(f"{label:<20} {agg['mae']:>9.4f} {agg['ccc']:>9.4f} {agg['pcc']:>9.4f}")


def cmd_eval(cfg: RunConfig, checkpoint: str, ratios=None, heatmaps=None) -> int:
    params, meta, mcfg, slides, names = _load_for_eval(cfg, checkpoint)
    seed = cfg.train.seed
    try:
        reports = [evaluate_slide(params, s, mcfg, cfg.train.eval_prompt_ratio, seed) for s in slides]
    except (ValueError, KeyError) as exc:  # checkpoint tensors do not fit the data
        raise CheckpointError(str(exc)) from exc
    report = report_from_slides(reports, names)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(cfg.output.path("report"))
    _print_table([(r.slide_id, r.aggregate) for r in reports] + [("mean", report.aggregate)])
    print(f"report: {cfg.output.path('report')}")
    if ratios:
        rows = prompt_ratio_sweep(params, slides, mcfg, ratios, seed)
        write_sweep_csv(rows, cfg.output.path("sweep"))
        print(f"sweep ({len(rows)} ratios): {cfg.output.path('sweep')}")
    if heatmaps:
        for s in slides:
            pred = forward(s, params, mcfg, cfg.train.eval_prompt_ratio, False, make_rng([seed, 3])).p_fused.data
            for gene in heatmaps:
                if gene not in names:
                    raise ConfigError(f"heatmap gene {gene!r} not in the checkpoint panel")
                j = names.index(gene)
                write_heatmap(pred[:, j], s.grid, out / f"{s.slide_id}_{gene}_pred.pgm", scale=8)
                write_heatmap(s.expr[:, j], s.grid, out / f"{s.slide_id}_{gene}_true.pgm", scale=8)
        print(f"heatmaps written to {out}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, checkpoint: str, ratios=None) -> int:
    params, meta, mcfg, slides, names = _load_for_eval(cfg, checkpoint)
    rows = prompt_ratio_sweep(params, slides, mcfg, ratios or cfg.eval.sweep_ratios, cfg.train.seed)
    Path(cfg.output.dir).mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, cfg.output.path("sweep"))
    for r in rows:
        print(f"ratio={r['ratio']:.3f} mae={r['mae']:.4f} ccc={r['ccc']:.4f} pcc={r['pcc']:.4f} pcc_all={r['pcc_all']:.4f}")
    return EXIT_OK


def cmd_cv(cfg: RunConfig, jobs: int = 1) -> int:
    roots = [cfg.data.root] if cfg.data.root else list(cfg.data.train)
    if not roots:
        raise ConfigError("cv needs data.root (or data.train) pointing at slide bundles")
    bundles = _load_many(roots)
    settings = CVSettings(
        train=cfg.train,
        model=cfg.model,
        graph=cfg.graph,
        n_genes=cfg.data.n_genes,
        hvg_mode=cfg.data.hvg_mode,
        std_over=cfg.eval.std_over,
    )
    report = cross_validate(bundles, settings, jobs=jobs)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(cfg.output.path("cv_summary"))
    with open(cfg.output.path("cv_folds"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "val_patient", "best_epoch", *METRICS])
        for row in report.per_fold:
            w.writerow([row["fold"], row["val_patient"], row["best_epoch"], *(repr(row[k]) for k in METRICS)])
    _print_table([(f"fold {r['fold']}", r) for r in report.per_fold])
    s = report.summary
    print("summary  " + "  ".join(f"{k.upper()} {s[k]['mean']:.3f}±{s[k]['std']:.3f}" for k in ("mae", "ccc", "pcc")))
    print(f"summary: {cfg.output.path('cv_summary')}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _ratios(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phg2st", description="Predict spot gene expression from histology features")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. train.max_epochs=2")

    p = sub.add_parser("synth", help="write synthetic slide bundles")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train and write checkpoint + history")
    common(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratios", type=_ratios, help="comma-separated inference prompt ratios for a sweep CSV")
    p.add_argument("--heatmaps", type=lambda s: [g for g in s.split(",") if g], help="comma-separated gene names")

    p = sub.add_parser("sweep", help="prompt-ratio sweep for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratios", type=_ratios)

    p = sub.add_parser("cv", help="leave-one-patient-out cross-validation")
    common(p)
    p.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        _echo(cfg)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.ratios, args.heatmaps)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.checkpoint, args.ratios)
        if args.command == "cv":
            return cmd_cv(cfg, args.jobs)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, FormatError, ValidationError, FileNotFoundError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
