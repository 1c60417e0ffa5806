"""Adam with step decay, per-iteration prompt resampling and PCC early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import ConfigError, ModelConfig, PreparedSlide, compute_loss, copy_params, forward, init_params
from .tensor import make_rng

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "lr", "val_pcc", "val_ccc", "val_mae")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    step_size: int = 50
    decay: float = 0.9
    max_epochs: int = 200
    patience: int = 20
    lam: float = 0.3
    k_hyper: int = 4
    train_prompt_ratio: float = 0.3
    eval_prompt_ratio: float = 0.1
    val_prompt_ratio: float | None = None  # None -> eval_prompt_ratio
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_head_bias: bool = True

    def validate(self) -> None:
        if self.lr <= 0 or self.decay <= 0 or self.step_size <= 0 or self.max_epochs <= 0:
            raise ConfigError("lr, decay, step_size and max_epochs must be positive")
        if self.patience < 0 or self.k_hyper < 1:
            raise ConfigError("patience must be >= 0 and k_hyper >= 1")
        for name in ("lam", "train_prompt_ratio", "eval_prompt_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.val_prompt_ratio is not None and not 0.0 <= self.val_prompt_ratio <= 1.0:
            raise ConfigError("val_prompt_ratio must lie in [0, 1]")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls()
        for key, a in arrays.items():
            if key.startswith("adam.m."):
                state.m[key[7:]] = a.copy()
            elif key.startswith("adam.v."):
                state.v[key[7:]] = a.copy()
        if "adam.t" in arrays:
            state.t = int(arrays["adam.t"][0])
        return state


def adam_step(params, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update in place; parameters without a gradient are skipped."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr * cfg.decay ** (epoch // cfg.step_size)


@dataclass
class FitResult:
    params: dict
    history: list[dict]
    best_epoch: int
    best_pcc: float
    final_params: dict
    adam: AdamState
    last_epoch: int


def _mean_val_metrics(params, slides, mcfg, ratio, seed):
    from .evaluation import evaluate_slide

    reports = [evaluate_slide(params, s, mcfg, ratio, seed) for s in slides]
    return {k: float(np.mean([r.aggregate[k] for r in reports])) for k in ("pcc", "ccc", "mae")}


def fit(
    train_slides: Sequence[PreparedSlide],
    val_slides: Sequence[PreparedSlide],
    cfg: TrainConfig,
    mcfg: ModelConfig,
    init: dict | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    best_pcc: float = -math.inf,
) -> FitResult:
    """Train on whole slides (one Adam step per slide per epoch).

    After every epoch the model is scored by mean validation PCC over masked
    spots; the best-scoring parameters are returned.  Training stops after
    ``cfg.max_epochs`` total epochs or once more than ``cfg.patience``
    consecutive epochs fail to strictly improve validation PCC.
    """
    if not train_slides or not val_slides:
        raise ConfigError("fit needs at least one training and one validation slide")
    cfg.validate()
    m = train_slides[0].expr.shape[1]
    d_in = train_slides[0].spot_features.shape[1]
    for s in list(train_slides) + list(val_slides):
        if s.expr.shape[1] != m or s.spot_features.shape[1] != d_in:
            raise ConfigError(f"slide {s.slide_id} does not share the gene panel / feature width")

    if init is None:
        params = init_params(mcfg, d_in, m, cfg.seed)
        if cfg.init_head_bias:
            gene_mean = np.concatenate([s.expr for s in train_slides]).mean(axis=0)
            for head in ("spot", "neighbor", "fused"):
                params[f"head.{head}.b"].data[:] = gene_mean
    else:
        params = init
    adam = adam or AdamState()
    val_ratio = cfg.eval_prompt_ratio if cfg.val_prompt_ratio is None else cfg.val_prompt_ratio

    history: list[dict] = []
    best = copy_params(params)
    best_epoch = start_epoch - 1
    stale = 0
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        epoch_rng = make_rng([cfg.seed, 2, epoch])
        order = epoch_rng.permutation(len(train_slides))
        losses = []
        for idx in order:
            slide = train_slides[idx]
            out = forward(slide, params, mcfg, cfg.train_prompt_ratio, True, epoch_rng)
            loss = compute_loss(out, slide.expr, cfg.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, slide {slide.slide_id}")
            T.zero_grad(params.values())
            loss.backward()
            adam_step(params, adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            losses.append(value)
        val = _mean_val_metrics(params, val_slides, mcfg, val_ratio, cfg.seed)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "lr": lr,
            "val_pcc": val["pcc"],
            "val_ccc": val["ccc"],
            "val_mae": val["mae"],
        }
        history.append(row)
        log.info("epoch %d loss %.5f val_pcc %.4f", epoch, row["train_loss"], row["val_pcc"])
        if val["pcc"] > best_pcc:
            best_pcc, best_epoch, stale = val["pcc"], epoch, 0
            best = copy_params(params)
        else:
            stale += 1
            if stale > cfg.patience:
                break
    return FitResult(
        params=best,
        history=history,
        best_epoch=best_epoch,
        best_pcc=best_pcc,
        final_params=params,
        adam=adam,
        last_epoch=epoch,
    )


def write_history(history: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
    return path


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
