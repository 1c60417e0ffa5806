"""Dual-branch hypergraph network with an expression prompt, composite loss and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ExpressionMatrix, SlideBundle, assemble_neighbor_features, normalize_counts
from .hypergraph import build_slide_hypergraph, neighbor_propagation, wrap_conv_block
from .tensor import Tensor, make_rng

CKPT_MAGIC = b"PHGC"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    d_prompt: int = 256
    d_attn: int = 256
    n_heads: int = 8
    cross_heads: int = 8
    n_blocks: int = 2
    mlp_ratio: int = 4
    dropout: float = 0.1
    attention_scope: str = "global"  # or "local": each query sees only its own spot
    cross_residual: bool = False  # T_n^G = T_n + CrossAttn(...) instead of CrossAttn(...) alone
    use_spot_branch: bool = True
    use_neighbor_branch: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_attn % self.cross_heads or self.d_model % self.cross_heads:
            raise ConfigError("d_attn and d_model must be divisible by cross_heads")
        if self.attention_scope not in ("global", "local"):
            raise ConfigError(f"unknown attention_scope {self.attention_scope!r}")
        if not (self.use_spot_branch or self.use_neighbor_branch):
            raise ConfigError("at least one branch must stay enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class GraphConfig:
    k_hyper: int = 4
    norm_mode: str = "minmax"
    weight_mode: str = "affinity"


@dataclass
class PreparedSlide:
    """A slide with its expression panel and both hypergraph operators precomputed."""

    slide_id: str
    patient_id: str
    spot_features: np.ndarray
    neighbor_values: np.ndarray
    neighbor_valid: np.ndarray
    slide_prop: np.ndarray
    neighbor_prop: np.ndarray
    expr: np.ndarray
    gene_index: np.ndarray
    grid: np.ndarray

    @property
    def n(self) -> int:
        return self.expr.shape[0]


def prepare_slide(bundle: SlideBundle, gene_index, graph: GraphConfig = GraphConfig()) -> PreparedSlide:
    expr: ExpressionMatrix = normalize_counts(bundle.counts, gene_index)
    neighbors = assemble_neighbor_features(bundle)
    hg = build_slide_hypergraph(bundle.spot_features, bundle.coords, graph.k_hyper, graph.norm_mode, graph.weight_mode)
    return PreparedSlide(
        slide_id=bundle.slide_id,
        patient_id=bundle.patient_id,
        spot_features=bundle.spot_features,
        neighbor_values=neighbors.values,
        neighbor_valid=neighbors.valid,
        slide_prop=hg.propagation_matrix(),
        neighbor_prop=neighbor_propagation(neighbors, graph.k_hyper, graph.weight_mode),
        expr=expr.values,
        gene_index=expr.gene_index,
        grid=bundle.grid,
    )


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, d_in: int, m: int, seed: int) -> "OrderedDict[str, Tensor]":
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    cfg.validate()
    rng = make_rng(seed)
    d, dp, da = cfg.d_model, cfg.d_prompt, cfg.d_attn
    layout: list[tuple[str, tuple[int, ...]]] = []

    def lin(name, fan_in, fan_out, bias=True):
        layout.append((f"{name}.w", (fan_in, fan_out)))
        if bias:
            layout.append((f"{name}.b", (fan_out,)))

    def ln(name, width):
        layout.append((f"{name}.g", (width,)))
        layout.append((f"{name}.b", (width,)))

    lin("prompt.proj", m, dp)
    lin("prompt.fc", dp, dp)
    ln("prompt.ln", dp)
    for branch in ("spot", "neighbor"):
        lin(f"{branch}.conv", d_in, d, bias=False)
        ln(f"{branch}.conv_ln", d)
        for i in range(cfg.n_blocks):
            pre = f"{branch}.block{i}"
            ln(f"{pre}.ln1", d)
            for proj in ("q", "k", "v", "o"):
                lin(f"{pre}.attn.{proj}", d, d)
            ln(f"{pre}.ln2", d)
            lin(f"{pre}.mlp1", d, cfg.mlp_ratio * d)
            lin(f"{pre}.mlp2", cfg.mlp_ratio * d, d)
    lin("cross.q", dp, da)
    lin("cross.k", d, da)
    lin("cross.v", d, d)
    lin("cross.o", d, d)
    for head in ("spot", "neighbor", "fused"):
        lin(f"head.{head}", d, m)

    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in layout:
        if name.endswith(".g"):
            value = np.ones(shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = _glorot(rng, *shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def copy_params(params) -> "OrderedDict[str, Tensor]":
    return OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in params.items())


# ---------------------------------------------------------------------------
# building blocks


def mask_expression(y: np.ndarray, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Keep ``floor(ratio * n)`` uniformly chosen spot rows as the prompt; zero the rest."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"prompt ratio {ratio} outside [0, 1]")
    n = y.shape[0]
    # tolerance absorbs binary rounding such as 0.29 * 100 = 28.999999999999996
    n_keep = math.floor(ratio * n + 1e-9)
    kept = np.zeros(n, dtype=bool)
    kept[rng.permutation(n)[:n_keep]] = True
    return np.where(kept[:, None], y, 0.0), kept


def _lin(x: Tensor, params, name: str) -> Tensor:
    return T.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def _ln(x: Tensor, params, name: str) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def encode_prompt(y_masked, params, p_drop: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """LN(Dropout(FC(GELU(y W))))."""
    h = T.gelu(_lin(T.as_tensor(y_masked), params, "prompt.proj"))
    h = T.dropout(_lin(h, params, "prompt.fc"), p_drop, training, rng)
    return _ln(h, params, "prompt.ln")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, width = x.shape
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, width = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * width)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over rows; returns (output, weights)."""
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(q.shape[1] // heads)
    weights = T.softmax(T.mul(T.matmul(qh, kh.transpose(0, 2, 1)), scale), axis=-1)
    return _merge_heads(T.matmul(weights, vh)), weights


def transformer_block(tokens: Tensor, params, prefix: str, n_heads: int, p_drop=0.0, training=False, rng=None) -> Tensor:
    """Pre-LN block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    if tokens.shape[1] % n_heads:
        raise ConfigError(f"width {tokens.shape[1]} not divisible by {n_heads} heads")
    h = _ln(tokens, params, f"{prefix}.ln1")
    q, k, v = (_lin(h, params, f"{prefix}.attn.{p}") for p in "qkv")
    a, _ = attention(q, k, v, n_heads)
    x = tokens + T.dropout(_lin(a, params, f"{prefix}.attn.o"), p_drop, training, rng)
    h = T.gelu(_lin(_ln(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp1"))
    return x + T.dropout(_lin(h, params, f"{prefix}.mlp2"), p_drop, training, rng)


def neighbor_pool(tokens: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over each spot's valid neighbour tokens: (n, 25, d) -> (n, d)."""
    weights = valid / valid.sum(axis=1, keepdims=True)
    return T.tsum(T.mul(tokens, weights[:, :, None]), axis=1)


def cross_attention(prompt: Tensor, tokens: Tensor, params, heads: int = 1, scope: str = "global", return_weights=False):
    """Prompt rows query the neighbour tokens of all spots (``scope="global"``)."""
    v = _lin(tokens, params, "cross.v")
    if scope == "local":
        out, weights = v, None
    else:
        q = _lin(prompt, params, "cross.q")
        k = _lin(tokens, params, "cross.k")
        out, weights = attention(q, k, v, heads)
    out = _lin(out, params, "cross.o")
    return (out, weights) if return_weights else out


def fuse(t_n_g: Tensor, t_s: Tensor) -> Tensor:
    if t_n_g.shape != t_s.shape:
        raise T.DimensionError(f"fuse: {t_n_g.shape} vs {t_s.shape}")
    return T.add(t_n_g, t_s)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardOutputs:
    p_fused: Tensor
    p_spot: Tensor | None
    p_neighbor: Tensor | None
    t_s: Tensor | None
    t_n: Tensor | None
    t_n_g: Tensor | None
    z: Tensor
    kept: np.ndarray = field(repr=False)


def forward(
    slide: PreparedSlide,
    params,
    cfg: ModelConfig,
    prompt_ratio: float,
    training: bool,
    rng: np.random.Generator,
) -> ForwardOutputs:
    mask_rng, drop_rng = rng.spawn(2)
    p = cfg.dropout
    y_masked, kept = mask_expression(slide.expr, prompt_ratio, mask_rng)

    t_s = None
    if cfg.use_spot_branch:
        h_s = wrap_conv_block(
            Tensor(slide.spot_features), slide.slide_prop, params["spot.conv.w"], p, training, drop_rng,
            params["spot.conv_ln.g"], params["spot.conv_ln.b"],
        )
        t_s = h_s
        for i in range(cfg.n_blocks):
            t_s = transformer_block(t_s, params, f"spot.block{i}", cfg.n_heads, p, training, drop_rng)

    t_n = t_n_g = None
    if cfg.use_neighbor_branch:
        h_n = wrap_conv_block(
            Tensor(slide.neighbor_values), slide.neighbor_prop, params["neighbor.conv.w"], p, training, drop_rng,
            params["neighbor.conv_ln.g"], params["neighbor.conv_ln.b"],
        )
        t_n = neighbor_pool(h_n, slide.neighbor_valid)
        for i in range(cfg.n_blocks):
            t_n = transformer_block(t_n, params, f"neighbor.block{i}", cfg.n_heads, p, training, drop_rng)
        phi_p = encode_prompt(y_masked, params, p, training, drop_rng)
        t_n_g = cross_attention(phi_p, t_n, params, cfg.cross_heads, cfg.attention_scope)
        if cfg.cross_residual:
            t_n_g = T.add(t_n, t_n_g)

    if t_s is not None and t_n_g is not None:
        z = fuse(t_n_g, t_s)
    else:
        z = t_s if t_s is not None else t_n_g

    return ForwardOutputs(
        p_fused=_lin(z, params, "head.fused"),
        p_spot=_lin(t_s, params, "head.spot") if t_s is not None else None,
        p_neighbor=_lin(t_n_g, params, "head.neighbor") if t_n_g is not None else None,
        t_s=t_s,
        t_n=t_n,
        t_n_g=t_n_g,
        z=z,
        kept=kept,
    )


def mse(pred: Tensor, target) -> Tensor:
    return T.mean(T.square(T.sub(pred, T.as_tensor(target))))


def weighted_pair(pred: Tensor, target, lam: float) -> Tensor:
    """(1 - lam) * MSE + lam * MSE of the same head.

    Both terms are the same quantity, so the weights are summed first; this
    keeps the result bit-identical for every ``lam`` instead of drifting by an
    ulp through two separately rounded products.
    """
    return T.mul(mse(pred, target), (1.0 - lam) + lam)


def loss_terms(out: ForwardOutputs, g, lam: float) -> dict[str, Tensor]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    terms = {"fused": mse(out.p_fused, g)}
    if out.p_spot is not None:
        terms["spot"] = weighted_pair(out.p_spot, g, lam)
    if out.p_neighbor is not None:
        terms["neighbor"] = weighted_pair(out.p_neighbor, g, lam)
    return terms


def compute_loss(out: ForwardOutputs, g, lam: float) -> Tensor:
    terms = loss_terms(out, g, lam)
    total = terms["fused"]
    for key in ("spot", "neighbor"):
        if key in terms:
            total = T.add(terms[key], total)
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, meta: dict, extra: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``PHGC`` | u32 version | u64 header length | JSON header | float64 LE payloads."""
    arrays = [(k, v.data) for k, v in params.items()]
    arrays += list((extra or {}).items())
    header = dict(meta)
    header["tensors"] = [{"name": k, "shape": list(a.shape), "group": "param" if k in params else "extra"} for k, a in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(params, meta, extra)``; raises :class:`CheckpointError` on any malformation."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, hlen = struct.unpack("<IQ", raw[4:16])
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    offset = 16 + hlen
    params: OrderedDict[str, Tensor] = OrderedDict()
    extra: dict[str, np.ndarray] = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        nbytes = 8 * math.prod(shape)
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
        if entry["group"] == "param":
            params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        else:
            extra[entry["name"]] = arr
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header, extra


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
