"""The tower network: Transformer-encoder backbone plus projection, transform
classifier, and binary-discriminator heads.

The model is functional: all weights live in an explicit name->tensor dict so
checkpointing is deterministic and gradients can be checked parameter by
parameter against finite differences. Autograd supplies exact reverse-mode
gradients; the Adam update is implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import archive, seeds
from .data import Episode
from .errors import ConfigError, ContractError, NumericError, ParseError, RunningStatsError

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PROJ_HEAD = "proj"
CLS_HEAD = "cls"
DISC_HEAD = "disc"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs; defaults follow the reference recipe (two pre-norm
    encoder layers, one attention head, feed-forward width twice the input
    length, 128-dim projection)."""

    in_channels: int
    input_len: int
    n_classes: int = 2
    n_layers: int = 2
    n_heads: int = 1
    model_dim: int = 64
    ffn_dim: int | None = None
    proj_dim: int = 128
    dropout_rate: float = 0.0
    heads: tuple[str, ...] = (PROJ_HEAD, CLS_HEAD)
    dtype: str = "float32"

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.input_len

    def validate(self) -> None:
        if self.in_channels < 1 or self.input_len < 1:
            raise ConfigError("in_channels and input_len must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.n_heads != 1:
            raise ConfigError("only single-head attention is supported")
        if self.n_classes < 2 and CLS_HEAD in self.heads:
            raise ConfigError("n_classes must be >= 2")
        if self.model_dim < 2 or self.model_dim % 2 != 0:
            raise ConfigError("model_dim must be an even integer >= 2")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        for head in self.heads:
            if head not in (PROJ_HEAD, CLS_HEAD, DISC_HEAD):
                raise ConfigError(f"unknown head {head!r}")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "input_len": self.input_len,
            "n_classes": self.n_classes,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "model_dim": self.model_dim,
            "ffn_dim": self.ffn_dim,
            "proj_dim": self.proj_dim,
            "dropout_rate": self.dropout_rate,
            "heads": list(self.heads),
            "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EncoderConfig":
        doc = dict(doc)
        doc["heads"] = tuple(doc.get("heads", (PROJ_HEAD, CLS_HEAD)))
        return EncoderConfig(**doc)


@dataclass
class ModelParams:
    """All weights of one tower, plus batch-norm running statistics."""

    config: EncoderConfig
    weights: dict[str, torch.Tensor]
    bn_mean: torch.Tensor | None = None
    bn_var: torch.Tensor | None = None
    bn_batches: int = 0

    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    def leaves(self) -> list[tuple[str, torch.Tensor]]:
        return sorted(self.weights.items())

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.weights.values())

    def clone(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            weights={k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in self.weights.items()},
            bn_mean=None if self.bn_mean is None else self.bn_mean.clone(),
            bn_var=None if self.bn_var is None else self.bn_var.clone(),
            bn_batches=self.bn_batches,
        )

    def astype(self, dtype: str) -> "ModelParams":
        target = _DTYPES[dtype]
        return ModelParams(
            config=replace(self.config, dtype=dtype),
            weights={k: v.detach().clone().to(target) for k, v in self.weights.items()},
            bn_mean=None if self.bn_mean is None else self.bn_mean.to(target),
            bn_var=None if self.bn_var is None else self.bn_var.to(target),
            bn_batches=self.bn_batches,
        )

    def check_finite(self) -> None:
        for name, tensor in self.weights.items():
            if not torch.isfinite(tensor).all():
                raise NumericError(f"parameter {name} contains non-finite values")


def _weight_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) triples; fan_in None means init to zeros/ones."""
    d = config.model_dim
    ffn = config.ffn_width
    shapes: list[tuple[str, tuple[int, ...], int | None]] = [
        ("embed.w", (config.in_channels, d), config.in_channels),
        ("embed.b", (d,), None),
    ]
    for layer in range(config.n_layers):
        p = f"enc{layer}."
        shapes += [
            (p + "ln1.g", (d,), None),
            (p + "ln1.b", (d,), None),
            (p + "attn.wq", (d, d), d),
            (p + "attn.bq", (d,), None),
            (p + "attn.wk", (d, d), d),
            (p + "attn.bk", (d,), None),
            (p + "attn.wv", (d, d), d),
            (p + "attn.bv", (d,), None),
            (p + "attn.wo", (d, d), d),
            (p + "attn.bo", (d,), None),
            (p + "ln2.g", (d,), None),
            (p + "ln2.b", (d,), None),
            (p + "ffn.w1", (d, ffn), d),
            (p + "ffn.b1", (ffn,), None),
            (p + "ffn.w2", (ffn, d), ffn),
            (p + "ffn.b2", (d,), None),
        ]
    if PROJ_HEAD in config.heads:
        shapes += [
            ("proj.w1", (d, config.proj_dim), d),
            ("proj.b1", (config.proj_dim,), None),
            ("proj.bn.g", (config.proj_dim,), None),
            ("proj.bn.b", (config.proj_dim,), None),
            ("proj.w2", (config.proj_dim, config.proj_dim), config.proj_dim),
            ("proj.b2", (config.proj_dim,), None),
        ]
    if CLS_HEAD in config.heads:
        shapes += [
            ("cls.w", (d, config.n_classes), d),
            ("cls.b", (config.n_classes,), None),
        ]
    if DISC_HEAD in config.heads:
        shapes += [
            ("disc.w", (d, 1), d),
            ("disc.b", (1,), None),
        ]
    return shapes


_ONES_SUFFIXES = ("ln1.g", "ln2.g", "bn.g")


def init_params(config: EncoderConfig, seed: int = 0) -> ModelParams:
    """Scaled-uniform fan-in initialization: |w| <= sqrt(6 / fan_in).

    Biases start at zero, normalization gains at one. Deterministic per seed.
    """
    config.validate()
    rng = seeds.substream(seed, seeds.INIT)
    dtype = _DTYPES[config.dtype]
    weights: dict[str, torch.Tensor] = {}
    for name, shape, fan_in in _weight_shapes(config):
        if fan_in is None:
            init = np.ones(shape) if name.endswith(_ONES_SUFFIXES) else np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            init = rng.uniform(-bound, bound, shape)
        weights[name] = torch.tensor(init, dtype=dtype, requires_grad=True)
    bn_mean = bn_var = None
    if PROJ_HEAD in config.heads:
        bn_mean = torch.zeros(config.proj_dim, dtype=dtype)
        bn_var = torch.ones(config.proj_dim, dtype=dtype)
    return ModelParams(config=config, weights=weights, bn_mean=bn_mean, bn_var=bn_var)


@lru_cache(maxsize=32)
def _positional_encoding(length: int, dim: int, dtype_name: str) -> torch.Tensor:
    position = np.arange(length)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div)
    return torch.tensor(pe, dtype=_DTYPES[dtype_name])


def _layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + LN_EPS) * gain + bias


def episodes_to_tensors(episodes: list[Episode], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.tensor(np.stack([ep.values for ep in episodes]), dtype=dtype)
    mask = torch.tensor(np.stack([ep.mask for ep in episodes]), dtype=torch.bool)
    return x, mask


def forward_backbone(
    params: ModelParams,
    x: torch.Tensor,
    mask: torch.Tensor,
    train: bool = False,
    capture_attention: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
    """Encode a batch [B, channels, length] into features [B, model_dim].

    Channel vectors are embedded per timestep, sinusoidal positions added,
    then run through pre-norm encoder layers whose attention logits are masked
    at padded key positions; the output is the mean over unpadded timesteps.
    """
    cfg = params.config
    w = params.weights
    if x.ndim != 3 or x.shape[1] != cfg.in_channels:
        raise ContractError(f"expected input [B, {cfg.in_channels}, L], got {tuple(x.shape)}")
    if not mask.any(dim=1).all():
        raise ContractError("an all-padding episode cannot be encoded")
    length = x.shape[2]
    h = x.transpose(1, 2) @ w["embed.w"] + w["embed.b"]
    h = h + _positional_encoding(length, cfg.model_dim, cfg.dtype)[:length].to(h.dtype)
    key_pad = ~mask  # [B, L]
    scale = 1.0 / math.sqrt(cfg.model_dim)
    attention_maps: list[torch.Tensor] = []
    for layer in range(cfg.n_layers):
        p = f"enc{layer}."
        a_in = _layer_norm(h, w[p + "ln1.g"], w[p + "ln1.b"])
        q = a_in @ w[p + "attn.wq"] + w[p + "attn.bq"]
        k = a_in @ w[p + "attn.wk"] + w[p + "attn.bk"]
        v = a_in @ w[p + "attn.wv"] + w[p + "attn.bv"]
        scores = torch.bmm(q, k.transpose(1, 2)) * scale
        scores = scores.masked_fill(key_pad[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if capture_attention:
            attention_maps.append(attn.detach())
        ctx = torch.bmm(attn, v) @ w[p + "attn.wo"] + w[p + "attn.bo"]
        if train and cfg.dropout_rate > 0:
            ctx = torch.nn.functional.dropout(ctx, cfg.dropout_rate, training=True)
        h = h + ctx
        f_in = _layer_norm(h, w[p + "ln2.g"], w[p + "ln2.b"])
        f_out = torch.relu(f_in @ w[p + "ffn.w1"] + w[p + "ffn.b1"]) @ w[p + "ffn.w2"] + w[p + "ffn.b2"]
        if train and cfg.dropout_rate > 0:
            f_out = torch.nn.functional.dropout(f_out, cfg.dropout_rate, training=True)
        h = h + f_out
    mask_f = mask.to(h.dtype)
    feats = (h * mask_f[:, :, None]).sum(dim=1) / mask_f.sum(dim=1, keepdim=True)
    if capture_attention:
        return feats, attention_maps
    return feats


def forward_projection(
    params: ModelParams,
    feats: torch.Tensor,
    train: bool = False,
    update_stats: bool | None = None,
) -> torch.Tensor:
    """Projection head: linear -> batch norm -> ReLU -> linear.

    Train mode normalizes with batch statistics (and, unless disabled,
    folds them into the running statistics); eval mode uses the running
    statistics and refuses to run before any train-mode update.
    """
    w = params.weights
    if "proj.w1" not in w:
        raise ContractError("this model was built without a projection head")
    z = feats @ w["proj.w1"] + w["proj.b1"]
    if train:
        mean = z.mean(dim=0)
        var = z.var(dim=0, unbiased=False)
        if update_stats is None or update_stats:
            with torch.no_grad():
                params.bn_mean.mul_(1.0 - BN_MOMENTUM).add_(BN_MOMENTUM * mean.detach())
                params.bn_var.mul_(1.0 - BN_MOMENTUM).add_(BN_MOMENTUM * var.detach())
            params.bn_batches += 1
    else:
        if params.bn_batches == 0:
            raise RunningStatsError("projection running statistics are uninitialized; train first")
        mean, var = params.bn_mean, params.bn_var
    z = (z - mean) / torch.sqrt(var + BN_EPS) * w["proj.bn.g"] + w["proj.bn.b"]
    return torch.relu(z) @ w["proj.w2"] + w["proj.b2"]


def forward_classifier(params: ModelParams, feats: torch.Tensor) -> torch.Tensor:
    w = params.weights
    if "cls.w" not in w:
        raise ContractError("this model was built without a classifier head")
    return feats @ w["cls.w"] + w["cls.b"]


def forward_discriminator(params: ModelParams, feats: torch.Tensor) -> torch.Tensor:
    w = params.weights
    if "disc.w" not in w:
        raise ContractError("this model was built without a discriminator head")
    return (feats @ w["disc.w"] + w["disc.b"]).squeeze(-1)


def backward(loss: torch.Tensor, params: ModelParams) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of a scalar loss for every parameter.

    Parameters not on the loss path get zero gradients.
    """
    if loss.ndim != 0:
        raise ContractError("backward expects a scalar loss")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss: {loss.item()!r}")
    names = [name for name, _ in params.leaves()]
    tensors = [params.weights[name] for name in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        name: (torch.zeros_like(tensor) if grad is None else grad)
        for name, tensor, grad in zip(names, tensors, grads)
    }


@dataclass
class AdamState:
    """First/second moment estimates and step counter."""

    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ModelParams,
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """Standard bias-corrected Adam update, applied in place."""
    if not state.m:
        for name, tensor in params.weights.items():
            state.m[name] = torch.zeros_like(tensor)
            state.v[name] = torch.zeros_like(tensor)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    with torch.no_grad():
        for name, tensor in params.weights.items():
            grad = grads[name]
            if grad.shape != tensor.shape:
                raise ContractError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(tensor.shape)} for {name}")
            state.m[name].mul_(beta1).add_((1.0 - beta1) * grad)
            state.v[name].mul_(beta2).add_((1.0 - beta2) * grad * grad)
            m_hat = state.m[name] / c1
            v_hat = state.v[name] / c2
            tensor.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))
    return params, state


def export_attention(params: ModelParams, episode: Episode) -> list[np.ndarray]:
    """Per-layer attention weight matrices [L, L] for one episode (eval mode).

    Rows sum to one over unpadded keys; padded key columns are exactly zero.
    """
    x, mask = episodes_to_tensors([episode], params.torch_dtype())
    with torch.no_grad():
        _, maps = forward_backbone(params, x, mask, train=False, capture_attention=True)
    return [m[0].numpy() for m in maps]


def save_attention_csv(attention: list[np.ndarray], path: str | Path) -> None:
    """Long-form CSV: layer, query, key, weight."""
    lines = ["layer,query,key,weight"]
    for layer, mat in enumerate(attention):
        for qi in range(mat.shape[0]):
            for ki in range(mat.shape[1]):
                lines.append(f"{layer},{qi},{ki},{float(mat[qi, ki])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


CHECKPOINT_FORMAT = "novact-checkpoint"


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    meta: dict | None = None,
    adam_state: AdamState | None = None,
) -> None:
    """Persist a tower: config, weights, running stats, optional Adam state."""
    tensors = {f"w/{name}": tensor.detach().numpy() for name, tensor in params.weights.items()}
    if params.bn_mean is not None:
        tensors["bn/mean"] = params.bn_mean.numpy()
        tensors["bn/var"] = params.bn_var.numpy()
    if adam_state is not None and adam_state.m:
        for name, tensor in adam_state.m.items():
            tensors[f"opt/m/{name}"] = tensor.numpy()
        for name, tensor in adam_state.v.items():
            tensors[f"opt/v/{name}"] = tensor.numpy()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "bn_batches": params.bn_batches,
        "adam_t": adam_state.t if adam_state is not None else None,
        "meta": meta or {},
    }
    archive.save_tensors(path, doc, tensors)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict, AdamState | None]:
    meta, tensors = archive.load_tensors(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: not a checkpoint file")
    config = EncoderConfig.from_dict(meta["config"])
    dtype = _DTYPES[config.dtype]
    weights = {
        name[2:]: torch.tensor(arr, dtype=dtype, requires_grad=True)
        for name, arr in tensors.items()
        if name.startswith("w/")
    }
    params = ModelParams(
        config=config,
        weights=weights,
        bn_mean=torch.tensor(tensors["bn/mean"], dtype=dtype) if "bn/mean" in tensors else None,
        bn_var=torch.tensor(tensors["bn/var"], dtype=dtype) if "bn/var" in tensors else None,
        bn_batches=int(meta["bn_batches"]),
    )
    adam_state = None
    if meta.get("adam_t") is not None:
        adam_state = AdamState(
            m={n[6:]: torch.tensor(a, dtype=dtype) for n, a in tensors.items() if n.startswith("opt/m/")},
            v={n[6:]: torch.tensor(a, dtype=dtype) for n, a in tensors.items() if n.startswith("opt/v/")},
            t=int(meta["adam_t"]),
        )
    return params, meta.get("meta", {}), adam_state
