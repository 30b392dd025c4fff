"""Discriminative representation learning for one tower.

Builds multi-transform view batches (one strong transform per view plus a
weakly-transformed positive partner), optimizes the contrastive objective with
same-episode multi-transform negatives together with a transform classifier,
and materializes the per-transform bank of training representations used by
the detector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import seeds
from .augment import TransformKind, TransformParams, transform_batch
from .cst import CSTSet
from .data import Episode
from .encoder import (
    AdamState,
    EncoderConfig,
    ModelParams,
    adam_step,
    backward,
    episodes_to_tensors,
    forward_backbone,
    forward_classifier,
    forward_projection,
    init_params,
)
from .errors import ConfigError, ContractError, InputError, NumericError, TrainingDiverged

logger = logging.getLogger(__name__)

SAME_INDEX = "same_index"
ALL_INDICES = "all_indices"
POSITIVE_AFTER = "after"
POSITIVE_BEFORE = "before"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    tau: float = 0.5
    lr: float = 3e-4
    con_weight: float = 1.0
    cls_weight: float = 1.0
    positive_order: str = POSITIVE_AFTER
    batch_negatives: str = SAME_INDEX
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.positive_order not in (POSITIVE_AFTER, POSITIVE_BEFORE):
            raise ConfigError(f"positive_order must be '{POSITIVE_AFTER}' or '{POSITIVE_BEFORE}'")
        if self.batch_negatives not in (SAME_INDEX, ALL_INDICES):
            raise ConfigError(f"batch_negatives must be '{SAME_INDEX}' or '{ALL_INDICES}'")


@dataclass
class ViewBatch:
    """Primary and positive views for every (episode, transform index) pair.

    primary[i, j] is the j-th transform of episode i; positive[i, j] is its
    weakly-shifted partner. Both carry transform label j; total row count is
    2 * B * (K + 1).
    """

    primary: np.ndarray  # [B, K+1, D, L]
    positive: np.ndarray  # [B, K+1, D, L]
    mask: np.ndarray  # [B, L]
    eids: np.ndarray  # [B]

    @property
    def batch_size(self) -> int:
        return self.primary.shape[0]

    @property
    def n_views(self) -> int:
        return self.primary.shape[1]

    @property
    def n_rows(self) -> int:
        return 2 * self.batch_size * self.n_views

    def stacked(self) -> np.ndarray:
        """Rows ordered (episode, transform, primary-then-positive)."""
        both = np.stack([self.primary, self.positive], axis=2)  # [B, K+1, 2, D, L]
        return both.reshape(-1, *both.shape[3:])

    def labels(self) -> np.ndarray:
        j = np.arange(self.n_views)
        return np.repeat(np.tile(j, self.batch_size), 2)

    def row_mask(self) -> np.ndarray:
        return np.repeat(self.mask, 2 * self.n_views, axis=0)


def build_views(
    episodes: list[Episode],
    cst: CSTSet,
    positive_kind: TransformKind,
    aug_params: TransformParams,
    seed: int,
    positive_order: str = POSITIVE_AFTER,
) -> ViewBatch:
    """Construct a view batch for one training step.

    Primary views apply each transform in the set (identity at index 0);
    positive partners apply the weak transform with fresh per-index
    randomness, after the strong transform by default.
    """
    if not episodes:
        raise InputError("build_views needs at least one episode")
    if positive_kind in cst.kinds[1:]:
        logger.warning("positive transform %s is also a member of the strong set", positive_kind.value)
    seed_primary = seeds.mix(seed, seeds.VIEWS)
    primary_views: list[list[Episode]] = []
    positive_views: list[list[Episode]] = []
    for j, kind in enumerate(cst.kinds):
        seed_pos = seeds.mix(seed, seeds.POSITIVE, j)
        prim = transform_batch(episodes, kind, aug_params, seed=seed_primary)
        if positive_order == POSITIVE_AFTER:
            pos = transform_batch(prim, positive_kind, aug_params, seed=seed_pos)
        else:
            weak = transform_batch(episodes, positive_kind, aug_params, seed=seed_pos)
            pos = transform_batch(weak, kind, aug_params, seed=seed_primary)
        primary_views.append(prim)
        positive_views.append(pos)
    primary = np.stack([[primary_views[j][i].values for j in range(len(cst.kinds))] for i in range(len(episodes))])
    positive = np.stack([[positive_views[j][i].values for j in range(len(cst.kinds))] for i in range(len(episodes))])
    mask = np.stack([ep.mask for ep in episodes])
    eids = np.array([ep.eid for ep in episodes])
    return ViewBatch(primary=primary, positive=positive, mask=mask, eids=eids)


def normalize_rows(z: torch.Tensor) -> torch.Tensor:
    """Unit-normalize rows; an exactly dead (all-zero) row stays zero and acts
    as a neutral representation with zero similarity to everything."""
    return z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _check_normalized(z: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        norms = z.detach().norm(dim=-1)
        if not torch.isfinite(norms).all():
            raise NumericError(f"{name} rows contain non-finite values")
        ok = (norms - 1.0).abs() < 1e-5
        dead = norms < 1e-6
        if not bool((ok | dead).all()):
            raise ContractError(f"{name} rows must be unit-normalized before the contrastive loss")


def loss_con(
    z: torch.Tensor,
    z_pos: torch.Tensor,
    tau: float,
    batch_negatives: str = SAME_INDEX,
) -> torch.Tensor:
    """Contrastive loss over a view batch.

    z and z_pos have shape [B, K+1, P] with unit rows. Each anchor's
    denominator holds its positive partner, both views of the same episode
    under every other transform index, and both views of every other episode
    (at the matching transform index by default). Both anchor directions are
    averaged, so the result is a mean over 2 * B * (K + 1) anchors.
    """
    if z.ndim != 3 or z.shape != z_pos.shape:
        raise ContractError(f"expected matching [B, K+1, P] tensors, got {tuple(z.shape)} and {tuple(z_pos.shape)}")
    _check_normalized(z, "z")
    _check_normalized(z_pos, "z_pos")
    b, k1, _ = z.shape
    rows = torch.cat([z.reshape(b * k1, -1), z_pos.reshape(b * k1, -1)], dim=0)  # [2*B*K1, P]
    n = rows.shape[0]
    sim = rows @ rows.T / tau

    idx = torch.arange(b * k1)
    episode = torch.cat([idx // k1, idx // k1])
    view = torch.cat([idx % k1, idx % k1])
    half = torch.cat([torch.zeros(b * k1, dtype=torch.long), torch.ones(b * k1, dtype=torch.long)])

    same_episode = episode[:, None] == episode[None, :]
    same_view = view[:, None] == view[None, :]
    other_half = half[:, None] != half[None, :]

    positive = same_episode & same_view & other_half
    within_episode_negatives = same_episode & ~same_view
    if batch_negatives == SAME_INDEX:
        cross_episode_negatives = ~same_episode & same_view
    else:
        cross_episode_negatives = ~same_episode
    allowed = positive | within_episode_negatives | cross_episode_negatives

    pos_index = torch.where(positive)[1].reshape(n)  # exactly one partner per anchor
    pos_term = sim.gather(1, pos_index[:, None]).squeeze(1)
    denom = torch.logsumexp(sim.masked_fill(~allowed, float("-inf")), dim=1)
    return (denom - pos_term).mean()


def loss_cls(logits: torch.Tensor, labels: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean cross-entropy of transform-index predictions over all view rows."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractError(f"logits {tuple(logits.shape)} do not align with {labels.shape[0]} labels")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"transform label out of range [0, {logits.shape[1]})")
    return torch.nn.functional.cross_entropy(logits, labels)


def total_loss(l_time: float, l_freq: float) -> float:
    """Combined objective: the two towers are parameter-disjoint, so the total
    is simply the sum of their per-domain losses."""
    return l_time + l_freq


@dataclass
class EpochLog:
    epoch: int
    l_con: float
    l_cls: float
    l_total: float
    val_total: float | None = None

    def as_row(self) -> dict:
        return {
            "epoch": self.epoch,
            "l_con": self.l_con,
            "l_cls": self.l_cls,
            "l_total": self.l_total,
            "val_total": "" if self.val_total is None else self.val_total,
        }


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    adam_state: AdamState
    best_val_params: ModelParams | None = None


def _batch_losses(
    params: ModelParams,
    vb: ViewBatch,
    config: TrainConfig,
    train: bool,
) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = params.torch_dtype()
    x = torch.tensor(vb.stacked(), dtype=dtype)
    mask = torch.tensor(vb.row_mask(), dtype=torch.bool)
    feats = forward_backbone(params, x, mask, train=train)
    z = forward_projection(params, feats, train=train)
    z = normalize_rows(z)
    z = z.reshape(vb.batch_size, vb.n_views, 2, -1)
    l_con = loss_con(z[:, :, 0, :], z[:, :, 1, :], config.tau, config.batch_negatives)
    logits = forward_classifier(params, feats)
    l_cls = loss_cls(logits, vb.labels())
    return l_con, l_cls


def train_tower(
    train_episodes: list[Episode],
    domain_index: int,
    cst: CSTSet,
    positive_kind: TransformKind,
    config: TrainConfig,
    encoder_config: EncoderConfig,
    aug_params: TransformParams,
    val_episodes: list[Episode] | None = None,
    resume: TrainResult | None = None,
) -> TrainResult:
    """Train one tower with a seeded shuffle and fresh views every epoch.

    Aborts with the last finite-loss parameters attached if the loss goes
    non-finite. When val episodes are supplied, a per-epoch validation loss is
    logged and the best-validation parameters are returned alongside the
    final ones. Resuming from a previous result reproduces the uninterrupted
    trajectory because all randomness is keyed by (seed, domain, epoch).
    """
    config.validate()
    if not train_episodes:
        raise InputError("train_tower needs a non-empty train split")
    if resume is not None:
        params = resume.params
        adam_state = resume.adam_state
        log = list(resume.log)
        start_epoch = len(resume.log)
    else:
        params = init_params(encoder_config, seed=seeds.mix(config.seed, seeds.INIT, domain_index))
        adam_state = AdamState()
        log = []
        start_epoch = 0
    best_val = None
    best_val_params = None
    n = len(train_episodes)
    for epoch in range(start_epoch, config.epochs):
        order = seeds.substream(config.seed, seeds.SHUFFLE, domain_index, epoch).permutation(n)
        epoch_seed = seeds.mix(config.seed, seeds.EPOCH, domain_index, epoch)
        con_sum = cls_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train_episodes[i] for i in order[start : start + config.batch_size]]
            vb = build_views(batch, cst, positive_kind, aug_params, seed=epoch_seed, positive_order=config.positive_order)
            try:
                l_con, l_cls = _batch_losses(params, vb, config, train=True)
            except TrainingDiverged:
                raise
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good=params, epoch=epoch) from exc
            loss = config.con_weight * l_con + config.cls_weight * l_cls
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (con={l_con.item()!r}, cls={l_cls.item()!r})",
                    last_good=params,
                    epoch=epoch,
                )
            grads = backward(loss, params)
            adam_step(params, grads, adam_state, lr=config.lr)
            con_sum += l_con.item() * len(batch)
            cls_sum += l_cls.item() * len(batch)
        l_con_epoch = con_sum / n
        l_cls_epoch = cls_sum / n
        entry = EpochLog(
            epoch=epoch,
            l_con=l_con_epoch,
            l_cls=l_cls_epoch,
            l_total=config.con_weight * l_con_epoch + config.cls_weight * l_cls_epoch,
        )
        if val_episodes:
            val_seed = seeds.mix(config.seed, seeds.EPOCH, domain_index, epoch, 1)
            vb = build_views(val_episodes, cst, positive_kind, aug_params, seed=val_seed, positive_order=config.positive_order)
            with torch.no_grad():
                v_con, v_cls = _batch_losses(params, vb, config, train=False)
            entry.val_total = config.con_weight * v_con.item() + config.cls_weight * v_cls.item()
            if best_val is None or entry.val_total < best_val:
                best_val = entry.val_total
                best_val_params = params.clone()
        log.append(entry)
    return TrainResult(params=params, log=log, adam_state=adam_state, best_val_params=best_val_params)


@dataclass
class RepresentationBank:
    """Unit-normalized training representations, one matrix per transform index."""

    kinds: tuple[TransformKind, ...]
    z: list[np.ndarray] = field(default_factory=list)  # each [n_train, proj_dim]
    eids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def validate(self) -> None:
        for j, mat in enumerate(self.z):
            if mat.shape[0] != len(self.eids):
                raise ContractError(f"bank[{j}] row count {mat.shape[0]} != {len(self.eids)} episodes")
            norms = np.linalg.norm(mat, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ContractError(f"bank[{j}] rows must be unit-normalized")


def project_episodes(params: ModelParams, episodes: list[Episode], batch_size: int = 256) -> np.ndarray:
    """Eval-mode, unit-normalized projection outputs for a list of episodes."""
    outputs = []
    dtype = params.torch_dtype()
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start : start + batch_size]
        x, mask = episodes_to_tensors(chunk, dtype)
        with torch.no_grad():
            feats = forward_backbone(params, x, mask, train=False)
            z = normalize_rows(forward_projection(params, feats, train=False))
        outputs.append(z.numpy())
    return np.concatenate(outputs, axis=0)


def build_representation_bank(
    params: ModelParams,
    train_episodes: list[Episode],
    cst: CSTSet,
    aug_params: TransformParams,
    seed: int,
) -> RepresentationBank:
    """Store normalized projections of every training episode under every
    transform index, using the same (seed, episode, kind) augmentation streams
    the detector replays at scoring time."""
    if not train_episodes:
        raise InputError("cannot build a representation bank from an empty train split")
    mats = []
    for kind in cst.kinds:
        views = transform_batch(train_episodes, kind, aug_params, seed=seed)
        mats.append(project_episodes(params, views).astype(np.float64))
    bank = RepresentationBank(kinds=cst.kinds, z=mats, eids=np.array([ep.eid for ep in train_episodes]))
    bank.validate()
    return bank


BANK_FORMAT = "novact-bank"


def save_bank(bank: RepresentationBank, path, provenance: dict | None = None) -> None:
    from . import archive

    tensors = {f"z/{j}": mat for j, mat in enumerate(bank.z)}
    tensors["eids"] = bank.eids
    meta = {"format": BANK_FORMAT, "kinds": [k.value for k in bank.kinds], "provenance": provenance or {}}
    archive.save_tensors(path, meta, tensors)


def load_bank(path) -> RepresentationBank:
    from . import archive
    from .augment import kind_from_name
    from .errors import ParseError

    meta, tensors = archive.load_tensors(path)
    if meta.get("format") != BANK_FORMAT:
        raise ParseError(f"{path}: not a representation bank")
    kinds = tuple(kind_from_name(n) for n in meta["kinds"])
    bank = RepresentationBank(
        kinds=kinds,
        z=[tensors[f"z/{j}"] for j in range(len(kinds))],
        eids=tensors["eids"],
    )
    bank.validate()
    return bank
