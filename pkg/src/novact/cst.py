"""Automatic selection of dataset-tailored strong transforms.

For each candidate transform a binary discriminator (tower backbone plus a
sigmoid head) is trained to tell originals from augmented copies of the train
split; its held-out AUROC measures how strongly the transform shifts the data.
Transforms above the highest workable threshold become the strong set used to
generate negatives, the weakest transform becomes the positive generator, and
the whole procedure runs independently per domain.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import seeds
from .augment import (
    KIND_INDEX,
    NON_IDENTITY_KINDS,
    TransformKind,
    TransformParams,
    kind_from_name,
    transform_batch,
)
from .data import Episode
from .encoder import (
    DISC_HEAD,
    AdamState,
    EncoderConfig,
    ModelParams,
    adam_step,
    backward,
    episodes_to_tensors,
    forward_backbone,
    forward_discriminator,
    init_params,
)
from .errors import ConfigError, InputError, InvariantError, ParseError, TrainingDiverged
from .metrics import auroc

logger = logging.getLogger(__name__)

THRESHOLD_SET = (0.5, 0.6, 0.7, 0.8, 0.9)

CST_REPORT_FORMAT = "novact-cst-report"


@dataclass(frozen=True)
class CSTSet:
    """Ordered strong-transform set with the identity prepended at index 0."""

    kinds: tuple[TransformKind, ...]

    @property
    def k(self) -> int:
        return len(self.kinds) - 1

    def validate(self, require_two: bool = True) -> None:
        if not self.kinds or self.kinds[0] is not TransformKind.IDENTITY:
            raise InvariantError("a transform set must start with the identity at index 0")
        if len(set(self.kinds)) != len(self.kinds):
            raise InvariantError("duplicate transforms in the strong set")
        if require_two and self.k < 2:
            raise InvariantError(f"need at least two strong transforms, got {self.k}")

    def names(self) -> list[str]:
        return [kind.value for kind in self.kinds]

    @staticmethod
    def from_names(names: list[str]) -> "CSTSet":
        kinds = tuple(kind_from_name(n) for n in names)
        if not kinds or kinds[0] is not TransformKind.IDENTITY:
            kinds = (TransformKind.IDENTITY,) + kinds
        return CSTSet(kinds=kinds)


@dataclass(frozen=True)
class DiscriminatorConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-4

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("discriminator epochs/batch_size/lr must be positive")


@dataclass
class AurocReport:
    """Per-domain shift scores and the resulting selection."""

    domain: str
    entries: list[tuple[TransformKind, float]]
    theta_cst: float
    selected: CSTSet
    positive_kind: TransformKind
    fallback: bool = False

    def validate(self) -> None:
        kinds = [kind for kind, _ in self.entries]
        if sorted(kinds, key=lambda k: KIND_INDEX[k]) != list(NON_IDENTITY_KINDS):
            raise InvariantError("report entries must cover every non-identity transform exactly once")
        self.selected.validate()
        if self.positive_kind in self.selected.kinds[1:]:
            logger.warning(
                "%s domain: positive transform %s also sits in the strong set (degenerate selection)",
                self.domain,
                self.positive_kind.value,
            )

    def to_json(self, provenance: dict | None = None) -> str:
        doc = {
            "format": CST_REPORT_FORMAT,
            "version": 1,
            "provenance": provenance or {},
            "domain": self.domain,
            "entries": [{"kind": kind.value, "auroc": score} for kind, score in self.entries],
            "theta_cst": self.theta_cst,
            "selected": self.selected.names(),
            "positive_kind": self.positive_kind.value,
            "fallback": self.fallback,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "AurocReport":
        doc = json.loads(text)
        if doc.get("format") != CST_REPORT_FORMAT:
            raise ParseError("not a transform-selection report")
        return AurocReport(
            domain=doc["domain"],
            entries=[(kind_from_name(e["kind"]), float(e["auroc"])) for e in doc["entries"]],
            theta_cst=float(doc["theta_cst"]),
            selected=CSTSet.from_names(doc["selected"]),
            positive_kind=kind_from_name(doc["positive_kind"]),
            fallback=bool(doc.get("fallback", False)),
        )

    def table(self) -> str:
        lines = [f"domain: {self.domain}", f"{'transform':<12} auroc"]
        for kind, score in sorted(self.entries, key=lambda e: -e[1]):
            marker = " *" if kind in self.selected.kinds else ""
            lines.append(f"{kind.value:<12} {score:.4f}{marker}")
        lines.append(f"theta = {self.theta_cst}, K = {self.selected.k}, positive = {self.positive_kind.value}")
        return "\n".join(lines)


def _discriminator_dataset(
    episodes: list[Episode],
    kind: TransformKind,
    aug_params: TransformParams,
    seed: int,
) -> tuple[list[Episode], np.ndarray]:
    """Originals labelled 0 followed by their augmented copies labelled 1."""
    augmented = transform_batch(episodes, kind, aug_params, seed=seed)
    labels = np.concatenate([np.zeros(len(episodes)), np.ones(len(augmented))])
    return episodes + augmented, labels


def train_aug_discriminator(
    train_episodes: list[Episode],
    kind: TransformKind,
    aug_params: TransformParams,
    encoder_config: EncoderConfig,
    disc_config: DiscriminatorConfig,
    seed: int,
) -> ModelParams:
    """Fit the original-vs-augmented binary classifier for one transform."""
    if not train_episodes:
        raise InputError("discriminator training needs a non-empty train split")
    disc_config.validate()
    config = EncoderConfig(**{**encoder_config.to_dict(), "heads": (DISC_HEAD,)})
    params = init_params(config, seed=seeds.mix(seed, seeds.INIT, KIND_INDEX[kind]))
    samples, labels = _discriminator_dataset(train_episodes, kind, aug_params, seed=seed)
    dtype = params.torch_dtype()
    x_all = torch.tensor(np.stack([ep.values for ep in samples]), dtype=dtype)
    mask_all = torch.tensor(np.stack([ep.mask for ep in samples]), dtype=torch.bool)
    y_all = torch.tensor(labels, dtype=dtype)
    state = AdamState()
    n = len(samples)
    for epoch in range(disc_config.epochs):
        order = seeds.substream(seed, seeds.DISC_SHUFFLE, KIND_INDEX[kind], epoch).permutation(n)
        for start in range(0, n, disc_config.batch_size):
            idx = torch.tensor(order[start : start + disc_config.batch_size].copy(), dtype=torch.long)
            feats = forward_backbone(params, x_all[idx], mask_all[idx], train=True)
            logits = forward_discriminator(params, feats)
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"discriminator for {kind.value} diverged at epoch {epoch}", last_good=params, epoch=epoch
                )
            grads = backward(loss, params)
            adam_step(params, grads, state, lr=disc_config.lr)
    return params


def discriminator_scores(params: ModelParams, episodes: list[Episode], batch_size: int = 256) -> np.ndarray:
    """Sigmoid outputs (probability of being augmented) for a list of episodes."""
    outputs = []
    dtype = params.torch_dtype()
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start : start + batch_size]
        x, mask = episodes_to_tensors(chunk, dtype)
        with torch.no_grad():
            feats = forward_backbone(params, x, mask, train=False)
            outputs.append(torch.sigmoid(forward_discriminator(params, feats)).numpy())
    return np.concatenate(outputs)


def score_transform_auroc(
    params: ModelParams,
    val_episodes: list[Episode],
    kind: TransformKind,
    aug_params: TransformParams,
    seed: int,
) -> float:
    """Held-out AUROC separating val originals from their augmented copies."""
    if not val_episodes:
        raise InputError("scoring a transform needs a non-empty validation split")
    augmented = transform_batch(val_episodes, kind, aug_params, seed=seed)
    orig_scores = discriminator_scores(params, val_episodes)
    aug_scores = discriminator_scores(params, augmented)
    return auroc(aug_scores, orig_scores)


def select_cst(
    entries: list[tuple[TransformKind, float]],
    threshold_set: tuple[float, ...] = THRESHOLD_SET,
) -> tuple[float, CSTSet, bool]:
    """Pick the strong set: the largest threshold that still admits two kinds.

    "Admits" is strict (auroc > theta). If even the smallest threshold admits
    fewer than two, fall back to the top two by score with a warning. Selected
    kinds are ordered by descending score, ties broken by enum order.
    """
    if len(entries) != len(NON_IDENTITY_KINDS):
        raise InputError(f"need scores for all {len(NON_IDENTITY_KINDS)} transforms, got {len(entries)}")
    ranked = sorted(entries, key=lambda e: (-e[1], KIND_INDEX[e[0]]))
    for theta in sorted(threshold_set, reverse=True):
        chosen = [kind for kind, score in ranked if score > theta]
        if len(chosen) >= 2:
            return theta, CSTSet(kinds=(TransformKind.IDENTITY, *chosen)), False
    theta = min(threshold_set)
    chosen = [kind for kind, _ in ranked[:2]]
    logger.warning(
        "no threshold in %s admits two transforms; falling back to the top two by score", threshold_set
    )
    return theta, CSTSet(kinds=(TransformKind.IDENTITY, *chosen)), True


def select_positive_transform(entries: list[tuple[TransformKind, float]]) -> TransformKind:
    """The weakest shift: lowest score, ties broken by enum order."""
    if not entries:
        raise InputError("cannot pick a positive transform from an empty score table")
    return min(entries, key=lambda e: (e[1], KIND_INDEX[e[0]]))[0]


def build_auroc_report(
    train_episodes: list[Episode],
    val_episodes: list[Episode],
    domain: str,
    encoder_config: EncoderConfig,
    aug_params: TransformParams,
    disc_config: DiscriminatorConfig,
    seed: int,
    threshold_set: tuple[float, ...] = THRESHOLD_SET,
    jobs: int = 1,
) -> AurocReport:
    """Train one discriminator per transform and assemble the selection report.

    The per-transform trainings are independent; `jobs > 1` runs them on a
    thread pool (each job owns its parameters, episodes are read-only).
    """

    def one(kind: TransformKind) -> tuple[TransformKind, float]:
        params = train_aug_discriminator(train_episodes, kind, aug_params, encoder_config, disc_config, seed=seed)
        score = score_transform_auroc(params, val_episodes, kind, aug_params, seed=seeds.mix(seed, seeds.CST))
        logger.info("%s domain: %s shift auroc %.4f", domain, kind.value, score)
        return kind, score

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(one, NON_IDENTITY_KINDS))
    else:
        entries = [one(kind) for kind in NON_IDENTITY_KINDS]
    theta, selected, fallback = select_cst(entries, threshold_set)
    positive = select_positive_transform(entries)
    report = AurocReport(
        domain=domain,
        entries=entries,
        theta_cst=theta,
        selected=selected,
        positive_kind=positive,
        fallback=fallback,
    )
    report.validate()
    return report


def save_report(report: AurocReport, path: str | Path, provenance: dict | None = None) -> None:
    Path(path).write_text(report.to_json(provenance) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> AurocReport:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    return AurocReport.from_json(path.read_text(encoding="utf-8"))
