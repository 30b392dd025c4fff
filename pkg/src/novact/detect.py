"""Detection scoring.

A test episode is pushed through every transform of a tower's strong set; the
similarity part sums, over transform indices, the cosine between its
normalized projection and the most similar bank row, and the classifier part
sums the predicted probability of the matching transform index. Per-domain
sums and the final combined score are plain additions, computed once in a
fixed order so the additivity identities hold exactly. Scoring runs in
float64 and the nearest-neighbor search is an exact full scan.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import TransformParams, transform_batch
from .cst import CSTSet
from .data import Episode
from .encoder import (
    ModelParams,
    episodes_to_tensors,
    forward_backbone,
    forward_classifier,
    forward_projection,
)
from .errors import ContractError, InputError, InvariantError, ParseError
from .spectral import fft_magnitude, normalize_spectral_episode
from .training import RepresentationBank

SIM_VARIANT = "sim"
SIM_NORM_VARIANT = "sim_norm"

TIME = "time"
FREQUENCY = "frequency"


@dataclass
class DomainScore:
    sc_con: float
    sc_cls: float
    sc_domain: float
    sims: list[float]
    probs: list[float]


@dataclass
class DetectionScore:
    """Per-episode detection result; higher means more likely known."""

    eid: int
    label: int
    is_known: bool
    sc_tcon: float
    sc_tcls: float
    sc_t: float
    sc_fcon: float
    sc_fcls: float
    sc_f: float
    sc_clan: float
    t_sims: list[float] = field(default_factory=list)
    t_probs: list[float] = field(default_factory=list)
    f_sims: list[float] = field(default_factory=list)
    f_probs: list[float] = field(default_factory=list)

    def validate(self, check_bounds: bool = True) -> None:
        if self.sc_t != self.sc_tcon + self.sc_tcls or self.sc_f != self.sc_fcon + self.sc_fcls:
            raise InvariantError(f"episode {self.eid}: per-domain additivity violated")
        if self.sc_clan != self.sc_t + self.sc_f:
            raise InvariantError(f"episode {self.eid}: total additivity violated")
        if not check_bounds:
            return
        for sims, probs, con, cls_ in (
            (self.t_sims, self.t_probs, self.sc_tcon, self.sc_tcls),
            (self.f_sims, self.f_probs, self.sc_fcon, self.sc_fcls),
        ):
            k1 = len(sims)
            if any(not (-1.0 - 1e-9 <= s <= 1.0 + 1e-9) for s in sims):
                raise InvariantError(f"episode {self.eid}: nearest similarity outside [-1, 1]")
            if any(not (-1e-12 <= p <= 1.0 + 1e-12) for p in probs):
                raise InvariantError(f"episode {self.eid}: classifier probability outside [0, 1]")
            if not (-k1 - 1e-6 <= con <= k1 + 1e-6) or not (-1e-9 <= cls_ <= k1 + 1e-6):
                raise InvariantError(f"episode {self.eid}: component score outside its bound")


@dataclass
class TowerBundle:
    """Everything needed to score one domain: frozen float64 params, the
    representation bank, the transform set, and the augmentation seed shared
    with the bank build."""

    domain: str
    params: ModelParams
    bank: RepresentationBank
    cst: CSTSet
    aug_params: TransformParams
    seed: int

    def validate(self) -> None:
        if self.bank.kinds != self.cst.kinds:
            raise ContractError(
                f"{self.domain} bank transforms {[k.value for k in self.bank.kinds]} do not match "
                f"the strong set {self.cst.names()}"
            )


@dataclass
class ScoringContext:
    time: TowerBundle
    frequency: TowerBundle
    spectral_stats: dict
    fft_length: int | None = None
    variant: str = SIM_VARIANT

    def validate(self) -> None:
        if self.time is None or self.frequency is None:
            raise InputError("scoring requires both towers")
        self.time.validate()
        self.frequency.validate()
        if self.variant not in (SIM_VARIANT, SIM_NORM_VARIANT):
            raise InputError(f"unknown score variant {self.variant!r}")


def nearest_similarity(bank_rows: np.ndarray, z: np.ndarray) -> float:
    """Exact full scan: the largest dot product between z and any bank row."""
    best = -np.inf
    for row in bank_rows:
        sim = float(np.dot(row, z))
        if sim > best:
            best = sim
    return best


def _projections(params: ModelParams, episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode projections: (unit rows, pre-normalization norms)."""
    x, mask = episodes_to_tensors(episodes, params.torch_dtype())
    with torch.no_grad():
        feats = forward_backbone(params, x, mask, train=False)
        z = forward_projection(params, feats, train=False)
        norms = z.norm(dim=-1)
        z = z / norms[:, None]
    return z.numpy().astype(np.float64), norms.numpy().astype(np.float64)


def _class_probs(params: ModelParams, episodes: list[Episode], j: int) -> np.ndarray:
    x, mask = episodes_to_tensors(episodes, params.torch_dtype())
    with torch.no_grad():
        feats = forward_backbone(params, x, mask, train=False)
        probs = torch.softmax(forward_classifier(params, feats), dim=-1)
    return probs.numpy()[:, j].astype(np.float64)


def domain_scores(episodes: list[Episode], bundle: TowerBundle, variant: str = SIM_VARIANT) -> list[DomainScore]:
    """Similarity and classifier scores for a batch of episodes in one domain."""
    bundle.validate()
    n = len(episodes)
    sims = np.zeros((n, len(bundle.cst.kinds)))
    probs = np.zeros_like(sims)
    for j, kind in enumerate(bundle.cst.kinds):
        views = transform_batch(episodes, kind, bundle.aug_params, seed=bundle.seed)
        z, norms = _projections(bundle.params, views)
        probs[:, j] = _class_probs(bundle.params, views, j)
        for i in range(n):
            sim = nearest_similarity(bundle.bank.z[j], z[i])
            sims[i, j] = sim * norms[i] if variant == SIM_NORM_VARIANT else sim
    out = []
    for i in range(n):
        sc_con = 0.0
        sc_cls = 0.0
        for j in range(len(bundle.cst.kinds)):  # fixed summation order j = 0..K
            sc_con += float(sims[i, j])
            sc_cls += float(probs[i, j])
        out.append(
            DomainScore(
                sc_con=sc_con,
                sc_cls=sc_cls,
                sc_domain=sc_con + sc_cls,
                sims=[float(s) for s in sims[i]],
                probs=[float(p) for p in probs[i]],
            )
        )
    return out


def score_con(episode: Episode, bundle: TowerBundle, variant: str = SIM_VARIANT) -> tuple[float, list[float]]:
    """Similarity score for one episode: per-index nearest-bank cosines, summed."""
    ds = domain_scores([episode], bundle, variant)[0]
    return ds.sc_con, ds.sims


def score_cls(episode: Episode, bundle: TowerBundle) -> tuple[float, list[float]]:
    """Classifier score: probability of the matching transform index, summed."""
    ds = domain_scores([episode], bundle)[0]
    return ds.sc_cls, ds.probs


def _to_frequency(episode: Episode, ctx: ScoringContext) -> Episode:
    return normalize_spectral_episode(fft_magnitude(episode, ctx.fft_length), ctx.spectral_stats)


def score_dataset(episodes: list[Episode], ctx: ScoringContext, known_labels: set[int]) -> list[DetectionScore]:
    """Score episodes (time-domain input); output order matches input order."""
    ctx.validate()
    if not episodes:
        return []
    freq_episodes = [_to_frequency(ep, ctx) for ep in episodes]
    time_scores = domain_scores(episodes, ctx.time, ctx.variant)
    freq_scores = domain_scores(freq_episodes, ctx.frequency, ctx.variant)
    out = []
    for ep, ts, fs in zip(episodes, time_scores, freq_scores):
        score = DetectionScore(
            eid=ep.eid,
            label=ep.label,
            is_known=ep.label in known_labels,
            sc_tcon=ts.sc_con,
            sc_tcls=ts.sc_cls,
            sc_t=ts.sc_domain,
            sc_fcon=fs.sc_con,
            sc_fcls=fs.sc_cls,
            sc_f=fs.sc_domain,
            sc_clan=ts.sc_domain + fs.sc_domain,
            t_sims=ts.sims,
            t_probs=ts.probs,
            f_sims=fs.sims,
            f_probs=fs.probs,
        )
        score.validate(check_bounds=ctx.variant == SIM_VARIANT)
        out.append(score)
    return out


def score_clan(episode: Episode, ctx: ScoringContext, known_labels: set[int]) -> DetectionScore:
    """Score a single episode through both towers."""
    return score_dataset([episode], ctx, known_labels)[0]


_BASE_COLUMNS = ["episode_id", "label", "is_known", "sc_T", "sc_F", "sc_clan", "sc_tcon", "sc_tcls", "sc_fcon", "sc_fcls"]


def write_scores_csv(path: str | Path, scores: list[DetectionScore], provenance: dict | None = None) -> None:
    """Delimited output: one row per episode plus per-(domain, index) diagnostics."""
    k_t = len(scores[0].t_sims) if scores else 0
    k_f = len(scores[0].f_sims) if scores else 0
    header = list(_BASE_COLUMNS)
    header += [f"t_sim_{j}" for j in range(k_t)] + [f"t_prob_{j}" for j in range(k_t)]
    header += [f"f_sim_{j}" for j in range(k_f)] + [f"f_prob_{j}" for j in range(k_f)]
    lines = []
    if provenance:
        lines.append("# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items())))
    lines.append(",".join(header))
    for s in scores:
        row = [str(s.eid), str(s.label), str(int(s.is_known))]
        row += [repr(float(v)) for v in (s.sc_t, s.sc_f, s.sc_clan, s.sc_tcon, s.sc_tcls, s.sc_fcon, s.sc_fcls)]
        row += [repr(float(v)) for v in s.t_sims] + [repr(float(v)) for v in s.t_probs]
        row += [repr(float(v)) for v in s.f_sims] + [repr(float(v)) for v in s.f_probs]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores_csv(path: str | Path) -> list[DetectionScore]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    scores = []
    for row in reader:
        t_sims = [float(v) for k, v in row.items() if k.startswith("t_sim_")]
        t_probs = [float(v) for k, v in row.items() if k.startswith("t_prob_")]
        f_sims = [float(v) for k, v in row.items() if k.startswith("f_sim_")]
        f_probs = [float(v) for k, v in row.items() if k.startswith("f_prob_")]
        scores.append(
            DetectionScore(
                eid=int(row["episode_id"]),
                label=int(row["label"]),
                is_known=bool(int(row["is_known"])),
                sc_tcon=float(row["sc_tcon"]),
                sc_tcls=float(row["sc_tcls"]),
                sc_t=float(row["sc_T"]),
                sc_fcon=float(row["sc_fcon"]),
                sc_fcls=float(row["sc_fcls"]),
                sc_f=float(row["sc_F"]),
                sc_clan=float(row["sc_clan"]),
                t_sims=t_sims,
                t_probs=t_probs,
                f_sims=f_sims,
                f_probs=f_probs,
            )
        )
    return scores
