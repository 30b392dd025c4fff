"""Experiment protocols and report aggregation.

The one-class protocol designates each activity in turn as the only known one;
the multi-class protocol repeatedly splits the label set into random halves.
Both repeat over seeds/trials and aggregate mean and standard deviation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .config import RunConfig
from .data import DatasetManifest
from .errors import InputError
from .metrics import auroc, balanced_accuracy, roc_points, summarize
from .pipeline import PipelineResult, run_single

logger = logging.getLogger(__name__)

# Below this many episodes a class cannot populate train/val/test at once.
MIN_CLASS_EPISODES = 3


@dataclass
class RunRecord:
    seed: int
    auroc: float
    auroc_time: float
    auroc_freq: float
    balanced_accuracy: float
    n_test_known: int
    n_test_new: int
    known_scores: list[float] = field(default_factory=list)
    new_scores: list[float] = field(default_factory=list)

    def to_dict(self, with_scores: bool = False) -> dict:
        doc = {
            "seed": self.seed,
            "auroc": self.auroc,
            "auroc_time": self.auroc_time,
            "auroc_freq": self.auroc_freq,
            "balanced_accuracy": self.balanced_accuracy,
            "n_test_known": self.n_test_known,
            "n_test_new": self.n_test_new,
            "known_score_summary": summarize(self.known_scores),
            "new_score_summary": summarize(self.new_scores),
        }
        if with_scores:
            doc["known_scores"] = self.known_scores
            doc["new_scores"] = self.new_scores
        return doc


@dataclass
class EvalReport:
    task_id: str
    known_labels: list[int]
    runs: list[RunRecord]
    partitions: list[list[int]] | None = None  # multi-class: known half per trial

    @property
    def auroc_mean(self) -> float:
        return float(np.mean([r.auroc for r in self.runs]))

    @property
    def auroc_std(self) -> float | None:
        return float(np.std([r.auroc for r in self.runs])) if len(self.runs) >= 2 else None

    @property
    def bacc_mean(self) -> float:
        return float(np.mean([r.balanced_accuracy for r in self.runs]))

    @property
    def bacc_std(self) -> float | None:
        return float(np.std([r.balanced_accuracy for r in self.runs])) if len(self.runs) >= 2 else None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "known_labels": self.known_labels,
            "partitions": self.partitions,
            "n_runs": len(self.runs),
            "auroc_mean": self.auroc_mean,
            "auroc_std": self.auroc_std,
            "balanced_accuracy_mean": self.bacc_mean,
            "balanced_accuracy_std": self.bacc_std,
            "runs": [r.to_dict() for r in self.runs],
        }


def record_from_result(result: PipelineResult, seed: int) -> RunRecord:
    m = result.metrics
    return RunRecord(
        seed=seed,
        auroc=m.auroc_clan,
        auroc_time=m.auroc_time,
        auroc_freq=m.auroc_freq,
        balanced_accuracy=m.balanced_accuracy,
        n_test_known=m.n_test_known,
        n_test_new=m.n_test_new,
        known_scores=[s.sc_clan for s in result.scores if s.is_known],
        new_scores=[s.sc_clan for s in result.scores if not s.is_known],
    )


def run_one_class(raw: DatasetManifest, known_class: int, config: RunConfig) -> EvalReport:
    """Designate one activity as known, everything else as new."""
    runs = []
    for seed in config.seeds:
        result = run_single(raw, {known_class}, config, seed)
        runs.append(record_from_result(result, seed))
    return EvalReport(task_id=f"one-class-{known_class}", known_labels=[known_class], runs=runs)


def run_one_class_suite(raw: DatasetManifest, config: RunConfig) -> tuple[list[EvalReport], dict]:
    """One task per activity; classes too small to split are skipped."""
    counts: dict[int, int] = {}
    for ep in raw.episodes:
        counts[ep.label] = counts.get(ep.label, 0) + 1
    reports = []
    for label in sorted(counts):
        if counts[label] < MIN_CLASS_EPISODES:
            logger.warning("skipping class %d: only %d episode(s)", label, counts[label])
            continue
        reports.append(run_one_class(raw, label, config))
    if not reports:
        raise InputError("no class has enough episodes for the one-class protocol")
    return reports, aggregate_reports(reports, task_id="one-class-aggregate")


def run_multi_class(raw: DatasetManifest, config: RunConfig, n_trials: int | None = None, seed: int | None = None) -> EvalReport:
    """Random-half known/new partitions, repeated over trials."""
    labels = sorted({ep.label for ep in raw.episodes})
    if len(labels) < 2:
        raise InputError("multi-class protocol needs at least two activity labels")
    n_trials = n_trials if n_trials is not None else config.n_trials
    seed = seed if seed is not None else config.seeds[0]
    runs = []
    partitions = []
    for trial in range(n_trials):
        rng = seeds.substream(seed, seeds.TRIAL, trial)
        order = rng.permutation(len(labels))
        known = {labels[i] for i in order[: len(labels) // 2]}
        partitions.append(sorted(known))
        result = run_single(raw, known, config, seed=seeds.mix(seed, seeds.TRIAL, trial, 1))
        record = record_from_result(result, seed=trial)
        runs.append(record)
    return EvalReport(task_id="multi-class", known_labels=sorted(set(labels)), runs=runs, partitions=partitions)


def aggregate_reports(reports: list[EvalReport], task_id: str) -> dict:
    """Unweighted aggregate over tasks; std over every (task, run) pair."""
    aurocs = [r.auroc for rep in reports for r in rep.runs]
    baccs = [r.balanced_accuracy for rep in reports for r in rep.runs]
    return {
        "task_id": task_id,
        "n_tasks": len(reports),
        "n_runs": len(aurocs),
        "auroc_mean": float(np.mean([rep.auroc_mean for rep in reports])),
        "auroc_std": float(np.std(aurocs)) if len(aurocs) >= 2 else None,
        "balanced_accuracy_mean": float(np.mean([rep.bacc_mean for rep in reports])),
        "balanced_accuracy_std": float(np.std(baccs)) if len(baccs) >= 2 else None,
    }


def report_table(reports: list[EvalReport], aggregate: dict | None = None) -> str:
    lines = [f"{'task':<24} {'auroc':>8} {'std':>8} {'bacc':>8} {'std':>8} {'runs':>5}"]
    for rep in reports:
        a_std = f"{rep.auroc_std:.4f}" if rep.auroc_std is not None else "-"
        b_std = f"{rep.bacc_std:.4f}" if rep.bacc_std is not None else "-"
        lines.append(
            f"{rep.task_id:<24} {rep.auroc_mean:>8.4f} {a_std:>8} {rep.bacc_mean:>8.4f} {b_std:>8} {len(rep.runs):>5}"
        )
    if aggregate:
        a_std = f"{aggregate['auroc_std']:.4f}" if aggregate.get("auroc_std") is not None else "-"
        b_std = f"{aggregate['balanced_accuracy_std']:.4f}" if aggregate.get("balanced_accuracy_std") is not None else "-"
        lines.append(
            f"{aggregate['task_id']:<24} {aggregate['auroc_mean']:>8.4f} {a_std:>8} "
            f"{aggregate['balanced_accuracy_mean']:>8.4f} {b_std:>8} {aggregate['n_runs']:>5}"
        )
    return "\n".join(lines)


def report_from_scores(scores, task_id: str = "scores") -> EvalReport:
    """Metrics straight from a score table (e.g. a scores.csv load)."""
    known = [s.sc_clan for s in scores if s.is_known]
    new = [s.sc_clan for s in scores if not s.is_known]
    if not known or not new:
        raise InputError("score table must contain both known and new episodes")
    record = RunRecord(
        seed=-1,
        auroc=auroc(known, new),
        auroc_time=auroc([s.sc_t for s in scores if s.is_known], [s.sc_t for s in scores if not s.is_known]),
        auroc_freq=auroc([s.sc_f for s in scores if s.is_known], [s.sc_f for s in scores if not s.is_known]),
        balanced_accuracy=balanced_accuracy([s.sc_clan for s in scores], [s.is_known for s in scores]),
        n_test_known=len(known),
        n_test_new=len(new),
        known_scores=known,
        new_scores=new,
    )
    labels = sorted({s.label for s in scores if s.is_known})
    return EvalReport(task_id=task_id, known_labels=labels, runs=[record])


def write_report_json(path, reports: list[EvalReport], aggregate: dict | None, provenance: dict) -> None:
    doc = {
        "format": "novact-eval-report",
        "version": 1,
        "provenance": provenance,
        "tasks": [rep.to_dict() for rep in reports],
        "aggregate": aggregate,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_roc_csv(path, scores_known, scores_new, provenance: dict | None = None) -> None:
    """Optional ROC staircase export for external plotting."""
    points = roc_points(scores_known, scores_new)
    lines = []
    if provenance:
        lines.append("# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items())))
    lines.append("fpr,tpr,threshold")
    for fpr, tpr, thr in points:
        lines.append(f"{float(fpr)!r},{float(tpr)!r},{float(thr)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
