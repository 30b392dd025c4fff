"""Figure rendering for the CLI report path.

Every figure lands next to the delimited/JSON artifact it illustrates. All
rendering is optional (--no-figures) and uses the Agg backend so headless runs
work.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .cst import AurocReport
from .metrics import roc_points

logger = logging.getLogger(__name__)


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("wrote %s", path)


def plot_cst_report(report: AurocReport, path: str | Path) -> None:
    entries = sorted(report.entries, key=lambda e: -e[1])
    names = [kind.value for kind, _ in entries]
    values = [score for _, score in entries]
    colors = ["tab:blue" if kind in report.selected.kinds else "tab:gray" for kind, _ in entries]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, values, color=colors)
    ax.axhline(report.theta_cst, color="tab:red", linestyle="--", linewidth=1, label=f"threshold {report.theta_cst}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("shift auroc")
    ax.set_title(f"{report.domain} domain: selected={report.selected.k}, positive={report.positive_kind.value}")
    ax.tick_params(axis="x", rotation=45)
    ax.legend(loc="lower right")
    _save(fig, Path(path))


def plot_training_curves(log_rows: list[dict], path: str | Path, title: str = "") -> None:
    epochs = [int(r["epoch"]) for r in log_rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key, label in (("l_con", "contrastive"), ("l_cls", "classifier"), ("l_total", "total")):
        ax.plot(epochs, [float(r[key]) for r in log_rows], label=label)
    vals = [float(r["val_total"]) for r in log_rows if r.get("val_total") not in (None, "")]
    if vals:
        ax.plot(epochs[: len(vals)], vals, label="val total", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    _save(fig, Path(path))


def plot_score_distributions(known: list[float], new: list[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bins = 30
    ax.hist(known, bins=bins, alpha=0.6, label=f"known (n={len(known)})")
    ax.hist(new, bins=bins, alpha=0.6, label=f"new (n={len(new)})")
    ax.set_xlabel("detection score")
    ax.set_ylabel("episodes")
    ax.legend()
    _save(fig, Path(path))


def plot_roc(known: list[float], new: list[float], path: str | Path, auroc_value: float | None = None) -> None:
    points = roc_points(known, new)
    fig, ax = plt.subplots(figsize=(4.2, 4))
    ax.plot(points[:, 0], points[:, 1], drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if auroc_value is not None:
        ax.set_title(f"auroc = {auroc_value:.4f}")
    _save(fig, Path(path))
