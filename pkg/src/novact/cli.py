"""Command-line surface: prepare | cst | train | detect | eval | run-all.

Artifacts carry the config hash and seed; running `run-all` is byte-for-byte
identical to running the individual stages with the same config. Exit codes:
0 success, 2 input error, 3 numeric failure, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import RunConfig, config_from_dict, load_config
from .cst import load_report, save_report
from .data import load_manifest, save_manifest
from .detect import FREQUENCY, TIME, read_scores_csv, score_dataset, write_scores_csv
from .encoder import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError, InvariantError, NovactError, NumericError, TrainingDiverged
from .evaluate import (
    record_from_result,
    report_from_scores,
    report_table,
    run_multi_class,
    run_one_class_suite,
    write_report_json,
    write_roc_csv,
    EvalReport,
)
from .pipeline import (
    PreparedData,
    TowerArtifacts,
    build_cst_reports,
    load_raw_manifest,
    make_context,
    prepare,
    run_single,
    train_domain,
)
from .training import EpochLog, TrainResult, load_bank, save_bank

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_INVARIANT = 4

DOMAINS = (TIME, FREQUENCY)


def _artifact_paths(out: Path) -> dict:
    return {
        "manifest": {d: out / f"manifest.{d}.json" for d in DOMAINS},
        "cst": {d: out / f"cst-report.{d}.json" for d in DOMAINS},
        "checkpoint": {d: out / f"checkpoint.{d}.bin" for d in DOMAINS},
        "bank": {d: out / f"bank.{d}.bin" for d in DOMAINS},
        "trainlog": {d: out / f"trainlog.{d}.csv" for d in DOMAINS},
        "scores": out / "scores.csv",
        "report": out / "report.json",
        "report_txt": out / "report.txt",
        "roc": out / "roc.csv",
    }


def _build_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else config_from_dict({})
    overrides: dict = {}
    if getattr(args, "dataset", None):
        overrides["dataset_path"] = args.dataset
        overrides["synthetic"] = None
    if getattr(args, "format", None):
        overrides["dataset_format"] = args.format
    if getattr(args, "known_labels", None):
        overrides["known_labels"] = tuple(int(x) for x in args.known_labels.split(","))
    if getattr(args, "protocol", None):
        overrides["protocol"] = args.protocol
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(x) for x in args.seeds.split(","))
    if getattr(args, "epochs", None) is not None:
        overrides["train"] = dataclasses.replace(config.train, epochs=args.epochs)
    if getattr(args, "fft_length", None) is not None:
        overrides["fft_length"] = args.fft_length
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        config = dataclasses.replace(config, **overrides)
    config.validate()
    cores = os.cpu_count() or 1
    if config.jobs is None:
        torch.set_num_threads(cores)
    else:
        torch.set_num_threads(max(1, cores // config.jobs))
    return config


def _load_prepared(paths: dict) -> PreparedData:
    for domain in DOMAINS:
        if not paths["manifest"][domain].exists():
            raise InputError(f"{paths['manifest'][domain]}: missing; run `prepare` first")
    return PreparedData(
        time=load_manifest(paths["manifest"][TIME]),
        frequency=load_manifest(paths["manifest"][FREQUENCY]),
    )


def _known_labels(config: RunConfig, raw) -> set[int]:
    if config.known_labels is not None:
        return set(config.known_labels)
    raise ConfigError("this command needs explicit known_labels (protocols run under `eval`)")


def _write_trainlog(path: Path, log: list[EpochLog], provenance: dict) -> None:
    lines = ["# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items()))]
    lines.append("epoch,l_con,l_cls,l_total,val_total")
    for entry in log:
        row = entry.as_row()
        lines.append(f"{row['epoch']},{row['l_con']!r},{row['l_cls']!r},{row['l_total']!r},{row['val_total']}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_trainlog(path: Path) -> list[dict]:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        rows.append(line.split(","))
    header = rows[0]
    return [dict(zip(header, r)) for r in rows[1:]]


def cmd_prepare(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _artifact_paths(out)
    seed = config.seeds[0]
    raw = load_raw_manifest(config)
    prepared = prepare(raw, _known_labels(config, raw), config, seed)
    prov = config.provenance(seed)
    save_manifest(prepared.time, paths["manifest"][TIME], provenance=prov)
    save_manifest(prepared.frequency, paths["manifest"][FREQUENCY], provenance=prov)
    print(f"prepared {len(prepared.time.episodes)} episodes "
          f"(train {len(prepared.time.train_episodes())}, val {len(prepared.time.val_episodes())}, "
          f"test {len(prepared.time.test_episodes())}) -> {out}")
    return EXIT_OK


def cmd_cst(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out)
    paths = _artifact_paths(out)
    seed = config.seeds[0]
    prepared = _load_prepared(paths)
    reports = build_cst_reports(prepared, config, seed)
    prov = config.provenance(seed)
    for domain in DOMAINS:
        save_report(reports[domain], paths["cst"][domain], provenance=prov)
        print(reports[domain].table())
        if not args.no_figures:
            from . import report as figs

            figs.plot_cst_report(reports[domain], out / f"cst_auroc.{domain}.png")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out)
    paths = _artifact_paths(out)
    seed = config.seeds[0]
    prepared = _load_prepared(paths)
    prov = config.provenance(seed)
    for domain in DOMAINS:
        if not paths["cst"][domain].exists():
            raise InputError(f"{paths['cst'][domain]}: missing; run `cst` first")
        report = load_report(paths["cst"][domain])
        resume = None
        if args.resume:
            params, meta, adam_state = load_checkpoint(paths["checkpoint"][domain])
            if adam_state is None:
                raise InputError(f"checkpoint for {domain} has no optimizer state; cannot resume")
            log = [
                EpochLog(int(r["epoch"]), float(r["l_con"]), float(r["l_cls"]), float(r["l_total"]),
                         float(r["val_total"]) if r["val_total"] else None)
                for r in _read_trainlog(paths["trainlog"][domain])
            ]
            resume = TrainResult(params=params, log=log, adam_state=adam_state)
        try:
            art = train_domain(prepared, report, domain, config, seed, resume=resume)
        except TrainingDiverged as exc:
            if exc.last_good is not None:
                save_checkpoint(paths["checkpoint"][domain], exc.last_good, meta={"diverged_at": exc.epoch, **prov})
                logger.error("%s tower diverged at epoch %s; last good checkpoint saved", domain, exc.epoch)
            raise
        meta = {
            "domain": domain,
            "cst": art.report.selected.names(),
            "positive_kind": art.report.positive_kind.value,
            **prov,
        }
        save_checkpoint(paths["checkpoint"][domain], art.result.params, meta=meta, adam_state=art.result.adam_state)
        save_bank(art.bank, paths["bank"][domain], provenance=prov)
        _write_trainlog(paths["trainlog"][domain], art.result.log, prov)
        final = art.result.log[-1].l_total if art.result.log else float("nan")
        print(f"{domain} tower: {len(art.result.log)} epochs, final loss {final:.4f} -> {paths['checkpoint'][domain]}")
        if not args.no_figures and art.result.log:
            from . import report as figs

            figs.plot_training_curves(
                [e.as_row() for e in art.result.log], out / f"training_curves.{domain}.png", title=f"{domain} tower"
            )
    return EXIT_OK


def _context_from_artifacts(paths: dict, config: RunConfig, prepared: PreparedData):
    towers = {}
    run_seed = None
    for domain in DOMAINS:
        for key in ("checkpoint", "bank"):
            if not paths[key][domain].exists():
                raise InputError(f"{paths[key][domain]}: missing; run `train` first")
        params, meta, _ = load_checkpoint(paths["checkpoint"][domain])
        report = load_report(paths["cst"][domain])
        bank = load_bank(paths["bank"][domain])
        run_seed = int(meta["seed"])
        towers[domain] = TowerArtifacts(
            domain=domain,
            report=report,
            result=TrainResult(params=params, log=[], adam_state=None),
            bank=bank,
        )
    return make_context(prepared, towers, config, run_seed), run_seed


def cmd_detect(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out)
    paths = _artifact_paths(out)
    prepared = _load_prepared(paths)
    ctx, run_seed = _context_from_artifacts(paths, config, prepared)
    episodes = {
        "test": prepared.time.test_episodes,
        "val": prepared.time.val_episodes,
        "train": prepared.time.train_episodes,
    }[args.split]()
    scores = score_dataset(episodes, ctx, prepared.time.known_labels)
    write_scores_csv(paths["scores"], scores, provenance=config.provenance(run_seed))
    print(f"scored {len(scores)} episodes -> {paths['scores']}")
    if args.attention_eid is not None:
        from .encoder import export_attention, save_attention_csv

        target = next((ep for ep in prepared.time.episodes if ep.eid == args.attention_eid), None)
        if target is None:
            raise InputError(f"episode {args.attention_eid} not found")
        mats = export_attention(ctx.time.params, target)
        attention_path = out / f"attention.{args.attention_eid}.csv"
        save_attention_csv(mats, attention_path)
        print(f"attention weights -> {attention_path}")
    if not args.no_figures and scores:
        from . import report as figs

        known = [s.sc_clan for s in scores if s.is_known]
        new = [s.sc_clan for s in scores if not s.is_known]
        if known and new:
            figs.plot_score_distributions(known, new, out / "score_hist.png")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _artifact_paths(out)
    prov = config.provenance()
    if args.scores:
        scores = read_scores_csv(args.scores)
        rep = report_from_scores(scores)
        reports, aggregate = [rep], None
    elif config.protocol == "one-class":
        raw = load_raw_manifest(config)
        reports, aggregate = run_one_class_suite(raw, config)
    elif config.protocol == "multi-class":
        raw = load_raw_manifest(config)
        rep = run_multi_class(raw, config)
        reports, aggregate = [rep], None
    else:
        # fixed known set, repeated over the configured seeds
        raw = load_raw_manifest(config)
        known = _known_labels(config, raw)
        runs = [record_from_result(run_single(raw, known, config, seed), seed) for seed in config.seeds]
        reports = [EvalReport(task_id="fixed-known", known_labels=sorted(known), runs=runs)]
        aggregate = None
    write_report_json(paths["report"], reports, aggregate, prov)
    table = report_table(reports, aggregate)
    paths["report_txt"].write_text(table + "\n", encoding="utf-8")
    print(table)
    rep = reports[0]
    known_scores = [x for r in rep.runs for x in r.known_scores]
    new_scores = [x for r in rep.runs for x in r.new_scores]
    if known_scores and new_scores:
        write_roc_csv(paths["roc"], known_scores, new_scores, provenance=prov)
        if not args.no_figures:
            from . import report as figs

            figs.plot_roc(known_scores, new_scores, out / "roc.png", auroc_value=rep.auroc_mean)
            figs.plot_score_distributions(known_scores, new_scores, out / "score_hist.eval.png")
    return EXIT_OK


def cmd_run_all(args: argparse.Namespace) -> int:
    for step in (cmd_prepare, cmd_cst, cmd_train):
        code = step(args)
        if code != EXIT_OK:
            return code
    args.split = getattr(args, "split", "test")
    args.attention_eid = getattr(args, "attention_eid", None)
    code = cmd_detect(args)
    if code != EXIT_OK:
        return code
    args.scores = str(_artifact_paths(Path(args.out))["scores"])
    return cmd_eval(args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="novact", description="Novel-activity detection pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (all fields optional)")
        p.add_argument("--out", default="runs/default", help="artifact directory")
        p.add_argument("--dataset", help="dataset path (overrides config)")
        p.add_argument("--format", choices=["episode-jsonl", "episode-csv-dir"], help="dataset format")
        p.add_argument("--known-labels", help="comma-separated known label ids")
        p.add_argument("--protocol", choices=["one-class", "multi-class"], help="evaluation protocol")
        p.add_argument("--seeds", help="comma-separated seeds")
        p.add_argument("--epochs", type=int, help="override training epochs")
        p.add_argument("--fft-length", type=int, help="override the FFT length")
        p.add_argument("--jobs", type=int, help="parallel jobs / torch threads")
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("prepare", help="ingest, split, normalize, pad, and derive spectra")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("cst", help="select strong transforms per domain")
    common(p)
    p.set_defaults(func=cmd_cst)

    p = sub.add_parser("train", help="train both towers and build representation banks")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score episodes against the trained towers")
    common(p)
    p.add_argument("--split", choices=["test", "val", "train"], default="test")
    p.add_argument("--attention-eid", type=int, help="also export attention weights for this episode")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="compute metrics from scores or run a protocol")
    common(p)
    p.add_argument("--scores", help="score a previously written scores.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-all", help="prepare + cst + train + detect + eval")
    common(p)
    p.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (InputError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except NovactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
