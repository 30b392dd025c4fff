"""Episode data model, ingestion, preprocessing, splitting, and synthetic data.

An episode is one pre-segmented activity instance: a [channels x timesteps]
real matrix plus a padding mask. Ingestion never normalizes or pads;
`zscore_normalize` and `pad_and_mask` are explicit steps so that statistics
always come from the train split only.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeds
from .errors import ConfigError, InvariantError, LengthError, ParseError, SchemaError

logger = logging.getLogger(__name__)

PAD_VALUE = 0.0
TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)

MANIFEST_FORMAT = "novact-manifest"
MANIFEST_VERSION = 1


@dataclass
class Episode:
    """One activity instance.

    values has shape [n_channels, length]; the first `raw_len` timesteps are
    real, the rest carry the pad value. mask is True exactly on the real
    prefix.
    """

    values: np.ndarray
    mask: np.ndarray
    raw_len: int
    label: int
    eid: int
    subject: str | None = None

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def unpadded(self) -> np.ndarray:
        return self.values[:, : self.raw_len]

    def validate(self) -> None:
        d, length = self.values.shape
        if d < 1:
            raise InvariantError(f"episode {self.eid}: needs at least one channel")
        if not (1 <= self.raw_len <= length):
            raise InvariantError(f"episode {self.eid}: raw_len {self.raw_len} outside [1, {length}]")
        if self.mask.shape != (length,):
            raise InvariantError(f"episode {self.eid}: mask shape {self.mask.shape} != ({length},)")
        expected = np.arange(length) < self.raw_len
        if not np.array_equal(self.mask, expected):
            raise InvariantError(f"episode {self.eid}: mask must be {self.raw_len} leading True entries")
        if self.raw_len < length and not np.all(self.values[:, self.raw_len :] == PAD_VALUE):
            raise InvariantError(f"episode {self.eid}: padded positions must hold {PAD_VALUE}")


def make_episode(values: np.ndarray, label: int, eid: int, subject: str | None = None) -> Episode:
    """Build an unpadded episode (mask all-true) from a [D, L] array."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise SchemaError(f"episode {eid}: values must be 2-D [channels, timesteps], got shape {values.shape}")
    mask = np.ones(values.shape[1], dtype=bool)
    return Episode(values=values, mask=mask, raw_len=values.shape[1], label=int(label), eid=int(eid), subject=subject)


@dataclass
class DatasetManifest:
    """A set of episodes with optional split assignments and known-label set."""

    episodes: list[Episode]
    known_labels: set[int] = field(default_factory=set)
    split: dict[int, str] = field(default_factory=dict)
    l_max: int = 0
    d: int = 0
    norm_stats: dict | None = None

    def episodes_in(self, split_name: str) -> list[Episode]:
        return [ep for ep in self.episodes if self.split.get(ep.eid) == split_name]

    def train_episodes(self) -> list[Episode]:
        return self.episodes_in(TRAIN)

    def val_episodes(self) -> list[Episode]:
        return self.episodes_in(VAL)

    def test_episodes(self) -> list[Episode]:
        return self.episodes_in(TEST)

    def labels(self) -> set[int]:
        return {ep.label for ep in self.episodes}

    def validate(self) -> None:
        eids = [ep.eid for ep in self.episodes]
        if len(set(eids)) != len(eids):
            raise InvariantError("episode ids must be unique")
        for ep in self.episodes:
            ep.validate()
            if ep.n_channels != self.d:
                raise InvariantError(f"episode {ep.eid}: channel count {ep.n_channels} != manifest d={self.d}")
        if self.split:
            for ep in self.train_episodes():
                if ep.label not in self.known_labels:
                    raise InvariantError(f"train episode {ep.eid} has non-known label {ep.label}")
            new_labels = self.labels() - self.known_labels
            if new_labels:
                for name in (VAL, TEST):
                    eps = self.episodes_in(name)
                    if not any(ep.label in self.known_labels for ep in eps):
                        raise InvariantError(f"{name} split has no known-label episode")
                    if not any(ep.label not in self.known_labels for ep in eps):
                        raise InvariantError(f"{name} split has no new-label episode")


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return values
    kernel = np.full(width, 1.0 / width)
    pad = width // 2
    out = np.empty_like(values)
    for c in range(values.shape[0]):
        padded = np.pad(values[c], pad, mode="edge")
        conv = np.convolve(padded, kernel, mode="valid")
        out[c] = conv[: values.shape[1]]
    return out


def _level_quantize(values: np.ndarray, n_levels: int) -> np.ndarray:
    out = values.copy()
    for c in range(values.shape[0]):
        lo, hi = out[c].min(), out[c].max()
        if hi - lo < 1e-12:
            continue
        levels = np.linspace(lo, hi, n_levels)
        idx = np.rint((out[c] - lo) / (hi - lo) * (n_levels - 1)).astype(int)
        out[c] = levels[idx]
    return out


def _ingest_filters(values: np.ndarray, moving_average: int | None, quantize_levels: int | None) -> np.ndarray:
    if moving_average is not None:
        values = _smooth(values, int(moving_average))
    if quantize_levels is not None:
        values = _level_quantize(values, int(quantize_levels))
    return values


def _finish_manifest(episodes: list[Episode]) -> DatasetManifest:
    if not episodes:
        raise ParseError("no episodes found")
    d = episodes[0].n_channels
    for ep in episodes:
        if ep.n_channels != d:
            raise SchemaError(f"episode {ep.eid}: channel count {ep.n_channels} != first record's {d}")
    l_max = max(ep.raw_len for ep in episodes)
    return DatasetManifest(episodes=episodes, l_max=l_max, d=d)


def _load_jsonl(path: Path, moving_average: int | None, quantize_levels: int | None) -> list[Episode]:
    episodes: list[Episode] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict) or "label" not in record or "values" not in record:
                raise ParseError(f"{path}:{lineno}: record must be an object with 'label' and 'values'")
            try:
                values = np.asarray(record["values"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: values are not a rectangular numeric matrix") from exc
            if values.ndim != 2 or values.shape[1] < 1:
                raise ParseError(f"{path}:{lineno}: values must be [channels][timesteps], got shape {values.shape}")
            values = _ingest_filters(values, moving_average, quantize_levels)
            episodes.append(make_episode(values, record["label"], eid=len(episodes), subject=record.get("subject")))
    return episodes


def _load_csv_dir(path: Path, moving_average: int | None, quantize_levels: int | None) -> list[Episode]:
    files = sorted(path.glob("*.csv"))
    if not files:
        raise ParseError(f"{path}: no .csv files found")
    episodes: list[Episode] = []
    for f in files:
        stem = f.stem
        head = stem.split("_", 1)[0]
        try:
            label = int(head)
        except ValueError as exc:
            raise ParseError(f"{f}: filename must look like '<label>_<id>.csv'") from exc
        rows: list[list[float]] = []
        with open(f, newline="", encoding="utf-8") as fh:
            for rowno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ParseError(f"{f}:{rowno}: non-numeric cell") from exc
        if not rows:
            raise ParseError(f"{f}: empty episode")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ParseError(f"{f}: ragged rows (channel counts {sorted(widths)})")
        values = np.asarray(rows, dtype=np.float64).T  # rows are timesteps
        values = _ingest_filters(values, moving_average, quantize_levels)
        episodes.append(make_episode(values, label, eid=len(episodes)))
    return episodes


def load_dataset(
    path: str | Path,
    format: str = "episode-jsonl",
    moving_average: int | None = None,
    quantize_levels: int | None = None,
) -> DatasetManifest:
    """Load episodes from disk without normalizing or padding.

    Formats: 'episode-jsonl' (one JSON object per line, channel-major values)
    or 'episode-csv-dir' (one CSV per episode, rows = timesteps, label encoded
    in the filename '<label>_<id>.csv'). Optional smoothing / value
    quantization run per episode at ingest and default to off.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file or directory")
    if format == "episode-jsonl":
        episodes = _load_jsonl(path, moving_average, quantize_levels)
    elif format == "episode-csv-dir":
        if not path.is_dir():
            raise ParseError(f"{path}: episode-csv-dir expects a directory")
        episodes = _load_csv_dir(path, moving_average, quantize_levels)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    return _finish_manifest(episodes)


def zscore_normalize(manifest: DatasetManifest) -> DatasetManifest:
    """Standardize every channel using train-split statistics only.

    Channels with train-split std below 1e-8 pass through centered (std
    clamped to 1). Only unpadded positions are transformed.
    """
    train = manifest.train_episodes()
    if not train:
        raise ConfigError("zscore_normalize needs a non-empty train split; run split_dataset first")
    pooled = np.concatenate([ep.unpadded() for ep in train], axis=1)
    mean = pooled.mean(axis=1)
    std = pooled.std(axis=1)
    std = np.where(std < 1e-8, 1.0, std)
    episodes = []
    for ep in manifest.episodes:
        values = ep.values.copy()
        values[:, : ep.raw_len] = (values[:, : ep.raw_len] - mean[:, None]) / std[:, None]
        episodes.append(replace(ep, values=values))
    stats = {"kind": "per-channel", "mean": mean.tolist(), "std": std.tolist()}
    return replace(manifest, episodes=episodes, norm_stats=stats)


def pad_and_mask(manifest: DatasetManifest, l_max: int | None = None) -> DatasetManifest:
    """Right-pad every episode with the pad value to a common length."""
    if l_max is None:
        l_max = manifest.l_max
    longest = max(ep.raw_len for ep in manifest.episodes)
    if l_max < longest:
        raise LengthError(f"l_max={l_max} is shorter than the longest episode ({longest})")
    episodes = []
    for ep in manifest.episodes:
        values = np.full((ep.n_channels, l_max), PAD_VALUE, dtype=np.float64)
        values[:, : ep.raw_len] = ep.values[:, : ep.raw_len]
        mask = np.arange(l_max) < ep.raw_len
        episodes.append(replace(ep, values=values, mask=mask))
    return replace(manifest, episodes=episodes, l_max=l_max)


def _apportion(n: int, ratios: tuple[float, float, float]) -> list[int]:
    """Largest-remainder split of n items into three buckets."""
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = max(range(3), key=lambda k: (remainders[k], -k))
        counts[i] += 1
        remainders[i] = -1.0
    return counts


def split_dataset(
    manifest: DatasetManifest,
    known_labels: set[int],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> DatasetManifest:
    """Assign train/val/test splits.

    Known-label episodes split per class by `ratios`; other labels go to
    val/test 50/50 so the train split contains known activities only. The
    shuffle is keyed by (seed, label), making the split reproducible.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three values summing to 1, got {ratios}")
    known_labels = {int(x) for x in known_labels}
    missing = known_labels - manifest.labels()
    if missing:
        raise ConfigError(f"known labels {sorted(missing)} not present in the dataset")
    by_label: dict[int, list[int]] = {}
    for ep in manifest.episodes:
        by_label.setdefault(ep.label, []).append(ep.eid)

    split: dict[int, str] = {}
    for label in sorted(by_label):
        eids = sorted(by_label[label])
        rng = seeds.substream(seed, seeds.SPLIT, label)
        order = rng.permutation(len(eids))
        shuffled = [eids[i] for i in order]
        n = len(shuffled)
        if label in known_labels:
            if n < 3:
                logger.warning("known class %d has only %d episode(s); best-effort split", label, n)
            counts = _apportion(n, ratios)
            if counts[0] == 0:  # train must see every known class
                donor = max(range(1, 3), key=lambda k: counts[k])
                counts[donor] -= 1
                counts[0] += 1
            if n >= 3:
                for bucket in (1, 2):
                    if counts[bucket] == 0 and counts[0] >= 2:
                        counts[0] -= 1
                        counts[bucket] += 1
            names = [TRAIN] * counts[0] + [VAL] * counts[1] + [TEST] * counts[2]
        else:
            n_val = (n + 1) // 2
            names = [VAL] * n_val + [TEST] * (n - n_val)
        for eid, name in zip(shuffled, names):
            split[eid] = name
    return replace(manifest, known_labels=known_labels, split=split)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a band-limited synthetic episode dataset.

    Each class owns a frequency band (cycles per episode); every channel of an
    episode is a sum of `n_sinusoids` random-phase sinusoids with frequencies
    drawn from the class band, plus Gaussian noise and a random circular time
    shift. Fully determined by `seed`.
    """

    n_known_classes: int
    n_new_classes: int
    episodes_per_class: int
    d: int
    l: int
    frequency_bands: tuple[tuple[float, float], ...]
    noise_std: float = 0.0
    jitter: int = 0
    n_sinusoids: int = 2
    separable: bool = True
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.n_known_classes + self.n_new_classes

    def validate(self) -> None:
        if self.n_known_classes < 1 or self.n_new_classes < 0:
            raise ConfigError("need at least one known class and a non-negative new-class count")
        if self.episodes_per_class < 1 or self.d < 1 or self.l < 2:
            raise ConfigError("episodes_per_class and d must be >= 1, l >= 2")
        if self.n_sinusoids < 1:
            raise ConfigError("n_sinusoids must be >= 1")
        if len(self.frequency_bands) != self.n_classes:
            raise ConfigError(
                f"need one frequency band per class ({self.n_classes}), got {len(self.frequency_bands)}"
            )
        for lo, hi in self.frequency_bands:
            if not (0 <= lo <= hi):
                raise ConfigError(f"bad frequency band ({lo}, {hi})")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")
        if self.separable:
            for k in range(self.n_known_classes):
                for n in range(self.n_known_classes, self.n_classes):
                    klo, khi = self.frequency_bands[k]
                    nlo, nhi = self.frequency_bands[n]
                    if khi >= nlo and nhi >= klo:
                        raise ConfigError(
                            f"separable=True but known band {k} {self.frequency_bands[k]} overlaps "
                            f"new band {n} {self.frequency_bands[n]}"
                        )


def generate_synthetic(spec: SyntheticSpec) -> DatasetManifest:
    """Generate a synthetic manifest (unsplit, unnormalized)."""
    spec.validate()
    episodes: list[Episode] = []
    t = np.arange(spec.l, dtype=np.float64)
    for cls in range(spec.n_classes):
        lo, hi = spec.frequency_bands[cls]
        for idx in range(spec.episodes_per_class):
            rng = seeds.substream(spec.seed, seeds.SYNTH, cls, idx)
            values = np.zeros((spec.d, spec.l), dtype=np.float64)
            for c in range(spec.d):
                freqs = rng.uniform(lo, hi, spec.n_sinusoids)
                phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_sinusoids)
                for f, ph in zip(freqs, phases):
                    values[c] += np.sin(2.0 * np.pi * f * t / spec.l + ph)
            if spec.jitter > 0:
                shift = int(rng.integers(-spec.jitter, spec.jitter + 1))
                values = np.roll(values, shift, axis=1)
            if spec.noise_std > 0:
                values = values + rng.normal(0.0, spec.noise_std, values.shape)
            episodes.append(make_episode(values, label=cls, eid=len(episodes)))
    manifest = _finish_manifest(episodes)
    manifest.known_labels = set(range(spec.n_known_classes))
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path, provenance: dict | None = None) -> None:
    """Persist a manifest (episodes, split, stats) as a single JSON document."""
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "provenance": provenance or {},
        "d": manifest.d,
        "l_max": manifest.l_max,
        "known_labels": sorted(manifest.known_labels),
        "split": {str(eid): name for eid, name in sorted(manifest.split.items())},
        "norm_stats": manifest.norm_stats,
        "episodes": [
            {
                "eid": ep.eid,
                "label": ep.label,
                "subject": ep.subject,
                "raw_len": ep.raw_len,
                "values": ep.values.tolist(),
            }
            for ep in manifest.episodes
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"{path}: not a manifest file")
    episodes = []
    for rec in doc["episodes"]:
        values = np.asarray(rec["values"], dtype=np.float64)
        raw_len = int(rec["raw_len"])
        mask = np.arange(values.shape[1]) < raw_len
        episodes.append(
            Episode(
                values=values,
                mask=mask,
                raw_len=raw_len,
                label=int(rec["label"]),
                eid=int(rec["eid"]),
                subject=rec.get("subject"),
            )
        )
    return DatasetManifest(
        episodes=episodes,
        known_labels={int(x) for x in doc["known_labels"]},
        split={int(k): v for k, v in doc["split"].items()},
        l_max=int(doc["l_max"]),
        d=int(doc["d"]),
        norm_stats=doc.get("norm_stats"),
    )
