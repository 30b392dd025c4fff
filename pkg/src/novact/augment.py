"""Seeded time-series transforms used to build contrastive views.

All transforms act on the unpadded prefix of an episode only and preserve
shape, mask, length, and label. Randomness comes exclusively from the
generator handed in, which callers key by (seed, episode id, kind) so that
batches can run in parallel without changing any output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.signal import windows as _windows

from . import seeds
from .data import Episode
from .errors import ConfigError

logger = logging.getLogger(__name__)


class TransformKind(Enum):
    IDENTITY = "identity"
    ADDNOISE = "addnoise"
    CONVOLVE = "convolve"
    PERMUTE = "permute"
    DRIFT = "drift"
    DROPOUT = "dropout"
    POOL = "pool"
    QUANTIZE = "quantize"
    SCALE = "scale"
    REVERSE = "reverse"
    TIMEWARP = "timewarp"


ALL_KINDS: tuple[TransformKind, ...] = tuple(TransformKind)
NON_IDENTITY_KINDS: tuple[TransformKind, ...] = tuple(k for k in TransformKind if k is not TransformKind.IDENTITY)
KIND_INDEX: dict[TransformKind, int] = {kind: i for i, kind in enumerate(ALL_KINDS)}

# Transforms that need at least two real timesteps to mean anything.
_NEEDS_LENGTH = {TransformKind.PERMUTE, TransformKind.TIMEWARP, TransformKind.POOL}


def kind_from_name(name: str) -> TransformKind:
    try:
        return TransformKind(name.lower())
    except ValueError as exc:
        valid = ", ".join(k.value for k in ALL_KINDS)
        raise ConfigError(f"unknown transform {name!r}; valid kinds: {valid}") from exc


@dataclass(frozen=True)
class TransformParams:
    """Per-kind knobs; the defaults are the standard values for sensor data."""

    noise_scale: float = 0.01
    convolve_window: str = "flattop"
    convolve_size: int = 11
    permute_min_segments: int = 1
    permute_max_segments: int = 5
    drift_max: float = 0.7
    drift_points: int = 5
    dropout_p: float = 0.10
    dropout_fill: float = 0.0
    pool_size: int = 4
    quantize_levels: int = 20
    scale_loc: float = 2.0
    scale_sigma: float = 1.1
    timewarp_changes: int = 5
    timewarp_max_ratio: float = 3.0

    def validate(self) -> None:
        positive = {
            "noise_scale": self.noise_scale,
            "convolve_size": self.convolve_size,
            "permute_min_segments": self.permute_min_segments,
            "permute_max_segments": self.permute_max_segments,
            "drift_max": self.drift_max,
            "drift_points": self.drift_points,
            "pool_size": self.pool_size,
            "scale_sigma": self.scale_sigma,
            "timewarp_changes": self.timewarp_changes,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"transform parameter {name} must be > 0, got {value}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.quantize_levels < 2:
            raise ConfigError(f"quantize_levels must be >= 2, got {self.quantize_levels}")
        if self.permute_min_segments > self.permute_max_segments:
            raise ConfigError("permute_min_segments must be <= permute_max_segments")
        if self.timewarp_max_ratio < 1.0:
            raise ConfigError(f"timewarp_max_ratio must be >= 1, got {self.timewarp_max_ratio}")


def _addnoise(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    return v + rng.normal(0.0, p.noise_scale, v.shape)


def _convolve(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    n = v.shape[1]
    size = min(p.convolve_size, 2 * n - 1)
    if size % 2 == 0:
        size -= 1
    if size < 2:
        return v.copy()
    window = _windows.get_window(p.convolve_window, size, fftbins=False)
    window = window / window.sum()
    half = size // 2
    out = np.empty_like(v)
    for c in range(v.shape[0]):
        padded = np.pad(v[c], half, mode="reflect")
        out[c] = np.convolve(padded, window, mode="valid")
    return out


def _permute(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    n = v.shape[1]
    k = int(rng.integers(p.permute_min_segments, p.permute_max_segments + 1))
    k = min(k, n)
    if k <= 1:
        return v.copy()
    cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False))
    segments = np.split(np.arange(n), cuts)
    order = rng.permutation(k)
    index = np.concatenate([segments[i] for i in order])
    return v[:, index]


def _drift(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    n = v.shape[1]
    out = v.copy()
    knots_x = np.linspace(0.0, n - 1.0, p.drift_points + 2)
    grid = np.arange(n, dtype=np.float64)
    for c in range(v.shape[0]):
        knots_y = np.zeros(p.drift_points + 2)
        knots_y[1:-1] = rng.uniform(-1.0, 1.0, p.drift_points)
        if n == 1:
            continue
        curve = PchipInterpolator(knots_x, knots_y)(grid)
        peak = np.abs(curve).max()
        span = out[c].max() - out[c].min()
        if peak > 0:
            out[c] = out[c] + curve * (p.drift_max * span / peak)
    return out


def _dropout(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    out = v.copy()
    drop = rng.random(v.shape) < p.dropout_p
    out[drop] = p.dropout_fill
    return out


def _pool(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    n = v.shape[1]
    out = v.copy()
    for start in range(0, n, p.pool_size):
        stop = min(start + p.pool_size, n)
        out[:, start:stop] = out[:, start:stop].mean(axis=1, keepdims=True)
    return out


def _quantize(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    out = v.copy()
    for c in range(v.shape[0]):
        lo, hi = out[c].min(), out[c].max()
        if hi - lo < 1e-12:
            continue
        levels = np.linspace(lo, hi, p.quantize_levels)
        idx = np.rint((out[c] - lo) / (hi - lo) * (p.quantize_levels - 1)).astype(int)
        out[c] = levels[idx]
    return out


def _scale(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    factors = rng.normal(p.scale_loc, p.scale_sigma, (v.shape[0], 1))
    return v * factors


def _reverse(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    return v[:, ::-1].copy()


def _timewarp(v: np.ndarray, p: TransformParams, rng: np.random.Generator) -> np.ndarray:
    n = v.shape[1]
    n_seg = min(p.timewarp_changes, n - 1)
    # Log-uniform speeds in [1, max_ratio]: the fastest/slowest local playback
    # ratio is bounded by max_ratio, and the bound survives renormalization.
    speeds = np.exp(rng.uniform(0.0, np.log(p.timewarp_max_ratio), n_seg))
    knots_x = np.linspace(0.0, 1.0, n_seg + 1)
    knots_y = np.concatenate([[0.0], np.cumsum(speeds)])
    knots_y /= knots_y[-1]
    t_out = np.linspace(0.0, 1.0, n)
    positions = np.interp(t_out, knots_x, knots_y) * (n - 1)
    grid = np.arange(n, dtype=np.float64)
    out = np.empty_like(v)
    for c in range(v.shape[0]):
        out[c] = np.interp(positions, grid, v[c])
    return out


_DISPATCH = {
    TransformKind.ADDNOISE: _addnoise,
    TransformKind.CONVOLVE: _convolve,
    TransformKind.PERMUTE: _permute,
    TransformKind.DRIFT: _drift,
    TransformKind.DROPOUT: _dropout,
    TransformKind.POOL: _pool,
    TransformKind.QUANTIZE: _quantize,
    TransformKind.SCALE: _scale,
    TransformKind.REVERSE: _reverse,
    TransformKind.TIMEWARP: _timewarp,
}


def apply_transform(
    episode: Episode,
    kind: TransformKind,
    params: TransformParams,
    rng: np.random.Generator,
) -> Episode:
    """Apply one transform to the unpadded prefix of an episode.

    The padding tail, mask, raw_len, and label are preserved. Transforms that
    need at least two real timesteps degenerate to the identity (with a
    warning) on shorter episodes.
    """
    params.validate()
    if kind is TransformKind.IDENTITY:
        return Episode(
            values=episode.values.copy(),
            mask=episode.mask.copy(),
            raw_len=episode.raw_len,
            label=episode.label,
            eid=episode.eid,
            subject=episode.subject,
        )
    if episode.raw_len < 2 and kind in _NEEDS_LENGTH:
        logger.warning(
            "episode %d: %s needs raw_len >= 2 (got %d); falling back to identity",
            episode.eid,
            kind.value,
            episode.raw_len,
        )
        return apply_transform(episode, TransformKind.IDENTITY, params, rng)
    prefix = episode.values[:, : episode.raw_len]
    transformed = _DISPATCH[kind](prefix, params, rng)
    values = episode.values.copy()
    values[:, : episode.raw_len] = transformed
    return Episode(
        values=values,
        mask=episode.mask.copy(),
        raw_len=episode.raw_len,
        label=episode.label,
        eid=episode.eid,
        subject=episode.subject,
    )


def transform_rng(seed: int, eid: int, kind: TransformKind) -> np.random.Generator:
    """The canonical per-(seed, episode, kind) stream used across the pipeline."""
    return seeds.substream(seed, seeds.AUGMENT, eid, KIND_INDEX[kind])


def transform_batch(
    episodes: list[Episode],
    kind: TransformKind,
    params: TransformParams,
    seed: int,
) -> list[Episode]:
    """Apply one transform per episode with independent per-episode streams.

    Episode i's output depends only on (seed, episode i, kind), never on the
    rest of the batch, so batches may be processed in any order or in
    parallel.
    """
    return [apply_transform(ep, kind, params, transform_rng(seed, ep.eid, kind)) for ep in episodes]
