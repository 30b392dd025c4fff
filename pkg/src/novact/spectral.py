"""Frequency-domain view of episodes.

The frequency tower consumes the one-sided amplitude spectrum of the full
padded episode, so the spectral length is fixed per dataset. Amplitudes are
then standardized per (channel, frequency bin) with train-split statistics,
mirroring the time-domain preprocessing.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import DatasetManifest, Episode
from .errors import ConfigError

TIME = "time"
FREQUENCY = "frequency"
DOMAINS = (TIME, FREQUENCY)
DOMAIN_INDEX = {TIME: 0, FREQUENCY: 1}


def spectral_length(l_max: int) -> int:
    return l_max // 2 + 1


def fft_complex(values: np.ndarray) -> np.ndarray:
    """One-sided complex DFT per channel (test hook for linearity checks)."""
    return np.fft.rfft(np.asarray(values, dtype=np.float64), axis=-1)


def fft_magnitude(episode: Episode, fft_length: int | None = None) -> Episode:
    """One-sided amplitude spectrum of the padded episode.

    The transform always runs over the full padded length (zero padding
    included) so every episode maps to the same number of bins; the result is
    a fully-"real" episode (all-true mask) in amplitude units.
    """
    values = episode.values
    if fft_length is not None:
        if fft_length < values.shape[1]:
            values = values[:, :fft_length]
        elif fft_length > values.shape[1]:
            pad = np.zeros((values.shape[0], fft_length - values.shape[1]))
            values = np.concatenate([values, pad], axis=1)
    spectrum = np.abs(fft_complex(values))
    l_f = spectrum.shape[1]
    return Episode(
        values=spectrum,
        mask=np.ones(l_f, dtype=bool),
        raw_len=l_f,
        label=episode.label,
        eid=episode.eid,
        subject=episode.subject,
    )


def parseval_gap(episode: Episode) -> float:
    """Relative Parseval mismatch between time power and one-sided spectrum.

    Rebuilds the full-spectrum power from the one-sided amplitudes by doubling
    the interior bins (bin 0 and, for even lengths, the Nyquist bin appear
    once).
    """
    l = episode.length
    spectrum = np.abs(fft_complex(episode.values))
    weights = np.full(spectrum.shape[1], 2.0)
    weights[0] = 1.0
    if l % 2 == 0:
        weights[-1] = 1.0
    power_freq = (weights * spectrum**2).sum() / l
    power_time = (episode.values**2).sum()
    denom = max(abs(power_time), 1e-30)
    return abs(power_time - power_freq) / denom


def build_spectral_manifest(manifest: DatasetManifest, fft_length: int | None = None) -> DatasetManifest:
    """Map a padded time-domain manifest to its spectral counterpart."""
    if fft_length is not None and fft_length < 2:
        raise ConfigError(f"fft_length must be >= 2, got {fft_length}")
    episodes = [fft_magnitude(ep, fft_length) for ep in manifest.episodes]
    l_f = episodes[0].length
    return replace(manifest, episodes=episodes, l_max=l_f, norm_stats=None)


def normalize_spectral(manifest: DatasetManifest) -> DatasetManifest:
    """Standardize each (channel, bin) cell using train-split statistics."""
    train = manifest.train_episodes()
    if not train:
        raise ConfigError("normalize_spectral needs a non-empty train split")
    stacked = np.stack([ep.values for ep in train])  # [n, D, L_F]
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    episodes = [replace(ep, values=(ep.values - mean) / std) for ep in manifest.episodes]
    stats = {"kind": "per-bin", "mean": mean.tolist(), "std": std.tolist()}
    return replace(manifest, episodes=episodes, norm_stats=stats)


def normalize_spectral_episode(episode: Episode, stats: dict) -> Episode:
    """Apply stored per-bin statistics to one spectral episode."""
    if not stats or stats.get("kind") != "per-bin":
        raise ConfigError("expected per-bin spectral statistics")
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    if mean.shape != episode.values.shape:
        raise ConfigError(
            f"spectral stats shape {mean.shape} does not match episode shape {episode.values.shape}"
        )
    return replace(episode, values=(episode.values - mean) / std)
