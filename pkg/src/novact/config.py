"""Run configuration: one declarative JSON document with full defaulting.

Every hyperparameter of the reference recipe is a default here, so an empty
config runs the standard pipeline; any override is recorded in artifact
provenance through the config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import TransformParams
from .cst import THRESHOLD_SET, DiscriminatorConfig
from .data import SyntheticSpec
from .detect import SIM_NORM_VARIANT, SIM_VARIANT
from .errors import ConfigError, ParseError
from .training import TrainConfig


@dataclass(frozen=True)
class EncoderSettings:
    n_layers: int = 2
    n_heads: int = 1
    model_dim: int = 64
    ffn_dim: int | None = None  # None -> twice the input length
    proj_dim: int = 128
    dropout_rate: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    dataset_path: str | None = None
    dataset_format: str = "episode-jsonl"
    synthetic: SyntheticSpec | None = None
    known_labels: tuple[int, ...] | None = None
    protocol: str | None = None  # 'one-class' | 'multi-class'
    seeds: tuple[int, ...] = (0,)
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    moving_average: int | None = None
    ingest_quantize_levels: int | None = None
    fft_length: int | None = None
    fft_pow2: bool = False
    transforms: TransformParams = field(default_factory=TransformParams)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    threshold_set: tuple[float, ...] = THRESHOLD_SET
    cst_force: tuple[str, ...] | None = None  # bypass selection with fixed transforms
    score_variant: str = SIM_VARIANT
    percentile: float | None = None  # None -> empirical new-class share
    n_trials: int = 10
    jobs: int | None = None  # None -> use every available core
    track_val: bool = False

    def validate(self) -> None:
        if (self.dataset_path is None) == (self.synthetic is None):
            raise ConfigError("exactly one of dataset_path / synthetic must be set")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.protocol is not None and self.protocol not in ("one-class", "multi-class"):
            raise ConfigError("protocol must be 'one-class' or 'multi-class'")
        if self.protocol is None and self.known_labels is None:
            raise ConfigError("set known_labels or a protocol")
        if self.score_variant not in (SIM_VARIANT, SIM_NORM_VARIANT):
            raise ConfigError(f"score_variant must be '{SIM_VARIANT}' or '{SIM_NORM_VARIANT}'")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self.transforms.validate()
        self.train.validate()
        self.disc.validate()

    def to_dict(self) -> dict:
        def unwrap(value):
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                return {k: unwrap(v) for k, v in dataclasses.asdict(value).items()}
            if isinstance(value, tuple):
                return [unwrap(v) for v in value]
            return value

        return {f.name: unwrap(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self, seed: int | None = None) -> dict:
        prov = {"config_hash": self.config_hash()}
        prov["seed"] = seed if seed is not None else list(self.seeds)
        return prov


def _tuple_of_tuples(value) -> tuple[tuple[float, float], ...]:
    return tuple((float(a), float(b)) for a, b in value)


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, defaulting every missing field."""
    doc = dict(doc)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict = {}
    if doc.get("synthetic") is not None:
        syn = dict(doc.pop("synthetic"))
        if "frequency_bands" in syn:
            syn["frequency_bands"] = _tuple_of_tuples(syn["frequency_bands"])
        kwargs["synthetic"] = SyntheticSpec(**syn)
    for key, cls in (("transforms", TransformParams), ("encoder", EncoderSettings), ("train", TrainConfig), ("disc", DiscriminatorConfig)):
        if doc.get(key) is not None:
            try:
                kwargs[key] = cls(**doc.pop(key))
            except TypeError as exc:
                raise ConfigError(f"bad '{key}' section: {exc}") from exc
    for key in ("known_labels", "seeds", "ratios", "threshold_set", "cst_force"):
        if doc.get(key) is not None:
            kwargs[key] = tuple(doc.pop(key))
    for key, value in doc.items():
        if key in ("synthetic",):
            continue
        kwargs[key] = value
    try:
        config = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc
    return config


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)
