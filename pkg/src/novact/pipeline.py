"""End-to-end orchestration of one detection run.

prepare -> transform selection -> tower training -> banks -> scoring. Each
stage is a pure function of (inputs, config, seed); the CLI persists the
artifacts between stages, and the evaluation protocols drive this module
in memory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from . import seeds
from .augment import TransformKind
from .config import RunConfig
from .cst import AurocReport, CSTSet, build_auroc_report, select_positive_transform
from .data import (
    DatasetManifest,
    generate_synthetic,
    load_dataset,
    pad_and_mask,
    split_dataset,
    zscore_normalize,
)
from .detect import (
    FREQUENCY,
    TIME,
    DetectionScore,
    ScoringContext,
    TowerBundle,
    score_dataset,
)
from .encoder import EncoderConfig, ModelParams
from .errors import ConfigError, InputError
from .metrics import auroc, balanced_accuracy
from .spectral import DOMAIN_INDEX, build_spectral_manifest, normalize_spectral
from .training import RepresentationBank, TrainResult, build_representation_bank, train_tower

logger = logging.getLogger(__name__)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass
class PreparedData:
    time: DatasetManifest
    frequency: DatasetManifest

    def manifest(self, domain: str) -> DatasetManifest:
        return self.time if domain == TIME else self.frequency


@dataclass
class TowerArtifacts:
    domain: str
    report: AurocReport
    result: TrainResult
    bank: RepresentationBank


@dataclass
class RunMetrics:
    auroc_clan: float
    auroc_time: float
    auroc_freq: float
    balanced_accuracy: float
    n_test_known: int
    n_test_new: int


@dataclass
class PipelineResult:
    prepared: PreparedData
    towers: dict[str, TowerArtifacts]
    context: ScoringContext
    scores: list[DetectionScore]
    metrics: RunMetrics


def load_raw_manifest(config: RunConfig) -> DatasetManifest:
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic)
    return load_dataset(
        config.dataset_path,
        config.dataset_format,
        moving_average=config.moving_average,
        quantize_levels=config.ingest_quantize_levels,
    )


def resolve_fft_length(config: RunConfig, l_max: int) -> int | None:
    if config.fft_length is not None:
        return config.fft_length
    if config.fft_pow2:
        return _next_pow2(l_max)
    return None


def prepare(raw: DatasetManifest, known_labels: set[int], config: RunConfig, seed: int) -> PreparedData:
    """Split, standardize, pad, and derive the normalized spectral manifest."""
    manifest = split_dataset(raw, known_labels, ratios=config.ratios, seed=seeds.mix(seed, seeds.SPLIT))
    manifest = zscore_normalize(manifest)
    manifest = pad_and_mask(manifest)
    manifest.validate()
    freq = normalize_spectral(build_spectral_manifest(manifest, resolve_fft_length(config, manifest.l_max)))
    return PreparedData(time=manifest, frequency=freq)


def encoder_config_for(manifest: DatasetManifest, config: RunConfig, n_classes: int = 2) -> EncoderConfig:
    enc = config.encoder
    return EncoderConfig(
        in_channels=manifest.d,
        input_len=manifest.l_max,
        n_classes=n_classes,
        n_layers=enc.n_layers,
        n_heads=enc.n_heads,
        model_dim=enc.model_dim,
        ffn_dim=enc.ffn_dim,
        proj_dim=enc.proj_dim,
        dropout_rate=enc.dropout_rate,
    )


def _val_known(manifest: DatasetManifest) -> list:
    # Transform selection must not see new activities: score the shift on the
    # known-label part of the validation split only.
    return [ep for ep in manifest.val_episodes() if ep.label in manifest.known_labels]


def build_cst_reports(prepared: PreparedData, config: RunConfig, seed: int) -> dict[str, AurocReport]:
    reports = {}
    for domain in (TIME, FREQUENCY):
        manifest = prepared.manifest(domain)
        train_eps = manifest.train_episodes()
        val_eps = _val_known(manifest)
        if not train_eps or not val_eps:
            raise InputError(f"{domain} domain: transform selection needs train and known-val episodes")
        if config.cst_force:
            forced = CSTSet.from_names(list(config.cst_force))
            forced.validate(require_two=False)
            entries = [(k, 1.0 if k in forced.kinds else 0.0) for k in _non_identity()]
            reports[domain] = AurocReport(
                domain=domain,
                entries=entries,
                theta_cst=min(config.threshold_set),
                selected=forced,
                positive_kind=select_positive_transform(entries),
                fallback=True,
            )
            logger.warning("%s domain: selection bypassed, forcing transforms %s", domain, forced.names())
            continue
        reports[domain] = build_auroc_report(
            train_eps,
            val_eps,
            domain=domain,
            encoder_config=encoder_config_for(manifest, config),
            aug_params=config.transforms,
            disc_config=config.disc,
            seed=seeds.mix(seed, seeds.CST, DOMAIN_INDEX[domain]),
            threshold_set=config.threshold_set,
            jobs=config.jobs or 1,
        )
    return reports


def _non_identity() -> list[TransformKind]:
    from .augment import NON_IDENTITY_KINDS

    return list(NON_IDENTITY_KINDS)


def train_domain(
    prepared: PreparedData,
    report: AurocReport,
    domain: str,
    config: RunConfig,
    seed: int,
    resume: TrainResult | None = None,
) -> TowerArtifacts:
    manifest = prepared.manifest(domain)
    train_eps = manifest.train_episodes()
    cst = report.selected
    enc = encoder_config_for(manifest, config, n_classes=cst.k + 1)
    train_cfg = replace(config.train, seed=seeds.mix(seed, seeds.TRAIN, DOMAIN_INDEX[domain]))
    result = train_tower(
        train_eps,
        DOMAIN_INDEX[domain],
        cst,
        report.positive_kind,
        train_cfg,
        enc,
        config.transforms,
        val_episodes=_val_known(manifest) if config.track_val else None,
        resume=resume,
    )
    bank = build_representation_bank(
        result.params.astype("float64"),
        train_eps,
        cst,
        config.transforms,
        seed=score_seed(seed, domain),
    )
    return TowerArtifacts(domain=domain, report=report, result=result, bank=bank)


def score_seed(seed: int, domain: str) -> int:
    return seeds.mix(seed, seeds.SCORE, DOMAIN_INDEX[domain])


def make_context(
    prepared: PreparedData,
    towers: dict[str, TowerArtifacts],
    config: RunConfig,
    seed: int,
) -> ScoringContext:
    def bundle(domain: str, params64: ModelParams | None = None) -> TowerBundle:
        art = towers[domain]
        return TowerBundle(
            domain=domain,
            params=params64 if params64 is not None else art.result.params.astype("float64"),
            bank=art.bank,
            cst=art.report.selected,
            aug_params=config.transforms,
            seed=score_seed(seed, domain),
        )

    stats = prepared.frequency.norm_stats
    if not stats:
        raise ConfigError("prepared frequency manifest is missing its normalization statistics")
    ctx = ScoringContext(
        time=bundle(TIME),
        frequency=bundle(FREQUENCY),
        spectral_stats=stats,
        fft_length=resolve_fft_length(config, prepared.time.l_max),
        variant=config.score_variant,
    )
    ctx.validate()
    return ctx


def compute_metrics(scores: list[DetectionScore]) -> RunMetrics:
    known = [s for s in scores if s.is_known]
    new = [s for s in scores if not s.is_known]
    if not known or not new:
        raise InputError("metrics need both known and new episodes in the scored split")
    return RunMetrics(
        auroc_clan=auroc([s.sc_clan for s in known], [s.sc_clan for s in new]),
        auroc_time=auroc([s.sc_t for s in known], [s.sc_t for s in new]),
        auroc_freq=auroc([s.sc_f for s in known], [s.sc_f for s in new]),
        balanced_accuracy=balanced_accuracy(
            [s.sc_clan for s in scores], [s.is_known for s in scores]
        ),
        n_test_known=len(known),
        n_test_new=len(new),
    )


def run_single(raw: DatasetManifest, known_labels: set[int], config: RunConfig, seed: int) -> PipelineResult:
    """One full detection run for a fixed known-label set and seed."""
    prepared = prepare(raw, known_labels, config, seed)
    reports = build_cst_reports(prepared, config, seed)
    towers = {domain: train_domain(prepared, reports[domain], domain, config, seed) for domain in (TIME, FREQUENCY)}
    ctx = make_context(prepared, towers, config, seed)
    scores = score_dataset(prepared.time.test_episodes(), ctx, prepared.time.known_labels)
    return PipelineResult(
        prepared=prepared,
        towers=towers,
        context=ctx,
        scores=scores,
        metrics=compute_metrics(scores),
    )
