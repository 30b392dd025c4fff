import numpy as np
import pytest

from novact.config import RunConfig, config_from_dict
from novact.data import DatasetManifest, SyntheticSpec, generate_synthetic, make_episode


@pytest.fixture(scope="session")
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(
        n_known_classes=2,
        n_new_classes=1,
        episodes_per_class=10,
        d=2,
        l=32,
        frequency_bands=((2.0, 3.0), (4.0, 5.0), (10.0, 12.0)),
        noise_std=0.2,
        jitter=2,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_manifest(small_spec) -> DatasetManifest:
    return generate_synthetic(small_spec)


@pytest.fixture()
def episode() -> "Episode":
    rng = np.random.default_rng(0)
    values = rng.normal(size=(2, 12))
    return make_episode(values, label=1, eid=0)


def padded_episode(values, raw_len, label=0, eid=0):
    """Build an episode whose tail is explicit padding."""
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    out[:, raw_len:] = 0.0
    from novact.data import Episode

    mask = np.arange(values.shape[1]) < raw_len
    return Episode(values=out, mask=mask, raw_len=raw_len, label=label, eid=eid)


def tiny_run_config(**overrides) -> RunConfig:
    base = {
        "synthetic": {
            "n_known_classes": 2,
            "n_new_classes": 1,
            "episodes_per_class": 8,
            "d": 2,
            "l": 16,
            "frequency_bands": [[1.0, 2.0], [3.0, 4.0], [6.0, 7.0]],
            "noise_std": 0.2,
            "jitter": 1,
            "seed": 5,
        },
        "known_labels": [0, 1],
        "seeds": [0],
        "encoder": {"model_dim": 8, "proj_dim": 8},
        "train": {"batch_size": 16, "epochs": 2},
        "disc": {"epochs": 2, "batch_size": 16},
    }
    base.update(overrides)
    return config_from_dict(base)
