import math

import numpy as np
import pytest
import torch

from novact.augment import TransformKind, TransformParams
from novact.cst import CSTSet
from novact.data import make_episode
from novact.encoder import EncoderConfig, init_params
from novact.errors import ConfigError, ContractError, InputError, TrainingDiverged
from novact.training import (
    TrainConfig,
    build_representation_bank,
    build_views,
    load_bank,
    loss_cls,
    loss_con,
    project_episodes,
    save_bank,
    total_loss,
    train_tower,
)
from novact import seeds

PARAMS = TransformParams()
CST3 = CSTSet(kinds=(TransformKind.IDENTITY, TransformKind.SCALE, TransformKind.PERMUTE))


def unit(vec):
    v = np.asarray(vec, dtype=np.float64)
    return v / np.linalg.norm(v)


def basis(i, dim=8):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def nt_xent_reference(z, zt, tau):
    """Independent NT-Xent: 2N views, positives are (i, i+N), denominator is
    every other view."""
    n = len(z)
    v = np.concatenate([z, zt], axis=0)
    total = 0.0
    for a in range(2 * n):
        pos = (a + n) % (2 * n)
        num = math.exp(np.dot(v[a], v[pos]) / tau)
        den = sum(math.exp(np.dot(v[a], v[b]) / tau) for b in range(2 * n) if b != a)
        total += -math.log(num / den)
    return total / (2 * n)


def torch3(array):
    return torch.tensor(np.asarray(array, dtype=np.float64))


class TestLossCon:
    def test_closed_form_b1_k1(self):
        z = torch3([[basis(0), basis(1)]])  # [1, 2, 8]
        loss = loss_con(z, z.clone(), tau=0.5)
        expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 2.0))
        assert loss.item() == pytest.approx(expected, abs=1e-6)

    def test_all_identical_reaches_max_confusion(self):
        b, k1 = 3, 3
        row = unit(np.ones(8))
        z = torch3([[row] * k1] * b)
        loss = loss_con(z, z.clone(), tau=0.5)
        n_terms = 1 + 2 * (k1 - 1) + 2 * (b - 1)
        assert loss.item() == pytest.approx(math.log(n_terms), abs=1e-9)

    def test_scale_invariance_through_normalization(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(2, 3, 8))
        raw_t = rng.normal(size=(2, 3, 8))

        def normalized_loss(c):
            z = torch3(c * raw)
            zt = torch3(c * raw_t)
            z = z / z.norm(dim=-1, keepdim=True)
            zt = zt / zt.norm(dim=-1, keepdim=True)
            return loss_con(z, zt, tau=0.5).item()

        assert abs(normalized_loss(1.0) - normalized_loss(7.3)) < 1e-9

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(4, 3, 8))
        zt = rng.normal(size=(4, 3, 8))
        z /= np.linalg.norm(z, axis=-1, keepdims=True)
        zt /= np.linalg.norm(zt, axis=-1, keepdims=True)
        base = loss_con(torch3(z), torch3(zt), tau=0.5).item()
        perm = [2, 0, 3, 1]
        shuffled = loss_con(torch3(z[perm]), torch3(zt[perm]), tau=0.5).item()
        assert base == pytest.approx(shuffled, abs=1e-12)

    def test_tighter_positive_pair_lowers_loss(self):
        def loss_at(theta):
            z = torch3([[basis(0), basis(1)]])
            zt = torch3([[math.cos(theta) * basis(0) + math.sin(theta) * basis(2), basis(1)]])
            return loss_con(z, zt, tau=0.5).item()

        assert loss_at(0.1) < loss_at(0.5) < loss_at(1.0)

    def test_k0_reduces_to_nt_xent(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            b = int(rng.integers(2, 7))
            z = rng.normal(size=(b, 1, 8))
            zt = rng.normal(size=(b, 1, 8))
            z /= np.linalg.norm(z, axis=-1, keepdims=True)
            zt /= np.linalg.norm(zt, axis=-1, keepdims=True)
            mine = loss_con(torch3(z), torch3(zt), tau=0.5).item()
            ref = nt_xent_reference(z[:, 0], zt[:, 0], tau=0.5)
            assert mine == pytest.approx(ref, abs=1e-9)

    def test_non_normalized_rejected(self):
        z = torch3(np.full((1, 2, 8), 0.5))
        with pytest.raises(ContractError):
            loss_con(z, z.clone(), tau=0.5)

    def test_all_indices_variant_grows_denominator(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(3, 3, 8))
        zt = rng.normal(size=(3, 3, 8))
        z /= np.linalg.norm(z, axis=-1, keepdims=True)
        zt /= np.linalg.norm(zt, axis=-1, keepdims=True)
        same = loss_con(torch3(z), torch3(zt), tau=0.5, batch_negatives="same_index").item()
        all_idx = loss_con(torch3(z), torch3(zt), tau=0.5, batch_negatives="all_indices").item()
        assert all_idx > same  # strictly more negative mass


class TestLossCls:
    def test_uniform_logits_k2(self):
        logits = torch.zeros((12, 3), dtype=torch.float64)
        labels = np.tile([0, 1, 2], 4)
        assert loss_cls(logits, labels).item() == pytest.approx(math.log(3.0), abs=1e-9)

    def test_perfect_logits_vanish(self):
        labels = np.array([0, 1])
        logits = torch.tensor([[60.0, 0, 0], [0, 60.0, 0]], dtype=torch.float64)
        assert loss_cls(logits, labels).item() < 1e-12

    def test_single_row_worked_example(self):
        logits = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
        expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 2.0))
        assert loss_cls(logits, np.array([0])).item() == pytest.approx(expected, abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            loss_cls(torch.zeros((1, 3), dtype=torch.float64), np.array([3]))


class TestTotalLoss:
    def test_sum(self):
        assert total_loss(1.2, 0.8) == pytest.approx(2.0)
        assert total_loss(0.0, 0.0) == 0.0


def build_small_episodes(n=8, d=2, l=16, seed=0):
    rng = np.random.default_rng(seed)
    return [make_episode(rng.normal(size=(d, l)), label=0, eid=i) for i in range(n)]


class TestBuildViews:
    def test_row_count(self):
        eps = build_small_episodes(n=3)
        vb = build_views(eps, CST3, TransformKind.ADDNOISE, PARAMS, seed=0)
        assert vb.n_rows == 2 * 3 * 3
        assert vb.stacked().shape == (18, 2, 16)
        assert list(vb.labels()) == [0, 0, 1, 1, 2, 2] * 3

    def test_identity_view_is_original(self):
        eps = build_small_episodes(n=2)
        vb = build_views(eps, CST3, TransformKind.ADDNOISE, PARAMS, seed=0)
        for i, ep in enumerate(eps):
            np.testing.assert_array_equal(vb.primary[i, 0], ep.values)

    def test_identity_positive_is_bitwise_primary(self):
        eps = build_small_episodes(n=2)
        vb = build_views(eps, CST3, TransformKind.IDENTITY, PARAMS, seed=0)
        np.testing.assert_array_equal(vb.positive, vb.primary)

    def test_positive_inside_strong_set_warns(self, caplog):
        eps = build_small_episodes(n=2)
        with caplog.at_level("WARNING"):
            build_views(eps, CST3, TransformKind.SCALE, PARAMS, seed=0)
        assert "strong set" in caplog.text

    def test_positive_randomness_differs_per_index(self):
        eps = build_small_episodes(n=2)
        vb = build_views(eps, CSTSet(kinds=(TransformKind.IDENTITY, TransformKind.REVERSE)), TransformKind.ADDNOISE, PARAMS, seed=0)
        noise0 = vb.positive[0, 0] - vb.primary[0, 0]
        noise1 = (vb.positive[0, 1] - vb.primary[0, 1])
        assert np.abs(noise0 - noise1).max() > 0

    def test_positive_before_order(self):
        eps = build_small_episodes(n=2)
        vb = build_views(eps, CST3, TransformKind.ADDNOISE, PARAMS, seed=0, positive_order="before")
        # index 0 is identity: positive view equals the weakly shifted original
        assert np.abs(vb.positive[0, 0] - vb.primary[0, 0]).max() > 0


def small_training_setup(seed=0, n=10, epochs=3):
    eps = []
    rng = np.random.default_rng(seed)
    for i in range(n):
        freq = rng.uniform(2, 3)
        t = np.arange(16)
        sig = np.stack([np.sin(2 * np.pi * freq * t / 16 + rng.uniform(0, 6.28)) for _ in range(2)])
        eps.append(make_episode(sig + rng.normal(0, 0.1, sig.shape), label=0, eid=i))
    cfg = TrainConfig(batch_size=8, epochs=epochs, seed=seed)
    enc = EncoderConfig(in_channels=2, input_len=16, n_classes=CST3.k + 1, model_dim=8, proj_dim=8)
    return eps, cfg, enc


class TestTrainTower:
    def test_zero_epochs_returns_initial_params(self):
        eps, cfg, enc = small_training_setup(epochs=0)
        result = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        fresh = init_params(enc, seed=seeds.mix(cfg.seed, seeds.INIT, 0))
        for name in fresh.weights:
            assert torch.equal(result.params.weights[name], fresh.weights[name])
        assert result.log == []

    def test_training_log_is_deterministic(self):
        eps, cfg, enc = small_training_setup(epochs=2)
        a = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        b = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        assert [(e.l_con, e.l_cls) for e in a.log] == [(e.l_con, e.l_cls) for e in b.log]
        for name in a.params.weights:
            assert torch.equal(a.params.weights[name], b.params.weights[name])

    def test_loss_decreases_on_easy_data(self):
        eps, cfg, enc = small_training_setup(epochs=8)
        result = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        assert result.log[-1].l_total < result.log[0].l_total

    def test_resume_matches_uninterrupted(self):
        eps, cfg, enc = small_training_setup(epochs=4)
        full = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        import dataclasses

        half = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, dataclasses.replace(cfg, epochs=2), enc, PARAMS)
        resumed = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS, resume=half)
        assert [e.l_total for e in resumed.log] == [e.l_total for e in full.log]
        for name in full.params.weights:
            assert torch.equal(resumed.params.weights[name], full.params.weights[name])

    def test_divergence_aborts_with_last_good(self):
        eps, cfg, enc = small_training_setup(epochs=2)
        eps[0].values[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        assert info.value.last_good is not None

    def test_val_tracking_logs_and_checkpoints(self):
        eps, cfg, enc = small_training_setup(epochs=2)
        result = train_tower(eps[:8], 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS, val_episodes=eps[8:])
        assert all(e.val_total is not None for e in result.log)
        assert result.best_val_params is not None

    def test_bad_config_rejected(self):
        eps, cfg, enc = small_training_setup()
        with pytest.raises(ConfigError):
            train_tower(eps, 0, CST3, TransformKind.ADDNOISE, TrainConfig(tau=0.0), enc, PARAMS)


class TestRepresentationBank:
    def _trained(self):
        eps, cfg, enc = small_training_setup(epochs=2)
        result = train_tower(eps, 0, CST3, TransformKind.ADDNOISE, cfg, enc, PARAMS)
        return eps, result.params.astype("float64")

    def test_rows_unit_norm_and_identity_slot(self):
        eps, params = self._trained()
        bank = build_representation_bank(params, eps, CST3, PARAMS, seed=9)
        assert len(bank.z) == 3
        for mat in bank.z:
            np.testing.assert_allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-6)
        direct = project_episodes(params, eps).astype(np.float64)
        np.testing.assert_allclose(bank.z[0], direct, atol=1e-12)

    def test_reproducible(self):
        eps, params = self._trained()
        a = build_representation_bank(params, eps, CST3, PARAMS, seed=9)
        b = build_representation_bank(params, eps, CST3, PARAMS, seed=9)
        for ma, mb in zip(a.z, b.z):
            np.testing.assert_array_equal(ma, mb)

    def test_archive_round_trip(self, tmp_path):
        eps, params = self._trained()
        bank = build_representation_bank(params, eps, CST3, PARAMS, seed=9)
        path = tmp_path / "bank.bin"
        save_bank(bank, path)
        back = load_bank(path)
        assert back.kinds == bank.kinds
        np.testing.assert_array_equal(back.eids, bank.eids)
        for ma, mb in zip(bank.z, back.z):
            np.testing.assert_array_equal(ma, mb)

    def test_empty_train_split_rejected(self):
        _, params = self._trained()
        with pytest.raises(InputError):
            build_representation_bank(params, [], CST3, PARAMS, seed=0)
