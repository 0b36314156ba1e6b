import math

import numpy as np
import pytest
import torch

from fabtwin.exceptions import InvalidConfigError, InvalidInputError, TrainingDivergedError
from fabtwin.networks import weights_checksum
from fabtwin.training import (AdamState, LossRecord, TrainConfig, adam_update, loss_discriminator,
                              loss_generator_gan, loss_generator_total, loss_l1, read_loss_log,
                              train_ensemble, train_genfab, train_unet, write_loss_log)

TINY = dict(depth=2, base_width=4, latent_dim=3, batch_size=2, log_every=1)


def tiny_dataset(n=6, size=32, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, size, size)) < 0.5).astype(np.float32)
    Y = np.clip(X + (rng.random(X.shape) < 0.05), 0, 1).astype(np.float32)
    return X, Y


class TestLosses:
    def test_discriminator_at_half(self):
        z = torch.zeros(2, 1, 3, 3)
        assert loss_discriminator(z, z).item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_discriminator_perfect(self):
        val = loss_discriminator(torch.full((4,), 15.0), torch.full((4,), -15.0)).item()
        assert val < 1e-3

    def test_discriminator_permutation(self):
        rng = np.random.default_rng(0)
        r, f = rng.normal(size=(1, 1, 5, 5)), rng.normal(size=(1, 1, 5, 5))
        perm = rng.permutation(25)
        a = loss_discriminator(torch.tensor(r), torch.tensor(f)).item()
        b = loss_discriminator(torch.tensor(r.ravel()[perm]), torch.tensor(f.ravel()[perm])).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_discriminator_matches_naive(self):
        r = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
        f = torch.tensor([-0.5, 0.7, 1.1], dtype=torch.float64)
        naive = -torch.log(torch.sigmoid(r)).mean() - torch.log(1 - torch.sigmoid(f)).mean()
        assert loss_discriminator(r, f).item() == pytest.approx(naive.item(), abs=1e-12)

    def test_discriminator_extreme_logits_stay_finite(self):
        assert math.isfinite(loss_discriminator(torch.tensor([-1e4]), torch.tensor([1e4])).item())

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            loss_discriminator(torch.tensor([float("nan")]), torch.tensor([0.0]))
        with pytest.raises(InvalidInputError):
            loss_generator_gan(torch.tensor([float("inf")]))

    def test_generator_gan(self):
        assert loss_generator_gan(torch.zeros(3)).item() == pytest.approx(math.log(2), abs=1e-6)
        assert loss_generator_gan(torch.full((3,), 15.0)).item() < 1e-3

    def test_generator_gan_monotone(self):
        base = torch.tensor([0.1, -0.4, 1.3], dtype=torch.float64)
        for i in range(3):
            bumped = base.clone()
            bumped[i] += 0.5
            assert loss_generator_gan(bumped).item() < loss_generator_gan(base).item()

    def test_l1(self):
        t = torch.ones(2, 2)
        assert loss_l1(t, t).item() == 0
        assert loss_l1(torch.full((2, 2), 0.5), t).item() == pytest.approx(0.5)
        assert loss_l1(torch.tensor([0.2, 0.9]), torch.tensor([0.0, 1.0])).item() == pytest.approx(0.15)

    def test_l1_shape(self):
        with pytest.raises(InvalidInputError):
            loss_l1(torch.zeros(2), torch.zeros(3))

    def test_total(self):
        cfg = TrainConfig()
        assert (cfg.lambda_gan, cfg.lambda_l1) == (1.0, 100.0)
        assert loss_generator_total(0.693, 0.01, cfg) == pytest.approx(1.693, abs=1e-12)
        assert loss_generator_total(0.7, 0.3, TrainConfig(lambda_l1=0)) == 0.7


class TestAdam:
    def test_hand_case(self):
        p, st = adam_update(0.0, 1.0, AdamState(), 2e-4, 0.5, 0.999, 1e-8)
        assert st.t == 1
        assert st.m / (1 - 0.5) == pytest.approx(1.0)
        assert st.v / (1 - 0.999) == pytest.approx(1.0)
        assert p == pytest.approx(-2e-4 / (1 + 1e-8), abs=1e-12)
        assert abs(p - (-2.0e-4)) <= 1e-9

    def test_zero_grad(self):
        p, _ = adam_update(np.array([1.5]), np.array([0.0]), AdamState(), 1e-3, 0.5, 0.999)
        assert p.tolist() == [1.5]

    def test_deterministic(self):
        st = AdamState(m=np.array([0.1]), v=np.array([0.2]), t=3)
        a = adam_update(np.array([1.0]), np.array([0.3]), st, 1e-3)
        b = adam_update(np.array([1.0]), np.array([0.3]), st, 1e-3)
        assert np.array_equal(a[0], b[0]) and a[1].t == b[1].t == 4

    def test_matches_torch_adam(self):
        torch.manual_seed(0)
        w1 = torch.randn(5, requires_grad=True)
        w2 = w1.detach().clone().requires_grad_(True)
        from fabtwin.training import Adam
        ours = Adam([w1], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
        ref = torch.optim.Adam([w2], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
        for i in range(20):
            for w, opt in ((w1, ours), (w2, ref)):
                opt.zero_grad()
                ((w - i) ** 2).sum().backward()
                opt.step()
        assert torch.allclose(w1, w2, atol=1e-6)

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            adam_update(0.0, float("nan"), AdamState(), 1e-3)


class TestTrainConfig:
    def test_invalid(self):
        with pytest.raises(InvalidConfigError):
            TrainConfig(lambda_l1=-1)
        with pytest.raises(InvalidConfigError):
            TrainConfig(beta1=1.0)
        with pytest.raises(InvalidConfigError):
            TrainConfig.from_dict({"stepz": 3})

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr_G, cfg.lr_D, cfg.beta1, cfg.beta2, cfg.batch_size, cfg.latent_dim) == (
            2e-4, 2e-4, 0.5, 0.999, 4, 16)


class TestTrainGenFab:
    def test_two_steps(self):
        res = train_genfab(tiny_dataset(), TrainConfig(steps=2, **TINY))
        assert [r.step for r in res.log] == [1, 2]
        for r in res.log:
            assert r.loss_G_total == pytest.approx(r.loss_G_gan + 100 * r.loss_G_l1, rel=1e-5)

    def test_reproducible(self, tmp_path):
        cfg = TrainConfig(steps=3, seed=11, **TINY)
        a = train_genfab(tiny_dataset(), cfg)
        b = train_genfab(tiny_dataset(), cfg)
        assert weights_checksum(a.model) == weights_checksum(b.model)
        assert [r.loss_D for r in a.log] == [r.loss_D for r in b.log]
        c = train_genfab(tiny_dataset(), TrainConfig(steps=3, seed=12, **TINY))
        assert weights_checksum(a.model) != weights_checksum(c.model)

    def test_checkpoint_written(self, tmp_path):
        from fabtwin.networks import load_checkpoint
        path = tmp_path / "g.gfck"
        res = train_genfab(tiny_dataset(), TrainConfig(steps=1, checkpoint_path=str(path), **TINY))
        loaded, meta = load_checkpoint(path)
        assert weights_checksum(loaded) == weights_checksum(res.model)
        assert meta["train_config"]["steps"] == 1

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            train_genfab((np.zeros((0, 32, 32)), np.zeros((0, 32, 32))), TrainConfig(**TINY))

    def test_l1_only_leaves_discriminator(self):
        cfg = TrainConfig(steps=3, lambda_gan=0.0, **TINY)
        res = train_genfab(tiny_dataset(), cfg)
        fresh = train_genfab(tiny_dataset(), TrainConfig(steps=0, lambda_gan=0.0, **TINY))
        assert weights_checksum(res.discriminator) == weights_checksum(fresh.discriminator)

    def test_divergence_aborts(self, monkeypatch):
        import fabtwin.training as tr
        monkeypatch.setattr(tr, "loss_l1", lambda p, t: (p - t).abs().mean() * float("nan"))
        with pytest.raises(TrainingDivergedError) as info:
            train_genfab(tiny_dataset(), TrainConfig(steps=2, **TINY))
        assert info.value.record.step == 1


class TestTrainUNet:
    def test_ensemble_members_distinct(self):
        cfg = TrainConfig(steps=2, **TINY)
        res = train_ensemble(tiny_dataset(), cfg, K=2, base_seed=3)
        assert weights_checksum(res[0].model) != weights_checksum(res[1].model)

    def test_equal_seeds_identical(self):
        cfg = TrainConfig(steps=2, **TINY)
        a = train_unet(tiny_dataset(), cfg, 0.0, seed=5)
        b = train_unet(tiny_dataset(), cfg, 0.0, seed=5)
        assert weights_checksum(a.model) == weights_checksum(b.model)

    def test_dropout_training_runs(self):
        cfg = TrainConfig(steps=2, depth=3, base_width=4, latent_dim=0, batch_size=2)
        res = train_unet(tiny_dataset(), cfg, 0.1, seed=1)
        assert res.model.dropout_p == 0.1
        assert len(res.log) == 2

    def test_bad_k(self):
        with pytest.raises(InvalidConfigError):
            train_ensemble(tiny_dataset(), TrainConfig(**TINY), K=0)


class TestLossLog:
    def test_roundtrip(self, tmp_path):
        recs = [LossRecord(1, 1.3, 50.1, 0.7, 0.494, 12.5), LossRecord(2, 1.2, 40.0, 0.8, 0.392, 11.0)]
        write_loss_log(tmp_path / "log.csv", recs)
        text = (tmp_path / "log.csv").read_text().splitlines()
        assert text[0] == "step,loss_D,loss_G_total,loss_G_gan,loss_G_l1,wall_ms"
        back = read_loss_log(tmp_path / "log.csv")
        assert [r.loss_G_l1 for r in back] == [0.494, 0.392]

    def test_malformed_row_names_line(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("step,loss_D,loss_G_total,loss_G_gan,loss_G_l1,wall_ms\n1,1,1,1,1,1\n2,x,1,1,1,1\n")
        with pytest.raises(InvalidInputError, match="line 3"):
            read_loss_log(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("step,loss_D,loss_G_total,loss_G_gan,wall_ms\n1,1,1,1,1\n")
        with pytest.raises(InvalidInputError, match="loss_G_l1"):
            read_loss_log(p)
