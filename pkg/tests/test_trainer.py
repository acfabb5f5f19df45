import csv
import dataclasses

import numpy as np
import pytest
import torch

from cdgan import trainer
from cdgan.losses import LossWeights
from cdgan.nets import build_models

from conftest import rand_images


def tiny_train_cfg(**kw):
    base = dict(batch_size=4, total_generator_steps=3, seed=11,
                augment_preset="hflip_trans")
    base.update(kw)
    return trainer.TrainConfig(**base)


def fresh_state(tiny_arch, **cfg_kw):
    optim = trainer.OptimConfig(warmup_steps=10)
    return trainer.TrainState.create(tiny_arch, optim, tiny_train_cfg(**cfg_kw))


class TestOptimConfig:
    def test_warmup_ramp(self):
        cfg = trainer.OptimConfig(alpha=1e-3, warmup_steps=100)
        assert cfg.effective_lr(0) == pytest.approx(1e-5)
        assert cfg.effective_lr(49) == pytest.approx(5e-4)
        assert cfg.effective_lr(99) == pytest.approx(1e-3)
        assert cfg.effective_lr(100) == pytest.approx(1e-3)
        assert cfg.effective_lr(10_000) == pytest.approx(1e-3)

    def test_warmup_monotone(self):
        cfg = trainer.OptimConfig(warmup_steps=37)
        lrs = [cfg.effective_lr(s) for s in range(80)]
        assert all(b >= a for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup(self):
        cfg = trainer.OptimConfig(alpha=2e-4, warmup_steps=0)
        assert cfg.effective_lr(0) == 2e-4

    def test_validation(self):
        with pytest.raises(ValueError):
            trainer.OptimConfig(alpha=0.0)
        with pytest.raises(ValueError):
            trainer.OptimConfig(beta1=1.0)


class TestAdamUpdate:
    def test_scalar_hand_oracle(self):
        # g=1 throughout, alpha=0.1, betas (0.5, 0.9), no warmup: the
        # bias-corrected moments are exactly 1, so each step moves by -0.1
        cfg = trainer.OptimConfig(alpha=0.1, beta1=0.5, beta2=0.9,
                                  epsilon=0.0, warmup_steps=0)
        p = torch.tensor([1.0], dtype=torch.float64)
        state = trainer.AdamState([p])
        for k in range(1, 4):
            trainer.adam_update([p], [torch.ones_like(p)], state, cfg)
            assert float(p) == pytest.approx(1.0 - 0.1 * k, abs=1e-12)
            assert state.step == k
        assert float(state.m[0]) == pytest.approx(1 - 0.5 ** 3)
        assert float(state.v[0]) == pytest.approx(1 - 0.9 ** 3)

    def test_none_gradient_freezes_param(self):
        cfg = trainer.OptimConfig(warmup_steps=0)
        p = torch.tensor([2.0])
        state = trainer.AdamState([p])
        trainer.adam_update([p], [None], state, cfg)
        assert float(p) == 2.0
        assert state.step == 1

    def test_zero_gradient_freezes_param_but_decays_moments(self):
        cfg = trainer.OptimConfig(warmup_steps=0)
        p = torch.tensor([2.0])
        state = trainer.AdamState([p])
        trainer.adam_update([p], [torch.ones_like(p)], state, cfg)
        moved = float(p)
        trainer.adam_update([p], [torch.zeros_like(p)], state, cfg)
        # moment is still nonzero, so the parameter keeps drifting, but less
        assert float(p) != moved
        assert abs(float(state.m[0])) < 1.0


class TestEma:
    def test_halflife_is_exact_midpoint(self):
        s = [torch.tensor([0.0])]
        trainer.ema_update(s, [torch.tensor([1.0])], batch_size=64,
                          halflife_samples=64)
        assert float(s[0]) == pytest.approx(0.5)

    def test_fixed_point(self):
        s = [torch.tensor([3.0])]
        trainer.ema_update(s, [torch.tensor([3.0])], 64, 1000.0)
        assert float(s[0]) == pytest.approx(3.0)

    def test_geometric_convergence(self):
        s = [torch.tensor([0.0], dtype=torch.float64)]
        p = [torch.tensor([1.0], dtype=torch.float64)]
        beta = 0.5 ** (10 / 50)
        for k in range(1, 6):
            trainer.ema_update(s, p, 10, 50.0)
            assert float(s[0]) == pytest.approx(1 - beta ** k, rel=1e-12)

    def test_bad_halflife(self):
        with pytest.raises(ValueError):
            trainer.ema_update([torch.zeros(1)], [torch.ones(1)], 64, 0.0)


class TestRngStreams:
    def test_streams_are_distinct(self):
        rs = trainer.RngStreams(0)
        draws = {name: float(getattr(rs, name).random()) for name in rs.NAMES}
        assert len(set(draws.values())) == len(rs.NAMES)

    def test_state_round_trip(self):
        a = trainer.RngStreams(7)
        a.data.random(5)
        saved = a.state_dict()
        expect = a.fake.random(3)
        b = trainer.RngStreams(7)
        b.load_state_dict(saved)
        assert np.array_equal(b.fake.random(3), expect)


class TestStepIsolation:
    def test_discriminator_step_leaves_generator_bitwise(self, tiny_arch):
        state = fresh_state(tiny_arch)
        before = [p.detach().clone() for p in state.models.generator_parameters()]
        state.models.train()
        batch = rand_images(np.random.default_rng(0), 4)
        report = state and trainer.discriminator_step(state, batch)
        assert np.isfinite(report.ld)
        for b, p in zip(before, state.models.generator_parameters()):
            assert torch.equal(b, p)

    def test_generator_step_leaves_discriminator_bitwise(self, tiny_arch):
        state = fresh_state(tiny_arch)
        before = [p.detach().clone()
                  for p in state.models.discriminator_parameters()]
        report = trainer.generator_step(state)
        assert np.isfinite(report.lg)
        for b, p in zip(before, state.models.discriminator_parameters()):
            assert torch.equal(b, p)
        assert state.generator_steps == 1

    def test_zero_weights_freeze_unused_heads(self, tiny_arch):
        state = fresh_state(
            tiny_arch, weights=LossWeights(lambda_con=0.0, lambda_dis=0.0))
        heads = list(state.models.head_fake.parameters()) + \
            list(state.models.head_disc.parameters())
        before = [p.detach().clone() for p in heads]
        trainer.discriminator_step(state, rand_images(np.random.default_rng(0), 4))
        for b, p in zip(before, heads):
            assert torch.equal(b, p)

    def test_scalar_head_sees_only_detached_embeddings(self, tiny_arch):
        # with only the scalar-head loss on, the encoder must not move
        state = fresh_state(
            tiny_arch, weights=LossWeights(lambda_con=0.0, lambda_dis=1.0))
        # silence the contrastive terms entirely by checking encoder grads
        batch = rand_images(np.random.default_rng(1), 4)
        models = state.models
        from cdgan import augment as aug, losses
        from cdgan.nets import stop_gradient
        v2 = aug.augment(batch, state.real_spec(), np.random.default_rng(2))
        with torch.no_grad():
            fake = models.generator(torch.randn(4, models.config.latent_dim))
        emb = models.encoder(torch.cat([v2, fake]))
        ldis = losses.discriminator_head_loss(
            stop_gradient(emb[:4]), stop_gradient(emb[4:]), models.head_disc)
        grads = torch.autograd.grad(
            ldis, list(models.encoder.parameters()), allow_unused=True)
        assert all(g is None for g in grads)

    def test_tiny_batch_rejected(self, tiny_arch):
        state = fresh_state(tiny_arch)
        with pytest.raises(ValueError):
            trainer.discriminator_step(state, rand_images(np.random.default_rng(0), 1))


class TestTrainLoop:
    def test_report_structure_nd2(self, tiny_arch, tmp_path):
        optim = trainer.OptimConfig(warmup_steps=5)
        cfg = tiny_train_cfg(n_d=2, total_generator_steps=3)
        state = trainer.TrainState.create(tiny_arch, optim, cfg)
        images = rand_images(np.random.default_rng(3), 16)
        log = tmp_path / "steps.csv"
        reports = trainer.train(state, images, log_path=log)
        assert len(reports) == 3 * (2 + 1)
        with open(log) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(trainer.REPORT_COLUMNS)
        assert len(rows) == 1 + len(reports)

    def test_same_seed_bit_identical(self, tiny_arch):
        images = rand_images(np.random.default_rng(4), 16)
        finals = []
        for _ in range(2):
            state = fresh_state(tiny_arch, total_generator_steps=2)
            trainer.train(state, images)
            finals.append({k: v.detach().clone()
                           for k, v in state.models.named_arrays().items()})
        assert finals[0].keys() == finals[1].keys()
        for k in finals[0]:
            assert torch.equal(finals[0][k], finals[1][k]), k

    def test_ema_shadow_tracks_generator(self, tiny_arch):
        optim = trainer.OptimConfig(warmup_steps=5)
        cfg = tiny_train_cfg(ema_halflife_samples=100.0, total_generator_steps=2)
        state = trainer.TrainState.create(tiny_arch, optim, cfg)
        init = [s.clone() for s in state.ema_shadow]
        trainer.train(state, rand_images(np.random.default_rng(5), 16))
        moved = any(not torch.equal(a, b)
                    for a, b in zip(init, state.ema_shadow))
        assert moved
        for s, p in zip(state.ema_shadow, state.models.generator_parameters()):
            assert torch.isfinite(s).all()
            assert not torch.equal(s, p)  # shadow lags the live weights

    def test_nonfinite_abort_after_three_strikes(self, tiny_arch):
        state = fresh_state(tiny_arch, total_generator_steps=50)
        with torch.no_grad():
            for p in state.models.generator_parameters():
                p.fill_(float("nan"))
        with pytest.raises(trainer.TrainingDiverged, match="3 consecutive"):
            trainer.train(state, rand_images(np.random.default_rng(6), 16))

    def test_checkpoint_callback_interval(self, tiny_arch):
        optim = trainer.OptimConfig(warmup_steps=5)
        cfg = tiny_train_cfg(total_generator_steps=4, checkpoint_interval=2)
        state = trainer.TrainState.create(tiny_arch, optim, cfg)
        calls = []
        trainer.train(state, rand_images(np.random.default_rng(7), 16),
                      checkpoint_fn=lambda s: calls.append(s.generator_steps))
        assert calls == [2, 4, 4]


class TestSimclrStep:
    def test_runs_and_updates_only_contrastive_params(self, tiny_arch):
        models = build_models(tiny_arch, seed=2)
        models.train()
        adam = trainer.AdamState(
            list(models.encoder.parameters()) + list(models.head_real.parameters()))
        optim = trainer.OptimConfig(warmup_steps=0)
        from cdgan import augment as aug
        gen_before = [p.detach().clone() for p in models.generator_parameters()]
        enc_before = [p.detach().clone() for p in models.encoder.parameters()]
        loss = trainer.simclr_step(models, adam, optim,
                                   rand_images(np.random.default_rng(8), 4),
                                   aug.PRESETS["hflip_trans"],
                                   np.random.default_rng(9), tau=0.1)
        assert np.isfinite(loss)
        for b, p in zip(gen_before, models.generator_parameters()):
            assert torch.equal(b, p)
        assert any(not torch.equal(b, p)
                   for b, p in zip(enc_before, models.encoder.parameters()))


class TestTrainConfigValidation:
    def test_batch_too_small(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(batch_size=1)

    def test_nd_too_small(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(n_d=0)

    def test_weights_default(self):
        cfg = trainer.TrainConfig()
        assert cfg.weights == LossWeights()
        assert dataclasses.replace(cfg, seed=5).seed == 5
