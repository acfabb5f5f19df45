import numpy as np
import pytest
import torch

from cdgan import nets
from cdgan.checkpoint import load_checkpoint, save_checkpoint

from conftest import rand_images


class TestStopGradient:
    def test_forward_identity(self):
        x = torch.randn(4, 5)
        assert torch.equal(nets.stop_gradient(x), x)

    def test_blocked_path_zero_gradient(self):
        w = torch.tensor(2.0, requires_grad=True)
        y = nets.stop_gradient(w * 3.0) ** 2
        assert not y.requires_grad  # no path at all through the block

    def test_mixed_path_keeps_unblocked_contribution(self):
        w = torch.tensor(2.0, requires_grad=True)
        y = w + nets.stop_gradient(w)
        (g,) = torch.autograd.grad(y, w)
        assert float(g) == 1.0


class TestSpectralNormalize:
    def test_diagonal_matrix(self):
        w = torch.diag(torch.tensor([3.0, 1.0], dtype=torch.float64))
        u = torch.tensor([1.0, 0.0], dtype=torch.float64)
        w_sn, _ = nets.spectral_normalize(w, u, n_iter=20)
        expect = torch.diag(torch.tensor([1.0, 1 / 3], dtype=torch.float64))
        assert torch.allclose(w_sn, expect, atol=1e-8)

    def test_identity_unchanged(self):
        w = torch.eye(4, dtype=torch.float64)
        u = torch.full((4,), 0.5, dtype=torch.float64)
        w_sn, _ = nets.spectral_normalize(w, u, n_iter=5)
        assert torch.allclose(w_sn, w, atol=1e-10)

    def test_random_matrices_vs_svd(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            w = torch.as_tensor(rng.standard_normal((64, 64)))
            u = torch.as_tensor(rng.standard_normal(64))
            u = u / torch.linalg.vector_norm(u)
            w_sn, _ = nets.spectral_normalize(w, u, n_iter=50)
            top = float(torch.linalg.matrix_norm(w_sn, ord=2))
            assert 0.95 <= top <= 1.05

    def test_direction_preserved(self):
        rng = np.random.default_rng(11)
        w = torch.as_tensor(rng.standard_normal((6, 4)))
        u = torch.as_tensor(rng.standard_normal(6))
        u = u / torch.linalg.vector_norm(u)
        w_sn, _ = nets.spectral_normalize(w, u, n_iter=10)
        x = torch.as_tensor(rng.standard_normal(4))
        a, b = w @ x, w_sn @ x
        cos = float(a @ b / (torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b)))
        assert cos == pytest.approx(1.0, abs=1e-10)

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            nets.spectral_normalize(torch.zeros(3, 3), torch.ones(3) / 3 ** 0.5)

    def test_u_state_stays_unit(self):
        rng = np.random.default_rng(12)
        w = torch.as_tensor(rng.standard_normal((8, 8)))
        u = torch.as_tensor(rng.standard_normal(8))
        u = u / torch.linalg.vector_norm(u)
        _, u2 = nets.spectral_normalize(w, u, n_iter=3)
        assert float(torch.linalg.vector_norm(u2)) == pytest.approx(1.0, rel=1e-6)


class TestForwardPasses:
    def test_generator_range(self, tiny_models):
        z = torch.randn(8, 8)
        out = tiny_models.generator(z).detach()
        assert out.shape == (8, 3, 16, 16)
        assert float(out.abs().max()) <= 1.0

    def test_encoder_determinism(self, tiny_models):
        tiny_models.eval()  # freeze power-iteration state
        x = rand_images(np.random.default_rng(0), 4)
        a = tiny_models.encoder(x)
        b = tiny_models.encoder(x)
        assert torch.equal(a, b)

    def test_zero_weight_encoder_rejected(self):
        # spectral norm has no direction on a zero matrix
        lin = nets.SpectralLinear(4, 3)
        with torch.no_grad():
            lin.weight.zero_()
        with pytest.raises(ValueError):
            lin(torch.randn(2, 4))

    def test_linear_layer_matches_affine_oracle(self):
        lin = nets.SpectralLinear(3, 2, dtype=torch.float64)
        w = np.array([[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6]])
        with torch.no_grad():
            lin.weight.copy_(torch.as_tensor(w))
            lin.bias.copy_(torch.tensor([0.5, -0.5], dtype=torch.float64))
        lin.eval()
        x = np.array([[1.0, 2.0, 3.0]])
        got = lin(torch.as_tensor(x)).detach().numpy()
        # oracle: plain numpy affine map with the exact top singular value
        sigma_hat = _power_sigma(w, lin.u.numpy(), 1)
        expect = x @ (w / sigma_hat).T + np.array([0.5, -0.5])
        assert np.allclose(got, expect, atol=1e-6)

    def test_head_shapes(self, tiny_models):
        emb = torch.randn(5, 16)
        assert tiny_models.head_real(emb).shape == (5, 8)
        assert tiny_models.head_disc(emb).shape == (5, 1)


def _power_sigma(w, u, n_iter):
    for _ in range(n_iter):
        v = w.T @ u
        v = v / np.linalg.norm(v)
        u = w @ v
        u = u / np.linalg.norm(u)
    v = w.T @ u
    v = v / np.linalg.norm(v)
    return float(u @ (w @ v))


class TestBuildModels:
    def test_seed_determinism(self, tiny_arch):
        a = nets.build_models(tiny_arch, seed=3)
        b = nets.build_models(tiny_arch, seed=3)
        for (na, ta), (nb, tb) in zip(sorted(a.named_arrays().items()),
                                      sorted(b.named_arrays().items())):
            assert na == nb
            assert torch.equal(ta, tb)

    def test_param_count_stable(self, tiny_arch):
        n = sum(p.numel() for p in nets.build_models(tiny_arch, seed=0)
                .discriminator_parameters())
        m = sum(p.numel() for p in nets.build_models(tiny_arch, seed=1)
                .discriminator_parameters())
        assert n == m

    def test_linear_disc_head_ablation(self, tiny_arch):
        import dataclasses
        cfg = dataclasses.replace(tiny_arch, disc_head_depth=1)
        b = nets.build_models(cfg, seed=0)
        assert isinstance(b.head_disc.net, torch.nn.Linear)

    def test_shared_heads_ablation(self, tiny_arch):
        import dataclasses
        cfg = dataclasses.replace(tiny_arch, shared_proj_heads=True)
        b = nets.build_models(cfg, seed=0)
        assert b.head_real is b.head_fake

    def test_orthogonal_init(self, tiny_models):
        w = tiny_models.head_real.fc1.weight.detach().numpy()
        gram = w @ w.T
        assert np.allclose(gram, np.eye(gram.shape[0]), atol=1e-5)

    def test_inconsistent_widths_rejected(self):
        with pytest.raises(ValueError):
            nets.ArchConfig(image_size=20, widths=(8, 16, 32))


class TestCheckpoint:
    def test_round_trip(self, tiny_arch, tmp_path):
        a = nets.build_models(tiny_arch, seed=5)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, a, step=42, config_hash="deadbeef",
                        rng_state={"x": 1})
        b = nets.build_models(tiny_arch, seed=99)
        meta = load_checkpoint(path, b)
        assert meta["step"] == 42
        assert meta["config_hash"] == "deadbeef"
        for (_, ta), (_, tb) in zip(sorted(a.named_arrays().items()),
                                    sorted(b.named_arrays().items())):
            assert torch.equal(ta.float(), tb.float())

    def test_arrays_are_little_endian_f4(self, tiny_arch, tmp_path):
        bundle = nets.build_models(tiny_arch, seed=5)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, bundle, step=0, config_hash="x")
        with np.load(path) as archive:
            for name in archive.files:
                if name == "__meta__":
                    continue
                assert archive[name].dtype == np.dtype("<f4")

    def test_not_a_checkpoint(self, tiny_arch, tmp_path):
        from cdgan.checkpoint import CheckpointError
        path = tmp_path / "junk.npz"
        np.savez(path, foo=np.zeros(3))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, nets.build_models(tiny_arch, seed=0))
