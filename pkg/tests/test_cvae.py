import numpy as np
import pytest

from envlink.cvae import (
    CondVae,
    SampleLibrary,
    build_multilabel,
    cvae_loss,
    draw_intervention_values,
    gaussian_kl,
    generate_samples,
    multilabel_batch,
    multilabel_to_indices,
    observed_samples,
    reconstruction_mse,
    reparameterize,
)
from envlink.optim import AdamState, adam_step
from envlink.rng import Rng
from envlink.tensor import Tape, Tensor, backward


class TestMultilabel:
    def test_layout(self):
        np.testing.assert_array_equal(build_multilabel(1, 2, 2, 3), [0, 0, 0, 0, 0, 1])

    def test_origin(self):
        y = build_multilabel(0, 0, 4, 5)
        assert y[0] == 1.0 and y.sum() == 1.0

    def test_one_hot_everywhere(self):
        for k in range(3):
            for t in range(4):
                assert build_multilabel(k, t, 3, 4).sum() == 1.0

    def test_roundtrip(self):
        for k in range(3):
            for t in range(4):
                assert multilabel_to_indices(build_multilabel(k, t, 3, 4), 4) == (k, t)

    def test_range_checks(self):
        with pytest.raises(ValueError):
            build_multilabel(3, 0, 3, 4)
        with pytest.raises(ValueError):
            multilabel_batch(np.array([0]), np.array([4]), 3, 4)

    def test_batch_matches_single(self):
        batch = multilabel_batch(np.array([0, 2]), np.array([1, 3]), 3, 4)
        np.testing.assert_array_equal(batch[0], build_multilabel(0, 1, 3, 4))
        np.testing.assert_array_equal(batch[1], build_multilabel(2, 3, 3, 4))


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        mu = Tensor(Rng(1).normal((4, 3)))
        out = reparameterize(mu, Tensor(np.zeros((4, 3))), np.zeros((4, 3)))
        np.testing.assert_array_equal(out.data, mu.data)

    def test_unit_noise_unit_logvar(self):
        mu = Tensor(np.zeros((2, 2)))
        out = reparameterize(mu, Tensor(np.zeros((2, 2))), np.ones((2, 2)))
        np.testing.assert_allclose(out.data, np.ones((2, 2)))

    def test_monte_carlo_std(self):
        eps = Rng(7).normal((100_000, 1))
        out = reparameterize(Tensor(np.zeros((100_000, 1))), Tensor(np.zeros((100_000, 1))), eps)
        assert abs(out.data.std() - 1.0) < 0.01


class TestGaussianKl:
    def test_identical_distributions_zero(self):
        mu = Tensor(Rng(3).normal((5, 4)))
        lv = Tensor(Rng(4).normal((5, 4)))
        kl = gaussian_kl(mu, lv, Tensor(mu.data.copy()), Tensor(lv.data.copy()))
        np.testing.assert_allclose(kl.data, np.zeros(5), atol=1e-12)

    def test_univariate_mean_shift(self):
        kl = gaussian_kl(
            Tensor([[0.0]]), Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[0.0]])
        )
        assert kl.data[0] == pytest.approx(0.5)

    def test_always_nonnegative(self):
        rng = Rng(5)
        kl = gaussian_kl(
            Tensor(rng.normal((50, 6))), Tensor(rng.normal((50, 6))),
            Tensor(rng.normal((50, 6))), Tensor(rng.normal((50, 6))),
        )
        assert (kl.data >= 0).all()

    def test_matches_monte_carlo(self):
        # KL = E_q[log q - log p] estimated with 1e5 reparameterized draws
        rng = Rng(11)
        mu_q, lv_q = 0.3, -0.4
        mu_p, lv_p = -0.5, 0.2
        analytic = gaussian_kl(
            Tensor([[mu_q]]), Tensor([[lv_q]]), Tensor([[mu_p]]), Tensor([[lv_p]])
        ).data[0]
        draws = mu_q + np.exp(lv_q / 2) * rng.normal(100_000)

        def logpdf(x, mu, lv):
            return -0.5 * (lv + np.log(2 * np.pi) + (x - mu) ** 2 / np.exp(lv))

        mc = (logpdf(draws, mu_q, lv_q) - logpdf(draws, mu_p, lv_p)).mean()
        assert abs(analytic - mc) / abs(analytic) < 0.02


def toy_model(seed=0, sample_dim=6, channels=2, snapshots=3, latent=4):
    return CondVae(sample_dim, channels, snapshots, latent_dim=latent, hidden_dim=16, seed=seed)


def toy_batch(model, size, seed=0):
    rng = Rng(seed)
    ks = rng.integers(model.channels, size)
    ts = rng.integers(model.snapshots, size)
    y = multilabel_batch(ks, ts, model.channels, model.snapshots)
    centers = np.stack([np.full(model.sample_dim, float(k)) for k in range(model.channels)])
    z = centers[ks] + 0.1 * rng.normal((size, model.sample_dim))
    return z, y


class TestModel:
    def test_encode_shapes_and_determinism(self):
        m = toy_model()
        z, y = toy_batch(m, 8)
        mu1, lv1 = m.encode(Tensor(z), Tensor(y))
        mu2, lv2 = m.encode(Tensor(z), Tensor(y))
        assert mu1.shape == (8, 4) and lv1.shape == (8, 4)
        np.testing.assert_array_equal(mu1.data, mu2.data)

    def test_encode_shape_mismatch(self):
        m = toy_model()
        with pytest.raises(ValueError, match="expects"):
            m.encode(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 6))))

    def test_encoder_gradient_check(self):
        m = toy_model(seed=5)
        z, y = toy_batch(m, 4, seed=5)
        with Tape() as tape:
            mu, _ = m.encode(Tensor(z), Tensor(y))
            loss = mu.mean()
        backward(loss, tape)
        h = 1e-5
        for p in m.encoder_trunk.parameters()[:2]:
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            for i in range(0, flat.size, 7):  # sample coordinates
                orig = flat[i]
                flat[i] = orig + h
                up = m.encode(Tensor(z), Tensor(y))[0].data.mean()
                flat[i] = orig - h
                down = m.encode(Tensor(z), Tensor(y))[0].data.mean()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                assert abs(gflat[i] - numeric) <= 1e-7 + 1e-4 * max(abs(gflat[i]), abs(numeric))


class TestLoss:
    def test_empty_batch_rejected(self):
        m = toy_model()
        with pytest.raises(ValueError, match="nonempty"):
            cvae_loss(m, np.zeros((0, 6)), np.zeros((0, 6)), np.zeros((0, 4)))

    def test_zero_when_posterior_equals_prior_and_recon_exact(self):
        m = toy_model()
        z, y = toy_batch(m, 5)
        mu_p, lv_p = m.prior(Tensor(y))

        class Perfect:
            sample_dim = m.sample_dim
            channels = m.channels
            snapshots = m.snapshots
            latent_dim = m.latent_dim

            def encode(self, zt, yt):
                return Tensor(mu_p.data.copy()), Tensor(lv_p.data.copy())

            def prior(self, yt):
                return Tensor(mu_p.data.copy()), Tensor(lv_p.data.copy())

            def decode(self, e, yt):
                return Tensor(z.copy())

        loss = cvae_loss(Perfect(), z, y, np.zeros((5, m.latent_dim)))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_batch_order_invariance(self):
        m = toy_model(seed=9)
        z, y = toy_batch(m, 6, seed=9)
        eps = Rng(10).normal((6, m.latent_dim))
        perm = Rng(11).permutation(6)
        a = cvae_loss(m, z, y, eps).item()
        b = cvae_loss(m, z[perm], y[perm], eps[perm]).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_training_halves_reconstruction(self):
        m = toy_model(seed=13)
        z, y = toy_batch(m, 32, seed=13)
        opt = AdamState(m.parameters(), lr=3e-3)
        rng = Rng(17)
        start = reconstruction_mse(m, z, y)
        for _ in range(200):
            with Tape() as tape:
                loss = cvae_loss(m, z, y, rng.normal((32, m.latent_dim)))
            backward(loss, tape)
            adam_step(opt)
        end = reconstruction_mse(m, z, y)
        assert end <= 0.5 * start


class TestGeneration:
    def test_count_validation(self):
        with pytest.raises(ValueError, match="positive"):
            generate_samples(toy_model(), 0, seed=1)

    def test_output_dims_and_determinism(self):
        m = toy_model(seed=3)
        s1, l1 = generate_samples(m, 17, seed=4)
        s2, l2 = generate_samples(m, 17, seed=4)
        assert s1.shape == (17, 6) and l1.shape == (17, 2)
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(l1, l2)

    def test_zero_decoder_gives_zero_samples(self):
        m = toy_model(seed=5)
        for p in m.decoder.parameters():
            p.data[:] = 0.0
        s, _ = generate_samples(m, 9, seed=6)
        np.testing.assert_array_equal(s, np.zeros((9, 6)))

    def test_generation_leaves_no_tape_ops(self):
        m = toy_model(seed=7)
        with Tape() as tape:
            generate_samples(m, 5, seed=8)
        assert len(tape) == 0


class TestObservedLibrary:
    def test_cardinality_and_labels(self):
        class RepStub:
            pass

        rep = RepStub()
        rep.z = Tensor(Rng(19).normal((3, 4, 2, 5)))  # N=3, T=4, K=2, d'=5
        samples, labels = observed_samples(rep)
        assert samples.shape == (3 * 2 * 4, 5)
        # v-major, then channel, then time
        np.testing.assert_array_equal(labels[0], [0, 0])
        np.testing.assert_array_equal(labels[1], [0, 1])
        np.testing.assert_array_equal(labels[4], [1, 0])
        np.testing.assert_array_equal(samples[1], rep.z.data[0, 1, 0])
        np.testing.assert_array_equal(samples[4], rep.z.data[0, 0, 1])

    def test_draws_respect_mixing_extremes(self):
        lib = SampleLibrary(
            observed=np.zeros((4, 3)),
            observed_labels=np.zeros((4, 2), dtype=np.int64),
            generated=np.ones((4, 3)),
            generated_labels=np.zeros((4, 2), dtype=np.int64),
        )
        only_obs = draw_intervention_values(lib, 50, mixing_ratio=1.0, rng=Rng(1))
        only_gen = draw_intervention_values(lib, 50, mixing_ratio=0.0, rng=Rng(2))
        assert (only_obs == 0).all()
        assert (only_gen == 1).all()

    def test_empty_library_rejected(self):
        lib = SampleLibrary(
            observed=np.zeros((0, 3)), observed_labels=np.zeros((0, 2), dtype=np.int64),
            generated=np.zeros((0, 3)), generated_labels=np.zeros((0, 2), dtype=np.int64),
        )
        with pytest.raises(ValueError, match="empty"):
            draw_intervention_values(lib, 1, 0.5, Rng(3))
