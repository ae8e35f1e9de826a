from __future__ import annotations

import math

import numpy as np
import pytest

from neonet import ldm
from neonet import volgrid as vg
from neonet.errors import EmptySplitError, ShapeError
from neonet.models import TrainSettings


class TestSchedule:
    def test_single_step(self):
        schedule = ldm.make_schedule(1, 0.5, 0.5)
        assert schedule.steps == 1
        assert schedule.alpha_bars[1] == pytest.approx(0.5)

    def test_two_steps_by_hand(self):
        schedule = ldm.make_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(schedule.alpha_bars[1:], [0.9, 0.72], rtol=1e-12)
        assert schedule.alpha_bars[0] == 1.0
        assert schedule.betas[0] == 0.0

    def test_default_terminal_is_near_pure_noise(self):
        schedule = ldm.make_schedule()
        assert schedule.steps == 1000
        assert schedule.alpha_bars[-1] < 1e-4
        assert np.all(np.diff(schedule.alpha_bars) < 0)

    def test_rebuild_from_stored_betas(self):
        schedule = ldm.make_schedule(50, 1e-4, 0.02)
        rebuilt = ldm.schedule_from_betas(schedule.betas)
        assert rebuilt.steps == 50
        np.testing.assert_allclose(rebuilt.alpha_bars, schedule.alpha_bars, rtol=1e-12)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 0.0, 0.02), (10, 1e-4, 1.0)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            ldm.make_schedule(*args)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="cosine"):
            ldm.make_schedule(10, kind="cosine")

    def test_step_out_of_range(self, rng):
        schedule = ldm.make_schedule(5, 1e-3, 0.02)
        with pytest.raises(ValueError):
            ldm.forward_diffuse(np.zeros(3), 0, np.zeros(3), schedule)
        with pytest.raises(ValueError):
            ldm.forward_diffuse(np.zeros(3), 6, np.zeros(3), schedule)


class TestForwardDiffuse:
    def test_clean_limit(self, rng):
        schedule = ldm.schedule_from_betas([0.0, 0.0])
        z0, eps = rng.standard_normal(5), rng.standard_normal(5)
        np.testing.assert_array_equal(ldm.forward_diffuse(z0, 1, eps, schedule), z0)

    def test_pure_noise_limit(self, rng):
        schedule = ldm.schedule_from_betas([0.0, 1.0])
        z0, eps = rng.standard_normal(5), rng.standard_normal(5)
        np.testing.assert_allclose(ldm.forward_diffuse(z0, 1, eps, schedule), eps)

    def test_invertible_given_noise(self, rng):
        schedule = ldm.make_schedule(100, 1e-4, 0.02)
        z0, eps = rng.standard_normal((4, 2, 2, 2)), rng.standard_normal((4, 2, 2, 2))
        for t in (1, 37, 100):
            ab = schedule.alpha_bars[t]
            z_t = ldm.forward_diffuse(z0, t, eps, schedule)
            recovered = (z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            np.testing.assert_allclose(recovered, z0, atol=1e-10)

    @pytest.mark.parametrize("t", [10, 250, 600, 1000])
    def test_sampled_moments(self, t):
        schedule = ldm.make_schedule()
        rng = np.random.default_rng(t)
        z0 = rng.standard_normal((4, 2, 2, 4))
        draws = np.stack([
            ldm.forward_diffuse(z0, t, rng.standard_normal(z0.shape), schedule) for _ in range(1000)
        ])
        ab = schedule.alpha_bars[t]
        expected = ab * np.sum(z0**2) + (1.0 - ab) * z0.size
        second = np.mean(np.sum(draws**2, axis=(1, 2, 3, 4)))
        assert second == pytest.approx(expected, rel=0.05)
        np.testing.assert_allclose(draws.mean(axis=0), math.sqrt(ab) * z0, atol=0.15)


class TestVae:
    def test_zero_input_with_zero_heads(self, rng):
        params = ldm.init_vae(rng, zero_heads=True)
        mu, logvar = ldm.vae_encode(np.zeros((2, 8, 8, 8)), params)
        assert np.all(mu.value == 0.0)
        assert np.all(logvar.value == 0.0)

    def test_latent_grid_is_quarter_size(self, rng):
        params = ldm.init_vae(rng, latent_channels=4, channels=(4, 8))
        mu, logvar = ldm.vae_encode(rng.uniform(size=(2, 24, 24, 12)), params)
        assert mu.shape == (4, 6, 6, 3)
        assert logvar.shape == (4, 6, 6, 3)
        assert ldm.vae_decode(mu, params).shape == (2, 24, 24, 12)

    def test_deterministic_encoding(self, rng, patch_factory):
        params = ldm.init_vae(rng)
        image = patch_factory().image
        a, _ = ldm.vae_encode(image, params)
        b, _ = ldm.vae_encode(image.copy(), params)
        np.testing.assert_array_equal(a.value, b.value)

    def test_extent_not_divisible_by_four(self, rng):
        params = ldm.init_vae(rng)
        with pytest.raises(ShapeError, match="width"):
            ldm.vae_encode(np.zeros((2, 8, 8, 6)), params)

    def test_reparameterize_collapses_below_floor(self, rng):
        mu = rng.standard_normal((4, 2, 2, 2))
        z = ldm.reparameterize(mu, np.full(mu.shape, -100.0), rng)
        np.testing.assert_array_equal(z.value, mu)

    def test_reparameterize_moments(self):
        shape = (40, 40, 40)
        mu = np.stack([np.full(shape, 0.7), np.full(shape, -1.5)])
        logvar = np.stack([np.full(shape, -1.0), np.full(shape, 0.8)])
        z = ldm.reparameterize(mu, logvar, np.random.default_rng(11)).value
        n = np.prod(shape)
        for ch in range(2):
            var = math.exp(logvar[ch, 0, 0, 0])
            assert abs(z[ch].mean() - mu[ch, 0, 0, 0]) < 5 * math.sqrt(var / n)
            assert z[ch].var() == pytest.approx(var, rel=0.05)

    def test_reparameterize_reproducible(self):
        mu, logvar = np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2))
        a = ldm.reparameterize(mu, logvar, np.random.default_rng(3)).value
        b = ldm.reparameterize(mu, logvar, np.random.default_rng(3)).value
        np.testing.assert_array_equal(a, b)

    def test_loss_zero_at_perfect_reconstruction(self, rng):
        x = rng.uniform(size=(2, 4, 4, 4))
        zeros = vg.constant(np.zeros((4, 1, 1, 1)))
        assert ldm.vae_loss(x, vg.constant(x), zeros, zeros).item() == 0.0

    def test_kl_term_weight(self, rng):
        x = rng.uniform(size=(2, 4, 4, 4))
        mu = vg.constant(np.ones((4, 1, 1, 1)))
        logvar = vg.constant(np.zeros((4, 1, 1, 1)))
        assert ldm.vae_loss(x, vg.constant(x), mu, logvar).item() == pytest.approx(1e-7 * 0.5)

    def test_constant_reconstruction_error(self, rng):
        x = rng.uniform(size=(2, 4, 4, 4))
        zeros = vg.constant(np.zeros((4, 1, 1, 1)))
        loss = ldm.vae_loss(x, vg.constant(x + 0.2), zeros, zeros).item()
        assert loss == pytest.approx(0.2)

    def test_encoder_gradients(self, rng, weighted_sum):
        params = ldm.init_vae(rng, latent_channels=2, channels=(2, 2))
        x = rng.uniform(size=(2, 4, 4, 4))

        def build():
            mu, logvar = ldm.vae_encode(x, params)
            return vg.add(weighted_sum(mu), weighted_sum(logvar, seed=11))

        checked = [params.enc_in.kernel, params.enc_down2.kernel, params.mu_head.bias]
        report = vg.grad_check(build, checked, max_coords=20, rng=rng)
        assert report.passed, report

    def test_zero_learning_rate_keeps_init(self, patch_factory):
        patches = [patch_factory(case_id=f"c{i}") for i in range(3)]
        settings = TrainSettings(steps=3, lr=0.0, batch=2, seed=9)
        params, history = ldm.train_vae(patches, settings, latent_channels=2, channels=(2, 4))
        fresh = ldm.init_vae(np.random.default_rng(9), 2, (2, 4))
        for (name, a), (_, b) in zip(params.named_parameters(), fresh.named_parameters()):
            np.testing.assert_array_equal(a.value, b.value, err_msg=name)
        assert len(history.losses) == 3
        assert history.train_ids == ["c0", "c1", "c2"]

    def test_empty_split(self):
        with pytest.raises(EmptySplitError):
            ldm.train_vae([], TrainSettings(steps=1, lr=1e-3))

    def test_parameter_names_are_prefixed(self, rng):
        names = [n for n, _ in ldm.init_vae(rng).named_parameters()]
        assert all(n.startswith("vae.") for n in names)
        assert len(names) == len(set(names)) == 18


class TestDenoiser:
    def test_output_matches_latent_shape(self, rng):
        params = ldm.init_denoiser(rng, latent_channels=4, channels=(4, 8, 8), time_dim=8, zero_output=False)
        for shape in [(4, 2, 2, 2), (4, 6, 6, 3)]:
            assert ldm.denoiser_forward(params, rng.standard_normal(shape), 3).shape == shape

    def test_zero_predictor_zero_noise(self, rng):
        params = ldm.init_denoiser(rng, channels=(4, 8, 8), time_dim=8)
        schedule = ldm.make_schedule(10, 1e-3, 0.02)
        z0 = rng.standard_normal((4, 2, 2, 2))
        assert ldm.ldm_loss(z0, 4, np.zeros_like(z0), params, schedule).item() == 0.0

    def test_zero_predictor_unit_noise(self, rng):
        params = ldm.init_denoiser(rng, channels=(4, 8, 8), time_dim=8)
        schedule = ldm.make_schedule(10, 1e-3, 0.02)
        z0 = rng.standard_normal((4, 2, 2, 2))
        eps = rng.choice([-1.0, 1.0], size=z0.shape)
        assert ldm.ldm_loss(z0, 4, eps, params, schedule).item() == pytest.approx(1.0)

    def test_loss_gradients(self, rng):
        params = ldm.init_denoiser(rng, latent_channels=2, channels=(2, 2, 2), time_dim=4, zero_output=False)
        schedule = ldm.make_schedule(10, 1e-3, 0.02)
        z0, eps = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 4, 4, 4))
        checked = [params.encoder_blocks[1].conv.kernel, params.mid.time_proj.weights, params.out.bias]
        report = vg.grad_check(lambda: ldm.ldm_loss(z0, 5, eps, params, schedule), checked,
                               max_coords=20, rng=rng)
        assert report.passed, report

    def test_residual_count_checked(self, rng):
        params = ldm.init_denoiser(rng, channels=(4, 8, 8), time_dim=8)
        with pytest.raises(ShapeError):
            ldm.denoiser_forward(params, np.zeros((4, 2, 2, 2)), 1, residuals=[])

    def test_single_step_sampling_with_zero_predictor(self, rng):
        params = ldm.init_denoiser(rng, channels=(4, 8, 8), time_dim=8)
        schedule = ldm.make_schedule(1, 0.5, 0.5)
        sample = ldm.ddpm_sample(schedule, params, np.random.default_rng(4), (4, 2, 2, 2))
        z1 = np.random.default_rng(4).standard_normal((4, 2, 2, 2))
        np.testing.assert_allclose(sample, z1 / math.sqrt(0.5))

    def test_sampling_reproducible(self, rng):
        params = ldm.init_denoiser(rng, channels=(4, 8, 8), time_dim=8, zero_output=False)
        schedule = ldm.make_schedule(5, 1e-3, 0.02)
        a = ldm.ddpm_sample(schedule, params, np.random.default_rng(1), (4, 2, 2, 2))
        b = ldm.ddpm_sample(schedule, params, np.random.default_rng(1), (4, 2, 2, 2))
        np.testing.assert_array_equal(a, b)

    def test_training_returns_best_loss_params(self, rng):
        latents = [rng.standard_normal((2, 2, 2, 2)) for _ in range(3)]
        schedule = ldm.make_schedule(10, 1e-3, 0.02)
        settings = TrainSettings(steps=4, lr=1e-3, batch=2, seed=2)
        params, history = ldm.train_denoiser(latents, schedule, settings, channels=(2, 4, 4), time_dim=4)
        assert len(history.losses) == 4
        assert history.best_loss == min(history.losses)
        assert params.out.kernel.shape[0] == 2

    def test_empty_latents(self):
        with pytest.raises(EmptySplitError):
            ldm.train_denoiser([], ldm.make_schedule(2, 0.1, 0.2), TrainSettings(steps=1, lr=1e-3))


@pytest.mark.slow
def test_desk_vae_training_halves_loss(patch_factory):
    patches = [patch_factory(size=(24, 24, 12), case_id=f"c{i}") for i in range(8)]
    settings = TrainSettings(steps=300, lr=3e-3, batch=4, seed=0)
    _, history = ldm.train_vae(patches, settings, latent_channels=4, channels=(4, 8))
    assert history.best_loss <= 0.5 * history.losses[0]


@pytest.mark.slow
def test_desk_denoiser_beats_zero_predictor(rng):
    latents = [0.5 * rng.standard_normal((4, 6, 6, 3)) for _ in range(8)]
    schedule = ldm.make_schedule(50, 1e-4, 0.02)
    settings = TrainSettings(steps=300, lr=1e-3, batch=4, seed=0)
    _, history = ldm.train_denoiser(latents, schedule, settings, channels=(8, 16, 16), time_dim=8)
    assert np.mean(history.losses[-20:]) < 1.0
