"""Noise schedule, toy latent codec, and deterministic inversion round trips."""

import numpy as np
import pytest

from aeroadapt.backbone import (
    TOY_CHANNEL_MIX,
    DimensionError,
    LatentTensor,
    NoiseSchedule,
    PromptCondition,
    ScheduleError,
    StepAlignmentError,
    ToyBackbone,
    UNCONDITIONAL,
    ddim_invert,
    ddim_step,
    timestep_grid,
)


class TestNoiseSchedule:
    def test_linear_endpoints(self, schedule):
        assert schedule.alpha_bar[0] == 1.0
        assert schedule.t_max == 1000
        assert len(schedule.alpha_bar) == 1001

    def test_cumprod_identity(self, schedule):
        # alpha_bar[t] must equal prod(1 - beta[0..t-1]) exactly as computed.
        betas = np.linspace(1e-4, 0.02, 1000)
        expected = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        np.testing.assert_allclose(schedule.alpha_bar, expected, rtol=0, atol=1e-12)

    def test_coefficients_sum_of_squares(self, schedule):
        # a_t^2 + b_t^2 = 1 at every step.
        for t in (0, 1, 137, 500, 1000):
            a, b = schedule.alpha(t), schedule.beta(t)
            assert a * a + b * b == pytest.approx(1.0, abs=1e-12)

    def test_strictly_decreasing_enforced(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(alpha_bar=np.array([1.0, 0.5, 0.5])).validate()

    def test_initial_value_enforced(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(alpha_bar=np.array([0.9, 0.5])).validate()

    def test_range_enforced(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(alpha_bar=np.array([1.0, 0.5, -0.1])).validate()

    def test_check_t_bounds(self, schedule):
        with pytest.raises(ScheduleError):
            schedule.check_t(-1)
        with pytest.raises(ScheduleError):
            schedule.check_t(1001)


class TestTimestepGrid:
    def test_strictly_increasing_ints(self):
        grid = timestep_grid(600, 50)
        assert len(grid) == 51
        assert grid[0] == 0 and grid[-1] == 600
        assert np.all(np.diff(grid) > 0)
        assert grid.dtype == np.int64

    def test_single_step(self):
        np.testing.assert_array_equal(timestep_grid(600, 1), [0, 600])

    def test_degenerate_rejected(self):
        # More hops than integers available cannot stay strictly increasing.
        with pytest.raises(ScheduleError):
            timestep_grid(3, 10)

    def test_zero_target_trivial(self):
        np.testing.assert_array_equal(timestep_grid(0, 5), [0])

    def test_zero_steps_nonzero_target_rejected(self):
        with pytest.raises(ValueError):
            timestep_grid(600, 0)


class TestToyBackbone:
    def test_capabilities(self, toy_backbone):
        caps = toy_backbone.capabilities()
        assert caps["downsample_factor"] == 4
        assert caps["latent_channels"] == 4
        assert caps["name"] == "toy"
        assert caps["t_max"] == 1000

    def test_encode_is_blockwise_mean_mix(self, rng, toy_backbone):
        img = rng.random((8, 8, 3))
        lat = toy_backbone.encode(img)
        assert lat.values.shape == (4, 2, 2)
        assert lat.timestep == 0
        # First three channels carry the 4x4 block means verbatim.
        block = img[:4, :4, :].mean(axis=(0, 1))
        np.testing.assert_allclose(lat.values[:3, 0, 0], block, atol=1e-12)
        np.testing.assert_allclose(lat.values[3, 0, 0], block.mean(), atol=1e-12)

    def test_decode_inverts_encode_on_blockwise_constant(self, rng, toy_backbone):
        # Images constant on 4x4 blocks survive the round trip exactly.
        coarse = rng.random((3, 5, 3))
        img = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)
        out = toy_backbone.decode(toy_backbone.encode(img))
        np.testing.assert_allclose(out, img, atol=1e-10)

    def test_decode_values_not_clipped(self, toy_backbone):
        lat = LatentTensor(values=np.full((4, 1, 1), 5.0), timestep=0)
        assert toy_backbone.decode(lat).max() > 1.0

    def test_mix_pseudoinverse(self):
        pinv = np.linalg.pinv(TOY_CHANNEL_MIX)
        np.testing.assert_allclose(pinv @ TOY_CHANNEL_MIX, np.eye(3), atol=1e-12)

    def test_indivisible_dims_rejected(self, toy_backbone):
        with pytest.raises(DimensionError):
            toy_backbone.encode(np.zeros((6, 8, 3)))

    def test_null_predictor_returns_zeros(self, toy_backbone):
        eps = toy_backbone.predict_noise(np.ones((4, 2, 2)), 500, UNCONDITIONAL)
        np.testing.assert_array_equal(eps, np.zeros((4, 2, 2)))

    def test_constant_predictor_requires_field(self):
        bb = ToyBackbone(predictor="constant")
        with pytest.raises(ValueError):
            bb.predict_noise(np.zeros((4, 2, 2)), 100, UNCONDITIONAL)

    def test_oracle_predictor_recovers_true_noise(self, rng):
        bb = ToyBackbone(predictor="oracle")
        z0 = rng.standard_normal((4, 2, 2))
        noise = rng.standard_normal((4, 2, 2))
        t = 400
        a, b = bb.schedule.alpha(t), bb.schedule.beta(t)
        bb.set_oracle_latent(z0)
        eps = bb.predict_noise(a * z0 + b * noise, t, UNCONDITIONAL)
        np.testing.assert_allclose(eps, noise, atol=1e-10)

    def test_oracle_predictor_zero_at_t0(self, rng):
        # b_0 = 0: guard returns zeros instead of dividing by zero.
        bb = ToyBackbone(predictor="oracle")
        bb.set_oracle_latent(rng.standard_normal((4, 2, 2)))
        eps = bb.predict_noise(rng.standard_normal((4, 2, 2)), 0, UNCONDITIONAL)
        np.testing.assert_array_equal(eps, np.zeros((4, 2, 2)))

    def test_unknown_predictor_rejected(self):
        with pytest.raises(ValueError):
            ToyBackbone(predictor="learned")


class TestDdimStep:
    def test_same_timestep_exact_copy(self, rng, toy_backbone):
        lat = LatentTensor(values=rng.standard_normal((4, 2, 2)), timestep=300)
        out = ddim_step(toy_backbone, lat, 300, 300)
        np.testing.assert_array_equal(out.values, lat.values)
        assert out.timestep == 300
        assert out is not lat

    def test_null_predictor_rescales(self, rng, toy_backbone):
        # With eps = 0 the update is a pure rescale by a_prev / a_t.
        z = rng.standard_normal((4, 2, 2))
        lat = LatentTensor(values=z, timestep=500)
        out = ddim_step(toy_backbone, lat, 500, 250)
        sched = toy_backbone.schedule
        scale = sched.alpha(250) / sched.alpha(500)
        np.testing.assert_allclose(out.values, z * scale, atol=1e-12)
        assert out.timestep == 250

    def test_oracle_single_step_reaches_z0(self, rng):
        bb = ToyBackbone(predictor="oracle")
        z0 = rng.standard_normal((4, 2, 2))
        noise = rng.standard_normal((4, 2, 2))
        t = 700
        zt = LatentTensor(
            values=bb.schedule.alpha(t) * z0 + bb.schedule.beta(t) * noise, timestep=t
        )
        bb.set_oracle_latent(z0)
        out = ddim_step(bb, zt, t, 0)
        np.testing.assert_allclose(out.values, z0, atol=1e-10)
        assert out.timestep == 0

    def test_timestep_mismatch_rejected(self, toy_backbone):
        lat = LatentTensor(values=np.zeros((4, 2, 2)), timestep=300)
        with pytest.raises(StepAlignmentError):
            ddim_step(toy_backbone, lat, 400, 200)

    def test_forward_direction_rejected(self, toy_backbone):
        lat = LatentTensor(values=np.zeros((4, 2, 2)), timestep=300)
        with pytest.raises(ScheduleError):
            ddim_step(toy_backbone, lat, 300, 400)


class TestInversionRoundTrip:
    def reverse(self, backbone, traj):
        grid = traj.timesteps
        lat = traj.final
        for t, t_prev in zip(grid[::-1], grid[-2::-1]):
            lat = ddim_step(backbone, lat, t, t_prev)
        return lat

    def test_null_predictor_round_trip(self, rng, toy_backbone):
        z0 = LatentTensor(values=rng.standard_normal((4, 2, 2)), timestep=0)
        traj = ddim_invert(toy_backbone, z0, 600, num_steps=50)
        back = self.reverse(toy_backbone, traj)
        np.testing.assert_allclose(back.values, z0.values, atol=1e-5)

    def test_constant_predictor_round_trip(self, rng):
        bb = ToyBackbone(predictor="constant")
        bb.set_constant_noise(rng.standard_normal((4, 2, 2)) * 0.1)
        z0 = LatentTensor(values=rng.standard_normal((4, 2, 2)), timestep=0)
        traj = ddim_invert(bb, z0, 600, num_steps=50)
        back = self.reverse(bb, traj)
        np.testing.assert_allclose(back.values, z0.values, atol=1e-5)

    def test_oracle_predictor_round_trip_exact(self, rng):
        z0_vals = rng.standard_normal((4, 2, 2))
        bb = ToyBackbone(predictor="oracle")
        bb.set_oracle_latent(z0_vals)
        z0 = LatentTensor(values=z0_vals, timestep=0)
        traj = ddim_invert(bb, z0, 800, num_steps=20)
        back = self.reverse(bb, traj)
        # Predictor independent of z makes ascent and descent exact inverses.
        np.testing.assert_allclose(back.values, z0.values, atol=1e-9)

    def test_trajectory_bookkeeping(self, rng, toy_backbone):
        z0 = LatentTensor(values=rng.standard_normal((4, 2, 2)), timestep=0)
        traj = ddim_invert(toy_backbone, z0, 600, num_steps=10)
        assert traj.initial.timestep == 0
        assert traj.final.timestep == 600
        assert len(traj.timesteps) == 11
        probe = traj.timesteps[3]
        assert traj.at(probe).timestep == probe
        with pytest.raises(StepAlignmentError):
            traj.at(601)

    def test_target_zero_trivial_trajectory(self, rng, toy_backbone):
        z0 = LatentTensor(values=rng.standard_normal((4, 2, 2)), timestep=0)
        traj = ddim_invert(toy_backbone, z0, 0, num_steps=50)
        assert traj.timesteps == [0]
        np.testing.assert_array_equal(traj.final.values, z0.values)

    def test_nonzero_start_rejected(self, rng, toy_backbone):
        z = LatentTensor(values=rng.standard_normal((4, 2, 2)), timestep=5)
        with pytest.raises(StepAlignmentError):
            ddim_invert(toy_backbone, z, 600)


class TestPromptCondition:
    def test_unconditional_is_empty(self):
        assert UNCONDITIONAL.tags == ()

    def test_tags_preserved(self):
        cond = PromptCondition(tags=("person", "aerial view"))
        assert cond.tags == ("person", "aerial view")
