"""Tests for schedule module."""

import math

import numpy as np
import pytest

from src.schedule import TimestepRangeError, add_noise, linear_beta_schedule


class TestLinearBetaSchedule:
    """Test noise schedule construction."""

    @pytest.fixture(scope="class")
    def sched(self):
        return linear_beta_schedule(1000, 0.0085, 0.0120)

    def test_endpoints_exact(self, sched):
        """Test the first and last betas equal the configured endpoints."""
        assert sched.steps == 1000
        assert sched.betas[0] == 0.0085
        assert sched.betas[-1] == 0.0120

    def test_alpha_bars_strictly_decreasing(self, sched):
        """Test cumulative products decrease at every step."""
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert 0.0 < sched.alpha_bars[-1] < sched.alpha_bars[0] < 1.0

    @pytest.mark.parametrize("t", [10, 500])
    def test_product_oracle(self, sched, t):
        """Test alpha_bar against an explicit product of (1 - beta)."""
        product = 1.0
        for s in range(t + 1):
            beta = 0.0085 + (0.0120 - 0.0085) * s / 999
            product *= 1.0 - beta
        assert sched.alpha_bar(t) == pytest.approx(product, abs=1e-9)

    def test_defaults_from_config(self, sched):
        """Test defaults reproduce the explicit schedule."""
        np.testing.assert_array_equal(linear_beta_schedule().alpha_bars, sched.alpha_bars)

    def test_clean_sample_sentinel(self, sched):
        """Test t = -1 denotes alpha_bar 1."""
        assert sched.alpha_bar(-1) == 1.0

    @pytest.mark.parametrize("t", [-2, 1000])
    def test_out_of_range(self, sched, t):
        """Test timesteps outside the schedule raise TimestepRangeError."""
        with pytest.raises(TimestepRangeError):
            sched.alpha_bar(t)

    def test_read_only(self, sched):
        """Test schedule arrays cannot be mutated."""
        with pytest.raises(ValueError):
            sched.betas[0] = 0.5

    def test_scaled_linear(self):
        """Test sqrt-space interpolation keeps the endpoints."""
        sched = linear_beta_schedule(100, 0.0085, 0.0120, kind="scaled_linear")
        assert sched.betas[0] == 0.0085
        assert sched.betas[-1] == 0.0120
        mid = ((math.sqrt(0.0085) + math.sqrt(0.0120)) / 2) ** 2
        assert sched.betas[49] < mid < sched.betas[50]

    @pytest.mark.parametrize("steps, beta0, beta_t", [(1, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)])
    def test_invalid_arguments(self, steps, beta0, beta_t):
        """Test degenerate step counts and beta ranges are rejected."""
        with pytest.raises(ValueError):
            linear_beta_schedule(steps, beta0, beta_t)

    def test_explicit_zero_steps(self):
        """Test steps=0 is rejected rather than replaced by the default."""
        with pytest.raises(ValueError, match="steps"):
            linear_beta_schedule(0)

    def test_unknown_kind(self):
        """Test unknown interpolation kinds are rejected."""
        with pytest.raises(ValueError, match="kind"):
            linear_beta_schedule(10, 0.1, 0.2, kind="cosine")


class TestAddNoise:
    """Test the forward noising process."""

    def test_formula(self):
        """Test x_t = sqrt(abar) x0 + sqrt(1 - abar) noise."""
        sched = linear_beta_schedule(1000, 0.0085, 0.0120)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        noise = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
        abar = sched.alpha_bar(250)

        expected = math.sqrt(abar) * x0.astype(np.float64) + math.sqrt(1 - abar) * noise.astype(np.float64)
        np.testing.assert_allclose(add_noise(x0, noise, 250, sched), expected, atol=1e-6)

    def test_shape_mismatch(self):
        """Test x0 and noise must share a shape."""
        from src.numerics import DimensionError

        with pytest.raises(DimensionError):
            add_noise(np.zeros((2, 2)), np.zeros((2, 3)), 0, linear_beta_schedule(10, 0.1, 0.2))

    def test_timestep_range(self):
        """Test t = -1 is not a forward timestep."""
        with pytest.raises(TimestepRangeError):
            add_noise(np.zeros(2), np.zeros(2), -1, linear_beta_schedule(10, 0.1, 0.2))
