import math

import numpy as np
import pytest

from posecompose.diffusion import (
    SamplerConfig,
    add_noise,
    ddim_sigma,
    ddim_step,
    ddim_timesteps,
    make_schedule,
    predict_x0,
)
from posecompose.errors import DomainError


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(T=1, beta_start=0.1, beta_end=0.1)
        assert s.abar(1) == pytest.approx(0.9)
        assert s.abar(0) == 1.0

    def test_strictly_decreasing(self):
        s = make_schedule()
        assert (np.diff(s.alpha_bar) < 0).all()
        assert s.abar(s.T) > 0

    def test_matches_extended_precision_oracle(self):
        # independent cumulative product in mpmath
        import mpmath

        mpmath.mp.dps = 50
        betas = [mpmath.mpf("1e-4") + (mpmath.mpf("0.02") - mpmath.mpf("1e-4"))
                 * i / 999 for i in range(1000)]
        prod = mpmath.mpf(1)
        for b in betas:
            prod *= (1 - b)
        s = make_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
        assert s.abar(1000) == pytest.approx(float(prod), rel=1e-10)

    def test_invalid_range(self):
        with pytest.raises(DomainError) as e:
            make_schedule(T=10, beta_start=0.5, beta_end=0.1)
        assert e.value.code == "INVALID_RANGE"
        with pytest.raises(DomainError):
            make_schedule(T=0)
        with pytest.raises(DomainError):
            make_schedule(T=10, beta_start=0.0, beta_end=0.1)


class TestAddNoise:
    def test_t_zero_identity(self):
        s = make_schedule()
        x0 = np.ones((4, 4, 3))
        out = add_noise(x0, 0, np.zeros_like(x0), s)
        assert np.allclose(out, x0)

    def test_zero_signal(self):
        s = make_schedule()
        eps = np.random.default_rng(0).standard_normal((4, 4, 3))
        out = add_noise(np.zeros_like(eps), 500, eps, s)
        assert np.allclose(out, math.sqrt(1 - s.abar(500)) * eps)

    def test_direct_arithmetic(self):
        # abar = 0.25: 0.5*2 + sqrt(0.75)*1
        s = make_schedule(T=1, beta_start=0.75, beta_end=0.75)
        out = add_noise(np.full((1,), 2.0), 1, np.ones(1), s)
        assert out[0] == pytest.approx(0.5 * 2 + math.sqrt(0.75), abs=1e-12)

    def test_shape_mismatch(self):
        s = make_schedule()
        with pytest.raises(DomainError) as e:
            add_noise(np.zeros((2, 2)), 10, np.zeros((3, 3)), s)
        assert e.value.code == "SHAPE_MISMATCH"


class TestPredictX0:
    def test_inverts_add_noise(self):
        s = make_schedule()
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((8, 8, 3))
        eps = rng.standard_normal((8, 8, 3))
        for t in (1, 250, 1000):
            x_t = add_noise(x0, t, eps, s)
            assert np.abs(predict_x0(x_t, eps, t, s) - x0).max() < 1e-6

    def test_zero_eps(self):
        s = make_schedule()
        x_t = np.ones((2, 2))
        assert np.allclose(predict_x0(x_t, np.zeros_like(x_t), 100, s),
                           x_t / math.sqrt(s.abar(100)))

    def test_direct_arithmetic(self):
        s = make_schedule(T=1, beta_start=0.75, beta_end=0.75)
        out = predict_x0(np.ones(1), np.full((1,), 0.5), 1, s)
        assert out[0] == pytest.approx((1.0 - math.sqrt(0.75) * 0.5) / 0.5, abs=1e-9)


class TestDdimStep:
    def make_two_level(self):
        # abar_1 = 0.64, abar_2 = 0.25: betas (0.36, 0.609375)
        return make_schedule(T=2, beta_start=0.36, beta_end=0.609375)

    def test_eps_zero_eta_zero(self):
        s = self.make_two_level()
        cfg = SamplerConfig(num_steps=1)
        x = np.full((3,), 1.7)
        out = ddim_step(x, np.zeros_like(x), 2, 1, cfg, s)
        assert np.allclose(out, math.sqrt(s.abar(1) / s.abar(2)) * x)

    def test_direct_arithmetic(self):
        s = self.make_two_level()
        assert s.abar(2) == pytest.approx(0.25)
        assert s.abar(1) == pytest.approx(0.64)
        cfg = SamplerConfig(num_steps=1)
        out = ddim_step(np.ones(1), np.full((1,), 0.5), 2, 1, cfg, s)
        x0 = (1.0 - math.sqrt(0.75) * 0.5) / 0.5
        expected = 0.8 * x0 + 0.6 * 0.5
        assert out[0] == pytest.approx(expected, abs=1e-9)
        assert out[0] == pytest.approx(1.2072, abs=1e-4)

    def test_noise_requirement(self):
        s = self.make_two_level()
        with pytest.raises(DomainError):
            ddim_step(np.ones(1), np.ones(1), 2, 1, SamplerConfig(num_steps=1, eta=0.5), s)
        with pytest.raises(DomainError):
            ddim_step(np.ones(1), np.ones(1), 2, 1, SamplerConfig(num_steps=1), s,
                      noise=np.ones(1))

    def test_sigma_zero_when_eta_zero(self):
        s = make_schedule()
        for t, tp in ddim_timesteps(s, 10):
            assert ddim_sigma(t, tp, 0.0, s) == 0.0

    def test_consistency_moves_toward_x0(self):
        # with exact eps, distance to sqrt(abar)*x0 shrinks monotonically
        s = make_schedule()
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((6, 6, 3))
        eps = rng.standard_normal((6, 6, 3))
        cfg = SamplerConfig(num_steps=10)
        prev_gap = None
        x = add_noise(x0, 1000, eps, s)
        for t, tp in ddim_timesteps(s, 10):
            exact_eps = (x - math.sqrt(s.abar(t)) * x0) / math.sqrt(1 - s.abar(t))
            x = ddim_step(x, exact_eps, t, tp, cfg, s)
            gap = np.linalg.norm(x - math.sqrt(s.abar(tp)) * x0)
            if prev_gap is not None:
                assert gap <= prev_gap + 1e-9
            prev_gap = gap

    def test_timestep_sequence(self):
        s = make_schedule()
        pairs = ddim_timesteps(s, 20)
        assert pairs[0][0] == 1000
        assert pairs[-1][1] == 0
        ts = [p[0] for p in pairs]
        assert ts == sorted(ts, reverse=True)
        assert len(pairs) == 20

    def test_determinism(self):
        s = make_schedule()
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 4, 3))
        eps = rng.standard_normal((4, 4, 3))
        cfg = SamplerConfig(num_steps=5)
        a = ddim_step(x, eps, 500, 250, cfg, s)
        b = ddim_step(x.copy(), eps.copy(), 500, 250, cfg, s)
        assert np.array_equal(a, b)
