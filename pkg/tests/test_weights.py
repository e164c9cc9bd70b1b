import numpy as np
import pytest
from scipy import integrate

from mfattn.weights import (
    HeadNoise,
    WeightProcessSpec,
    drift,
    drift_all,
    head_law_sample,
    initial_ensemble,
    m_theta_integral,
    oscillating_orbit,
    oscillating_target,
    rng_stream,
    step_weights,
    symmetrized_increment,
)

OU = WeightProcessSpec(kind="ou", F=np.eye(3), sigma2=1.0)
FROZEN = WeightProcessSpec(kind="frozen")
OSC = WeightProcessSpec(kind="oscillating", sigma2=0.0)


class TestIncrements:
    def test_exactly_symmetric(self):
        W = symmetrized_increment(np.random.default_rng(0), 4, 0.01)
        assert np.array_equal(W, W.T)

    def test_entry_variances(self):
        rng = np.random.default_rng(1)
        dt = 0.01
        W = np.stack([symmetrized_increment(rng, 3, dt) for _ in range(100_000)])
        for vals, expected in ((W[:, 0, 0], dt), (W[:, 1, 2], dt / 2)):
            var = vals.var(ddof=1)
            # SE of a Gaussian sample variance: var * sqrt(2 / (N - 1))
            se = expected * np.sqrt(2 / (len(vals) - 1))
            assert abs(var - expected) < 3 * se

    def test_streams_reproducible_and_distinct(self):
        a = rng_stream(5, 0, 2, 1).standard_normal(4)
        b = rng_stream(5, 0, 2, 1).standard_normal(4)
        c = rng_stream(5, 0, 2, 2).standard_normal(4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_head_noise_independent_of_head_count(self):
        small = HeadNoise(3, 1, 4, 3)
        big = HeadNoise(3, 1, 16, 3)
        for _ in range(300):  # crosses a block boundary
            np.testing.assert_array_equal(small.next(0.01), big.next(0.01)[:4])


class TestDrift:
    def test_ou(self):
        np.testing.assert_array_equal(drift(OU, np.zeros((3, 3)), 0.0), np.eye(3))

    def test_oscillating_first_head_at_zero(self):
        F0 = np.array([[3.5, 0, 0], [0, 2, 1], [0, 1, 2 + 1.5 * np.cos(np.pi / 4)]])
        np.testing.assert_allclose(drift(OSC, np.zeros((3, 3)), 0.0, h=0, H=4), F0, atol=1e-15)
        assert F0[2, 2] == pytest.approx(3.06066, abs=1e-5)

    def test_oscillating_phases(self):
        Ds = np.zeros((4, 3, 3))
        f = drift_all(OSC, Ds, 0.7)
        for h in range(4):
            np.testing.assert_allclose(f[h], oscillating_target(0.7, 2 * np.pi * h / 4), atol=1e-15)
        same = drift_all(WeightProcessSpec(kind="oscillating", phase_spread=False), Ds, 0.7)
        np.testing.assert_allclose(same, np.broadcast_to(oscillating_target(0.7), (4, 3, 3)))

    def test_oscillating_needs_three_dimensions(self):
        with pytest.raises(ValueError, match="3"):
            drift(OSC, np.zeros((2, 2)), 0.0)

    def test_frozen(self):
        assert np.array_equal(drift(FROZEN, np.eye(3) * 7, 3.0), np.zeros((3, 3)))

    def test_schedule_interpolates(self):
        spec = WeightProcessSpec(kind="schedule", schedule_times=[0.0, 2.0],
                                 schedule_values=[np.zeros((3, 3)), 2 * np.eye(3)])
        np.testing.assert_allclose(drift(spec, np.zeros((3, 3)), 0.5), 0.5 * np.eye(3))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            WeightProcessSpec(kind="frozen", sigma2=1.0)
        with pytest.raises(ValueError):
            WeightProcessSpec(kind="ou", sigma2=-1, F=np.eye(3))
        with pytest.raises(ValueError):
            WeightProcessSpec(kind="ou")
        with pytest.raises(ValueError):
            WeightProcessSpec(kind="brownian")


class TestStepWeights:
    def test_frozen_unchanged(self):
        D = initial_ensemble(OU, 3, 3, seed=0)
        np.testing.assert_array_equal(step_weights(D, FROZEN, 0.0, 0.1), D)

    def test_ou_deterministic_recursion(self):
        spec = WeightProcessSpec(kind="ou", F=np.eye(3), sigma2=0.0)
        D = np.zeros((1, 3, 3))
        dt = 0.05
        for k in range(1, 41):
            D = step_weights(D, spec, (k - 1) * dt, dt)
            np.testing.assert_allclose(D[0], (1 - (1 - dt) ** k) * np.eye(3), atol=1e-14)

    def test_symmetry_preserved_bitwise(self):
        noise = HeadNoise(0, 0, 5, 4)
        spec = WeightProcessSpec(kind="ou", F=np.diag([1.0, 2, 3, 4]), sigma2=2.0)
        D = initial_ensemble(spec, 5, 4, seed=0)
        for k in range(200):
            D = step_weights(D, spec, k * 0.01, 0.01, noise=noise)
            assert np.array_equal(D, np.swapaxes(D, 1, 2))

    def test_noisy_needs_noise(self):
        with pytest.raises(ValueError):
            step_weights(np.zeros((1, 3, 3)), OU, 0.0, 0.01)

    def test_ou_mean_reversion(self):
        # 10^4 independent heads, each an independent OU trajectory
        M = 10_000
        dt = 0.01
        D0 = 0.5 * np.ones((3, 3))
        D = np.broadcast_to(D0, (M, 3, 3)).copy()
        noise = HeadNoise(11, 0, M, 3, block=32)
        means = {}
        for k in range(2000):
            D = step_weights(D, OU, k * dt, dt, noise=noise)
            t = round((k + 1) * dt, 9)
            if t in (1.0, 5.0, 20.0):
                means[t] = (D.mean(axis=0), D.std(axis=0, ddof=1) / np.sqrt(M))
        for t, (m, se) in means.items():
            # Euler recursion mean: F + (1 - dt)^k (D0 - F), close to F + e^{-t}(D0 - F)
            expected = np.eye(3) + np.exp(-t) * (D0 - np.eye(3))
            z = np.abs(m - expected) / se
            assert np.all(z < 4), (t, z.max())


class TestOscillatingOrbit:
    def test_closed_form_matches_quadrature(self):
        rng = np.random.default_rng(3)
        D0 = rng.standard_normal((3, 3))
        D0 = (D0 + D0.T) / 2
        t, phase = 3.7, 0.9
        quad = np.empty((3, 3))
        for a in range(3):
            for b in range(3):
                quad[a, b] = integrate.quad(
                    lambda s: np.exp(-(t - s)) * oscillating_target(s, phase)[a, b], 0, t, limit=200)[0]
        np.testing.assert_allclose(oscillating_orbit(t, phase, D0), quad + np.exp(-t) * D0, atol=1e-10)

    def test_euler_converges_to_orbit(self):
        spec = WeightProcessSpec(kind="oscillating", phase_spread=False)
        D0 = initial_ensemble(spec, 1, 3, seed=4)
        dt = 1e-3
        D = D0.copy()
        for k in range(10_000):
            D = step_weights(D, spec, k * dt, dt)
        quad = np.array([[integrate.quad(lambda s: np.exp(-(10 - s)) * oscillating_target(s)[a, b],
                                         0, 10, limit=200)[0] for b in range(3)] for a in range(3)])
        err = np.linalg.norm(D[0] - quad)
        assert abs(err - np.linalg.norm(np.exp(-10) * D0[0])) < 1e-3


class TestMTheta:
    def test_zero_weights(self):
        np.testing.assert_array_equal(m_theta_integral(np.zeros((10, 2, 3, 3)), 0.1), np.zeros(10))

    def test_frozen_identity(self):
        M = m_theta_integral(np.broadcast_to(np.eye(3), (101, 1, 3, 3)), 0.01)
        assert abs(M[-1] - 3.0) <= 1e-9

    def test_nondecreasing(self):
        noise = HeadNoise(1, 0, 3, 3)
        D = initial_ensemble(OU, 3, 3, seed=1)
        path = [D]
        for k in range(100):
            D = step_weights(D, OU, k * 0.01, 0.01, noise=noise)
            path.append(D)
        assert np.all(np.diff(m_theta_integral(np.array(path), 0.01)) >= 0)


class TestHeadLaw:
    def test_ou_law_matches_simulation(self):
        # exact transition from D0 vs Euler-Maruyama at small dt
        D0 = np.diag([2.0, -1.0, 0.5])
        draws = head_law_sample(OU, 1.0, 20_000, np.random.default_rng(5), 3, D0=D0)
        np.testing.assert_allclose(draws.mean(axis=0), np.eye(3) + np.exp(-1) * (D0 - np.eye(3)), atol=0.03)
        np.testing.assert_allclose(draws[:, 0, 0].var(), 1 - np.exp(-2), rtol=0.05)
        np.testing.assert_allclose(draws[:, 0, 1].var(), (1 - np.exp(-2)) / 2, rtol=0.05)

    def test_frozen_atom(self):
        out = head_law_sample(FROZEN, 2.0, 5, np.random.default_rng(6), 3, D0=np.eye(3))
        np.testing.assert_array_equal(out, np.broadcast_to(np.eye(3), (5, 3, 3)))
