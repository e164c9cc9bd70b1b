import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfattn.sphere import (
    DimensionMismatch,
    NearZeroVector,
    as_cloud,
    as_ensemble,
    kernel_gradient,
    project_tangent,
    radial_normalize,
    random_tangent,
    uniform_cloud,
)
from mfattn.weights import sym

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-3 else None


class TestProjectTangent:
    def test_kills_radial_component(self):
        np.testing.assert_array_equal(project_tangent([1.0, 0, 0], [2.0, 3, 4]), [0, 3, 4])

    def test_radial_input_maps_to_zero(self):
        np.testing.assert_array_equal(project_tangent([1.0, 0, 0], [5.0, 0, 0]), [0, 0, 0])

    def test_random_output_orthogonal(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = uniform_cloud(1, 5, rng)[0]
            out = project_tangent(x, rng.standard_normal(5))
            assert abs(out @ x) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            project_tangent([1.0, 0, 0], [1.0, 2.0])

    def test_broadcasts_over_heads(self):
        rng = np.random.default_rng(1)
        X = uniform_cloud(4, 3, rng)
        V = rng.standard_normal((2, 4, 3))
        out = project_tangent(X, V)
        for h in range(2):
            for i in range(4):
                np.testing.assert_allclose(out[h, i], project_tangent(X[i], V[h, i]), atol=1e-15)

    @given(vec3, vec3)
    def test_idempotent_and_contractive(self, x, v):
        x = _unit(x)
        if x is None:
            return
        once = project_tangent(x, v)
        np.testing.assert_allclose(project_tangent(x, once), once, atol=1e-12)
        assert np.linalg.norm(once) <= np.linalg.norm(v) * (1 + 1e-12) + 1e-12


class TestRadialNormalize:
    def test_examples(self):
        np.testing.assert_allclose(radial_normalize([3.0, 4.0, 0.0]), [0.6, 0.8, 0.0])
        np.testing.assert_array_equal(radial_normalize([0.0, 0.0, 2.0]), [0, 0, 1])

    def test_zero_vector_raises(self):
        with pytest.raises(NearZeroVector):
            radial_normalize([0.0, 0.0, 0.0])

    def test_rowwise(self):
        out = radial_normalize(np.array([[3.0, 4.0], [0.0, -2.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, -1.0]])

    @given(vec3)
    def test_idempotent(self, z):
        if np.linalg.norm(z) < 1e-6:
            return
        once = radial_normalize(z)
        np.testing.assert_allclose(radial_normalize(once), once, atol=1e-12)
        assert abs(np.linalg.norm(once) - 1) < 1e-12


class TestKernelGradient:
    def test_zero_matrix(self):
        x = np.array([1.0, 0, 0])
        np.testing.assert_array_equal(kernel_gradient(x, x, np.zeros((3, 3))), np.zeros(3))

    def test_orthogonal_pair_identity(self):
        out = kernel_gradient([1.0, 0, 0], [0.0, 1, 0], np.eye(3))
        np.testing.assert_allclose(out, [0, 1, 0], atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            kernel_gradient([1.0, 0, 0], [1.0, 0, 0], np.eye(2))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        h = 1e-4
        for _ in range(50):
            x, y = uniform_cloud(2, 3, rng)
            D = sym(rng.standard_normal((3, 3)))
            g = kernel_gradient(x, y, D)
            Q = np.linalg.svd(project_tangent(x, np.eye(3)))[0][:, :2]
            for e in Q.T:
                # geodesic through x with initial velocity e
                f = [np.exp((np.cos(s) * x + np.sin(s) * e) @ D @ y) for s in (h, -h)]
                np.testing.assert_allclose(g @ e, (f[0] - f[1]) / (2 * h), rtol=1e-5, atol=1e-7)


class TestValidation:
    def test_cloud_must_be_unit(self):
        with pytest.raises(ValueError, match="unit-norm"):
            as_cloud([[1.0, 1.0, 0.0]])

    def test_asymmetric_heads_rejected(self):
        D = np.eye(3)
        D[0, 1] = 1e-6
        with pytest.raises(ValueError, match="symmetric"):
            as_ensemble(D)

    def test_single_matrix_promoted(self):
        assert as_ensemble(np.eye(3)).shape == (1, 3, 3)

    def test_head_dimension_checked(self):
        with pytest.raises(DimensionMismatch):
            as_ensemble(np.eye(2), d=3)

    def test_random_tangent_is_unit_and_tangent(self):
        rng = np.random.default_rng(3)
        X = uniform_cloud(10, 4, rng)
        T = random_tangent(X, rng)
        np.testing.assert_allclose(np.linalg.norm(T, axis=1), 1.0)
        np.testing.assert_allclose(np.sum(T * X, axis=1), 0.0, atol=1e-12)
