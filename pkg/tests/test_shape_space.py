import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kspunet.errors import DegenerateConfiguration, DimensionMismatch
from kspunet.shape_space import (
    Rotation2,
    helmert_submatrix,
    is_preshape,
    procrustes_distance,
    project_to_preshape,
    psi,
    psi_inverse,
    regular_polygon,
    rotate,
    standardize_orientation,
)

SQUARE = np.array([[1.0, -1.0, -1.0, 1.0], [1.0, 1.0, -1.0, -1.0]])

configs = arrays(
    np.float64,
    st.tuples(st.just(2), st.integers(3, 9)),
    elements=st.floats(-10, 10, allow_nan=False, width=64),
).filter(lambda x: np.linalg.norm(x - x.mean(axis=1, keepdims=True)) > 1e-3)


def random_preshape(rng, k=4):
    return project_to_preshape(rng.standard_normal((2, k)))


def test_square_projection():
    x = project_to_preshape(SQUARE)
    np.testing.assert_allclose(x, SQUARE / (2 * np.sqrt(2)), atol=1e-15)
    np.testing.assert_allclose(np.abs(x), 0.353553, atol=1e-6)
    assert is_preshape(x)


def test_projection_idempotent():
    x = project_to_preshape(SQUARE)
    np.testing.assert_allclose(project_to_preshape(x), x, atol=1e-15, rtol=0)


def test_degenerate_configuration():
    with pytest.raises(DegenerateConfiguration):
        project_to_preshape(np.ones((2, 4)) * 3.0)


@given(configs)
def test_projection_invariants(x):
    y = project_to_preshape(x)
    assert np.all(np.abs(y.sum(axis=1)) <= 1e-12)
    assert abs(np.linalg.norm(y) - 1.0) <= 1e-12


def test_helmert_k3():
    expected = np.array(
        [[1 / np.sqrt(2), -1 / np.sqrt(2), 0.0], [1 / np.sqrt(6), 1 / np.sqrt(6), -2 / np.sqrt(6)]]
    )
    np.testing.assert_allclose(helmert_submatrix(3), expected, atol=1e-15)
    np.testing.assert_allclose(helmert_submatrix(2), [[1 / np.sqrt(2), -1 / np.sqrt(2)]], atol=1e-15)


@pytest.mark.parametrize("k", range(2, 17))
def test_helmert_orthonormal_and_centered(k):
    h = helmert_submatrix(k)
    assert h.shape == (k - 1, k)
    np.testing.assert_allclose(h @ h.T, np.eye(k - 1), atol=1e-14, rtol=0)
    np.testing.assert_allclose(h @ np.ones(k), 0.0, atol=1e-14)


def test_helmert_rejects_small_k():
    with pytest.raises(ValueError):
        helmert_submatrix(1)


def test_psi_on_default_dims():
    x = project_to_preshape(SQUARE)
    p = psi(x)
    assert p.shape == (6,)
    assert abs(np.linalg.norm(p) - 1) < 1e-15
    np.testing.assert_allclose(psi_inverse(p, k=4, m=2), x, atol=1e-10)


def test_psi_norm_is_noop_on_preshapes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = random_preshape(rng, k=int(rng.integers(3, 10)))
        y = x @ helmert_submatrix(x.shape[1]).T
        assert abs(np.linalg.norm(y) - 1.0) < 1e-10
        assert abs(np.linalg.norm(psi(x)) - 1.0) < 1e-12


def test_psi_round_trips():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(3, 10))
        x = random_preshape(rng, k)
        np.testing.assert_allclose(psi_inverse(psi(x), k, 2), x, atol=1e-10)
        p = rng.standard_normal((k - 1) * 2)
        p /= np.linalg.norm(p)
        np.testing.assert_allclose(psi(psi_inverse(p, k, 2)), p, atol=1e-10)


def test_psi_inverse_basis_vector_is_preshape():
    e1 = np.zeros(6)
    e1[0] = 1.0
    assert is_preshape(psi_inverse(e1, 4, 2))


def test_psi_inverse_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        psi_inverse(np.ones(5) / np.sqrt(5), 4, 2)


def test_rotation_normalizes_angle():
    assert Rotation2(3 * np.pi).angle == pytest.approx(np.pi)
    r = Rotation2(0.7)
    np.testing.assert_allclose(r.matrix @ r.matrix.T, np.eye(2), atol=1e-15)
    assert np.linalg.det(r.matrix) == pytest.approx(1.0)


def test_standardize_identity():
    x = project_to_preshape(SQUARE + [[0.3], [0.0]])
    np.testing.assert_array_equal(standardize_orientation(x, Rotation2(0.0)), x)


def test_standardize_cancels_extra_rotation():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = random_preshape(rng)
        g, r = Rotation2(rng.uniform(-np.pi, np.pi)), Rotation2(rng.uniform(-np.pi, np.pi))
        a = standardize_orientation(rotate(m, g), g.compose(r))
        b = standardize_orientation(m, r)
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert abs(np.linalg.norm(a) - 1) < 1e-12
        np.testing.assert_allclose(psi(a), psi(b), atol=1e-10)


def test_procrustes_basic():
    rng = np.random.default_rng(3)
    a = random_preshape(rng)
    assert procrustes_distance(a, a) == 0.0
    assert procrustes_distance(a, rotate(a, Rotation2(np.deg2rad(37)))) < 1e-9


def test_procrustes_against_rotation_grid():
    square = project_to_preshape(SQUARE)
    line = project_to_preshape([[0.0, 1.0, 2.0, 3.0], [0.0, 0.0, 0.0, 0.0]])
    grid = np.linspace(-np.pi, np.pi, 200001)
    scores = [np.sum(square * rotate(line, Rotation2(t))) for t in grid[::50]]
    brute = float(np.arccos(min(1.0, max(scores))))
    d = procrustes_distance(square, line)
    assert d > 0.1
    assert d == pytest.approx(brute, abs=1e-4)
    assert procrustes_distance(line, square) == pytest.approx(d, abs=1e-14)


def test_regular_polygon_is_preshape():
    assert is_preshape(regular_polygon(4))
