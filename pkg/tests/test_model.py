import numpy as np
import pytest

import mpcappset as m
from helpers import THETA1, scalar_model


def fd_matrices(model, theta, i, h=1e-6):
    e = np.zeros(model.n_params)
    e[i] = h
    Ap, Bp, Cp = model.eval_matrices(theta + e)
    Am, Bm, Cm = model.eval_matrices(theta - e)
    return (Ap - Am) / (2 * h), (Bp - Bm) / (2 * h), (Cp - Cm) / (2 * h)


def test_scalar_benchmark_matrices():
    A, B, C = scalar_model().eval_matrices([0.6, 0.9])
    assert np.allclose(A, [[0.9]]) and np.allclose(B, [[1.0]]) and np.allclose(C, [[0.6]])


def test_zero_perturbation_same_matrices():
    model = scalar_model()
    delta = np.array([0.3, -0.2])
    ref = model.eval_matrices(THETA1)
    out = model.eval_matrices(THETA1 + 0.0 * delta)
    for M1, M2 in zip(ref, out):
        assert np.array_equal(M1, M2)


def test_two_by_two_identity_placeholders():
    from mpcappset.experiment import example2_config

    model = example2_config().build_model()
    A, B, C = model.eval_matrices([1, 0, 0, 1, 1, 0, 0, 1])
    assert np.allclose(A, np.eye(2))
    assert np.allclose(B, np.eye(2))
    assert np.allclose(C, [[-0.8954, 0.1421], [-0.2118, -0.1360]])


def test_affine_jacobian_values():
    model = scalar_model()
    dA, dB, dC = model.matrix_jacobian(THETA1, 0)
    assert np.allclose(dC, [[1.0]]) and np.allclose(dA, [[0.0]]) and np.allclose(dB, [[0.0]])
    dA, dB, dC = model.matrix_jacobian(THETA1, 1)
    assert np.allclose(dA, [[1.0]]) and np.allclose(dB, [[0.0]]) and np.allclose(dC, [[0.0]])


def test_affine_jacobian_constant_in_theta():
    model = scalar_model()
    j1 = model.matrix_jacobian([0.1, 0.2], 1)
    j2 = model.matrix_jacobian([5.0, -3.0], 1)
    for M1, M2 in zip(j1, j2):
        assert np.array_equal(M1, M2)


def test_jacobian_index_out_of_range():
    with pytest.raises(IndexError):
        scalar_model().matrix_jacobian(THETA1, 2)


def quadratic_model():
    """A = [theta^2], B = [1], C = [1]: a genuinely nonlinear parametrization."""

    def ev(theta):
        return np.array([[theta[0] ** 2]]), np.array([[1.0]]), np.array([[1.0]])

    def jac(theta, i):
        return np.array([[2.0 * theta[0]]]), np.array([[0.0]]), np.array([[0.0]])

    def hess(theta, i, j):
        return np.array([[2.0]]), np.array([[0.0]]), np.array([[0.0]])

    return m.ParametrizedModel.from_callables(1, 1, 1, 1, ev, jac, hess)


def test_general_model_jacobian_against_fd():
    model = quadratic_model()
    dA, _, _ = model.matrix_jacobian([2.0], 0)
    assert np.allclose(dA, [[4.0]])
    fdA, _, _ = fd_matrices(model, np.array([2.0]), 0)
    assert abs(dA[0, 0] - fdA[0, 0]) <= 1e-7 * max(1.0, abs(fdA[0, 0]))


@pytest.mark.parametrize("model_factory", [scalar_model, quadratic_model])
def test_jacobian_matches_fd_at_random_points(model_factory):
    model = model_factory()
    rng = np.random.default_rng(42)
    for _ in range(10):
        theta = rng.uniform(0.2, 1.5, size=model.n_params)
        for i in range(model.n_params):
            jac = model.matrix_jacobian(theta, i)
            fd = fd_matrices(model, theta, i)
            for J, F in zip(jac, fd):
                assert np.abs(J - F).max() <= 1e-6 * (1.0 + np.abs(F).max())


def test_hessian_consistent_with_jacobian_fd():
    model = quadratic_model()
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(10):
        theta = rng.uniform(0.5, 2.0, size=1)
        e = np.array([h])
        jp = model.matrix_jacobian(theta + e, 0)
        jm = model.matrix_jacobian(theta - e, 0)
        hess = model.matrix_hessian(theta, 0, 0)
        for H, (P, Mn) in zip(hess, zip(jp, jm)):
            assert np.abs(H - (P - Mn) / (2 * h)).max() <= 1e-6 * (1.0 + np.abs(H).max())


def test_affine_hessian_all_zero():
    model = scalar_model()
    for i in range(2):
        for j in range(2):
            for M in model.matrix_hessian(THETA1, i, j):
                assert not M.any()


def test_open_loop_hand_recursion():
    ys = m.simulate_open_loop(scalar_model(), [0.6, 0.9], [0.0], [[1.0], [0.0], [0.0]])
    assert np.allclose(ys.ravel(), [0.0, 0.6, 0.54], atol=1e-15)


def test_open_loop_zero_input_zero_output():
    ys = m.simulate_open_loop(scalar_model(), THETA1, [0.0], np.zeros((5, 1)))
    assert not ys.any()


def test_open_loop_noise_seed_reproducible():
    noise = m.NoiseSpec(variance=0.001, seed=123)
    u = np.ones((10, 1))
    y1 = m.simulate_open_loop(scalar_model(), THETA1, [0.0], u, noise=noise)
    y2 = m.simulate_open_loop(scalar_model(), THETA1, [0.0], u, noise=noise)
    assert np.array_equal(y1, y2)
    y3 = m.simulate_open_loop(scalar_model(), THETA1, [0.0], u, noise=m.NoiseSpec(variance=0.001, seed=124))
    assert not np.array_equal(y1, y3)


def test_open_loop_rejects_empty_input():
    with pytest.raises(ValueError):
        m.simulate_open_loop(scalar_model(), THETA1, [0.0], np.zeros((0, 1)))


def test_noise_spec_rejects_negative_variance():
    with pytest.raises(ValueError):
        m.NoiseSpec(variance=-1e-3, seed=0)


def test_as_theta_validation():
    with pytest.raises(ValueError):
        m.as_theta([np.nan, 1.0])
    with pytest.raises(ValueError):
        m.as_theta([1.0, 2.0], n=3)
    with pytest.raises(ValueError):
        m.as_theta([])


def test_affine_term_bounds_checked():
    with pytest.raises(ValueError):
        m.ParametrizedModel.affine(1, 1, 1, 1, [m.AffineTerm(0, "A", 1, 0)])
    with pytest.raises(ValueError):
        m.ParametrizedModel.affine(1, 1, 1, 1, [m.AffineTerm(2, "A", 0, 0)])
