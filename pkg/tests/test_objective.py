import numpy as np
import pytest
from hypothesis import given, strategies as st

from epicorrect.geometry import GridSpec
from epicorrect.image_model import ImageVolume, InfeasibleFieldError, VolumePair, simulate_pair
from epicorrect.objective import (ObjectiveParams, box_radius, d2phi, dphi, distance, f_split, g_split,
                                  hessian_column_blocks, hessian_diagonal, hessian_gn_apply, hessian_sparse,
                                  objective_gn, penalty, phi, residual, smoother)
from epicorrect.phantoms import bump_field, gaussian_blobs, make_phantom

from oracles import central_difference, dense_operators, dense_residual_jacobian, dense_smoother_hessian


def _vec(a):
    return a.ravel(order="F")


def _pair(grid, slope=0.4, name="head"):
    return simulate_pair(make_phantom(name, grid), bump_field(grid, slope))


def _random_feasible(grid, rng, max_slope=0.6):
    """Random field with ``max|D1 b| = max_slope`` (rows built by cumulative sums)."""
    g = rng.uniform(-1.0, 1.0, grid.m)
    g *= max_slope / np.max(np.abs(g))
    b = np.zeros(grid.face_shape)
    b[1:] = np.cumsum(g, axis=0) * grid.h[0]
    return b - b.mean()


# --- phi ---------------------------------------------------------------------

def test_phi_at_origin():
    assert phi(0.0) == 0.0 and dphi(0.0) == 0.0 and d2phi(0.0) == 0.0


def test_phi_half():
    assert abs(float(phi(0.5)) - 1.0 / 12.0) <= 1e-15
    np.testing.assert_allclose(dphi(0.5), (0.5 - 0.0625) / 0.5625, rtol=1e-15)


def test_phi_pole():
    assert np.isinf(phi(1.0)) and np.isinf(phi(-1.0)) and np.isinf(phi(1.5))
    assert 1e2 < float(phi(0.999)) < np.inf


def test_phi_monotone_along_ray():
    t = np.linspace(0.0, 0.9999, 2000)
    assert np.all(np.diff(phi(t)) > 0)


def test_d2phi_nonnegative():
    x = np.linspace(-0.999, 0.999, 4001)
    assert np.all(d2phi(x) >= 0)


@given(st.floats(min_value=-0.95, max_value=0.95))
def test_phi_derivatives_match_finite_differences(x):
    eps = 1e-6
    np.testing.assert_allclose(dphi(x), (phi(x + eps) - phi(x - eps)) / (2 * eps), rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(d2phi(x), (dphi(x + eps) - dphi(x - eps)) / (2 * eps), rtol=1e-5, atol=1e-9)


# --- residual and distance ---------------------------------------------------

def test_residual_at_zero_is_image_difference(rng):
    g = GridSpec((5, 4), (1.0, 1.0))
    pair = VolumePair(ImageVolume(g, rng.random(g.m)), ImageVolume(g, rng.random(g.m)))
    np.testing.assert_allclose(residual(pair, np.zeros(g.face_shape)), pair.plus.data - pair.minus.data)


def test_identical_images_zero_objective(rng):
    g = GridSpec((6, 5), (1.0, 1.0))
    img = ImageVolume(g, rng.random(g.m))
    pair = VolumePair(img, img)
    ev = objective_gn(pair, np.zeros(g.face_shape), ObjectiveParams(10.0))
    assert ev.value == 0.0
    np.testing.assert_array_equal(ev.grad, 0.0)


def test_residual_small_at_true_field():
    g = GridSpec((64, 64), (1.0, 1.0))
    truth = gaussian_blobs(g)
    b = bump_field(g, 0.5)
    pair = simulate_pair(truth, b)
    assert np.linalg.norm(residual(pair, b)) <= 0.02 * np.linalg.norm(truth.data)


@pytest.mark.parametrize("m", [(4, 3), (4, 3, 2)])
def test_jacobian_and_hessian_match_dense(m, rng):
    g = GridSpec(m, (0.9, 1.2, 0.8)[: len(m)])
    pair = VolumePair(ImageVolume(g, rng.random(g.m)), ImageVolume(g, rng.random(g.m)))
    b = _random_feasible(g, rng, 0.5)
    r_dense, J = dense_residual_jacobian(pair, b)
    dist = distance(pair, b)
    V = g.cell_volume
    np.testing.assert_allclose(_vec(dist.residual), r_dense, atol=1e-12)
    np.testing.assert_allclose(_vec(dist.grad), V * J.T @ r_dense, atol=1e-12)
    HD = V * J.T @ J
    np.testing.assert_allclose(dist.jacobian.hessian_blocks().to_sparse().toarray(), HD, atol=1e-12)
    params = ObjectiveParams(3.0, 10.0, 1e-3)
    ev = objective_gn(pair, b, params)
    _, D1, _, _ = dense_operators(g)
    w = d2phi(D1 @ _vec(b))
    H = HD + params.alpha * dense_smoother_hessian(g) + params.gamma * np.eye(g.n_faces) \
        + params.beta * V * D1.T @ np.diag(w) @ D1
    np.testing.assert_allclose(hessian_sparse(ev, params).toarray(), H, atol=1e-12)
    p = rng.standard_normal(g.face_shape)
    np.testing.assert_allclose(_vec(hessian_gn_apply(ev, params, p)), H @ _vec(p), atol=1e-12)
    np.testing.assert_allclose(_vec(hessian_diagonal(ev, params)), np.diag(H), atol=1e-12)


def test_column_terms_are_block_tridiagonal(rng):
    g = GridSpec((4, 3, 2), (1.0, 1.0, 1.0))
    pair = _pair(g)
    ev = objective_gn(pair, _random_feasible(g, rng, 0.5), ObjectiveParams(2.0))
    Hb = hessian_column_blocks(ev, ObjectiveParams(2.0)).to_sparse().toarray()
    n1 = g.m[0] + 1
    i, j = np.nonzero(np.abs(Hb) > 0)
    assert np.all(i // n1 == j // n1)
    assert np.all(np.abs(i - j) <= 1)


def test_smoother_examples(rng):
    g = GridSpec((4, 3, 2), (0.5, 1.0, 2.0))
    val, grad = smoother(np.full(g.face_shape, 2.5), g)
    assert val == 0.0
    np.testing.assert_allclose(grad, 0.0, atol=1e-14)
    b = rng.standard_normal(g.face_shape)
    _, D1, D2, D3 = dense_operators(g)
    expect = 0.5 * g.cell_volume * sum(np.sum((D @ _vec(b)) ** 2) for D in (D1, D2, D3))
    np.testing.assert_allclose(smoother(b, g)[0], expect, rtol=1e-13)
    p = rng.standard_normal(g.face_shape)
    fd = central_difference(lambda x: smoother(x, g)[0], b, p, 1e-5)
    np.testing.assert_allclose(np.vdot(smoother(b, g)[1], p), fd, rtol=1e-6)


def test_penalty_values(rng):
    g = GridSpec((4, 3), (1.0, 2.0))
    b = np.zeros(g.face_shape)
    b[1:, :] = np.cumsum(np.full(g.m, 0.5), axis=0)
    pen = penalty(b, g, beta=10.0)
    assert pen.value == pytest.approx(10.0 * 2.0 * 12 / 12.0)
    b[2, 0] = b[1, 0] + 1.0
    assert np.isinf(penalty(b, g, 10.0, derivatives=False).value)
    with pytest.raises(InfeasibleFieldError):
        penalty(b, g, 10.0)


def test_penalty_near_pole_is_large():
    g = GridSpec((2, 2), (1.0, 1.0))
    b = np.zeros(g.face_shape)
    b[1:] = 0.999
    b[2:] = 0.999
    assert penalty(b, g, 1.0, derivatives=False).value > 1e2


def test_nonnegative_terms(rng):
    g = GridSpec((6, 5), (1.0, 1.0))
    pair = _pair(g)
    for _ in range(5):
        ev = objective_gn(pair, _random_feasible(g, rng, 0.8), ObjectiveParams(1.0))
        assert all(ev.parts[k] >= 0 for k in "DSP")


# --- finite-difference gradient checks (8 x 6 x 5) ---------------------------

@pytest.fixture(scope="module")
def fd_problem():
    g = GridSpec((8, 6, 5), (1.0, 1.1, 0.9))
    return g, _pair(g, 0.4, "blobs")


def _fd_check(f, grad, b, p):
    eps = 1e-5 * (1.0 + np.max(np.abs(b)))
    fd = central_difference(f, b, p, eps)
    an = float(np.vdot(grad, p))
    return abs(an - fd) / max(abs(fd), abs(an), 1e-300)


@pytest.mark.parametrize("term", ["D", "S", "P", "J_GN"])
def test_gradients_finite_difference(fd_problem, term):
    g, pair = fd_problem
    rng = np.random.default_rng(7)
    params = ObjectiveParams(2.0, 10.0)
    for _ in range(5):
        b = _random_feasible(g, rng, 0.7)
        p = rng.standard_normal(g.face_shape)
        if term == "D":
            f, grad = (lambda x: distance(pair, x).value), distance(pair, b).grad
        elif term == "S":
            f, grad = (lambda x: smoother(x, g)[0]), smoother(b, g)[1]
        elif term == "P":
            f, grad = (lambda x: penalty(x, g, 10.0, False).value), penalty(b, g, 10.0).grad
        else:
            f, grad = (lambda x: objective_gn(pair, x, params, derivatives=False).value), \
                objective_gn(pair, b, params).grad
        assert _fd_check(f, grad, b, p) < 1e-5


def test_hessian_spd_and_symmetric(rng):
    g = GridSpec((6, 4), (1.0, 1.0))
    pair = _pair(g)
    params = ObjectiveParams(5.0, 10.0, 1e-3)
    ev = objective_gn(pair, _random_feasible(g, rng, 0.5), params)
    for _ in range(5):
        p, q = rng.standard_normal(g.face_shape), rng.standard_normal(g.face_shape)
        Hp, Hq = hessian_gn_apply(ev, params, p), hessian_gn_apply(ev, params, q)
        assert np.vdot(p, Hp) >= params.gamma * np.vdot(p, p)
        assert abs(np.vdot(q, Hp) - np.vdot(p, Hq)) <= 1e-12 * np.linalg.norm(Hp) * np.linalg.norm(q)


def test_objective_infeasible_is_infinite():
    g = GridSpec((4, 3), (1.0, 1.0))
    pair = _pair(g)
    b = np.zeros(g.face_shape)
    b[2] = 2.0
    ev = objective_gn(pair, b, ObjectiveParams(1.0))
    assert np.isinf(ev.value) and ev.grad is None


def test_box_check_optional():
    g = GridSpec((4, 3), (1.0, 1.0))
    pair = _pair(g)
    b = np.full(g.face_shape, 2.0 * box_radius(g))
    assert np.isfinite(objective_gn(pair, b, ObjectiveParams(1.0)).value)
    assert np.isinf(objective_gn(pair, b, ObjectiveParams(1.0, box_check=True)).value)
    assert box_radius(g) == pytest.approx(2 * 5.0)


def test_split_sums_to_unpenalized_objective(rng):
    g = GridSpec((6, 5, 3), (1.0, 0.5, 2.0))
    pair = _pair(g)
    b = _random_feasible(g, rng, 0.5)
    alpha = 4.0
    fv, fg, _ = f_split(pair, b, alpha)
    gv, gg = g_split(b, g, alpha)
    ev = objective_gn(pair, b, ObjectiveParams(alpha, gamma=0.0), penalized=False)
    np.testing.assert_allclose(fv + gv, ev.value, rtol=1e-13)
    np.testing.assert_allclose(fg + gg, ev.grad, rtol=1e-12, atol=1e-9)


def test_params_validation():
    with pytest.raises(ValueError):
        ObjectiveParams(0.0)
    with pytest.raises(ValueError):
        ObjectiveParams(1.0, beta=-1.0)
