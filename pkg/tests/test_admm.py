import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epicorrect import geometry as geo
from epicorrect import parallel
from epicorrect.admm import (ADMMConfig, ADMMError, ADMMState, QPError, admm_solve, b_update, canonical_schedule,
                             dual_consistency, dual_update_and_residuals, kkt_residual, lagrangian, qp_active_set,
                             rho_schedule, tolerances, z_update)
from epicorrect.geometry import GridSpec, SymTridiagonal
from epicorrect.image_model import ImageVolume, VolumePair, correct_pair, simulate_pair, ssd
from epicorrect.objective import ObjectiveParams
from epicorrect.phantoms import PHANTOMS, bump_field, make_phantom

from oracles import brute_force_qp, dense_operators, dense_residual_jacobian, dense_tridiag


def _col(diag, off):
    return SymTridiagonal(np.asarray(diag, float), np.asarray(off, float))


def _pair(m, slope=0.5, name="head"):
    g = GridSpec(m, (1.0,) * len(m))
    b_true = bump_field(g, slope)
    return simulate_pair(make_phantom(name, g), b_true), b_true


def _zero_pair(g):
    img = ImageVolume(g, np.zeros(g.m))
    return VolumePair(img, img)


# --- QP ----------------------------------------------------------------------

def test_qp_trivial():
    res = qp_active_set(_col(np.ones(4), np.zeros(3)), np.zeros(4), np.zeros(4))
    np.testing.assert_array_equal(res.x, 0.0)
    assert np.all(res.state == 0)


def test_qp_two_face_example():
    res = qp_active_set(_col([1.0, 1.0], [0.0]), np.array([-3.0, 3.0]), np.zeros(2), h1=1.0)
    np.testing.assert_allclose(res.x, [0.5, -0.5], atol=1e-14)
    np.testing.assert_allclose(res.x, brute_force_qp(np.eye(2), np.array([-3.0, 3.0]), 1.0), atol=1e-12)
    assert res.lam_lower[0] > 0 and res.lam_upper[0] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=10**6),
       st.floats(min_value=0.5, max_value=2.0))
def test_qp_matches_brute_force(n, seed, h):
    rng = np.random.default_rng(seed)
    off = rng.uniform(-1.0, 1.0, n - 1)
    diag = np.abs(np.concatenate([[0], off])) + np.abs(np.concatenate([off, [0]])) + rng.uniform(0.1, 2.0, n)
    c = rng.normal(0.0, 5.0, n)
    x0 = np.cumsum(np.concatenate([[0.0], rng.uniform(-0.9, 0.9, n - 1) * h]))
    res = qp_active_set(_col(diag, off), c, x0, h1=h)
    expect = brute_force_qp(dense_tridiag(diag, off), c, h)
    np.testing.assert_allclose(res.x, expect, atol=1e-9 * (1 + np.abs(expect).max()))
    assert kkt_residual(_col(diag, off), c, h, res) <= 1e-10


def test_qp_batched_columns_kkt(rng):
    n, cols = 9, (4, 3)
    off = rng.uniform(-1, 1, (n - 1,) + cols)
    diag = 2.5 + rng.random((n,) + cols)
    c = rng.normal(0, 4, (n,) + cols)
    G = _col(diag, off)
    res = qp_active_set(G, c, np.zeros((n,) + cols), h1=0.7)
    assert kkt_residual(G, c, 0.7, res) <= 1e-10
    assert np.max(np.abs(np.diff(res.x, axis=0) / 0.7)) <= 1 + 1e-12
    assert min(res.lam_lower.min(), res.lam_upper.min()) >= 0
    for j in range(cols[0]):
        single = qp_active_set(_col(diag[:, j, 1], off[:, j, 1]), c[:, j, 1], np.zeros(n), h1=0.7)
        np.testing.assert_array_equal(single.x, res.x[:, j, 1])


def test_qp_rejects_infeasible_start():
    with pytest.raises(ValueError):
        qp_active_set(_col(np.ones((3, 2)), np.zeros((2, 2))), np.zeros((3, 2)),
                      np.array([[0.0, 0.0], [0.0, 5.0], [0.0, 0.0]]))


def test_qp_iteration_cap_names_column():
    n = 12
    c = np.zeros(n)
    c[0], c[-1] = -50.0, 50.0
    with pytest.raises(QPError) as info:
        qp_active_set(_col(np.ones(n), np.zeros(n - 1)), c, np.zeros(n), max_iter=1)
    assert info.value.column == 0


# --- b-update ----------------------------------------------------------------

def test_b_update_stationary_point(rng):
    g = GridSpec((6, 4), (1.0, 1.0))
    img = ImageVolume(g, rng.random(g.m))
    zero = np.zeros(g.face_shape)
    b, info = b_update(VolumePair(img, img), ADMMState(zero, zero, zero, 100.0), ObjectiveParams(5.0))
    np.testing.assert_array_equal(b, 0.0)


def test_b_update_single_step_is_dense_newton_step():
    g = GridSpec((8, 3), (1.0, 1.0))
    pair, _ = _pair(g.m, 0.3)
    b0 = 0.5 * bump_field(g, 0.3)
    z = b0 + 0.01 * bump_field(g, 0.3)
    u = np.zeros(g.face_shape)
    rho, alpha = 50.0, 2.0
    b, _ = b_update(pair, ADMMState(b0, z, u, rho), ObjectiveParams(alpha), ADMMConfig(sqp_max_iter=1))
    r, J = dense_residual_jacobian(pair, b0)
    _, D1, _, _ = dense_operators(g)
    V = g.cell_volume
    vec = lambda a: a.ravel(order="F")
    G = V * J.T @ J + alpha * V * D1.T @ D1 + rho * V * np.eye(g.n_faces)
    c = V * J.T @ r + alpha * V * D1.T @ D1 @ vec(b0) + rho * V * vec(b0 - z + u)
    expect = vec(b0) + np.linalg.solve(G, -c)
    assert np.max(np.abs(D1 @ expect)) < 1
    np.testing.assert_allclose(vec(b), expect, rtol=1e-10, atol=1e-12)


def test_b_update_hits_bound_like_brute_force():
    # zero images make the subproblem an exact QP; a steep z forces the bound
    g = GridSpec((4, 2), (1.0, 1.0))
    zero = np.zeros(g.face_shape)
    z = np.zeros(g.face_shape)
    z[:, 0] = [0.0, 2.0, 4.0, 4.5, 4.6]
    z[:, 1] = [0.0, -0.5, -3.0, -3.0, -3.0]
    rho, alpha = 10.0, 1.0
    b, info = b_update(_zero_pair(g), ADMMState(zero, z, zero, rho), ObjectiveParams(alpha))
    D = np.diff(np.eye(5), axis=0)
    for j in range(2):
        G = alpha * D.T @ D + rho * np.eye(5)
        expect = brute_force_qp(G, -rho * z[:, j], 1.0)
        np.testing.assert_allclose(b[:, j], expect, atol=1e-10)
    assert np.any(np.isclose(np.abs(np.diff(b, axis=0)), 1.0, atol=1e-12))
    assert np.max(np.abs(np.diff(b, axis=0))) <= 1 + 1e-12
    assert info.kkt_residual <= 1e-10


def test_b_update_independent_of_order_and_threads():
    pair, _ = _pair((20, 14, 6), 0.4)
    g = pair.grid
    rng = np.random.default_rng(5)
    b0 = 0.3 * bump_field(g, 0.4)
    z = b0 + 0.05 * rng.standard_normal(g.face_shape)
    u = 0.01 * rng.standard_normal(g.face_shape)
    state = ADMMState(b0, z, u, 200.0)
    params = ObjectiveParams(20.0)
    old = parallel.get_threads()
    try:
        parallel.set_threads(1)
        ref, _ = b_update(pair, state, params)
        parallel.set_threads(4)
        par, _ = b_update(pair, state, params)
    finally:
        parallel.set_threads(old)
    np.testing.assert_allclose(par, ref, rtol=0, atol=1e-13)
    flip = lambda a: a[:, ::-1, ::-1].copy()
    fpair = VolumePair(ImageVolume(g, flip(pair.plus.data)), ImageVolume(g, flip(pair.minus.data)))
    out, _ = b_update(fpair, ADMMState(flip(b0), flip(z), flip(u), 200.0), params)
    np.testing.assert_allclose(flip(out), ref, rtol=0, atol=1e-13)


# --- z-update, residuals, schedules ------------------------------------------

def test_z_update_examples(rng):
    g = GridSpec((5, 6, 4), (1.0, 0.5, 2.0))
    b, u = rng.standard_normal(g.face_shape), rng.standard_normal(g.face_shape)
    z = z_update(ADMMState(b, b, u, 10.0), g, 1e-14)
    np.testing.assert_allclose(z, b + u, rtol=1e-10)
    const = np.full(g.face_shape, 1.25)
    np.testing.assert_allclose(z_update(ADMMState(const, const, 0 * const, 3.0), g, 7.0), 1.25, rtol=1e-12)
    alpha, rho = 3.0, 0.7
    state = ADMMState(b, b, u, rho)
    z = z_update(state, g, alpha)
    rhs = rho * g.cell_volume * (b + u)
    res = geo.coupled_apply(z, g, alpha, rho) - rhs
    assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(rhs)


def test_residuals_examples(rng):
    b = rng.standard_normal((5, 4))
    u = rng.standard_normal((5, 4))
    u_new, res = dual_update_and_residuals(b, b, b, u, 2.0)
    assert res.primal == 0.0 and res.dual == 0.0
    np.testing.assert_allclose(u_new, u, rtol=0, atol=1e-15)


def test_eps_pri_example():
    b = np.zeros(100)
    b[0] = 5.0
    z = np.zeros(100)
    z[1] = 3.0
    eps_pri, eps_dual = tolerances(100, b, z, np.zeros(100), 1.0, 0.2, 0.2)
    assert eps_pri == pytest.approx(3.0)
    assert eps_dual == pytest.approx(2.0)


def test_dual_update_uses_old_iterates():
    b_old, z_old, u_old = np.full(4, 1.0), np.full(4, 2.0), np.zeros(4)
    b_new, z_new = np.full(4, 10.0), np.full(4, 9.0)
    u_new, res = dual_update_and_residuals(b_new, z_old, z_new, u_old, 1.0, 0.2, 0.2, b_old=b_old)
    np.testing.assert_allclose(u_new, 1.0)
    assert res.primal == pytest.approx(2.0)
    assert res.dual == pytest.approx(14.0)
    assert res.eps_pri == pytest.approx(0.4 + 0.2 * 4.0)


def test_rho_schedule_examples():
    cfg = ADMMConfig()
    assert rho_schedule("adaptive", 100.0, 1.0, 1.0, cfg) == 100.0
    assert rho_schedule("adaptive", 100.0, 20.0, 1.0, cfg) == 200.0
    assert rho_schedule("adaptive", 100.0, 1.0, 20.0, cfg) == 50.0
    assert rho_schedule("adaptive_bounded", cfg.rho_min, 1.0, 1e6, cfg) == cfg.rho_min
    assert rho_schedule("fixed", 7.0, 1e6, 1.0, cfg) == 7.0
    assert canonical_schedule("bounded") == "adaptive_bounded"


@pytest.mark.parametrize("kw", [{"rho0": 1.0, "rho_min": 10.0}, {"eps_abs": 0.0}, {"mu": 1.0},
                                {"schedule": "cosine"}, {"max_iter": 0}])
def test_admm_config_validation(kw):
    with pytest.raises(ValueError):
        ADMMConfig(**kw)


# --- driver ------------------------------------------------------------------

def test_admm_identical_images_stops_at_first_check(rng):
    g = GridSpec((6, 5), (1.0, 1.0))
    img = ImageVolume(g, rng.random(g.m))
    b, rep, _ = admm_solve(VolumePair(img, img), None, ObjectiveParams(10.0))
    assert rep.termination == "converged" and len(rep.records) == 2
    np.testing.assert_array_equal(b, 0.0)


def test_admm_rejects_infeasible_start():
    pair, _ = _pair((6, 4))
    b0 = np.zeros(pair.grid.face_shape)
    b0[2] = 3.0
    with pytest.raises(ValueError):
        admm_solve(pair, (b0, b0, b0), ObjectiveParams(1.0))


def test_rho_change_keeps_unscaled_dual():
    pair, _ = _pair((16, 12))
    _, rep, state = admm_solve(pair, None, ObjectiveParams(50.0), ADMMConfig(max_iter=1, schedule="adaptive"))
    assert state.rho != rep.records[-1].rho
    assert dual_consistency(state, pair.grid, 50.0) <= 1e-8


@pytest.mark.parametrize("name", sorted(PHANTOMS))
def test_lagrangian_monotone_fixed_rho(name):
    pair, _ = _pair((32, 32), name=name)
    cfg = ADMMConfig(rho0=300.0, rho_min=300.0, schedule="fixed", max_iter=30, check_lagrangian=True)
    b, rep, _ = admm_solve(pair, None, ObjectiveParams(50.0), cfg)
    L = rep.column("lagrangian")
    assert np.all(np.diff(L) <= 1e-10 * (1 + np.abs(L[:-1])))
    assert max(rep.column("kkt_residual")[1:]) <= 1e-8
    assert max(rep.column("dual_consistency")[1:]) <= 1e-8
    assert np.max(np.abs(geo.diff_x1(b, pair.grid))) <= 1 + 1e-12


def test_lagrangian_check_raises_on_increase():
    # a tiny rho breaks the sufficient-decrease regime
    pair, _ = _pair((32, 32))
    cfg = ADMMConfig(rho0=1e-3, rho_min=1e-3, schedule="fixed", max_iter=30, check_lagrangian=True)
    with pytest.raises(ADMMError) as info:
        admm_solve(pair, None, ObjectiveParams(50.0), cfg)
    assert info.value.report is not None


def test_admm_recovers_field_and_agrees_with_gn():
    from epicorrect.gn_pcg import gauss_newton_solve

    pair, b_true = _pair((64, 64))
    params = ObjectiveParams(50.0, 10.0)
    cfg = ADMMConfig(rho0=300.0, rho_min=300.0, schedule="fixed", max_iter=80)
    b, rep, _ = admm_solve(pair, None, params, cfg)
    assert np.linalg.norm(b - b_true) / np.linalg.norm(b_true) <= 0.15
    cp, cm = correct_pair(pair, b)
    assert ssd(cp, cm) <= 0.1 * ssd(pair.plus, pair.minus)
    b_gn, _ = gauss_newton_solve(pair, np.zeros(pair.grid.face_shape), params)
    assert np.linalg.norm(b - b_gn) / np.linalg.norm(b_gn) <= 0.1


def test_lagrangian_matches_definition(rng):
    g = GridSpec((5, 4), (1.0, 2.0))
    pair = VolumePair(ImageVolume(g, rng.random(g.m)), ImageVolume(g, rng.random(g.m)))
    b, z, u = (0.1 * rng.standard_normal(g.face_shape) for _ in range(3))
    from epicorrect.objective import distance

    V, rho, alpha = g.cell_volume, 3.0, 2.0
    _, D1, D2, _ = dense_operators(g)
    vec = lambda a: a.ravel(order="F")
    expect = (distance(pair, b).value + 0.5 * alpha * V * np.sum((D1 @ vec(b)) ** 2)
              + 0.5 * alpha * V * np.sum((D2 @ vec(z)) ** 2)
              + rho * V * vec(u) @ vec(b - z) + 0.5 * rho * V * np.sum((b - z) ** 2))
    assert lagrangian(pair, ADMMState(b, z, u, rho), alpha) == pytest.approx(expect, rel=1e-12)
