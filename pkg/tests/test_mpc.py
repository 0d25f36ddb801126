import numpy as np
import pytest

import mpcappset as m
from helpers import (
    THETA1,
    constant_reference,
    direct_mpc_cost,
    enumerate_qp_minimum,
    scalar_model,
    scalar_mpc,
    square_reference,
    stacked_X,
)


def small_qp(x_now=0.0, u_prev=0.0, r=0.5, theta=THETA1):
    """N = 1 scalar instance: X_dim = 3, six inequality rows."""
    model = scalar_model()
    cfg = scalar_mpc(reference=constant_reference(r), horizon=1)
    return m.condense(model, theta, cfg, [x_now], [u_prev], 1)


def test_condensed_dimensions_benchmark():
    qp = m.condense(scalar_model(), THETA1, scalar_mpc(), [0.0], [0.0], 1)
    assert qp.X_dim == 6 * 1 + 5 * 1 == 11
    assert qp.Upsilon.shape == (11, 11)
    assert qp.G_ineq.shape == (2 * 6 * 1 + 2 * 5 * 1, 11)
    assert qp.Ccal.shape == (6, 11)
    assert np.linalg.matrix_rank(qp.Ccal) == 6


def test_condensed_dimensions_single_step():
    qp = small_qp()
    assert qp.X_dim == 3
    assert qp.Upsilon.shape == (3, 3)
    assert qp.G_ineq.shape == (6, 3)


def test_condensed_cost_matches_direct_summation():
    model = scalar_model()
    cfg = scalar_mpc()
    rng = np.random.default_rng(3)
    A, B, C = model.eval_matrices(THETA1)
    N = cfg.Nu
    for _ in range(5):
        x_now = rng.uniform(-1, 1, 1)
        u_prev = rng.uniform(-1, 1, 1)
        t = int(rng.integers(1, 50))
        u_seq = [rng.uniform(-1, 1, 1) for _ in range(N)]
        qp = m.condense(model, THETA1, cfg, x_now, u_prev, t)
        X = stacked_X(A, B, N, x_now, u_seq)
        assert np.abs(qp.Ccal @ X - qp.Dcal).max() < 1e-12
        refs = [np.atleast_1d(cfg.reference(t + k)) for k in range(N + 1)]
        direct = direct_mpc_cost(A, B, C, cfg.Q, cfg.R, N, x_now, u_prev, refs, u_seq)
        assert abs(qp.cost(X) - direct) <= 1e-10 * (1.0 + direct)


def test_mismatched_horizons_rejected():
    with pytest.raises(ValueError):
        m.MpcConfig(Nu=3, Ny=5, Q=[[1.0]], R=[[1.0]], u_min=[-1], u_max=[1],
                    y_min=[-1], y_max=[1], reference=constant_reference(0.0))


def test_bad_bounds_rejected():
    with pytest.raises(ValueError):
        m.MpcConfig(Nu=2, Ny=2, Q=[[1.0]], R=[[1.0]], u_min=[1.0], u_max=[-1.0],
                    y_min=[-1], y_max=[1], reference=constant_reference(0.0))
    with pytest.raises(ValueError):
        m.MpcConfig(Nu=2, Ny=2, Q=[[1.0]], R=[[0.0]], u_min=[-1], u_max=[1],
                    y_min=[-1], y_max=[1], reference=constant_reference(0.0))


def test_unconstrained_step_has_empty_active_set():
    qp = small_qp(x_now=0.05, u_prev=0.0, r=0.05)
    sol = m.solve_inequality_qp(qp)
    assert sol.active.count == 0
    X_kkt, _ = m.solve_kkt(m.build_kkt(qp, None))
    assert np.abs(sol.X - X_kkt).max() <= 1e-10


def test_large_reference_saturates_input():
    qp = small_qp(r=10.0)
    sol = m.solve_inequality_qp(qp)
    upper_u_rows = range(2 * 2, 2 * 2 + 1)  # rows after both output blocks
    assert any(sol.active.flags[r] for r in upper_u_rows)
    assert abs(qp.u1(sol.X)[0] - 1.0) <= 1e-9


def test_solver_matches_enumeration_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        # x_now and theta1 ranges keep |y(1)| = |theta1 * x_now| < 2 (feasible).
        qp = small_qp(
            x_now=rng.uniform(-2.0, 2.0),
            u_prev=rng.uniform(-1, 1),
            r=rng.uniform(-3, 3),
            theta=np.array([rng.uniform(0.3, 0.9), rng.uniform(0.5, 1.0)]),
        )
        X_best, J_best = enumerate_qp_minimum(qp)
        sol = m.solve_inequality_qp(qp)
        assert np.abs(sol.X - X_best).max() <= 1e-8
        assert sol.objective <= J_best + 1e-8


def test_complementary_slackness_and_multiplier_signs():
    rng = np.random.default_rng(5)
    for _ in range(30):
        qp = small_qp(x_now=rng.uniform(-2, 2), u_prev=rng.uniform(-1, 1), r=rng.uniform(-4, 4))
        sol = m.solve_inequality_qp(qp)
        resid = np.abs(qp.G_ineq @ sol.X - qp.h_ineq)
        tol = 1e-8 * (1.0 + np.abs(qp.h_ineq))
        for i in range(qp.n_ineq):
            if sol.lam_ineq[i] != 0.0:
                assert resid[i] <= tol[i]
                assert sol.lam_ineq[i] >= -1e-8
            if not sol.active.flags[i]:
                assert sol.lam_ineq[i] == 0.0


def test_assemble_empty_active_set_returns_dynamics():
    qp = small_qp()
    A, b = m.assemble_active_system(qp, m.ActiveSet.from_flags(qp, np.zeros(6, dtype=bool)))
    assert np.array_equal(A, qp.Ccal) and np.array_equal(b, qp.Dcal)


def test_assemble_one_active_u_row():
    qp = small_qp()
    flags = np.zeros(6, dtype=bool)
    flags[4] = True  # upper bound on u(1)
    A, b = m.assemble_active_system(qp, m.ActiveSet.from_flags(qp, flags))
    assert A.shape == (qp.n_eq + 1, qp.X_dim)
    assert np.array_equal(A[-1], np.array([0.0, 0.0, 1.0]))
    assert b[-1] == 1.0  # u_max of the benchmark


def test_saturated_step_rhs_carries_umax():
    qp = small_qp(r=10.0)
    sol = m.solve_inequality_qp(qp)
    _, b = m.assemble_active_system(qp, sol.active)
    assert b[-1] == 1.0


def test_partner_rows_cannot_both_be_active():
    qp = small_qp()
    flags = np.zeros(6, dtype=bool)
    flags[4] = flags[5] = True  # u upper and lower simultaneously
    with pytest.raises(ValueError):
        m.ActiveSet.from_flags(qp, flags)


def test_kkt_scalar_closed_form():
    # Unconstrained single-step problem: u* = (Q c b (r2 - c a x) + R u_prev) / (Q c^2 b^2 + R)
    a, b, c, Q, R = 0.9, 1.0, 0.6, 10.0, 1.0
    x_now, u_prev, r = 0.4, 0.1, 0.8
    qp = small_qp(x_now=x_now, u_prev=u_prev, r=r)
    X, lam = m.solve_kkt(m.build_kkt(qp, None))
    u_star = (Q * c * b * (r - c * a * x_now) + R * u_prev) / (Q * c**2 * b**2 + R)
    assert abs(X[-1] - u_star) <= 1e-10
    assert abs(X[0] - (a * x_now + b * u_star)) <= 1e-10
    assert abs(X[1] - x_now) <= 1e-12


def test_kkt_residual_is_tiny():
    qp = m.condense(scalar_model(), THETA1, scalar_mpc(), [0.3], [0.1], 7)
    kkt = m.build_kkt(qp, m.solve_inequality_qp(qp).active)
    z = np.concatenate(m.solve_kkt(kkt))
    assert np.linalg.norm(kkt.Psi @ z - kkt.Lam) <= 1e-10 * (1.0 + np.linalg.norm(kkt.Lam))


def test_kkt_matches_inequality_solver_on_random_steps():
    model = scalar_model()
    cfg = scalar_mpc()
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        qp = m.condense(
            model, THETA1, cfg,
            [rng.uniform(-3, 3)], [rng.uniform(-1, 1)], int(rng.integers(1, 80)),
        )
        sol = m.solve_inequality_qp(qp)
        X_kkt, _ = m.solve_kkt(m.build_kkt(qp, sol.active))
        worst = max(worst, float(np.abs(X_kkt - sol.X).max()))
    assert worst <= 1e-8


def test_singular_kkt_reports_residual():
    # Inconsistent stacked system: duplicate the pinned-state row with a
    # different right-hand side.
    qp = small_qp()
    kkt = m.build_kkt(qp, None)
    bad = m.KktSystem(
        Psi=np.vstack([kkt.Psi, kkt.Psi[-1]]),
        Lam=np.concatenate([kkt.Lam, [kkt.Lam[-1] + 1.0]]),
        X_dim=kkt.X_dim,
        n_eq=kkt.n_eq,
        n_active=kkt.n_active,
    )
    with pytest.raises(m.SingularKktError) as err:
        m.solve_kkt(bad)
    assert err.value.residual > 0


def test_infeasible_qp_reports_violated_rows():
    # Initial state already far outside the output band: row y(1) <= y_max
    # conflicts with the pinned state.
    with pytest.raises(m.QpInfeasibleError) as err:
        m.solve_inequality_qp(small_qp(x_now=10.0))
    assert len(err.value.violated_rows) >= 1


def test_closed_loop_self_comparison_is_exactly_zero():
    setup_T = 40
    model = scalar_model()
    cfg = scalar_mpc()
    t1 = m.run_closed_loop(model, THETA1, THETA1, cfg, setup_T)
    t2 = m.run_closed_loop(model, THETA1, THETA1, cfg, setup_T)
    assert np.array_equal(t1.ys, t2.ys)
    assert float(np.mean(np.sum((t1.ys - t2.ys) ** 2, axis=1))) == 0.0


def test_closed_loop_outputs_respect_bounds():
    traj = m.run_closed_loop(scalar_model(), THETA1, THETA1, scalar_mpc(), 100)
    assert traj.ys.min() >= -2.0 - 1e-9
    assert traj.ys.max() <= 2.0 + 1e-9


def test_closed_loop_applies_first_input_only():
    traj = m.run_closed_loop(scalar_model(), THETA1, THETA1, scalar_mpc(), 10)
    for s in traj.steps:
        assert np.array_equal(s.u, s.qp.u1(s.z[: s.qp.X_dim]))
    # and the state recursion uses exactly that input
    A, B, _ = traj.plant_matrices
    for s0, s1 in zip(traj.steps, traj.steps[1:]):
        assert np.allclose(s1.x, A @ s0.x + B @ s0.u, atol=1e-14)


def test_closed_loop_tracks_constant_reference():
    # Matched model: the difference-penalized cost has no steady-state offset.
    cfg = scalar_mpc(reference=constant_reference(0.5))
    traj = m.run_closed_loop(scalar_model(), THETA1, THETA1, cfg, 200)
    assert abs(traj.ys[-1, 0] - 0.5) <= 1e-3


def test_integral_action_removes_output_gain_offset():
    # The deadbeat disturbance estimate from the measured state corrects
    # output-map mismatch exactly at steady state.
    cfg = scalar_mpc(reference=constant_reference(0.5))
    theta_ctrl = np.array([0.7, 0.9])  # wrong output gain, matched dynamics
    plain = m.run_closed_loop(scalar_model(), THETA1, theta_ctrl, cfg, 300)
    augmented = m.run_closed_loop(
        scalar_model(), THETA1, theta_ctrl, cfg, 300, integral_action=True
    )
    assert abs(plain.ys[-1, 0] - 0.5) > 1e-2
    assert abs(augmented.ys[-1, 0] - 0.5) <= 1e-3


def test_integral_action_stable_under_dynamics_mismatch():
    cfg = scalar_mpc(reference=constant_reference(0.5))
    theta_ctrl = np.array([0.66, 0.85])
    augmented = m.run_closed_loop(
        scalar_model(), THETA1, theta_ctrl, cfg, 300, integral_action=True
    )
    # settles (no drift or limit cycle) even though the dynamics are wrong
    tail = augmented.ys[-20:, 0]
    assert np.ptp(tail) <= 1e-6
    assert abs(tail[-1] - 0.5) <= 0.1


def test_closed_loop_error_tags_failing_step():
    cfg = scalar_mpc(reference=constant_reference(0.5))
    with pytest.raises(m.ClosedLoopError) as err:
        m.run_closed_loop(scalar_model(), THETA1, THETA1, cfg, 5, x0=[10.0])
    assert err.value.step == 1
    assert isinstance(err.value.cause, m.QpInfeasibleError)


def test_closed_loop_noise_seeded_and_reproducible():
    noise = m.NoiseSpec(variance=1e-3, seed=99)
    t1 = m.run_closed_loop(scalar_model(), THETA1, THETA1, scalar_mpc(), 20, noise=noise)
    t2 = m.run_closed_loop(scalar_model(), THETA1, THETA1, scalar_mpc(), 20, noise=noise)
    assert np.array_equal(t1.ys, t2.ys)
    assert t1.noisy


def test_warm_start_reaches_same_solution():
    model = scalar_model()
    cfg = scalar_mpc()
    qp1 = m.condense(model, THETA1, cfg, [0.2], [0.0], 1)
    sol1 = m.solve_inequality_qp(qp1)
    qp2 = m.condense(model, THETA1, cfg, [0.25], [sol1.X[-1]], 2)
    cold = m.solve_inequality_qp(qp2)
    warm = m.solve_inequality_qp(qp2, warm_flags=sol1.active.flags)
    assert np.abs(cold.X - warm.X).max() <= 1e-8
    assert warm.iterations <= cold.iterations


def test_trajectory_csv_schema(tmp_path):
    traj = m.run_closed_loop(scalar_model(), THETA1, THETA1, scalar_mpc(), 12)
    path = tmp_path / "trajectory.csv"
    m.trajectory_to_csv(traj, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,x1,u1,y1,active_mask,qp_iterations"
    assert len(lines) == 1 + 12
    first = lines[1].split(",")
    assert first[0] == "1"
    int(first[4], 16)  # hex mask parses
