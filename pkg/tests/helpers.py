"""Shared builders for the scalar tracking benchmark used across the tests."""

import numpy as np

import mpcappset as m

THETA1 = np.array([0.6, 0.9])


def scalar_model() -> m.ParametrizedModel:
    """One-state plant: A = [theta2], B = [1], C = [theta1]."""
    return m.ParametrizedModel.affine(
        1, 1, 1, 2,
        [m.AffineTerm(0, "C", 0, 0), m.AffineTerm(1, "A", 0, 0)],
        B0=[[1.0]],
    )


def square_reference(amplitude=1.0, period=40):
    return m.Reference((m.ChannelReference(kind="square", amplitude=amplitude, period=period),))


def constant_reference(value, n_y=1):
    return m.Reference(tuple(m.ChannelReference(kind="constant", value=float(v)) for v in np.atleast_1d(value)))


def scalar_mpc(reference=None, horizon=5) -> m.MpcConfig:
    if reference is None:
        reference = square_reference()
    return m.MpcConfig(
        Nu=horizon,
        Ny=horizon,
        Q=[[10.0]],
        R=[[1.0]],
        u_min=[-1.0],
        u_max=[1.0],
        y_min=[-2.0],
        y_max=[2.0],
        reference=reference,
    )


def scalar_setup(T=100, reference=None, theta=THETA1) -> m.ClosedLoopSetup:
    return m.ClosedLoopSetup(
        model=scalar_model(),
        config=scalar_mpc(reference=reference),
        theta_hat=np.asarray(theta, dtype=float),
        T=T,
        x0=np.zeros(1),
        u_prev0=np.zeros(1),
    )


def direct_mpc_cost(A, B, C, Q, R, N, x_now, u_prev, refs, u_seq):
    """Evaluate the tracking cost by direct summation over the prediction:
    sum_k |y(k+1) - r(k+1)|_Q^2 + sum_k |du(k)|_R^2 with du(1) = u(1) - u_prev.

    ``refs[k]`` is r(k+1) for k = 0..N; ``u_seq[k]`` is u(k+1) for k = 0..N-1.
    """
    x = np.asarray(x_now, dtype=float).copy()
    cost = 0.0
    xs = [x]
    for k in range(N):
        x = A @ x + B @ u_seq[k]
        xs.append(x)
    for k in range(N + 1):
        e = C @ xs[k] - refs[k]
        cost += float(e @ Q @ e)
    prev = np.asarray(u_prev, dtype=float)
    for k in range(N):
        du = u_seq[k] - prev
        cost += float(du @ R @ du)
        prev = u_seq[k]
    return cost


def stacked_X(A, B, N, x_now, u_seq):
    """Assemble the stacked decision vector [x(N+1)...x(1), u(N)...u(1)] for
    given inputs, propagating the dynamics from x_now."""
    xs = [np.asarray(x_now, dtype=float)]
    for k in range(N):
        xs.append(A @ xs[-1] + B @ u_seq[k])
    x_part = np.concatenate(xs[::-1])
    u_part = np.concatenate([u_seq[k] for k in range(N - 1, -1, -1)])
    return np.concatenate([x_part, u_part])


def enumerate_qp_minimum(qp):
    """Brute-force oracle: enumerate all active-row subsets of a small QP,
    solve each equality-constrained problem by a dense least-squares KKT
    solve, and return the best feasible candidate."""
    from itertools import combinations

    m_rows = qp.n_ineq
    best_X, best_J = None, np.inf
    for size in range(m_rows + 1):
        for subset in combinations(range(m_rows), size):
            A = np.vstack([qp.Ccal, qp.G_ineq[list(subset)]]) if subset else qp.Ccal
            b = np.concatenate([qp.Dcal, qp.h_ineq[list(subset)]]) if subset else qp.Dcal
            nX = qp.X_dim
            kkt = np.zeros((nX + A.shape[0], nX + A.shape[0]))
            kkt[:nX, :nX] = qp.P
            kkt[:nX, nX:] = A.T
            kkt[nX:, :nX] = A
            rhs = np.concatenate([2.0 * (qp.UtQ @ qp.Hcal), b])
            z, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            if np.linalg.norm(kkt @ z - rhs) > 1e-7 * (1.0 + np.linalg.norm(rhs)):
                continue
            X = z[:nX]
            if np.any(qp.G_ineq @ X - qp.h_ineq > 1e-9):
                continue
            J = qp.cost(X)
            if J < best_J - 0.0:
                best_J, best_X = J, X
    return best_X, best_J
