"""Perturbation analysis of the closed loop around the nominal parameters.

With the active set frozen, each MPC step satisfies Psi(theta) z = Lam(theta)
with z = [X; lam].  Implicit differentiation gives

    Psi dz_i = dLam_i - dPsi_i z,

where dPsi_i / dLam_i collect the derivatives of Ups, Hcal, and the stacked
constraint system.  Chaining the extracted du(t) through the plant recursion
(evaluated at the nominal parameters, which are held fixed) yields dy(t) for
every step of one nominal simulation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ParametrizedModel, as_theta
from .mpc import (
    ActiveSet,
    CondensedQp,
    KktSystem,
    SingularKktError,
    Trajectory,
    _build_skeleton,
    _step_qp,
    build_kkt,
    solve_kkt,
)

# Relative residual above which a directional derivative system is treated as
# inconsistent (active-set degeneracy).
DERIVATIVE_RTOL = 1e-8


@dataclass
class QpDerivatives:
    """Derivatives of the condensed QP data w.r.t. one parameter.

    The weight matrix Qcal is parameter independent, so its derivative is
    identically zero and not carried.
    """

    dUpsilon: np.ndarray
    dHcal: np.ndarray
    dAcal: np.ndarray  # derivative of the stacked [Ccal; Xi_a]
    dBcal: np.ndarray  # derivative of the stacked [Dcal; rho]


def qp_data_derivatives(
    model: ParametrizedModel,
    theta,
    qp: CondensedQp,
    active: ActiveSet,
    dx_now,
    du_prev,
    i: int,
) -> QpDerivatives:
    """Differentiate Ups, Hcal and the active-system stack w.r.t. theta[i].

    ``dx_now`` and ``du_prev`` are the derivatives of the measured state and
    of the previously applied input, available from earlier steps.
    """
    theta = as_theta(theta, model.n_params)
    dA, dB, dC = model.matrix_jacobian(theta, i)
    N, n_x, n_u, n_y = qp.N, qp.n_x, qp.n_u, qp.n_y
    dx_now = np.asarray(dx_now, dtype=float).reshape(n_x)
    du_prev = np.asarray(du_prev, dtype=float).reshape(n_u)

    dCstack = np.kron(np.eye(N + 1), dC)
    dUps = np.zeros_like(qp.Upsilon)
    dUps[: (N + 1) * n_y, : (N + 1) * n_x] = dCstack

    dHcal = np.zeros_like(qp.Hcal)
    dHcal[-n_u:] = du_prev

    # Dynamics block: the -A and -B slots differentiate, plus the pinned state.
    dCcal = np.zeros_like(qp.Ccal)
    for k in range(N):
        rows = slice(k * n_x, (k + 1) * n_x)
        dCcal[rows, (k + 1) * n_x : (k + 2) * n_x] = -dA
        dCcal[rows, (N + 1) * n_x + k * n_u : (N + 1) * n_x + (k + 1) * n_u] = -dB
    dDcal = np.zeros_like(qp.Dcal)
    dDcal[-n_x:] = dx_now

    m_y = (N + 1) * n_y
    dG = np.zeros_like(qp.G_ineq)
    dG[:m_y, : (N + 1) * n_x] = dCstack
    dG[m_y : 2 * m_y, : (N + 1) * n_x] = -dCstack
    dh = np.zeros_like(qp.h_ineq)
    if qp.d_hat is not None:
        # Deadbeat estimate d_hat = y_meas - C(theta) x(t): its derivative at
        # the nominal parameters is -dC x(t), entering the shifted targets
        # r - d_hat and the shifted output bounds.
        dd_hat = -(dC @ qp.x_now)
        shift = np.tile(-dd_hat, N + 1)
        dHcal[: (N + 1) * n_y] = shift
        dh[:m_y] = shift
        dh[m_y : 2 * m_y] = -shift

    flags = active.flags
    dAcal = np.vstack([dCcal, dG[flags]])
    dBcal = np.concatenate([dDcal, dh[flags]])
    return QpDerivatives(dUpsilon=dUps, dHcal=dHcal, dAcal=dAcal, dBcal=dBcal)


def build_kkt_derivatives(qp: CondensedQp, derivs: QpDerivatives) -> tuple[np.ndarray, np.ndarray]:
    """Assemble dPsi and dLam from the QP data derivatives."""
    nX = qp.X_dim
    m = derivs.dAcal.shape[0]
    T1 = derivs.dUpsilon.T @ (qp.Qcal @ qp.Upsilon)
    dP = 2.0 * (T1 + T1.T)
    dPsi = np.zeros((nX + m, nX + m))
    dPsi[:nX, :nX] = dP
    dPsi[:nX, nX:] = derivs.dAcal.T
    dPsi[nX:, :nX] = derivs.dAcal
    dLam = np.concatenate(
        [2.0 * (derivs.dUpsilon.T @ (qp.Qcal @ qp.Hcal) + qp.UtQ @ derivs.dHcal), derivs.dBcal]
    )
    return dPsi, dLam


def kkt_sensitivity(
    kkt: KktSystem,
    z: np.ndarray,
    dPsi: np.ndarray,
    dLam: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Solve Psi dz = dLam - dPsi z for one parameter direction.

    Returns (dX, dlam, relative residual); a large residual signals an
    inconsistent derivative system, i.e. active-set degeneracy.
    """
    rhs = dLam - dPsi @ z
    dz, *_ = np.linalg.lstsq(kkt.Psi, rhs, rcond=None)
    residual = float(np.linalg.norm(kkt.Psi @ dz - rhs))
    rel = residual / (1.0 + float(np.linalg.norm(rhs)))
    return dz[: kkt.X_dim], dz[kkt.X_dim :], rel


def _second_order_data(
    model: ParametrizedModel,
    theta: np.ndarray,
    qp: CondensedQp,
    active: ActiveSet,
    dx_i: np.ndarray,
    dx_j: np.ndarray,
    d2x_now: np.ndarray,
    d2u_prev: np.ndarray,
    i: int,
    j: int,
) -> QpDerivatives:
    """Second derivatives of the QP data w.r.t. (theta[i], theta[j])."""
    ddA, ddB, ddC = model.matrix_hessian(theta, i, j)
    _, _, dC_i = model.matrix_jacobian(theta, i)
    _, _, dC_j = model.matrix_jacobian(theta, j)
    N, n_x, n_u, n_y = qp.N, qp.n_x, qp.n_u, qp.n_y

    ddCstack = np.kron(np.eye(N + 1), ddC)
    d2Ups = np.zeros_like(qp.Upsilon)
    d2Ups[: (N + 1) * n_y, : (N + 1) * n_x] = ddCstack

    d2Hcal = np.zeros_like(qp.Hcal)
    d2Hcal[-n_u:] = np.asarray(d2u_prev, dtype=float).reshape(n_u)

    d2Ccal = np.zeros_like(qp.Ccal)
    for k in range(N):
        rows = slice(k * n_x, (k + 1) * n_x)
        d2Ccal[rows, (k + 1) * n_x : (k + 2) * n_x] = -ddA
        d2Ccal[rows, (N + 1) * n_x + k * n_u : (N + 1) * n_x + (k + 1) * n_u] = -ddB
    d2Dcal = np.zeros_like(qp.Dcal)
    d2Dcal[-n_x:] = np.asarray(d2x_now, dtype=float).reshape(n_x)

    m_y = (N + 1) * n_y
    d2G = np.zeros_like(qp.G_ineq)
    d2G[:m_y, : (N + 1) * n_x] = ddCstack
    d2G[m_y : 2 * m_y, : (N + 1) * n_x] = -ddCstack
    d2h = np.zeros_like(qp.h_ineq)
    if qp.d_hat is not None:
        dd2_hat = -(dC_i @ dx_j) - (dC_j @ dx_i) - (ddC @ qp.x_now)
        shift = np.tile(-dd2_hat, N + 1)
        d2Hcal[: (N + 1) * n_y] = shift
        d2h[:m_y] = shift
        d2h[m_y : 2 * m_y] = -shift

    flags = active.flags
    return QpDerivatives(
        dUpsilon=d2Ups,
        dHcal=d2Hcal,
        dAcal=np.vstack([d2Ccal, d2G[flags]]),
        dBcal=np.concatenate([d2Dcal, d2h[flags]]),
    )


def _build_kkt_second_derivatives(
    qp: CondensedQp,
    first_i: QpDerivatives,
    first_j: QpDerivatives,
    second: QpDerivatives,
) -> tuple[np.ndarray, np.ndarray]:
    nX = qp.X_dim
    m = second.dAcal.shape[0]
    QU = qp.Qcal @ qp.Upsilon
    S = second.dUpsilon.T @ QU
    M = first_i.dUpsilon.T @ (qp.Qcal @ first_j.dUpsilon)
    d2P = 2.0 * (S + S.T + M + M.T)
    d2Psi = np.zeros((nX + m, nX + m))
    d2Psi[:nX, :nX] = d2P
    d2Psi[:nX, nX:] = second.dAcal.T
    d2Psi[nX:, :nX] = second.dAcal
    d2Lam = np.concatenate(
        [
            2.0
            * (
                second.dUpsilon.T @ (qp.Qcal @ qp.Hcal)
                + first_i.dUpsilon.T @ (qp.Qcal @ first_j.dHcal)
                + first_j.dUpsilon.T @ (qp.Qcal @ first_i.dHcal)
                + qp.UtQ @ second.dHcal
            ),
            second.dBcal,
        ]
    )
    return d2Psi, d2Lam


@dataclass
class StepSensitivity:
    """Directional derivatives of one step's stacked solution."""

    t: int
    dX: np.ndarray  # (X_dim, n)
    dLambda: np.ndarray  # (m_lam, n)
    d2X: np.ndarray | None = None  # (X_dim, n, n)


@dataclass
class SensitivityBundle:
    """Per-step Jacobians of the closed-loop signals w.r.t. theta.

    dy/du/dx have shape (T, dim, n).  d2y, when second order is requested,
    has shape (T, n_y, n, n).  The initial state does not depend on theta,
    so dx at t=1 is zero.
    """

    dy: np.ndarray
    du: np.ndarray
    dx: np.ndarray
    ys: np.ndarray
    degenerate_steps: list[int]
    warnings: list[str]
    steps: list[StepSensitivity]
    d2y: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.dy.shape[0]


def propagate_closed_loop(
    trajectory: Trajectory,
    model: ParametrizedModel,
    theta_hat,
    order: int = 1,
) -> SensitivityBundle:
    """Differentiate the whole closed loop from the stored per-step KKT data.

    The plant matrices are evaluated at theta_hat and NOT differentiated:
    both closed loops in the application cost share the same plant, only the
    controller model is perturbed.  Requires a nominal trajectory, i.e. one
    simulated with theta_ctrl = theta_plant = theta_hat.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    theta = as_theta(theta_hat, model.n_params)
    if not (np.allclose(trajectory.theta_ctrl, theta) and np.allclose(trajectory.theta_plant, theta)):
        raise ValueError("trajectory must be the nominal run at theta_hat")
    if order == 2 and model._hess is None:
        raise ValueError("order=2 requires model second derivatives")
    A, B, C = model.eval_matrices(theta)
    n = model.n_params
    n_x, n_u, n_y = model.n_x, model.n_u, model.n_y

    dx = np.zeros((n_x, n))
    du_prev = np.zeros((n_u, n))
    if order == 2:
        d2x = np.zeros((n_x, n, n))
        d2u_prev = np.zeros((n_u, n, n))

    dy_all, du_all, dx_all, d2y_all = [], [], [], []
    step_sens: list[StepSensitivity] = []
    degenerate: list[int] = []
    warnings: list[str] = []

    for rec in trajectory.steps:
        qp = rec.qp
        nX = qp.X_dim
        flagged = rec.degenerate
        derivs = [
            qp_data_derivatives(model, theta, qp, rec.active, dx[:, i], du_prev[:, i], i)
            for i in range(n)
        ]
        mats = [build_kkt_derivatives(qp, d) for d in derivs]
        rhs = np.column_stack([dLam - dPsi @ rec.z for dPsi, dLam in mats])
        dz, *_ = np.linalg.lstsq(rec.kkt.Psi, rhs, rcond=None)
        res = np.linalg.norm(rec.kkt.Psi @ dz - rhs, axis=0)
        scale = 1.0 + np.linalg.norm(rhs, axis=0)
        bad = res / scale > DERIVATIVE_RTOL
        if bad.any():
            flagged = True
            warnings.append(
                f"t={rec.t}: inconsistent derivative system for directions "
                f"{np.flatnonzero(bad).tolist()} (max rel residual {float((res / scale).max()):.2e})"
            )
        dX = dz[:nX]
        dlam = dz[nX:]
        du = dX[nX - n_u :]

        d2X = None
        if order == 2:
            rhs2 = np.empty((rec.kkt.Psi.shape[0], n * n))
            for i in range(n):
                for j in range(n):
                    second = _second_order_data(
                        model, theta, qp, rec.active,
                        dx[:, i], dx[:, j], d2x[:, i, j], d2u_prev[:, i, j], i, j,
                    )
                    d2Psi, d2Lam = _build_kkt_second_derivatives(qp, derivs[i], derivs[j], second)
                    rhs2[:, i * n + j] = (
                        d2Lam
                        - d2Psi @ rec.z
                        - mats[i][0] @ dz[:, j]
                        - mats[j][0] @ dz[:, i]
                    )
            d2z, *_ = np.linalg.lstsq(rec.kkt.Psi, rhs2, rcond=None)
            d2X = d2z[:nX].reshape(nX, n, n)
            d2u = d2X[nX - n_u :]

        dy_all.append(C @ dx)
        du_all.append(du.copy())
        dx_all.append(dx.copy())
        step_sens.append(StepSensitivity(t=rec.t, dX=dX, dLambda=dlam, d2X=d2X))
        if flagged:
            degenerate.append(rec.t)
        if order == 2:
            d2y_all.append(np.einsum("yx,xij->yij", C, d2x))
            d2x = np.einsum("ab,bij->aij", A, d2x) + np.einsum("ab,bij->aij", B, d2u)
            d2u_prev = d2u
        dx = A @ dx + B @ du
        du_prev = du

    return SensitivityBundle(
        dy=np.array(dy_all),
        du=np.array(du_all),
        dx=np.array(dx_all),
        ys=trajectory.ys,
        degenerate_steps=degenerate,
        warnings=warnings,
        steps=step_sens,
        d2y=np.array(d2y_all) if order == 2 else None,
    )


def predict_outputs(bundle: SensitivityBundle, delta, order: int | None = None) -> np.ndarray:
    """Taylor reconstruction of the outputs at theta_hat + delta.

    With delta = 0 this returns the nominal trajectory exactly.
    """
    delta = np.asarray(delta, dtype=float).reshape(bundle.dy.shape[2])
    if order is None:
        order = 2 if bundle.d2y is not None else 1
    ys = bundle.ys + np.einsum("tyi,i->ty", bundle.dy, delta)
    if order >= 2:
        if bundle.d2y is None:
            raise ValueError("bundle has no second-order terms")
        ys = ys + 0.5 * np.einsum("tyij,i,j->ty", bundle.d2y, delta, delta)
    return ys


def simulate_frozen_active_set(trajectory: Trajectory, model: ParametrizedModel, theta) -> tuple[np.ndarray, np.ndarray]:
    """Re-run the closed loop at perturbed controller parameters with each
    step's active set frozen to the nominal one (finite-difference oracle).

    The plant matrices stay those of the nominal trajectory.  Returns
    (outputs, inputs).
    """
    theta = as_theta(theta, model.n_params)
    Ap, Bp, Cp = trajectory.plant_matrices
    skel = _build_skeleton(model, theta, trajectory.config)
    first = trajectory.steps[0]
    x = first.x.copy()
    u_prev = first.u_prev.copy()
    ys, us = [], []
    for rec in trajectory.steps:
        y = Cp @ x
        d_hat = (y - skel.C @ x) if trajectory.integral_action else None
        qp = _step_qp(skel, x, u_prev, rec.t, d_hat)
        active = ActiveSet.from_flags(qp, rec.active.flags)
        X, _ = solve_kkt(build_kkt(qp, active))
        u = qp.u1(X)
        ys.append(y)
        us.append(u)
        x = Ap @ x + Bp @ u
        u_prev = u
    return np.array(ys), np.array(us)


def sensitivity_diagnostics_csv(bundle: SensitivityBundle, path) -> None:
    """Per-step norms of dX/dtheta_i plus the degeneracy flag."""
    n = bundle.dy.shape[2]
    flagged = set(bundle.degenerate_steps)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"norm_dX_{i + 1}" for i in range(n)] + ["degenerate"])
        for s in bundle.steps:
            norms = np.linalg.norm(s.dX, axis=0)
            writer.writerow([s.t] + [repr(float(v)) for v in norms] + [int(s.t in flagged)])
