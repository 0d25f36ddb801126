"""Condensed MPC quadratic program, active-set solution, and closed-loop runs.

At every time step the tracking MPC problem is condensed over the stacked
decision vector

    X = [x(N+1)', ..., x(1)', u(N)', ..., u(1)']'

into  min (Ups X - Hcal)' Qcal (Ups X - Hcal)  subject to the dynamics
equalities Ccal X = Dcal and the stacked box inequalities G X <= h.  The
inequality problem is solved with a primal active-set method; freezing the
optimal active set turns the problem into an equality-constrained QP whose
KKT system  Psi [X; lam] = Lam  is solved by a minimum-norm least-squares
factorization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog

from .model import MatrixTriple, NoiseSpec, ParametrizedModel, as_theta


class QpInfeasibleError(RuntimeError):
    """No point satisfies the equality system together with G X <= h."""

    def __init__(self, violated_rows, message: str | None = None) -> None:
        self.violated_rows = [int(i) for i in violated_rows]
        super().__init__(message or f"QP infeasible; violated inequality rows {self.violated_rows}")


class QpConvergenceError(RuntimeError):
    """Active-set iteration cap exceeded."""

    def __init__(self, iterations: int) -> None:
        self.iterations = int(iterations)
        super().__init__(f"active-set method did not converge within {self.iterations} iterations")


class SingularKktError(RuntimeError):
    """Stacked KKT system is rank-deficient with an inconsistent right side."""

    def __init__(self, residual: float) -> None:
        self.residual = float(residual)
        super().__init__(f"KKT system inconsistent beyond tolerance (residual {self.residual:.3e})")


class ClosedLoopError(RuntimeError):
    """Solver failure inside a receding-horizon run, tagged with the step."""

    def __init__(self, step: int, cause: Exception) -> None:
        self.step = int(step)
        self.cause = cause
        super().__init__(f"closed-loop failure at t={step}: {cause}")


@dataclass(frozen=True)
class ChannelReference:
    """Reference signal for one output channel; t is 1-based."""

    kind: str = "constant"  # "constant" | "square"
    value: float = 0.0      # constant level / square-wave offset
    amplitude: float = 1.0
    period: int = 40
    phase: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "square"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind == "square" and self.period < 2:
            raise ValueError("square-wave period must be >= 2")

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.value
        half = self.period // 2
        up = ((t - 1 + self.phase) // half) % 2 == 0
        return self.value + (self.amplitude if up else -self.amplitude)


@dataclass(frozen=True)
class Reference:
    """Vector reference: one ChannelReference per output channel."""

    channels: tuple[ChannelReference, ...]

    def __call__(self, t: int) -> np.ndarray:
        return np.array([ch(t) for ch in self.channels])


@dataclass
class MpcConfig:
    """Weights, horizons, bounds and reference of the tracking MPC problem.

    The condensed formulation used here requires Nu == Ny.
    """

    Nu: int
    Ny: int
    Q: np.ndarray
    R: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    reference: Callable[[int], np.ndarray]

    def __post_init__(self) -> None:
        if self.Nu < 1 or self.Ny < 1:
            raise ValueError("horizons must be >= 1")
        if self.Nu != self.Ny:
            raise ValueError("this formulation requires Nu == Ny")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, W in (("Q", self.Q), ("R", self.R)):
            if W.shape[0] != W.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.linalg.norm(W - W.T, ord=np.inf) > 1e-12 * (1 + np.abs(W).max()):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 * (1 + np.abs(self.Q).max()):
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        self.u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        self.u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        self.y_min = np.atleast_1d(np.asarray(self.y_min, dtype=float))
        self.y_max = np.atleast_1d(np.asarray(self.y_max, dtype=float))
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be componentwise < u_max")
        if not np.all(self.y_min < self.y_max):
            raise ValueError("y_min must be componentwise < y_max")
        if self.u_min.size != self.R.shape[0] or self.u_max.size != self.R.shape[0]:
            raise ValueError("input bounds must match the size of R")
        if self.y_min.size != self.Q.shape[0] or self.y_max.size != self.Q.shape[0]:
            raise ValueError("output bounds must match the size of Q")


@dataclass
class CondensedQp:
    """One time step of the MPC problem in condensed form.

    Rows of G_ineq are ordered: upper output bounds, lower output bounds,
    upper input bounds, lower input bounds; within each block, time runs
    from the end of the horizon down to the current step (same ordering as X).
    """

    X_dim: int
    Upsilon: np.ndarray
    Qcal: np.ndarray
    Hcal: np.ndarray
    Ccal: np.ndarray
    Dcal: np.ndarray
    G_ineq: np.ndarray
    h_ineq: np.ndarray
    P: np.ndarray          # 2 Ups' Qcal Ups (objective Hessian)
    UtQ: np.ndarray        # Ups' Qcal
    row_norms: np.ndarray  # Euclidean norms of G_ineq rows
    A_mat: np.ndarray      # controller-model A(theta), for cheap feasible candidates
    B_mat: np.ndarray
    n_x: int
    n_u: int
    n_y: int
    N: int
    t: int
    x_now: np.ndarray
    u_prev: np.ndarray
    d_hat: np.ndarray | None = None

    @property
    def n_eq(self) -> int:
        return self.Ccal.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G_ineq.shape[0]

    def cost(self, X: np.ndarray) -> float:
        r = self.Upsilon @ X - self.Hcal
        return float(r @ self.Qcal @ r)

    def u1(self, X: np.ndarray) -> np.ndarray:
        """First input u(1) of the stacked solution (the one applied to the plant)."""
        return np.asarray(X[self.X_dim - self.n_u:], dtype=float)


@dataclass
class _QpSkeleton:
    """Step-independent parts of the condensed QP for one (model, theta, config)."""

    model: ParametrizedModel
    config: MpcConfig
    theta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    N: int
    Upsilon: np.ndarray
    Qcal: np.ndarray
    P: np.ndarray
    UtQ: np.ndarray
    Ccal: np.ndarray
    G: np.ndarray
    h_base: np.ndarray
    row_norms: np.ndarray


def _build_skeleton(model: ParametrizedModel, theta, config: MpcConfig) -> _QpSkeleton:
    theta = as_theta(theta, model.n_params)
    A, B, C = model.eval_matrices(theta)
    n_x, n_u, n_y = model.n_x, model.n_u, model.n_y
    if config.Q.shape[0] != n_y or config.R.shape[0] != n_u:
        raise ValueError("MPC weight dimensions do not match the model")
    N = config.Nu
    X_dim = (N + 1) * n_x + N * n_u

    # Ups: outputs C x(k) on the state part, input differences on the input part.
    Ups = np.zeros(((N + 1) * n_y + N * n_u, X_dim))
    Ups[: (N + 1) * n_y, : (N + 1) * n_x] = np.kron(np.eye(N + 1), C)
    delta = np.kron(np.eye(N) - np.eye(N, k=1), np.eye(n_u))
    Ups[(N + 1) * n_y :, (N + 1) * n_x :] = delta

    Qcal = np.zeros((Ups.shape[0], Ups.shape[0]))
    Qcal[: (N + 1) * n_y, : (N + 1) * n_y] = np.kron(np.eye(N + 1), config.Q)
    Qcal[(N + 1) * n_y :, (N + 1) * n_y :] = np.kron(np.eye(N), config.R)

    # Dynamics: x(k+1) - A x(k) - B u(k) = 0 for the N transitions, then x(1) pinned.
    Ccal = np.zeros(((N + 1) * n_x, X_dim))
    for k in range(N):
        rows = slice(k * n_x, (k + 1) * n_x)
        Ccal[rows, k * n_x : (k + 1) * n_x] = np.eye(n_x)
        Ccal[rows, (k + 1) * n_x : (k + 2) * n_x] = -A
        Ccal[rows, (N + 1) * n_x + k * n_u : (N + 1) * n_x + (k + 1) * n_u] = -B
    Ccal[N * n_x : (N + 1) * n_x, N * n_x : (N + 1) * n_x] = np.eye(n_x)

    Cstack = Ups[: (N + 1) * n_y, : (N + 1) * n_x]
    m_y = (N + 1) * n_y
    m_u = N * n_u
    G = np.zeros((2 * m_y + 2 * m_u, X_dim))
    G[:m_y, : (N + 1) * n_x] = Cstack
    G[m_y : 2 * m_y, : (N + 1) * n_x] = -Cstack
    G[2 * m_y : 2 * m_y + m_u, (N + 1) * n_x :] = np.eye(m_u)
    G[2 * m_y + m_u :, (N + 1) * n_x :] = -np.eye(m_u)
    h = np.concatenate(
        [
            np.tile(config.y_max, N + 1),
            np.tile(-config.y_min, N + 1),
            np.tile(config.u_max, N),
            np.tile(-config.u_min, N),
        ]
    )
    UtQ = Ups.T @ Qcal
    P = 2.0 * (UtQ @ Ups)
    P = 0.5 * (P + P.T)
    row_norms = np.linalg.norm(G, axis=1)
    return _QpSkeleton(model, config, theta, A, B, C, N, Ups, Qcal, P, UtQ, Ccal, G, h, row_norms)


def _step_qp(skel: _QpSkeleton, x_now, u_prev, t: int, d_hat=None) -> CondensedQp:
    n_x, n_u, n_y = skel.model.n_x, skel.model.n_u, skel.model.n_y
    N = skel.N
    x_now = np.asarray(x_now, dtype=float).reshape(n_x)
    u_prev = np.asarray(u_prev, dtype=float).reshape(n_u)
    # r(k) inside the QP corresponds to absolute time t + k - 1; the stack runs
    # r(N+1), ..., r(1).
    r_stack = np.concatenate([np.asarray(skel.config.reference(t + k), dtype=float).reshape(n_y) for k in range(N, -1, -1)])
    h = skel.h_base
    if d_hat is not None:
        d_hat = np.asarray(d_hat, dtype=float).reshape(n_y)
        shift = np.tile(d_hat, N + 1)
        r_stack = r_stack - shift
        m_y = (N + 1) * n_y
        h = h.copy()
        h[:m_y] -= shift
        h[m_y : 2 * m_y] += shift
    Hcal = np.concatenate([r_stack, np.zeros((N - 1) * n_u), u_prev])
    Dcal = np.concatenate([np.zeros(N * n_x), x_now])
    return CondensedQp(
        X_dim=(N + 1) * n_x + N * n_u,
        Upsilon=skel.Upsilon,
        Qcal=skel.Qcal,
        Hcal=Hcal,
        Ccal=skel.Ccal,
        Dcal=Dcal,
        G_ineq=skel.G,
        h_ineq=h,
        P=skel.P,
        UtQ=skel.UtQ,
        row_norms=skel.row_norms,
        A_mat=skel.A,
        B_mat=skel.B,
        n_x=n_x,
        n_u=n_u,
        n_y=n_y,
        N=N,
        t=int(t),
        x_now=x_now,
        u_prev=u_prev,
        d_hat=None if d_hat is None else d_hat.copy(),
    )


def condense(
    model: ParametrizedModel,
    theta,
    config: MpcConfig,
    x_now,
    u_prev,
    t: int,
    d_hat=None,
) -> CondensedQp:
    """Build the condensed QP for one MPC step at time t.

    ``d_hat`` is an optional constant output-disturbance estimate (integral
    action); it shifts the tracking targets and the output bounds.
    """
    return _step_qp(_build_skeleton(model, theta, config), x_now, u_prev, t, d_hat)


def eps_active(h: np.ndarray) -> np.ndarray:
    """Rowwise activity tolerance for |G_i X - h_i|."""
    return 1e-8 * (1.0 + np.abs(h))


@dataclass
class ActiveSet:
    """Binary activity flags over the inequality rows plus the selected rows."""

    flags: np.ndarray
    Xi_a: np.ndarray
    rho: np.ndarray

    @classmethod
    def from_flags(cls, qp: CondensedQp, flags) -> "ActiveSet":
        flags = np.asarray(flags, dtype=bool)
        if flags.shape != (qp.n_ineq,):
            raise ValueError(f"flag vector has shape {flags.shape}, expected ({qp.n_ineq},)")
        _check_partner_conflicts(flags, qp.N, qp.n_y, qp.n_u)
        return cls(flags=flags.copy(), Xi_a=qp.G_ineq[flags].copy(), rho=qp.h_ineq[flags].copy())

    @classmethod
    def from_solution(cls, qp: CondensedQp, X) -> "ActiveSet":
        resid = np.abs(qp.G_ineq @ np.asarray(X, dtype=float) - qp.h_ineq)
        return cls.from_flags(qp, resid <= eps_active(qp.h_ineq))

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def mask(self) -> int:
        """Bitmask of active rows (row i -> bit i)."""
        return int(sum(1 << int(i) for i in self.indices))


def _check_partner_conflicts(flags: np.ndarray, N: int, n_y: int, n_u: int) -> None:
    m_y = (N + 1) * n_y
    m_u = N * n_u
    if np.any(flags[:m_y] & flags[m_y : 2 * m_y]):
        raise ValueError("upper and lower output bound active simultaneously")
    if np.any(flags[2 * m_y : 2 * m_y + m_u] & flags[2 * m_y + m_u :]):
        raise ValueError("upper and lower input bound active simultaneously")


def assemble_active_system(qp: CondensedQp, active: ActiveSet | None) -> tuple[np.ndarray, np.ndarray]:
    """Stack the dynamics equalities with the active inequality rows:
    A = [Ccal; Xi_a], b = [Dcal; rho]."""
    if active is None or active.count == 0:
        return qp.Ccal, qp.Dcal
    return np.vstack([qp.Ccal, active.Xi_a]), np.concatenate([qp.Dcal, active.rho])


@dataclass
class KktSystem:
    """Stacked stationarity/feasibility system Psi [X; lam] = Lam."""

    Psi: np.ndarray
    Lam: np.ndarray
    X_dim: int
    n_eq: int
    n_active: int


def build_kkt(qp: CondensedQp, active: ActiveSet | None = None) -> KktSystem:
    A, b = assemble_active_system(qp, active)
    m = A.shape[0]
    nX = qp.X_dim
    Psi = np.zeros((nX + m, nX + m))
    Psi[:nX, :nX] = qp.P
    Psi[:nX, nX:] = A.T
    Psi[nX:, :nX] = A
    Lam = np.concatenate([2.0 * (qp.UtQ @ qp.Hcal), b])
    return KktSystem(Psi=Psi, Lam=Lam, X_dim=nX, n_eq=qp.n_eq, n_active=m - qp.n_eq)


def solve_kkt(kkt: KktSystem, rtol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-norm least-squares solution of the stacked KKT system.

    Raises SingularKktError when the system is inconsistent beyond
    rtol * (1 + ||Lam||).
    """
    z, *_ = np.linalg.lstsq(kkt.Psi, kkt.Lam, rcond=None)
    residual = float(np.linalg.norm(kkt.Psi @ z - kkt.Lam))
    if residual > rtol * (1.0 + float(np.linalg.norm(kkt.Lam))):
        raise SingularKktError(residual)
    return z[: kkt.X_dim], z[kkt.X_dim :]


@dataclass
class QpSolution:
    X: np.ndarray
    active: ActiveSet
    lam_ineq: np.ndarray  # one multiplier per inequality row (0 off the working set)
    nu: np.ndarray        # multipliers of the dynamics equalities
    iterations: int
    objective: float
    working: list[int]    # final working set (subset of the flagged rows)


def _equality_solve(qp: CondensedQp, working: list[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the QP with the working-set rows imposed as equalities.

    Returns (X, nu, lam_w) where lam_w follows the order of ``working``.
    """
    nX = qp.X_dim
    if working:
        A = np.vstack([qp.Ccal, qp.G_ineq[working]])
        b = np.concatenate([qp.Dcal, qp.h_ineq[working]])
    else:
        A, b = qp.Ccal, qp.Dcal
    m = A.shape[0]
    Psi = np.zeros((nX + m, nX + m))
    Psi[:nX, :nX] = qp.P
    Psi[:nX, nX:] = A.T
    Psi[nX:, :nX] = A
    Lam = np.concatenate([2.0 * (qp.UtQ @ qp.Hcal), b])
    z, *_ = np.linalg.lstsq(Psi, Lam, rcond=None)
    residual = float(np.linalg.norm(Psi @ z - Lam))
    if residual > 1e-8 * (1.0 + float(np.linalg.norm(Lam))):
        raise SingularKktError(residual)
    return z[:nX], z[nX : nX + qp.n_eq], z[nX + qp.n_eq :]


def _feasible(qp: CondensedQp, X: np.ndarray) -> bool:
    slack = qp.h_ineq - qp.G_ineq @ X
    return bool(slack.min() >= -1e-9 * (1.0 + np.abs(qp.h_ineq).max()))


def _phase1(qp: CondensedQp) -> np.ndarray:
    """Feasible point via the margin LP: min t s.t. Ccal X = Dcal, G X - t <= h."""
    nX = qp.X_dim
    c = np.zeros(nX + 1)
    c[-1] = 1.0
    A_ub = np.hstack([qp.G_ineq, -np.ones((qp.n_ineq, 1))])
    A_eq = np.hstack([qp.Ccal, np.zeros((qp.n_eq, 1))])
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=qp.h_ineq,
        A_eq=A_eq,
        b_eq=qp.Dcal,
        bounds=[(None, None)] * nX + [(-1.0, None)],
        method="highs",
    )
    if not res.success:
        raise QpInfeasibleError([], message=f"phase-1 LP failed: {res.message}")
    X = res.x[:nX]
    t_star = res.x[-1]
    if t_star > 1e-7 * (1.0 + np.abs(qp.h_ineq).max()):
        violated = np.flatnonzero(qp.G_ineq @ X - qp.h_ineq > 1e-9)
        raise QpInfeasibleError(violated)
    return X


def _clamped_candidate(qp: CondensedQp, X_guess: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Clip the input part of a guess to its bounds and re-propagate the states.

    The result satisfies the dynamics and input bounds by construction; the
    returned working set holds the rows where clipping was binding.
    """
    N, n_x, n_u = qp.N, qp.n_x, qp.n_u
    n_state = (N + 1) * n_x
    m_y = (N + 1) * qp.n_y
    m_u = N * n_u
    u_hi = qp.h_ineq[2 * m_y : 2 * m_y + m_u]
    u_lo = -qp.h_ineq[2 * m_y + m_u :]
    u_flat = np.clip(X_guess[n_state:], u_lo, u_hi)
    binding = [int(2 * m_y + k) for k in np.flatnonzero(u_flat == u_hi)]
    binding += [int(2 * m_y + m_u + k) for k in np.flatnonzero(u_flat == u_lo) if (2 * m_y + k) not in binding]
    u_blocks = u_flat.reshape(N, n_u)  # u(N), ..., u(1)
    xs = [qp.x_now]
    for k in range(1, N + 1):  # x(k+1) = A x(k) + B u(k); u(k) is block N - k
        xs.append(qp.A_mat @ xs[-1] + qp.B_mat @ u_blocks[N - k])
    X = np.concatenate([np.concatenate(xs[::-1]), u_flat])
    return X, binding


def _initial_point(
    qp: CondensedQp, warm_flags
) -> tuple[np.ndarray, list[int], tuple[np.ndarray, np.ndarray, np.ndarray] | None]:
    """Feasible start for the active-set loop.

    Returns (X, working set, presolved equality-QP result for that working set
    or None).  Tries, in order: the warm-started working set, the
    equality-only optimum, a clamped-input candidate, and a phase-1 LP.
    """
    guess = None
    if warm_flags is not None:
        working = [int(i) for i in np.flatnonzero(np.asarray(warm_flags, dtype=bool))]
        if working:
            try:
                res = _equality_solve(qp, working)
            except SingularKktError:
                res = None
            if res is not None:
                if _feasible(qp, res[0]):
                    return res[0], working, res
                guess = res[0]
    try:
        res = _equality_solve(qp, [])
        if _feasible(qp, res[0]):
            return res[0], [], res
        if guess is None:
            guess = res[0]
    except SingularKktError:
        pass
    if guess is not None:
        cand, binding = _clamped_candidate(qp, guess)
        if _feasible(qp, cand):
            return cand, binding, None
    return _phase1(qp), [], None


def _ratio_test(
    qp: CondensedQp, X: np.ndarray, p: np.ndarray, in_working: np.ndarray
) -> tuple[int | None, float]:
    """Largest step along p keeping G X <= h; ties broken by the fastest
    normalized approach rate (largest g_i p / ||g_i||)."""
    gp = qp.G_ineq @ p
    slack = np.maximum(qp.h_ineq - qp.G_ineq @ X, 0.0)
    candidates = np.flatnonzero((gp > 1e-12) & ~in_working)
    if candidates.size == 0:
        return None, 1.0
    ratios = slack[candidates] / gp[candidates]
    amin = float(ratios.min())
    if amin >= 1.0:
        return None, 1.0
    near = candidates[ratios <= amin + 1e-12 * (1.0 + amin)]
    scores = gp[near] / np.maximum(qp.row_norms[near], 1e-300)
    blocking = int(near[int(np.argmax(scores))])
    return blocking, max(amin, 0.0)


def solve_inequality_qp(
    qp: CondensedQp,
    warm_flags=None,
    max_iter: int | None = None,
) -> QpSolution:
    """Primal active-set method for the condensed MPC QP.

    Warm-started from the previous step's active flags when provided.  The
    returned active set marks every row with |G_i X - h_i| <= eps_active.
    """
    if max_iter is None:
        max_iter = 50 * qp.X_dim
    X, working, pre = _initial_point(qp, warm_flags)
    in_working = np.zeros(qp.n_ineq, dtype=bool)
    in_working[working] = True
    nu = np.zeros(qp.n_eq)
    lam_w = np.zeros(len(working))
    for iteration in range(1, max_iter + 1):
        if pre is not None:
            X_target, nu, lam_w = pre
            pre = None
        else:
            X_target, nu, lam_w = _equality_solve(qp, working)
        p = X_target - X
        if np.linalg.norm(p, ord=np.inf) <= 1e-11 * (1.0 + np.linalg.norm(X, ord=np.inf)):
            alpha, blocking = 1.0, None
        else:
            blocking, alpha = _ratio_test(qp, X, p, in_working)
        X = X + alpha * p
        if blocking is not None and alpha < 1.0 - 1e-12:
            working.append(blocking)
            in_working[blocking] = True
            continue
        X = X_target
        if not working or lam_w.min() >= -1e-9:
            break
        drop = int(np.argmin(lam_w))
        in_working[working.pop(drop)] = False
    else:
        raise QpConvergenceError(max_iter)

    flags = np.abs(qp.G_ineq @ X - qp.h_ineq) <= eps_active(qp.h_ineq)
    flags[working] = True
    active = ActiveSet.from_flags(qp, flags)
    lam_ineq = np.zeros(qp.n_ineq)
    lam_ineq[working] = lam_w
    return QpSolution(
        X=X,
        active=active,
        lam_ineq=lam_ineq,
        nu=nu,
        iterations=iteration,
        objective=qp.cost(X),
        working=list(working),
    )


@dataclass
class SimulationCounter:
    """Counts completed closed-loop simulations."""

    count: int = 0

    def add(self, k: int = 1) -> None:
        self.count += k


@dataclass
class StepRecord:
    """Everything one closed-loop step contributes to the perturbation analysis."""

    t: int
    x: np.ndarray
    u_prev: np.ndarray
    u: np.ndarray
    y: np.ndarray
    d_hat: np.ndarray | None
    qp: CondensedQp
    active: ActiveSet
    kkt: KktSystem
    z: np.ndarray  # [X; nu; lam_active] satisfying Psi z = Lam
    qp_iterations: int
    degenerate: bool


@dataclass
class Trajectory:
    """Closed-loop record: states, inputs, outputs plus per-step QP data."""

    steps: list[StepRecord]
    model: ParametrizedModel
    theta_ctrl: np.ndarray
    theta_plant: np.ndarray
    config: MpcConfig
    integral_action: bool
    noisy: bool
    plant_matrices: MatrixTriple
    x_final: np.ndarray

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def xs(self) -> np.ndarray:
        return np.array([s.x for s in self.steps])

    @property
    def us(self) -> np.ndarray:
        return np.array([s.u for s in self.steps])

    @property
    def ys(self) -> np.ndarray:
        return np.array([s.y for s in self.steps])

    @property
    def degenerate_steps(self) -> list[int]:
        return [s.t for s in self.steps if s.degenerate]


def _step_is_degenerate(qp: CondensedQp, active: ActiveSet, X: np.ndarray, lam: np.ndarray) -> bool:
    # Weakly active constraint (near-zero multiplier) or near-active inactive
    # row: the frozen-active-set derivative is only one-sided there.
    lam_act = lam[qp.n_eq :]
    if lam_act.size and float(np.abs(lam_act).min()) < 1e-6:
        return True
    inactive = ~active.flags
    if not inactive.any():
        return False
    slack = qp.h_ineq - qp.G_ineq @ X
    return bool(float(slack[inactive].min()) < 1e-6)


def run_closed_loop(
    model: ParametrizedModel,
    theta_plant,
    theta_ctrl,
    config: MpcConfig,
    T: int,
    *,
    noise: NoiseSpec | None = None,
    x0=None,
    u_prev0=None,
    integral_action: bool = False,
    plant_model: ParametrizedModel | None = None,
    counter: SimulationCounter | None = None,
) -> Trajectory:
    """Receding-horizon simulation: at each step solve the controller QP at
    theta_ctrl, apply the first input to the plant at theta_plant.

    With ``integral_action`` the controller model carries a constant output
    disturbance per channel, estimated deadbeat as d_hat = y_meas - C x.
    """
    if T < 1:
        raise ValueError("closed-loop length T must be >= 1")
    pm = plant_model if plant_model is not None else model
    if (pm.n_x, pm.n_u, pm.n_y) != (model.n_x, model.n_u, model.n_y):
        raise ValueError("plant and controller models must share dimensions")
    theta_p = as_theta(theta_plant, pm.n_params)
    theta_c = as_theta(theta_ctrl, model.n_params)
    Ap, Bp, Cp = pm.eval_matrices(theta_p)
    skel = _build_skeleton(model, theta_c, config)

    x = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float).reshape(model.n_x)
    u_prev = np.zeros(model.n_u) if u_prev0 is None else np.asarray(u_prev0, dtype=float).reshape(model.n_u)
    rng = noise.generator() if (noise is not None and noise.variance > 0) else None
    std = float(np.sqrt(noise.variance)) if noise is not None else 0.0

    steps: list[StepRecord] = []
    warm = None
    for t in range(1, T + 1):
        y = Cp @ x
        if rng is not None:
            y = y + rng.normal(0.0, std, size=model.n_y)
        d_hat = (y - skel.C @ x) if integral_action else None
        qp = _step_qp(skel, x, u_prev, t, d_hat)
        try:
            sol = solve_inequality_qp(qp, warm_flags=warm)
            kkt = build_kkt(qp, sol.active)
            idx = sol.active.indices
            if len(sol.working) == idx.size and set(sol.working) == set(int(i) for i in idx):
                # The flagged rows are exactly the final working set: the
                # solver's last equality solve already solved this KKT system
                # (up to a row permutation), so reuse it.
                Xk, lam = sol.X, np.concatenate([sol.nu, sol.lam_ineq[idx]])
            else:
                Xk, lam = solve_kkt(kkt)
        except (QpInfeasibleError, QpConvergenceError, SingularKktError) as exc:
            raise ClosedLoopError(t, exc) from exc
        u = qp.u1(Xk)
        steps.append(
            StepRecord(
                t=t,
                x=x.copy(),
                u_prev=u_prev.copy(),
                u=u.copy(),
                y=np.asarray(y, dtype=float).copy(),
                d_hat=None if d_hat is None else np.asarray(d_hat, dtype=float).copy(),
                qp=qp,
                active=sol.active,
                kkt=kkt,
                z=np.concatenate([Xk, lam]),
                qp_iterations=sol.iterations,
                degenerate=_step_is_degenerate(qp, sol.active, Xk, lam),
            )
        )
        x = Ap @ x + Bp @ u
        u_prev = u
        warm = sol.active.flags
    if counter is not None:
        counter.add()
    return Trajectory(
        steps=steps,
        model=model,
        theta_ctrl=theta_c,
        theta_plant=theta_p,
        config=config,
        integral_action=integral_action,
        noisy=rng is not None,
        plant_matrices=(Ap, Bp, Cp),
        x_final=x,
    )


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Columns: t, states, inputs, outputs, active-row bitmask (hex), QP iterations."""
    n_x, n_u, n_y = traj.model.n_x, traj.model.n_u, traj.model.n_y
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n_x)]
        + [f"u{i + 1}" for i in range(n_u)]
        + [f"y{i + 1}" for i in range(n_y)]
        + ["active_mask", "qp_iterations"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in traj.steps:
            row = (
                [s.t]
                + [repr(float(v)) for v in s.x]
                + [repr(float(v)) for v in s.u]
                + [repr(float(v)) for v in s.y]
                + [format(s.active.mask(), "x"), s.qp_iterations]
            )
            writer.writerow(row)
