"""Application cost, its Gauss-Newton Hessian, and ellipsoidal parameter sets.

The application cost of a candidate parameter vector is the mean squared
discrepancy between the outputs of two closed loops driving the same plant:
one controlled with the nominal parameters, one with the candidate.  Its
quadratic model around the nominal parameters yields the ellipsoidal
application set; the identification side is the classical asymptotic
confidence ellipsoid shaped by the Fisher information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaincinv

from .model import NoiseSpec, ParametrizedModel, as_theta
from .mpc import ClosedLoopError, MpcConfig, SimulationCounter, Trajectory, run_closed_loop
from .sensitivity import SensitivityBundle


class AppCostError(RuntimeError):
    """Closed-loop failure while evaluating the application cost, tagged with theta."""

    def __init__(self, theta: np.ndarray, cause: Exception) -> None:
        self.theta = np.asarray(theta, dtype=float)
        self.cause = cause
        super().__init__(f"application cost evaluation failed at theta={self.theta.tolist()}: {cause}")


@dataclass(frozen=True)
class AppCostSpec:
    """Evaluation horizon and accuracy level of the application set.

    In ``relative`` mode the accuracy constant is resolved as 100 divided by
    the nominal tracking cost (1% allowed performance degradation).
    """

    M: int
    gamma: float = 0.0
    gamma_mode: str = "absolute"

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError("evaluation horizon M must be >= 1")
        if self.gamma_mode not in ("absolute", "relative"):
            raise ValueError(f"unknown gamma mode {self.gamma_mode!r}")
        if self.gamma_mode == "absolute" and self.gamma <= 0:
            raise ValueError("gamma must be positive in absolute mode")


@dataclass(frozen=True)
class FisherInfo:
    """Per-sample Fisher information with experiment length and confidence level."""

    matrix: np.ndarray
    N: int
    alpha: float

    def __post_init__(self) -> None:
        M = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise ValueError("Fisher matrix must be square")
        if np.linalg.norm(M - M.T, ord=np.inf) > 1e-10 * (1.0 + np.abs(M).max()):
            raise ValueError("Fisher matrix must be symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-10 * (1.0 + np.abs(M).max()):
            raise ValueError("Fisher matrix must be positive semidefinite")
        object.__setattr__(self, "matrix", M)
        if self.N < 1:
            raise ValueError("experiment length N must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("confidence level alpha must be in (0, 1)")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class Ellipsoid:
    """Set {theta : (theta - center)' shape (theta - center) <= level}."""

    center: np.ndarray
    shape: np.ndarray
    level: float

    def __post_init__(self) -> None:
        self.center = as_theta(self.center)
        P = np.atleast_2d(np.asarray(self.shape, dtype=float))
        scale = 1.0 + np.abs(P).max()
        if P.shape != (self.center.size, self.center.size):
            raise ValueError("shape matrix does not match center dimension")
        if np.linalg.norm(P - P.T, ord=np.inf) > 1e-10 * scale:
            raise ValueError("shape matrix must be symmetric")
        if np.linalg.eigvalsh(P).min() < -1e-10 * scale:
            raise ValueError("shape matrix must be positive semidefinite")
        self.shape = 0.5 * (P + P.T)
        self.level = float(self.level)
        if self.level <= 0:
            raise ValueError("level must be positive")

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def degenerate(self) -> bool:
        """True when the shape matrix is numerically singular (unbounded set)."""
        eig = np.linalg.eigvalsh(self.shape)
        return bool(eig.min() <= 1e-12 * max(1.0, eig.max()))

    def quadratic_form(self, theta) -> float:
        d = as_theta(theta, self.dim) - self.center
        return float(d @ self.shape @ d)

    def semi_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Semi-axis lengths and directions (columns); infinite axes for
        zero eigenvalues come out as ``inf``."""
        eig, vec = np.linalg.eigh(self.shape)
        lengths = np.where(eig > 1e-12 * max(1.0, eig.max()), np.sqrt(self.level / np.maximum(eig, 1e-300)), np.inf)
        return lengths, vec

    def to_dict(self) -> dict:
        lengths, vec = self.semi_axes()
        eig = np.linalg.eigvalsh(self.shape)
        return {
            "center": [float(v) for v in self.center],
            "shape_row_major": [float(v) for v in self.shape.reshape(-1)],
            "level": float(self.level),
            "dim": int(self.dim),
            "degenerate": bool(self.degenerate),
            "eigenvalues": [float(v) for v in eig],
            "semi_axis_lengths": [None if not np.isfinite(v) else float(v) for v in lengths],
            "semi_axis_directions_columns": [[float(v) for v in vec[:, k]] for k in range(self.dim)],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "Ellipsoid":
        n = int(data["dim"])
        return cls(
            center=np.asarray(data["center"], dtype=float),
            shape=np.asarray(data["shape_row_major"], dtype=float).reshape(n, n),
            level=float(data["level"]),
        )


@dataclass
class ClosedLoopSetup:
    """Plant-plus-controller context shared by all application-cost evaluations."""

    model: ParametrizedModel
    config: MpcConfig
    theta_hat: np.ndarray
    T: int
    x0: np.ndarray | None = None
    u_prev0: np.ndarray | None = None
    integral_action: bool = False

    def __post_init__(self) -> None:
        self.theta_hat = as_theta(self.theta_hat, self.model.n_params)
        if self.T < 1:
            raise ValueError("closed-loop length T must be >= 1")

    def run(self, theta_ctrl, *, noise: NoiseSpec | None = None, counter: SimulationCounter | None = None) -> Trajectory:
        return run_closed_loop(
            self.model,
            self.theta_hat,
            theta_ctrl,
            self.config,
            self.T,
            noise=noise,
            x0=self.x0,
            u_prev0=self.u_prev0,
            integral_action=self.integral_action,
            counter=counter,
        )

    def nominal_trajectory(self, counter: SimulationCounter | None = None) -> Trajectory:
        return self.run(self.theta_hat, counter=counter)


def app_cost(
    theta,
    setup: ClosedLoopSetup,
    M: int | None = None,
    *,
    y_ref: np.ndarray | None = None,
    counter: SimulationCounter | None = None,
    noise: NoiseSpec | None = None,
) -> float:
    """Mean squared output discrepancy between the nominal-controller loop and
    the theta-controller loop on the nominal plant, over t = 1..M.

    Evaluations are noise-free unless a NoiseSpec is passed explicitly, in
    which case both loops share the same realization (common seed).
    """
    theta = as_theta(theta, setup.model.n_params)
    M = setup.T if M is None else int(M)
    if not 1 <= M <= setup.T:
        raise ValueError(f"M={M} outside [1, T={setup.T}]")
    if y_ref is None:
        y_ref = setup.run(setup.theta_hat, noise=noise, counter=counter).ys
    try:
        traj = setup.run(theta, noise=noise, counter=counter)
    except ClosedLoopError as exc:
        raise AppCostError(theta, exc) from exc
    diff = traj.ys[:M] - y_ref[:M]
    return float(np.mean(np.sum(diff * diff, axis=1)))


class AppCostEvaluator:
    """Application-cost oracle with a cached nominal loop and a simulation counter."""

    def __init__(self, setup: ClosedLoopSetup, M: int | None = None) -> None:
        self.setup = setup
        self.M = setup.T if M is None else int(M)
        if not 1 <= self.M <= setup.T:
            raise ValueError(f"M={self.M} outside [1, T={setup.T}]")
        self.counter = SimulationCounter()
        self._y_ref: np.ndarray | None = None

    @property
    def simulations(self) -> int:
        return self.counter.count

    @property
    def y_ref(self) -> np.ndarray:
        if self._y_ref is None:
            self._y_ref = self.setup.nominal_trajectory(counter=self.counter).ys
        return self._y_ref

    def __call__(self, theta) -> float:
        theta = as_theta(theta, self.setup.model.n_params)
        y_ref = self.y_ref
        if np.array_equal(theta, self.setup.theta_hat):
            return 0.0
        return app_cost(theta, self.setup, self.M, y_ref=y_ref, counter=self.counter)


def tracking_cost(trajectory: Trajectory, M: int | None = None) -> float:
    """Mean squared tracking error of a closed loop against its reference."""
    M = len(trajectory) if M is None else int(M)
    if not 1 <= M <= len(trajectory):
        raise ValueError(f"M={M} outside [1, {len(trajectory)}]")
    err = np.array([s.y - np.asarray(trajectory.config.reference(s.t), dtype=float) for s in trajectory.steps[:M]])
    return float(np.mean(np.sum(err * err, axis=1)))


def resolve_gamma(spec: AppCostSpec, setup: ClosedLoopSetup, nominal: Trajectory | None = None) -> float:
    """Accuracy constant: the configured value, or 100 / (nominal tracking cost)
    in relative mode."""
    if spec.gamma_mode == "absolute":
        return float(spec.gamma)
    traj = nominal if nominal is not None else setup.nominal_trajectory()
    v0 = tracking_cost(traj, spec.M)
    if v0 <= 1e-300:
        raise ValueError("nominal tracking cost is zero; relative gamma undefined")
    return 100.0 / v0


def app_hessian(bundle: SensitivityBundle, M: int) -> np.ndarray:
    """Gauss-Newton Hessian (2/M) sum_t dy(t)' dy(t); the curvature term
    vanishes because the cost is exactly zero at the expansion point."""
    if not 1 <= M <= bundle.horizon:
        raise ValueError(f"M={M} outside [1, {bundle.horizon}]")
    dy = bundle.dy[:M]
    H = (2.0 / M) * np.einsum("tki,tkj->ij", dy, dy)
    return 0.5 * (H + H.T)


def application_ellipsoid(H: np.ndarray, gamma: float, theta_hat) -> Ellipsoid:
    """Quadratic sublevel set {theta : (theta - theta_hat)' H (theta - theta_hat) <= 2/gamma}."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return Ellipsoid(center=as_theta(theta_hat), shape=np.asarray(H, dtype=float), level=2.0 / gamma)


def chi2_quantile(alpha: float, n: int) -> float:
    """alpha-quantile of the chi-square distribution with n degrees of freedom,
    via the inverse regularized incomplete gamma function."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if n < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return float(2.0 * gammaincinv(n / 2.0, alpha))


def identification_ellipsoid(fi: FisherInfo, center) -> Ellipsoid:
    """Asymptotic confidence ellipsoid of the parameter estimate:
    shape = Fisher information, level = chi2_alpha(n) / N."""
    center = as_theta(center, fi.n)
    return Ellipsoid(center=center, shape=fi.matrix, level=chi2_quantile(fi.alpha, fi.n) / fi.N)


def contains(outer: Ellipsoid, inner: Ellipsoid, tol: float = 1e-10) -> bool:
    """Whether the inner ellipsoid is contained in the outer one.

    Both must be concentric; containment holds iff
    (level_out / level_in) * shape_in - shape_out is positive semidefinite.
    """
    if outer.dim != inner.dim:
        raise ValueError("ellipsoid dimensions differ")
    if not np.allclose(outer.center, inner.center, rtol=0.0, atol=1e-12 * (1.0 + np.abs(outer.center).max())):
        raise ValueError("containment check requires concentric ellipsoids")
    D = (outer.level / inner.level) * inner.shape - outer.shape
    return bool(np.linalg.eigvalsh(0.5 * (D + D.T)).min() >= -tol)


def classify(theta, ellipsoid: Ellipsoid) -> str:
    """'inside' when the quadratic form is at most the level (boundary counts
    as inside), else 'outside'."""
    return "inside" if ellipsoid.quadratic_form(theta) <= ellipsoid.level else "outside"


def classify_true(theta, setup_or_evaluator, gamma: float) -> str:
    """'accept' when the simulated application cost is at most 1/gamma."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    evaluator: Callable = (
        setup_or_evaluator if callable(setup_or_evaluator) else AppCostEvaluator(setup_or_evaluator)
    )
    return "accept" if evaluator(theta) <= 1.0 / gamma else "reject"
