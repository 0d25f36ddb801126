"""Sampling and finite-difference baselines for validating the perturbation path.

Scenario sampling draws parameter vectors uniformly from a box, evaluates the
application cost of each, and turns the accepted ones into quadratic
inequalities for an outer experiment-design optimizer.  The finite-difference
Hessian is the many-simulations reference the perturbation method replaces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .appset import AppCostError, AppCostEvaluator, ClosedLoopSetup, Ellipsoid, FisherInfo, chi2_quantile
from .model import as_theta


@dataclass
class ScenarioSet:
    """Uniform box samples paired with their application costs.

    Draws with an unstable controller model or a failed evaluation are kept
    and flagged rather than resampled.
    """

    thetas: np.ndarray  # (N_k, n)
    vapp: np.ndarray    # (N_k,) nan where evaluation failed
    box: np.ndarray     # (n, 2)
    seed: int
    stable: np.ndarray  # bool (N_k,)
    failed: np.ndarray  # bool (N_k,)

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def accepted(self, gamma: float) -> np.ndarray:
        """Boolean mask of samples with Vapp <= 1/gamma (failed draws rejected)."""
        with np.errstate(invalid="ignore"):
            return np.where(self.failed, False, self.vapp <= 1.0 / gamma)


def sample_scenarios(
    box,
    n_samples: int,
    seed: int,
    setup: ClosedLoopSetup,
    *,
    evaluator: AppCostEvaluator | None = None,
) -> ScenarioSet:
    """Seeded i.i.d. uniform draws from the box, each paired with its
    application cost.  Per-sample failures are recorded, not fatal."""
    box = np.atleast_2d(np.asarray(box, dtype=float))
    n = setup.model.n_params
    if box.shape != (n, 2):
        raise ValueError(f"box must have shape ({n}, 2), got {box.shape}")
    if np.any(box[:, 0] > box[:, 1]):
        raise ValueError("box lower bounds exceed upper bounds")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ev = evaluator if evaluator is not None else AppCostEvaluator(setup)
    rng = np.random.default_rng(seed)
    thetas = rng.uniform(box[:, 0], box[:, 1], size=(n_samples, n))
    vapp = np.empty(n_samples)
    stable = np.empty(n_samples, dtype=bool)
    failed = np.zeros(n_samples, dtype=bool)
    for k, th in enumerate(thetas):
        A, _, _ = setup.model.eval_matrices(th)
        stable[k] = bool(np.abs(np.linalg.eigvals(A)).max() < 1.0)
        try:
            vapp[k] = ev(th)
        except AppCostError:
            failed[k] = True
            vapp[k] = np.nan
    return ScenarioSet(thetas=thetas, vapp=vapp, box=box, seed=int(seed), stable=stable, failed=failed)


def scenario_constraints(
    sset: ScenarioSet,
    gamma: float,
    fi: FisherInfo,
    center,
) -> list[dict]:
    """Quadratic inequalities, one per accepted scenario, for the outer design
    problem:  (theta_k - center)' I_F (theta_k - center) >= gamma chi2_alpha(n)/N * Vapp(theta_k).

    The right side is linear in Vapp; a zero cost yields a trivial constraint.
    ``lhs``/``satisfied`` evaluate the supplied Fisher matrix against each one.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    center = as_theta(center, fi.n)
    scale = gamma * chi2_quantile(fi.alpha, fi.n) / fi.N
    out = []
    mask = sset.accepted(gamma)
    for theta, v, keep in zip(sset.thetas, sset.vapp, mask):
        if not keep:
            continue
        delta = theta - center
        rhs = float(scale * v)
        lhs = float(delta @ fi.matrix @ delta)
        out.append(
            {
                "theta": [float(x) for x in theta],
                "delta": [float(x) for x in delta],
                "vapp": float(v),
                "rhs": rhs,
                "lhs": lhs,
                "satisfied": bool(lhs >= rhs),
                "trivial": bool(rhs == 0.0),
            }
        )
    return out


def _central_hessian(feval: Callable[[np.ndarray], float], theta: np.ndarray, h: np.ndarray, f0: float) -> np.ndarray:
    """Central second-difference stencil: 2n^2 evaluations beyond f0."""
    n = theta.size
    H = np.zeros((n, n))
    E = np.diag(h)
    for i in range(n):
        fp = feval(theta + E[i])
        fm = feval(theta - E[i])
        H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
        for j in range(i + 1, n):
            fpp = feval(theta + E[i] + E[j])
            fpm = feval(theta + E[i] - E[j])
            fmp = feval(theta - E[i] + E[j])
            fmm = feval(theta - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return H


def fd_hessian(
    f: Callable[[np.ndarray], float],
    theta,
    h=None,
    richardson: int = 1,
) -> tuple[np.ndarray, int]:
    """Finite-difference Hessian of a scalar function with an evaluation counter.

    One pass costs exactly 2n^2 + 1 evaluations; ``richardson`` > 1 adds
    step-halved passes combined by Richardson extrapolation (the adaptive
    regime of general-purpose numerical differentiators).
    """
    theta = as_theta(theta)
    n = theta.size
    if richardson < 1:
        raise ValueError("richardson depth must be >= 1")
    if h is None:
        h0 = 1e-4 * (1.0 + np.abs(theta))
    else:
        h0 = np.broadcast_to(np.asarray(h, dtype=float), (n,)).copy()
    if np.any(h0 <= 0):
        raise ValueError("steps must be positive")

    evals = 0

    def feval(x: np.ndarray) -> float:
        nonlocal evals
        evals += 1
        v = float(f(x))
        if not np.isfinite(v):
            raise ValueError(f"non-finite function value at {x.tolist()}")
        return v

    f0 = feval(theta)
    table = [_central_hessian(feval, theta, h0 / (2.0 ** lev), f0) for lev in range(richardson)]
    for m in range(1, richardson):
        fac = 4.0 ** m
        table = [(fac * table[k + 1] - table[k]) / (fac - 1.0) for k in range(len(table) - 1)]
    H = table[0]
    return 0.5 * (H + H.T), evals


def scenario_csv(
    sset: ScenarioSet,
    gamma: float,
    ellipsoid: Ellipsoid,
    path,
) -> None:
    """Columns: theta_1..theta_n, vapp, accepted, inside_ellipsoid, stable."""
    n = sset.thetas.shape[1]
    accepted = sset.accepted(gamma)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta{i + 1}" for i in range(n)] + ["vapp", "accepted", "inside_ellipsoid", "stable"])
        for k in range(len(sset)):
            inside = int(ellipsoid.quadratic_form(sset.thetas[k]) <= ellipsoid.level)
            writer.writerow(
                [repr(float(v)) for v in sset.thetas[k]]
                + [repr(float(sset.vapp[k])), int(accepted[k]), inside, int(sset.stable[k])]
            )
