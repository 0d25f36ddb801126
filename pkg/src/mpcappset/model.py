"""Parametrized discrete-time LTI models and open-loop simulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MatrixTriple = tuple[np.ndarray, np.ndarray, np.ndarray]


def as_theta(values, n: int | None = None) -> np.ndarray:
    """Validate a parameter vector: 1-D, nonempty, finite, optionally of length n."""
    theta = np.asarray(values, dtype=float)
    if theta.ndim == 0:
        theta = theta.reshape(1)
    if theta.ndim != 1 or theta.size == 0:
        raise ValueError(f"parameter vector must be a nonempty 1-D array, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector has non-finite entries")
    if n is not None and theta.size != n:
        raise ValueError(f"parameter vector has length {theta.size}, expected {n}")
    return theta


@dataclass(frozen=True)
class NoiseSpec:
    """White additive output noise: per-channel variance plus RNG seed."""

    variance: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variance < 0:
            raise ValueError("noise variance must be >= 0")

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class AffineTerm:
    """One affine dependence: matrix[row, col] += coeff * theta[param]."""

    param: int
    matrix: str  # "A" | "B" | "C"
    row: int
    col: int
    coeff: float = 1.0


class ParametrizedModel:
    """State-space family (A(theta), B(theta), C(theta)) with derivative access.

    ``eval_fn(theta)`` returns the matrix triple, ``jac_fn(theta, i)`` its
    elementwise derivative w.r.t. theta[i], and ``hess_fn(theta, i, j)`` the
    second derivatives (identically zero for affine parametrizations).
    """

    def __init__(
        self,
        n_x: int,
        n_u: int,
        n_y: int,
        n_params: int,
        eval_fn: Callable[[np.ndarray], MatrixTriple],
        jac_fn: Callable[[np.ndarray, int], MatrixTriple],
        hess_fn: Callable[[np.ndarray, int, int], MatrixTriple] | None = None,
        parametrization_kind: str = "general",
    ) -> None:
        if min(n_x, n_u, n_y, n_params) < 1:
            raise ValueError("all dimensions must be positive")
        if parametrization_kind not in ("affine", "general"):
            raise ValueError(f"unknown parametrization kind {parametrization_kind!r}")
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.n_y = int(n_y)
        self.n_params = int(n_params)
        self._eval = eval_fn
        self._jac = jac_fn
        self._hess = hess_fn
        self.parametrization_kind = parametrization_kind

    def _check_shapes(self, A: np.ndarray, B: np.ndarray, C: np.ndarray, what: str) -> None:
        expected = ((self.n_x, self.n_x), (self.n_x, self.n_u), (self.n_y, self.n_x))
        for M, shape, name in zip((A, B, C), expected, "ABC"):
            if M.shape != shape:
                raise ValueError(f"{what}: matrix {name} has shape {M.shape}, expected {shape}")
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{what}: matrix {name} has non-finite entries")

    def eval_matrices(self, theta) -> MatrixTriple:
        theta = as_theta(theta, self.n_params)
        A, B, C = (np.asarray(M, dtype=float) for M in self._eval(theta))
        self._check_shapes(A, B, C, "eval")
        return A, B, C

    def matrix_jacobian(self, theta, i: int) -> MatrixTriple:
        theta = as_theta(theta, self.n_params)
        if not 0 <= i < self.n_params:
            raise IndexError(f"parameter index {i} out of range [0, {self.n_params})")
        dA, dB, dC = (np.asarray(M, dtype=float) for M in self._jac(theta, i))
        self._check_shapes(dA, dB, dC, f"jacobian[{i}]")
        return dA, dB, dC

    def matrix_hessian(self, theta, i: int, j: int) -> MatrixTriple:
        theta = as_theta(theta, self.n_params)
        for k in (i, j):
            if not 0 <= k < self.n_params:
                raise IndexError(f"parameter index {k} out of range [0, {self.n_params})")
        if self._hess is None:
            raise ValueError("model does not provide second derivatives")
        dA, dB, dC = (np.asarray(M, dtype=float) for M in self._hess(theta, i, j))
        self._check_shapes(dA, dB, dC, f"hessian[{i},{j}]")
        return dA, dB, dC

    @classmethod
    def affine(
        cls,
        n_x: int,
        n_u: int,
        n_y: int,
        n_params: int,
        terms: Sequence[AffineTerm],
        A0=None,
        B0=None,
        C0=None,
    ) -> "ParametrizedModel":
        """Model whose matrix entries are affine in theta, given base matrices
        and a list of (parameter -> entry) terms."""
        shapes = {"A": (n_x, n_x), "B": (n_x, n_u), "C": (n_y, n_x)}
        base = {
            "A": np.zeros(shapes["A"]) if A0 is None else np.asarray(A0, dtype=float).reshape(shapes["A"]),
            "B": np.zeros(shapes["B"]) if B0 is None else np.asarray(B0, dtype=float).reshape(shapes["B"]),
            "C": np.zeros(shapes["C"]) if C0 is None else np.asarray(C0, dtype=float).reshape(shapes["C"]),
        }
        terms = tuple(terms)
        for term in terms:
            if term.matrix not in shapes:
                raise ValueError(f"unknown matrix tag {term.matrix!r}")
            rows, cols = shapes[term.matrix]
            if not (0 <= term.row < rows and 0 <= term.col < cols):
                raise ValueError(f"term {term} out of bounds for matrix {term.matrix} {shapes[term.matrix]}")
            if not 0 <= term.param < n_params:
                raise ValueError(f"term {term} references parameter out of range [0, {n_params})")

        def eval_fn(theta: np.ndarray) -> MatrixTriple:
            mats = {name: base[name].copy() for name in base}
            for term in terms:
                mats[term.matrix][term.row, term.col] += term.coeff * theta[term.param]
            return mats["A"], mats["B"], mats["C"]

        def jac_fn(theta: np.ndarray, i: int) -> MatrixTriple:
            mats = {name: np.zeros_like(base[name]) for name in base}
            for term in terms:
                if term.param == i:
                    mats[term.matrix][term.row, term.col] += term.coeff
            return mats["A"], mats["B"], mats["C"]

        def hess_fn(theta: np.ndarray, i: int, j: int) -> MatrixTriple:
            return (np.zeros(shapes["A"]), np.zeros(shapes["B"]), np.zeros(shapes["C"]))

        return cls(n_x, n_u, n_y, n_params, eval_fn, jac_fn, hess_fn, parametrization_kind="affine")

    @classmethod
    def from_callables(
        cls,
        n_x: int,
        n_u: int,
        n_y: int,
        n_params: int,
        eval_fn,
        jac_fn,
        hess_fn=None,
    ) -> "ParametrizedModel":
        """General smooth parametrization from user callables."""
        return cls(n_x, n_u, n_y, n_params, eval_fn, jac_fn, hess_fn, parametrization_kind="general")


def simulate_open_loop(
    model: ParametrizedModel,
    theta,
    x0,
    u_seq,
    noise: NoiseSpec | None = None,
) -> np.ndarray:
    """Simulate x(t+1) = A x(t) + B u(t), y(t) = C x(t) + e(t).

    Returns the (T, n_y) array of outputs; y(t) is measured before u(t) is
    applied.  With zero variance the result is deterministic.
    """
    theta = as_theta(theta, model.n_params)
    A, B, C = model.eval_matrices(theta)
    x = np.asarray(x0, dtype=float).reshape(model.n_x)
    u_arr = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_arr.shape[0] == 1 and u_arr.shape[1] != model.n_u:
        u_arr = u_arr.reshape(-1, model.n_u)
    if u_arr.size == 0:
        raise ValueError("input sequence must be nonempty")
    if u_arr.shape[1] != model.n_u:
        raise ValueError(f"input sequence has width {u_arr.shape[1]}, expected {model.n_u}")
    rng = noise.generator() if (noise is not None and noise.variance > 0) else None
    std = float(np.sqrt(noise.variance)) if noise is not None else 0.0
    ys = np.empty((u_arr.shape[0], model.n_y))
    for t, u in enumerate(u_arr):
        y = C @ x
        if rng is not None:
            y = y + rng.normal(0.0, std, size=model.n_y)
        ys[t] = y
        x = A @ x + B @ u
    return ys
