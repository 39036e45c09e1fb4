"""Stability diagnostics for the drift operators.

Everything here works on dense matrices at desk scale (hard cap 2000).
The flow under audit is dz/dt = -M(z); its generator at an equilibrium
is A = -DM(x_bar), so a negative spectral abscissa of A certifies local
exponential stability, and a positive-definite solution P of

    A^T P + P A = -I

certifies it constructively.  Because the toolkit's inner products are
weighted, certificates are computed in orthonormalized coordinates
(W^(1/2)-similarity); eigenvalues are unaffected, Lyapunov quadratic
forms are evaluated in the transformed frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (EigenFailure, InsufficientData, InvalidParameter,
                     NotHurwitz)
from .metric import Metric, adjoint as metric_adjoint
from .operators import MonotoneOperatorSpec

_DENSE_DIM_CAP = 2000


def _check_square(mat) -> np.ndarray:
    from scipy import sparse

    if sparse.issparse(mat):
        mat = mat.toarray()
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise InvalidParameter("matrix must be square")
    if mat.shape[0] > _DENSE_DIM_CAP:
        raise InvalidParameter(
            f"dense solves are capped at dimension {_DENSE_DIM_CAP}"
        )
    return mat


@dataclass(frozen=True)
class Linearization:
    """Jacobian of a drift operator at an expansion point."""

    x_bar: np.ndarray
    DM: np.ndarray


def linearize(M: MonotoneOperatorSpec, x_bar: np.ndarray,
              eps: Optional[float] = None) -> Linearization:
    """DM(x_bar); analytic when available, central differences otherwise."""
    x_bar = np.asarray(x_bar, dtype=float).reshape(M.dim)
    if M.has_derivative:
        return Linearization(x_bar, M.derivative(x_bar))
    scale = 1.0 + float(np.max(np.abs(x_bar)))
    eps = eps if eps is not None else 1e-6 * scale
    cols = []
    for j in range(M.dim):
        e = np.zeros(M.dim)
        e[j] = eps
        cols.append((M(x_bar + e) - M(x_bar - e)) / (2.0 * eps))
    return Linearization(x_bar, np.column_stack(cols))


def spectral_abscissa(DM: np.ndarray) -> float:
    """Max real part of the spectrum of the generator -DM.

    Negative values certify local exponential stability of dz/dt = -M(z)
    near the expansion point.
    """
    DM = _check_square(DM)
    try:
        eigs = np.linalg.eigvals(-DM)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(f"eigensolve failed: {exc}")
    return float(np.max(eigs.real))


@dataclass(frozen=True)
class LyapunovCertificate:
    """Solution of A^T P + P A = -I with its defect and definiteness."""

    P: np.ndarray
    residual: float
    min_eig_P: float

    def valid(self, tol: float = 1e-8) -> bool:
        return self.min_eig_P > 0 and self.residual <= tol

    def quadratic_form(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return np.einsum("...i,ij,...j->...", h, self.P, h)


def lyapunov_certificate(A: np.ndarray) -> LyapunovCertificate:
    """Certificate for the generator A (the flow matrix, A = -DM).

    Raises NotHurwitz when the spectrum of A touches the closed right
    half plane.
    """
    A = _check_square(A)
    try:
        abscissa = float(np.max(np.linalg.eigvals(A).real))
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(f"eigensolve failed: {exc}")
    if abscissa >= -1e-13:
        raise NotHurwitz(f"generator abscissa {abscissa:.3e} is not negative")
    from scipy.linalg import solve_continuous_lyapunov

    P = solve_continuous_lyapunov(A.T, -np.eye(A.shape[0]))
    P = 0.5 * (P + P.T)
    residual = float(np.max(np.abs(A.T @ P + P @ A + np.eye(A.shape[0]))))
    min_eig = float(np.min(np.linalg.eigvalsh(P)))
    return LyapunovCertificate(P, residual, min_eig)


@dataclass(frozen=True)
class DecayFit:
    """Exponential fit value(t) ~ amplitude * exp(-c_fit * (t - t0))."""

    c_fit: float
    amplitude: float
    bound_satisfied: Optional[bool] = None


def decay_fit(times: np.ndarray, values: np.ndarray,
              c_ref: Optional[float] = None,
              bound_tol: float = 1e-6) -> DecayFit:
    """Least-squares fit of log(value) against time.

    With c_ref given, also checks the pointwise reference bound
    value(t) <= value(t0) * exp(-c_ref (t - t0)) * (1 + bound_tol).
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    values = np.asarray(values, dtype=float).reshape(-1)
    if times.size != values.size:
        raise InsufficientData("times and values must have equal length")
    if times.size < 10:
        raise InsufficientData("need at least 10 samples")
    if np.any(values <= 0):
        raise InsufficientData("decay fit needs strictly positive values")
    t0 = times[0]
    slope, intercept = np.polyfit(times - t0, np.log(values), 1)
    bound = None
    if c_ref is not None:
        envelope = values[0] * np.exp(-c_ref * (times - t0)) * (1.0 + bound_tol)
        bound = bool(np.all(values <= envelope))
    return DecayFit(-float(slope), float(np.exp(intercept)), bound)


def nonnormality(A: np.ndarray) -> float:
    """Commutator defect ||A^T A - A A^T||_F; zero for normal matrices.

    Large values warn that eigenvalue-based rate predictions may be
    defeated by transient growth.
    """
    A = _check_square(A)
    return float(np.linalg.norm(A.T @ A - A @ A.T, "fro"))


@dataclass(frozen=True)
class SaddleBlocks:
    """Block decomposition DM = [[M1, -M2*], [M2, 0]] when it applies."""

    m1: np.ndarray
    m2: np.ndarray
    m2_star: np.ndarray
    dual_block_max: float
    adjoint_gap: float
    sigma_min_m2: float


def saddle_blocks(DM: np.ndarray, primal_dim: int, primal_metric: Metric,
                  dual_metric: Metric) -> SaddleBlocks:
    """Extract and verify the structured saddle form of a drift Jacobian.

    Reports how far the dual-dual block is from zero, how far the
    primal-dual block is from the metric adjoint of the dual-primal
    block, and the smallest singular value of the (weighted) coupling
    block, whose positivity is the surjectivity hypothesis behind the
    exponential-stability certificate.
    """
    DM = np.atleast_2d(np.asarray(DM, dtype=float))
    p = primal_dim
    m1 = DM[:p, :p]
    m2 = DM[p:, :p]
    m2_star = -DM[:p, p:]
    dual_block_max = float(np.max(np.abs(DM[p:, p:]), initial=0.0))
    expected = metric_adjoint(m2, primal_metric, dual_metric)
    adjoint_gap = float(np.max(np.abs(m2_star - expected), initial=0.0))
    weighted = (np.sqrt(dual_metric.weights)[:, None] * m2
                / np.sqrt(primal_metric.weights)[None, :])
    sigma_min = float(np.linalg.svd(weighted, compute_uv=False).min())
    return SaddleBlocks(m1, m2, m2_star, dual_block_max, adjoint_gap, sigma_min)


def metric_generator(DM: np.ndarray, metric: Metric) -> np.ndarray:
    """Generator -DM expressed in orthonormal (W^(1/2)) coordinates."""
    return -metric.similarity(_check_square(DM))
