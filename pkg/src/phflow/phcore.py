"""Monotone port-Hamiltonian systems on weighted Euclidean spaces.

A system couples an accretive drift operator M with an input matrix B:

    dx/dt = -M(x) + B u,      y = B* x,

where B* is the metric adjoint of B.  Along any trajectory the stored
energy 1/2 ||x||^2 changes only through internal dissipation -<x, M(x)>
and the port power <u, y>.  This module provides the operator-level
machinery (resolvents, the iterated-resolvent semigroup approximation,
accretivity probes), trajectory audits of the power balance and of
shifted passivity, steady-state solves, and the power-preserving
interconnection of two systems through a skew coupling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import DimensionMismatch, InvalidParameter, NonConvergence
from .metric import Metric, adjoint
from .operators import MonotoneOperatorSpec, _as_dense

_FIXED_POINT_DAMPING = 0.5
_FIXED_POINT_MAX_ITER = 10_000
_NEWTON_MAX_ITER = 100


@dataclass(frozen=True)
class PHSystem:
    """Monotone pH system (M, B) with declared state and port metrics."""

    M: MonotoneOperatorSpec
    B: np.ndarray
    metric: Metric
    input_metric: Metric
    b_star: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2:
            B = B.reshape(self.M.dim, -1)
        if B.shape[0] != self.M.dim:
            raise DimensionMismatch(
                f"B has {B.shape[0]} rows, state dimension is {self.M.dim}"
            )
        if B.shape[1] != self.input_metric.dim:
            raise DimensionMismatch(
                f"B has {B.shape[1]} columns, input metric dimension is "
                f"{self.input_metric.dim}"
            )
        if self.metric.dim != self.M.dim:
            raise DimensionMismatch("state metric dimension mismatch")
        object.__setattr__(self, "B", B)
        object.__setattr__(
            self, "b_star", adjoint(B, self.input_metric, self.metric)
        )

    @property
    def dim(self) -> int:
        return self.M.dim

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def output(self, x: np.ndarray) -> np.ndarray:
        """Collocated output y = B* x."""
        return self.b_star @ x

    def drift(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return -self.M(x) + self.B @ u

    def supplied_power(self, x: np.ndarray, u: np.ndarray) -> float:
        return self.input_metric.inner(u, self.output(x))


@dataclass(frozen=True)
class SteadyStatePair:
    """A pair (x_bar, u_bar) with M(x_bar) = B u_bar, plus y_bar = B* x_bar."""

    x_bar: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution: strictly increasing times, one state/input per time."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        u = np.asarray(self.inputs, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise InvalidParameter("trajectory times must be strictly increasing")
        if x.shape[0] != t.size or u.shape[0] != t.size:
            raise DimensionMismatch("states/inputs length must equal times length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "inputs", u)

    @property
    def step(self) -> float:
        dt = np.diff(self.times)
        if dt.size and np.max(np.abs(dt - dt[0])) > 1e-10 * dt[0]:
            raise InvalidParameter("trajectory is not uniformly sampled")
        return float(dt[0]) if dt.size else 0.0


def _linear_resolvent_solver(M: MonotoneOperatorSpec, lam: float):
    """For M(x) = Lx + g: returns z -> solution of x + lam*M(x) = z,
    prefactored once."""
    linear_part = M.linear_part
    g = M.affine_offset
    if sparse.issparse(linear_part):
        op = sparse.identity(linear_part.shape[0], format="csc") + lam * linear_part.tocsc()
        lu = splu(op)
        solve = lu.solve
    else:
        from scipy.linalg import lu_factor, lu_solve

        mat = np.eye(linear_part.shape[0]) + lam * np.asarray(linear_part)
        fac = lu_factor(mat)
        solve = lambda rhs: lu_solve(fac, rhs)
    if g is None:
        return solve
    return lambda z: solve(z - lam * g)


def resolvent(M: MonotoneOperatorSpec, lam: float, z: np.ndarray,
              metric: Metric, tol: float = 1e-12) -> np.ndarray:
    """Solve x + lam*M(x) = z to within tol in the metric norm.

    Uses a direct solve for linear M, Newton when an analytic derivative
    is available, and a damped fixed-point iteration otherwise.
    """
    if lam <= 0:
        raise InvalidParameter("resolvent parameter lam must be positive")
    if tol <= 0:
        raise InvalidParameter("resolvent tolerance must be positive")
    z = np.asarray(z, dtype=float)

    if M.is_linear:
        return _linear_resolvent_solver(M, lam)(z)

    if M.has_derivative:
        x = z.copy()
        eye = np.eye(M.dim)
        for _ in range(_NEWTON_MAX_ITER):
            r = x + lam * M(x) - z
            if metric.norm(r) <= tol:
                return x
            x = x - np.linalg.solve(eye + lam * M.derivative(x), r)
        r = x + lam * M(x) - z
        if metric.norm(r) <= tol:
            return x
        raise NonConvergence(
            "resolvent Newton iteration exceeded its budget", residual=metric.norm(r)
        )

    x = z.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(_FIXED_POINT_MAX_ITER):
            r = x + lam * M(x) - z
            if not np.all(np.isfinite(r)):
                raise NonConvergence("resolvent fixed-point iteration diverged")
            if metric.norm(r) <= tol:
                return x
            x = x - _FIXED_POINT_DAMPING * r
        raise NonConvergence(
            "resolvent fixed-point iteration exceeded its budget",
            residual=metric.norm(x + lam * M(x) - z),
        )


def semigroup_approx(M: MonotoneOperatorSpec, t: float, n: int, x0: np.ndarray,
                     metric: Optional[Metric] = None, tol: float = 1e-13) -> np.ndarray:
    """Approximate the flow of dx/dt = -M(x) by n chained resolvent steps.

    Returns (I + (t/n) M)^{-n} x0, which converges to the exact solution
    operator as n grows.
    """
    if t < 0:
        raise InvalidParameter("time t must be nonnegative")
    if n < 1:
        raise InvalidParameter("substep count n must be at least 1")
    x = np.asarray(x0, dtype=float).copy()
    if t == 0.0:
        return x
    lam = t / n
    if M.is_linear:
        solve = _linear_resolvent_solver(M, lam)
        for _ in range(n):
            x = solve(x)
        return x
    metric = metric or Metric.euclidean(M.dim)
    for _ in range(n):
        x = resolvent(M, lam, x, metric, tol=tol)
    return x


@dataclass(frozen=True)
class ProbeReport:
    """Sampled accretivity evidence; report-only, never a certificate."""

    min_gap: float
    c_estimate: float
    violation: bool
    n_pairs: int

    def __str__(self):
        status = "VIOLATION" if self.violation else "ok"
        return (f"accretivity probe: min_gap={self.min_gap:.3e} "
                f"c_estimate={self.c_estimate:.3e} [{status}]")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def accretivity_probe(M: MonotoneOperatorSpec, metric: Metric, rng=0,
                      n_pairs: int = 100, x_bar: Optional[np.ndarray] = None,
                      scale: float = 1.0, tol: float = 1e-10) -> ProbeReport:
    """Sample pairs and report the worst monotonicity gap of M.

    min_gap is the smallest <M(x1)-M(x2), x1-x2> over the sampled pairs,
    c_estimate the smallest value of that quantity divided by
    ||x1-x2||^2.  With x_bar given, every pair is anchored there, so
    c_estimate estimates the strong-accretivity constant at x_bar.
    A violation is flagged when some pair's gap is below -tol scaled by
    the pair's magnitude.
    """
    if n_pairs < 1:
        raise InvalidParameter("n_pairs must be at least 1")
    gen = _as_rng(rng)
    min_gap = np.inf
    c_estimate = np.inf
    violation = False
    for _ in range(n_pairs):
        x1 = scale * gen.standard_normal(M.dim)
        if x_bar is not None:
            x2 = np.asarray(x_bar, dtype=float)
            x1 = x2 + x1
        else:
            x2 = scale * gen.standard_normal(M.dim)
        d = x1 - x2
        nd2 = metric.inner(d, d)
        if nd2 == 0.0:
            continue
        gap = metric.inner(M(x1) - M(x2), d)
        min_gap = min(min_gap, gap)
        c_estimate = min(c_estimate, gap / nd2)
        if gap < -tol * (1.0 + metric.inner(x1, x1) + metric.inner(x2, x2)):
            violation = True
    return ProbeReport(float(min_gap), float(c_estimate), violation, n_pairs)


@dataclass(frozen=True)
class PowerBalanceReport:
    """Per-interval defect of the discrete power balance identity."""

    residuals: np.ndarray
    max_residual: float


def _midpoints(traj: Trajectory):
    x = traj.states
    u = traj.inputs
    return 0.5 * (x[1:] + x[:-1]), 0.5 * (u[1:] + u[:-1])


def _batch_eval(M: MonotoneOperatorSpec, X: np.ndarray) -> np.ndarray:
    """Evaluate M on each row of X; one matrix product when M is linear."""
    if M.is_linear:
        out = (M.linear_part @ X.T).T
        if M.affine_offset is not None:
            out = out + M.affine_offset
        return out
    return np.apply_along_axis(M, 1, X)


def power_balance_audit(sys: PHSystem, traj: Trajectory) -> PowerBalanceReport:
    """Check d/dt 1/2||x||^2 = -<x, M(x)> + <u, y> interval by interval.

    The rate side is evaluated at midpoint states (averaged endpoints),
    so trajectories produced by the implicit midpoint rule satisfy the
    identity to solver precision.
    """
    if traj.states.shape[1] != sys.dim:
        raise DimensionMismatch("trajectory state dimension mismatch")
    if traj.inputs.shape[1] != sys.input_dim:
        raise DimensionMismatch("trajectory input dimension mismatch")
    h = traj.step
    w = sys.metric.weights
    energy = 0.5 * np.einsum("ij,j,ij->i", traj.states, w, traj.states)
    xm, um = _midpoints(traj)
    dissip = np.einsum("ij,j,ij->i", xm, w, _batch_eval(sys.M, xm))
    supply = np.einsum(
        "ij,j,ij->i", um, sys.input_metric.weights, xm @ sys.b_star.T
    )
    residuals = np.diff(energy) / h - (-dissip + supply)
    return PowerBalanceReport(residuals, float(np.max(np.abs(residuals), initial=0.0)))


@dataclass(frozen=True)
class ShiftedPassivityReport:
    """Shifted power balance residuals and passivity-inequality excesses."""

    equality_residuals: np.ndarray
    inequality_excess: np.ndarray
    max_equality_residual: float
    max_inequality_excess: float

    def passive(self, tol: float = 1e-9) -> bool:
        return self.max_inequality_excess <= tol


def shifted_passivity_audit(sys: PHSystem, traj: Trajectory,
                            ss: SteadyStatePair) -> ShiftedPassivityReport:
    """Audit the power balance and passivity relative to a steady state.

    Equality: d/dt 1/2||x-x_bar||^2 = -<x-x_bar, M(x)-M(x_bar)>
                                      + <u-u_bar, y-y_bar>.
    Inequality: the same rate is bounded by the shifted supply alone.
    """
    if traj.states.shape[1] != sys.dim:
        raise DimensionMismatch("trajectory state dimension mismatch")
    h = traj.step
    w = sys.metric.weights
    dx = traj.states - ss.x_bar
    energy = 0.5 * np.einsum("ij,j,ij->i", dx, w, dx)
    xm, um = _midpoints(traj)
    mx_bar = sys.M(np.asarray(ss.x_bar, dtype=float))
    dxm = xm - ss.x_bar
    dum = um - ss.u_bar
    gap = np.einsum(
        "ij,j,ij->i", dxm, w, _batch_eval(sys.M, xm) - mx_bar
    )
    supply = np.einsum(
        "ij,j,ij->i", dum, sys.input_metric.weights, xm @ sys.b_star.T - ss.y_bar
    )
    rate = np.diff(energy) / h
    eq_res = rate - (-gap + supply)
    ineq = rate - supply
    return ShiftedPassivityReport(
        eq_res,
        ineq,
        float(np.max(np.abs(eq_res), initial=0.0)),
        float(np.max(ineq, initial=-np.inf)),
    )


def steady_state(sys: PHSystem, u_bar: np.ndarray, tol: float = 1e-10,
                 x_init: Optional[np.ndarray] = None) -> SteadyStatePair:
    """Solve M(x_bar) = B u_bar.

    Newton with damping when a derivative is available; otherwise a
    proximal-point fallback (long-time iterated resolvents of the
    shifted operator).
    """
    u_bar = np.asarray(u_bar, dtype=float).reshape(sys.input_dim)
    b = sys.B @ u_bar
    M = sys.M

    if M.is_linear:
        lp = M.linear_part
        rhs = b - M.offset
        if sparse.issparse(lp):
            from scipy.sparse.linalg import spsolve

            x = spsolve(lp.tocsc(), rhs)
        else:
            x = np.linalg.solve(lp, rhs)
        if not np.all(np.isfinite(x)):
            raise NonConvergence("linear steady-state solve produced non-finite values")
    elif M.has_derivative:
        x = np.zeros(sys.dim) if x_init is None else np.asarray(x_init, dtype=float).copy()
        r = M(x) - b
        for _ in range(_NEWTON_MAX_ITER):
            if sys.metric.norm(r) <= tol:
                break
            try:
                step = np.linalg.solve(M.derivative(x), r)
            except np.linalg.LinAlgError as exc:
                raise NonConvergence(f"steady-state Newton hit a singular Jacobian: {exc}")
            # backtracking keeps the residual monotone
            t = 1.0
            base = sys.metric.norm(r)
            for _ in range(40):
                x_trial = x - t * step
                r_trial = M(x_trial) - b
                if sys.metric.norm(r_trial) < base:
                    x, r = x_trial, r_trial
                    break
                t *= 0.5
            else:
                raise NonConvergence(
                    "steady-state Newton stalled", residual=base)
    else:
        # proximal-point fallback: long-time flow via iterated resolvents,
        # shrinking the step whenever the inner iteration stops contracting
        shifted = M.shifted(b)
        x = np.zeros(sys.dim) if x_init is None else np.asarray(x_init, dtype=float).copy()
        lam = 1.0
        for _ in range(5000):
            if sys.metric.norm(M(x) - b) <= tol:
                break
            try:
                x = resolvent(shifted, lam, x, sys.metric, tol=0.1 * tol)
            except NonConvergence:
                lam *= 0.5
                if lam < 1e-6:
                    raise

    res = sys.metric.norm(M(x) - b)
    if res > tol:
        raise NonConvergence("steady-state residual above tolerance", residual=res)
    return SteadyStatePair(x, u_bar, sys.output(x))


def coupling_block(sys1: PHSystem, sys2: PHSystem, F: np.ndarray,
                   split1: int, split2: int) -> np.ndarray:
    """Dense skew coupling block added to diag(M1, M2) by interconnect."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if not (0 <= split1 <= sys1.input_dim and 0 <= split2 <= sys2.input_dim):
        raise DimensionMismatch("port split outside the input dimension")
    if F.shape != (split1, split2):
        raise DimensionMismatch(
            f"coupling map F has shape {F.shape}, expected ({split1}, {split2})"
        )
    B1c = sys1.B[:, :split1]
    B2c = sys2.B[:, :split2]
    p1, _ = sys1.input_metric.split(split1)
    p2, _ = sys2.input_metric.split(split2)
    b1c_star = adjoint(B1c, p1, sys1.metric)
    b2c_star = adjoint(B2c, p2, sys2.metric)
    f_star = adjoint(F, p2, p1)
    d1, d2 = sys1.dim, sys2.dim
    K = np.zeros((d1 + d2, d1 + d2))
    K[:d1, d1:] = B1c @ F @ b2c_star
    K[d1:, :d1] = -B2c @ f_star @ b1c_star
    return K


def interconnect(sys1: PHSystem, sys2: PHSystem, F: np.ndarray,
                 split1: int, split2: int) -> PHSystem:
    """Power-preserving interconnection through the first port of each system.

    Each input is split as B_i = [B_i^1 B_i^2] with the first split_i
    columns coupled.  The composed drift operator is

        M(x1, x2) = (M1(x1) + B1^1 F (B2^1)* x2,
                     M2(x2) - B2^1 F* (B1^1)* x1),

    whose added block is exactly skew in the product metric, so the
    composition is again monotone whenever the constituents are.  The
    remaining ports survive as B = diag(B1^2, B2^2).
    """
    K = coupling_block(sys1, sys2, F, split1, split2)
    d1, d2 = sys1.dim, sys2.dim
    M1, M2 = sys1.M, sys2.M

    def eval_fn(x, K12=K[:d1, d1:], K21=K[d1:, :d1]):
        x1, x2 = x[:d1], x[d1:]
        return np.concatenate([M1(x1) + K12 @ x2, M2(x2) + K21 @ x1])

    linear_part = None
    affine = None
    derivative_fn = None
    if M1.is_linear and M2.is_linear:
        linear_part = K.copy()
        linear_part[:d1, :d1] += _as_dense(M1.linear_part)
        linear_part[d1:, d1:] += _as_dense(M2.linear_part)
        if M1.affine_offset is not None or M2.affine_offset is not None:
            affine = np.concatenate([M1.offset, M2.offset])
    elif M1.has_derivative and M2.has_derivative:
        def derivative_fn(x):
            J = K.copy()
            J[:d1, :d1] += M1.derivative(x[:d1])
            J[d1:, d1:] += M2.derivative(x[d1:])
            return J

    B = np.zeros((d1 + d2, (sys1.input_dim - split1) + (sys2.input_dim - split2)))
    n1_open = sys1.input_dim - split1
    B[:d1, :n1_open] = sys1.B[:, split1:]
    B[d1:, n1_open:] = sys2.B[:, split2:]
    _, open1 = sys1.input_metric.split(split1)
    _, open2 = sys2.input_metric.split(split2)
    return PHSystem(
        MonotoneOperatorSpec(d1 + d2, eval_fn=eval_fn,
                             derivative_fn=derivative_fn, linear_part=linear_part,
                             affine_offset=affine),
        B,
        sys1.metric.concat(sys2.metric),
        open1.concat(open2),
    )
