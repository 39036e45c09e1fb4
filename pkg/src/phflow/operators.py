"""Pointwise-evaluable monotone operator candidates.

An operator is described by its evaluation map, optionally an analytic
Jacobian, and optionally an exact linear part.  Linear operators get a
dedicated representation (dense or sparse matrix) so that resolvents and
implicit integrators can prefactor a single matrix instead of running
Newton at every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from .errors import DimensionMismatch


def _as_dense(mat) -> np.ndarray:
    if sparse.issparse(mat):
        return mat.toarray()
    return np.asarray(mat, dtype=float)


@dataclass(frozen=True)
class MonotoneOperatorSpec:
    """Candidate accretive map M on R^dim.

    eval_fn must be deterministic: identical input arrays produce
    bitwise-identical outputs.  derivative_fn, when given, returns the
    dense Jacobian at a point.  linear_part, when given, takes priority
    and fixes M(x) = linear_part @ x (+ affine_offset); resolvents and
    implicit integrators then prefactor a single matrix.
    """

    dim: int
    eval_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    derivative_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    linear_part: Optional[object] = None  # ndarray or scipy sparse
    affine_offset: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(
                f"state has dimension {x.shape[-1]}, operator expects {self.dim}"
            )
        if self.linear_part is not None:
            out = self.linear_part @ x
            if self.affine_offset is not None:
                out = out + self.affine_offset
            return out
        return np.asarray(self.eval_fn(x), dtype=float)

    @property
    def is_linear(self) -> bool:
        """True when the drift is linear up to a constant offset."""
        return self.linear_part is not None

    @property
    def offset(self) -> np.ndarray:
        return (np.zeros(self.dim) if self.affine_offset is None
                else self.affine_offset)

    @property
    def has_derivative(self) -> bool:
        return self.is_linear or self.derivative_fn is not None

    def derivative(self, x: np.ndarray) -> np.ndarray:
        """Dense Jacobian DM(x)."""
        if self.linear_part is not None:
            return _as_dense(self.linear_part)
        if self.derivative_fn is None:
            raise DimensionMismatch("operator carries no derivative")
        return np.asarray(self.derivative_fn(x), dtype=float)

    def shifted(self, b: np.ndarray) -> "MonotoneOperatorSpec":
        """The operator x -> M(x) - b (same derivative)."""
        b = np.asarray(b, dtype=float)
        if self.linear_part is not None:
            return MonotoneOperatorSpec(
                self.dim, linear_part=self.linear_part,
                affine_offset=self.offset - b,
            )
        return MonotoneOperatorSpec(
            self.dim,
            eval_fn=lambda x: self.eval_fn(x) - b,
            derivative_fn=self.derivative_fn,
        )


def linear(mat, offset=None) -> MonotoneOperatorSpec:
    """Wrap a matrix (plus optional constant) as an operator;
    accretivity is the caller's claim."""
    dim = mat.shape[0]
    if mat.shape[1] != dim:
        raise DimensionMismatch("linear operator matrix must be square")
    return MonotoneOperatorSpec(dim, linear_part=mat, affine_offset=offset)


def identity(dim: int) -> MonotoneOperatorSpec:
    return linear(np.eye(dim))


def zero(dim: int) -> MonotoneOperatorSpec:
    return linear(np.zeros((dim, dim)))


def cubic(R, kappa: float = 0.0) -> MonotoneOperatorSpec:
    """M(x) = R x + kappa * x^3 elementwise; monotone for R >= 0, kappa >= 0."""
    R = np.asarray(R, dtype=float)
    dim = R.shape[0]
    if kappa == 0.0:
        return linear(R)
    return MonotoneOperatorSpec(
        dim,
        eval_fn=lambda x: R @ x + kappa * x**3,
        derivative_fn=lambda x: R + np.diag(3.0 * kappa * x**2),
    )


def derivative_gap(spec: MonotoneOperatorSpec, x: np.ndarray, v: np.ndarray,
                   eps: float) -> float:
    """Max-norm gap between a central difference of M along v and DM(x) v."""
    fd = (spec(x + eps * v) - spec(x - eps * v)) / (2.0 * eps)
    return float(np.max(np.abs(fd - spec.derivative(x) @ v)))
