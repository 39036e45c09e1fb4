"""Weighted Euclidean inner products.

All state and port spaces in the toolkit are R^d equipped with a
diagonal positive weight matrix W, so that

    <a, b> = sum_i w_i a_i b_i.

Quadrature weights of a time grid enter through these metrics; every
adjoint in the toolkit (output maps, coupling blocks, constraint
adjoints) is taken with respect to the declared weights rather than the
raw transpose.  That choice is what makes the discrete skew-symmetry
identities hold to machine precision instead of merely O(h).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidParameter


@dataclass(frozen=True)
class Metric:
    """Diagonal metric on R^dim given by strictly positive weights."""

    weights: np.ndarray
    _sqrt: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size and np.min(w) <= 0.0:
            raise InvalidParameter("metric weights must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_sqrt", np.sqrt(w))

    @staticmethod
    def euclidean(dim: int) -> "Metric":
        return Metric(np.ones(dim))

    @property
    def dim(self) -> int:
        return self.weights.size

    def check_dim(self, v: np.ndarray, what: str = "vector"):
        if v.shape[-1] != self.dim:
            raise DimensionMismatch(
                f"{what} has dimension {v.shape[-1]}, metric expects {self.dim}"
            )

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.weights * a, b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(np.dot(self.weights * a, a)))

    def to_orthonormal(self, v: np.ndarray) -> np.ndarray:
        """Coordinates in which this metric becomes the Euclidean one."""
        return self._sqrt * v

    def from_orthonormal(self, v: np.ndarray) -> np.ndarray:
        return v / self._sqrt

    def similarity(self, mat: np.ndarray) -> np.ndarray:
        """Return W^(1/2) M W^(-1/2) as a dense array."""
        mat = np.asarray(mat)
        return (self._sqrt[:, None] * mat) / self._sqrt[None, :]

    def split(self, k: int) -> tuple["Metric", "Metric"]:
        return Metric(self.weights[:k]), Metric(self.weights[k:])

    def concat(self, other: "Metric") -> "Metric":
        return Metric(np.concatenate([self.weights, other.weights]))


def adjoint(B: np.ndarray, domain: Metric, codomain: Metric) -> np.ndarray:
    """Metric adjoint of B: domain -> codomain.

    Satisfies <B u, x>_codomain = <u, adjoint(B) x>_domain for all u, x.
    """
    B = np.asarray(B, dtype=float)
    if B.shape != (codomain.dim, domain.dim):
        raise DimensionMismatch(
            f"B has shape {B.shape}, expected ({codomain.dim}, {domain.dim})"
        )
    return (B.T * codomain.weights[None, :]) / domain.weights[:, None]
