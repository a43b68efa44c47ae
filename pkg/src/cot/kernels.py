"""Characteristic kernels, Gram matrices and closed-form squared-MMD estimators.

The squared maximum mean discrepancy between weighted empirical measures
P = sum_i a_i delta_{p_i} and Q = sum_j b_j delta_{q_j} has the exact
Gram-matrix expression

    MMD^2(P, Q) = a' Kpp a + b' Kqq b - 2 a' Kpq b,

which is the squared RKHS distance between the two kernel mean embeddings.
This is the biased (V-statistic) form: diagonal terms are kept, so the value
is a true squared norm and never negative beyond float cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Kernel",
    "WeightedSamples",
    "gram",
    "mmd2",
    "mmd2_to_dirac",
    "median_sigma2",
    "pairwise_sqdist",
]

_FAMILIES = ("rbf", "imq", "imq2")


@dataclass(frozen=True)
class Kernel:
    """A positive-definite kernel on R^d.

    family:
        "rbf"   k(a,b) = exp(-|a-b|^2 / (2 sigma2))
        "imq"   k(a,b) = (sigma2 + |a-b|^2)^(-1/2)
        "imq2"  k(a,b) = ((1 + |a-b|^2) / sigma2)^(-1/2)
    sigma2:
        positive bandwidth parameter.
    rescaled:
        if True, divide by k(a,a) so the kernel is normalized to 1 on the
        diagonal. The RBF family is already normalized; for IMQ/IMQ2 the
        diagonal value is a constant, so rescaling is a constant factor.
    """

    family: str = "rbf"
    sigma2: float = 1.0
    rescaled: bool = False

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}, want one of {_FAMILIES}")
        if not self.sigma2 > 0:
            raise ValueError(f"bandwidth sigma2 must be positive, got {self.sigma2}")

    @property
    def diag_value(self) -> float:
        """k(a, a), constant for all three families."""
        if self.rescaled:
            return 1.0
        if self.family == "rbf":
            return 1.0
        if self.family == "imq":
            return self.sigma2 ** -0.5
        return (1.0 / self.sigma2) ** -0.5  # imq2

    @property
    def is_normalized(self) -> bool:
        return self.diag_value == 1.0

    def of_sqdist(self, d2: np.ndarray) -> np.ndarray:
        """Kernel values from squared distances (all families are radial)."""
        d2 = np.maximum(d2, 0.0)
        if self.family == "rbf":
            k = np.exp(-d2 / (2.0 * self.sigma2))
        elif self.family == "imq":
            k = (self.sigma2 + d2) ** -0.5
        else:
            k = ((1.0 + d2) / self.sigma2) ** -0.5
        if self.rescaled:
            if self.family == "imq":
                k = k * self.sigma2 ** 0.5
            elif self.family == "imq2":
                k = k * (1.0 / self.sigma2) ** 0.5
        return k


def pairwise_sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """|a_i - b_j|^2 for all row pairs; (n, d) x (p, d) -> (n, p)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    aa = np.sum(A * A, axis=1)[:, None]
    bb = np.sum(B * B, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (A @ B.T)
    return np.maximum(d2, 0.0)


def gram(kernel: Kernel, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Gram matrix with entries k(A_i, B_j)."""
    K = kernel.of_sqdist(pairwise_sqdist(A, B))
    if not np.isfinite(K).all():
        raise FloatingPointError("non-finite kernel values")
    return K


@dataclass
class WeightedSamples:
    """A weighted empirical measure: points (n, d) with weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        n = self.points.shape[0]
        if n < 1:
            raise ValueError("need at least one point")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.shape[0] != n:
            raise ValueError("one weight per point required")
        if self.weights.min() < 0:
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")

    @classmethod
    def uniform(cls, points) -> "WeightedSamples":
        return cls(points)

    @classmethod
    def dirac(cls, point) -> "WeightedSamples":
        return cls(np.atleast_2d(point), np.array([1.0]))

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def mmd2(kernel: Kernel, P: WeightedSamples, Q: WeightedSamples) -> float:
    """Squared MMD between two weighted empirical measures (V-statistic).

    Exactly symmetric in (P, Q): the evaluation order is canonicalized, so
    swapping the arguments reproduces the identical float value. Tiny negative
    values from float cancellation (>= -1e-10) are clamped to 0; anything more
    negative indicates a broken kernel and raises.
    """
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    key_p = (P.points.shape[0], P.points.tobytes(), P.weights.tobytes())
    key_q = (Q.points.shape[0], Q.points.tobytes(), Q.weights.tobytes())
    if key_p > key_q:
        P, Q = Q, P
    a, b = P.weights, Q.weights
    val = (
        a @ gram(kernel, P.points, P.points) @ a
        + b @ gram(kernel, Q.points, Q.points) @ b
        - 2.0 * (a @ gram(kernel, P.points, Q.points) @ b)
    )
    if val < -1e-10:
        raise FloatingPointError(f"squared MMD is negative beyond tolerance: {val!r}")
    return max(val, 0.0)


def mmd2_to_dirac(kernel: Kernel, P: WeightedSamples, y) -> float:
    """Squared MMD between P and a Dirac at y."""
    return mmd2(kernel, P, WeightedSamples.dirac(y))


def median_sigma2(points: np.ndarray) -> float:
    """Median off-diagonal pairwise squared distance; the usual bandwidth pick."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least two points for the median heuristic")
    d2 = pairwise_sqdist(points, points)
    off = d2[~np.eye(n, dtype=bool)]
    med = float(np.median(off))
    if med <= 0:
        raise ValueError("median pairwise distance is zero; points are not distinct")
    return med
