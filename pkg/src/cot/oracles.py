"""Exact ground truths for desk-scale verification.

Everything here is computed by an independent closed form or an exact
combinatorial algorithm, never by the estimators under test: closed-form
Wasserstein distances between 1-D Gaussians, the analytic 1-D Gaussian
barycenter, sorted-sample 1-D optimal transport, and minimum-cost assignment
for equal-weight empirical measures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "Gaussian1D",
    "DiscretePlan",
    "gaussian_w2sq",
    "true_conditional_w2sq",
    "CONVERGE_SOURCE",
    "CONVERGE_TARGET",
    "BARYCENTER_SOURCE",
    "BARYCENTER_TARGET",
    "gaussian_barycenter_1d",
    "analytic_barycenter",
    "barycenter_1d_by_quantiles",
    "mccann_interpolate",
    "exact_ot_1d",
    "exact_assignment_ot",
    "empirical_w1_1d",
]

ASSIGNMENT_CAP = 512


@dataclass(frozen=True)
class Gaussian1D:
    """Normal law on the line, parameterized by mean and variance."""

    mean: float
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")

    @property
    def std(self) -> float:
        return float(np.sqrt(self.var))

    def sample(self, stream, n: int) -> np.ndarray:
        return self.mean + self.std * stream.normals(n)


@dataclass
class DiscretePlan:
    """A coupling matrix with fixed marginals and total mass 1."""

    matrix: np.ndarray       # (n, n) nonnegative
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.row_marginal = np.asarray(self.row_marginal, dtype=np.float64)
        self.col_marginal = np.asarray(self.col_marginal, dtype=np.float64)
        if self.matrix.min() < 0:
            raise ValueError("coupling entries must be nonnegative")
        if abs(self.matrix.sum() - 1.0) > 1e-9:
            raise ValueError("total mass must be 1")
        if (np.abs(self.matrix.sum(axis=1) - self.row_marginal).max() > 1e-9
                or np.abs(self.matrix.sum(axis=0) - self.col_marginal).max() > 1e-9):
            raise ValueError("coupling marginals do not match")

    @classmethod
    def from_permutation(cls, perm) -> "DiscretePlan":
        perm = np.asarray(perm, dtype=int)
        n = perm.size
        mat = np.zeros((n, n))
        mat[np.arange(n), perm] = 1.0 / n
        u = np.full(n, 1.0 / n)
        return cls(mat, u, u)


def gaussian_w2sq(p: Gaussian1D, q: Gaussian1D) -> float:
    """Squared 2-Wasserstein distance between 1-D Gaussians:
    (mean_p - mean_q)^2 + (std_p - std_q)^2."""
    return (p.mean - q.mean) ** 2 + (p.std - q.std) ** 2


# The two conditional-Gaussian verification settings. Second argument of each
# lambda is the variance.
CONVERGE_SOURCE = lambda x: Gaussian1D(4.0 * (x - 0.5), 1.0)
CONVERGE_TARGET = lambda x: Gaussian1D(-2.0 * (x - 0.5), 8.0 * x + 1.0)
BARYCENTER_SOURCE = lambda x: Gaussian1D(2.0 * (x - 0.5), 1.0)
BARYCENTER_TARGET = lambda x: Gaussian1D(-4.0 * (x - 0.5), 4.0)


def true_conditional_w2sq(x: float) -> float:
    """Closed form of the conditional squared Wasserstein distance for the
    convergence setting: (6(x-0.5))^2 + (sqrt(8x+1) - 1)^2 for x in [0, 1]."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    return (6.0 * (x - 0.5)) ** 2 + (np.sqrt(8.0 * x + 1.0) - 1.0) ** 2


def gaussian_barycenter_1d(p: Gaussian1D, q: Gaussian1D, rho: float) -> Gaussian1D:
    """2-Wasserstein barycenter of two 1-D Gaussians with weights (rho, 1-rho).

    Quantile functions average linearly in 1-D, so means and standard
    deviations both average: mean = rho*m1 + (1-rho)*m2 and
    std = rho*s1 + (1-rho)*s2.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    mean = rho * p.mean + (1.0 - rho) * q.mean
    std = rho * p.std + (1.0 - rho) * q.std
    return Gaussian1D(mean, std ** 2)


def analytic_barycenter(x: float, rho: float = 0.5) -> Gaussian1D:
    """Barycenter of the barycenter-setting conditionals at covariate x.

    At rho = 0.5 this is N(-x + 0.5, 2.25): mean (2(x-.5) - 4(x-.5))/2 and
    std (1 + 2)/2 = 1.5. The variance follows from the linear-quantile rule
    and is cross-checked against a brute-force discretized barycenter in the
    test suite.
    """
    return gaussian_barycenter_1d(BARYCENTER_SOURCE(x), BARYCENTER_TARGET(x), rho)


def barycenter_1d_by_quantiles(quantile_p, quantile_q, rho: float,
                               n_grid: int = 20001) -> np.ndarray:
    """Brute-force 1-D barycenter: average the two quantile functions on a
    dense uniform grid and return the barycenter's quantile samples."""
    u = (np.arange(n_grid) + 0.5) / n_grid
    return rho * quantile_p(u) + (1.0 - rho) * quantile_q(u)


def mccann_interpolate(rho: float, y_source, y_transported) -> np.ndarray:
    """Displacement interpolation between paired samples:
    rho * y_source + (1 - rho) * y_transported."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    y_source = np.asarray(y_source, dtype=np.float64)
    y_transported = np.asarray(y_transported, dtype=np.float64)
    if y_source.shape != y_transported.shape:
        raise ValueError("interpolation needs paired samples of equal shape")
    return rho * y_source + (1.0 - rho) * y_transported


def _cost_matrix(tag: str, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    if tag == "sqeuclidean":
        return np.sum(diff * diff, axis=2)
    if tag == "abs":
        return np.sum(np.abs(diff), axis=2)
    raise ValueError(f"unsupported cost tag {tag!r}")


def exact_ot_1d(source, target, cost: str = "sqeuclidean") -> float:
    """Exact OT cost between equal-count, equal-weight 1-D samples.

    For convex costs of |a - b| the sorted (monotone) matching is optimal,
    so the cost is the mean of c(sort(A)_i, sort(B)_i).
    """
    a = np.asarray(source, dtype=np.float64).ravel()
    b = np.asarray(target, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"equal sample counts required, got {a.size} vs {b.size}")
    a, b = np.sort(a), np.sort(b)
    if cost == "sqeuclidean":
        return float(np.mean((a - b) ** 2))
    if cost == "abs":
        return float(np.mean(np.abs(a - b)))
    raise ValueError(f"unsupported cost tag {cost!r}")


def exact_assignment_ot(source, target, cost: str = "sqeuclidean"):
    """Minimum mean cost over permutations for equal-weight empirical measures.

    Returns (cost, permutation) with permutation sigma minimizing
    (1/n) sum_i c(a_i, b_sigma(i)), solved as a linear assignment problem.
    """
    A = np.atleast_2d(np.asarray(source, dtype=np.float64))
    B = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if A.shape != B.shape:
        raise ValueError(f"equal sample counts and dims required, got {A.shape} vs {B.shape}")
    n = A.shape[0]
    if n > ASSIGNMENT_CAP:
        raise ValueError(f"n={n} exceeds the assignment cap {ASSIGNMENT_CAP}")
    C = _cost_matrix(cost, A, B)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(n, dtype=int)
    perm[rows] = cols
    return float(C[rows, cols].mean()), perm


def empirical_w1_1d(A, B) -> float:
    """1-Wasserstein distance between equal-count 1-D samples:
    mean |sort(A)_i - sort(B)_i|."""
    return exact_ot_1d(A, B, cost="abs")
