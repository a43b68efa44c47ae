"""Reproducible random streams and samplers for the synthetic verification settings.

Every random draw in this package flows through :class:`RngStream`. Raw
uniforms come from a counter-based Philox generator keyed by a
``SeedSequence``; normals, gammas and betas are derived from those uniforms
with explicit transforms (polar-free Box-Muller, Marsaglia-Tsang), so a seed
pins the exact sample values and experiment outputs are byte-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RngStream",
    "JointDataset",
    "ConditionalGaussianSpec",
    "ToyCellData",
    "sample_beta",
    "gen_conditional_gaussian",
    "gen_toy_classification",
    "gen_toy_cell",
    "dataset_to_csv",
    "dataset_from_csv",
]


class RngStream:
    """Deterministic stream of draws with labelled, independent substreams.

    A stream is identified by a root seed plus a tuple of integer labels
    (the spawn key). ``child(label)`` derives an independent substream
    without consuming draws from the parent, so experiment cells can be
    seeded in any order and still reproduce.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in _spawn_key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, spawn_key={self.spawn_key})"

    def child(self, *labels: int) -> "RngStream":
        """Independent substream addressed by integer labels."""
        if not labels:
            raise ValueError("child() needs at least one label")
        return RngStream(self.seed, self.spawn_key + tuple(labels))

    # -- uniforms are the primitive draw; everything else is a transform --

    def uniforms(self, shape) -> np.ndarray:
        """i.i.d. uniforms on [0, 1), float64."""
        return self._gen.random(size=shape, dtype=np.float64)

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller on the uniform stream."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = self.uniforms(pairs)
        u2 = self.uniforms(pairs)
        # 1 - u1 lies in (0, 1], so the log is finite.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def gammas(self, alpha: float, n: int) -> np.ndarray:
        """Gamma(alpha, 1) draws via the Marsaglia-Tsang squeeze."""
        if alpha <= 0:
            raise ValueError(f"gamma shape must be positive, got {alpha}")
        if alpha < 1.0:
            # Boost: Gamma(a) = Gamma(a+1) * U^(1/a).
            g = self.gammas(alpha + 1.0, n)
            u = 1.0 - self.uniforms(n)  # (0, 1]
            return g * np.power(u, 1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n, dtype=np.float64)
        pending = np.arange(n)
        while pending.size:
            x = self.normals(pending.size)
            v = (1.0 + c * x) ** 3
            u = self.uniforms(pending.size)
            pos = v > 0.0
            logv = np.log(np.where(pos, v, 1.0))
            accept = pos & (
                np.log(np.maximum(u, np.finfo(float).tiny))
                < 0.5 * x * x + d - d * v + d * logv
            )
            out[pending[accept]] = d * v[accept]
            pending = pending[~accept]
        return out

    def betas(self, alpha: float, beta: float, n: int) -> np.ndarray:
        """Beta(alpha, beta) via the gamma-ratio construction."""
        if alpha <= 0 or beta <= 0:
            raise ValueError(f"beta shape parameters must be positive, got ({alpha}, {beta})")
        g1 = self.gammas(alpha, n)
        g2 = self.gammas(beta, n)
        return g1 / (g1 + g2)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n), via argsort of uniforms."""
        return np.argsort(self.uniforms(n), kind="stable")

    def categorical(self, probs: np.ndarray, n: int) -> np.ndarray:
        """n draws from a finite distribution, by inverse CDF on uniforms."""
        probs = np.asarray(probs, dtype=np.float64).ravel()
        if probs.min() < 0 or not np.isclose(probs.sum(), 1.0, atol=1e-9):
            raise ValueError("probs must be a probability vector")
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, self.uniforms(n), side="right")


@dataclass
class JointDataset:
    """Paired samples {(x_i, y_i)} from a joint distribution over (X, Y)."""

    X: np.ndarray  # (m, d_x)
    Y: np.ndarray  # (m, d_y)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(
                f"X and Y must pair row-wise, got {self.X.shape[0]} vs {self.Y.shape[0]}"
            )
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise ValueError("dataset entries must be finite")

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "JointDataset":
        return JointDataset(self.X[idx], self.Y[idx])


@dataclass(frozen=True)
class ConditionalGaussianSpec:
    """Covariate law Beta(alpha, beta) with y | x ~ Normal(mean(x), var(x)).

    Mean and variance are affine in x; the variance is floored away from zero
    so the law stays well defined on all of [0, 1].
    """

    alpha: float
    beta: float
    mean_slope: float
    mean_intercept: float
    var_slope: float = 0.0
    var_intercept: float = 1.0
    var_floor: float = 1e-8

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta shape parameters must be positive")
        if self.var_floor <= 0:
            raise ValueError("variance floor must be positive")
        for x in (0.0, 1.0):
            if self.var_slope * x + self.var_intercept <= 0:
                raise ValueError("variance must stay positive on [0, 1]")

    def mean(self, x):
        return self.mean_slope * np.asarray(x) + self.mean_intercept

    def variance(self, x):
        v = self.var_slope * np.asarray(x) + self.var_intercept
        return np.maximum(v, self.var_floor)


def sample_beta(stream: RngStream, alpha: float, beta: float, m: int) -> np.ndarray:
    """m i.i.d. Beta(alpha, beta) draws in (0, 1)."""
    return stream.betas(alpha, beta, m)


def gen_conditional_gaussian(
    stream: RngStream, spec: ConditionalGaussianSpec, m: int
) -> JointDataset:
    """Sample m pairs with x ~ Beta(alpha, beta) and y ~ N(mean(x), var(x))."""
    x = sample_beta(stream, spec.alpha, spec.beta, m)
    z = stream.normals(m)
    y = spec.mean(x) + np.sqrt(spec.variance(x)) * z
    return JointDataset(x[:, None], y[:, None])


def _simplex_vertices(n: int, dim: int) -> np.ndarray:
    """n points in R^dim with all pairwise distances equal to 1."""
    if dim < n - 1:
        raise ValueError(f"need dim >= n-1 to place {n} equidistant means")
    # Centered standard-basis vectors are pairwise sqrt(2) apart and span an
    # (n-1)-dimensional subspace; express them in an orthonormal basis of that
    # subspace (distances preserved), then rescale to unit separation.
    centered = np.eye(n) - 1.0 / n
    _, _, vt = np.linalg.svd(centered)
    coords = centered @ vt[: n - 1].T
    out = np.zeros((n, dim))
    out[:, : n - 1] = coords / np.sqrt(2.0)
    return out


def gen_toy_classification(
    stream: RngStream,
    n_classes: int,
    m: int,
    separation: float,
    dim: int = 2,
) -> JointDataset:
    """Gaussian blobs with one-hot labels; class means sit at pairwise
    distance ``separation`` from each other."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    means = separation * _simplex_vertices(n_classes, dim)
    labels = stream.categorical(np.full(n_classes, 1.0 / n_classes), m)
    X = means[labels] + stream.normals((m, dim))
    Y = np.eye(n_classes)[labels]
    return JointDataset(X, Y)


@dataclass
class ToyCellData:
    """Unperturbed population plus per-dosage perturbed sets.

    Each perturbed set is the unperturbed law translated by a known
    dosage-dependent vector, so ground-truth transport maps are analytic.
    """

    dosages: np.ndarray            # (q,) conditioning scalars
    unperturbed: np.ndarray        # (m, d)
    perturbed: list[np.ndarray] = field(default_factory=list)  # q sets, (m_i, d)
    shifts: np.ndarray = None      # (q, d) true translation per dosage


def gen_toy_cell(
    stream: RngStream,
    dosages,
    m_unperturbed: int,
    m_per_level,
    d: int,
    shift_scale: float = 1.0,
) -> ToyCellData:
    """Dosage-response toy: base population N(0, I), each dosage level's
    perturbed set shifted along a fixed direction by shift_scale * dosage."""
    dosages = np.asarray(dosages, dtype=np.float64)
    m_per_level = [int(m) for m in np.broadcast_to(m_per_level, dosages.shape)]
    if d < 1:
        raise ValueError("d must be >= 1")
    direction = np.zeros(d)
    direction[0] = 1.0
    shifts = shift_scale * dosages[:, None] * direction[None, :]
    unperturbed = stream.normals((m_unperturbed, d))
    perturbed = [
        stream.normals((mi, d)) + shifts[q]
        for q, mi in enumerate(m_per_level)
    ]
    return ToyCellData(dosages, unperturbed, perturbed, shifts)


def dataset_to_csv(dataset: JointDataset, path) -> None:
    """Headered CSV with columns x_0..x_{dx-1}, y_0..y_{dy-1}."""
    dx, dy = dataset.X.shape[1], dataset.Y.shape[1]
    header = [f"x_{j}" for j in range(dx)] + [f"y_{j}" for j in range(dy)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for xr, yr in zip(dataset.X, dataset.Y):
            # repr of a builtin float round-trips exactly
            writer.writerow([repr(float(v)) for v in xr] + [repr(float(v)) for v in yr])


def dataset_from_csv(path) -> JointDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dx = sum(1 for c in header if c.startswith("x_"))
        dy = sum(1 for c in header if c.startswith("y_"))
        if dx + dy != len(header):
            raise ValueError(f"unrecognized columns in {path}: {header}")
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=np.float64)
    return JointDataset(data[:, :dx], data[:, dx:])
