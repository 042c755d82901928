"""Value-distribution representations: Gaussian mixtures and Dirac mixtures.

Both types are immutable; every operation returns a new object.  A Dirac
mixture normally carries equal weights, but may hold explicit weights when it
represents an exact finite mixture (e.g. a truncated lambda-return law).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import erfc

VARIANCE_FLOOR = 1e-8
_WEIGHT_TOL = 1e-9


def std_normal_cdf(z):
    """Standard normal CDF via the complementary error function."""
    return 0.5 * erfc(-np.asarray(z, dtype=float) / np.sqrt(2.0))


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        mu = np.atleast_1d(np.asarray(self.means, dtype=float)).copy()
        var = np.atleast_1d(np.asarray(self.variances, dtype=float)).copy()
        if not (w.ndim == mu.ndim == var.ndim == 1):
            raise ValueError("mixture parameters must be one-dimensional")
        if not (len(w) == len(mu) == len(var)) or len(w) < 1:
            raise ValueError("need K >= 1 components with matching parameter lengths")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("means and variances must be finite")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @classmethod
    def from_unnormalized(cls, weights, means, variances):
        """Build a mixture after renormalizing weights and flooring variances."""
        w = np.asarray(weights, dtype=float)
        var = np.maximum(np.asarray(variances, dtype=float), VARIANCE_FLOOR)
        return cls(w / w.sum(), means, var)

    @classmethod
    def single(cls, mean, variance):
        return cls([1.0], [mean], [max(float(variance), VARIANCE_FLOOR)])

    @property
    def k(self) -> int:
        return len(self.weights)

    def __repr__(self):
        comps = ", ".join(
            f"({w:.4g}, {m:.4g}, {v:.4g})"
            for w, m, v in zip(self.weights, self.means, self.variances)
        )
        return f"GaussianMixture[{comps}]"


@dataclass(frozen=True, eq=False)
class DiracMixture:
    atoms: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.atoms, dtype=float)).copy()
        if x.ndim != 1 or len(x) < 1:
            raise ValueError("need at least one atom")
        if not np.all(np.isfinite(x)):
            raise ValueError("atoms must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "atoms", x)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).copy()
            if w.shape != x.shape:
                raise ValueError("weights must match atoms")
            if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
                raise ValueError("weights must be nonnegative and sum to 1")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return len(self.atoms)

    @property
    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.m, 1.0 / self.m)
        return self.weights

    def __repr__(self):
        if self.weights is None:
            return f"DiracMixture({np.array2string(self.atoms, precision=4)})"
        return (
            f"DiracMixture({np.array2string(self.atoms, precision=4)}, "
            f"weights={np.array2string(self.weights, precision=4)})"
        )


ValueDistribution = Union[GaussianMixture, DiracMixture]


def components(d: ValueDistribution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(weights, means, variances)``; Dirac atoms get zero variance."""
    if isinstance(d, GaussianMixture):
        return d.weights, d.means, d.variances
    if isinstance(d, DiracMixture):
        return d.probs, d.atoms, np.zeros(d.m)
    raise TypeError(f"not a value distribution: {type(d).__name__}")


def from_components(weights, means, variances) -> ValueDistribution:
    """Inverse of :func:`components`: all-zero variances give a Dirac mixture."""
    weights = np.asarray(weights, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if np.all(variances == 0):
        if np.allclose(weights, weights[0], rtol=0, atol=1e-15):
            return DiracMixture(means)
        return DiracMixture(means, weights / weights.sum())
    return GaussianMixture.from_unnormalized(weights, means, variances)


def mean(d: ValueDistribution) -> float:
    w, mu, _ = components(d)
    return float(np.dot(w, mu))


def variance(d: ValueDistribution) -> float:
    w, mu, var = components(d)
    m = np.dot(w, mu)
    return float(max(np.dot(w, var + (mu - m) ** 2), 0.0))


def cdf(d: ValueDistribution, z):
    """CDF evaluated at scalar or array ``z``."""
    z = np.asarray(z, dtype=float)
    if isinstance(d, GaussianMixture):
        sd = np.sqrt(d.variances)
        u = (z[..., None] - d.means) / sd
        return std_normal_cdf(u) @ d.weights
    w, x, _ = components(d)
    order = np.argsort(x, kind="stable")
    xs, cw = x[order], np.cumsum(w[order])
    idx = np.searchsorted(xs, z, side="right")
    out = np.where(idx > 0, cw[np.maximum(idx - 1, 0)], 0.0)
    return np.minimum(out, 1.0) if out.ndim else float(min(out, 1.0))


def sample(d: ValueDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    w, mu, var = components(d)
    if len(w) == 1:
        k = np.zeros(n, dtype=int)
    else:
        k = rng.choice(len(w), size=n, p=w)
    if isinstance(d, DiracMixture):
        return mu[k].copy()
    return mu[k] + np.sqrt(var[k]) * rng.standard_normal(n)


def affine(d: ValueDistribution, shift: float, scale: float) -> ValueDistribution:
    """Distribution of ``shift + scale * Z``."""
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    if isinstance(d, DiracMixture):
        return DiracMixture(shift + scale * d.atoms, d.weights)
    var = np.maximum(scale**2 * d.variances, VARIANCE_FLOOR)
    return GaussianMixture(d.weights, shift + scale * d.means, var)


def quantile(d: DiracMixture, tau: float) -> float:
    """Generalized inverse of the empirical CDF."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if not isinstance(d, DiracMixture):
        raise TypeError("quantile is defined for Dirac mixtures")
    order = np.argsort(d.atoms, kind="stable")
    xs = d.atoms[order]
    if d.weights is None:
        return float(xs[int(np.ceil(tau * d.m)) - 1])
    cw = np.cumsum(d.weights[order])
    idx = min(int(np.searchsorted(cw, tau - 1e-15, side="left")), d.m - 1)
    return float(xs[idx])


def ppf(d: ValueDistribution, u) -> np.ndarray:
    """Inverse CDF at an array of probabilities, any representation.

    Gaussian mixtures are inverted by vectorized bisection to ~1e-12.
    """
    u = np.asarray(u, dtype=float)
    if isinstance(d, DiracMixture):
        w, x, _ = components(d)
        order = np.argsort(x, kind="stable")
        cw = np.cumsum(w[order])
        idx = np.minimum(np.searchsorted(cw, u - 1e-15, side="left"), d.m - 1)
        return x[order][idx]
    sd = np.sqrt(d.variances)
    lo = np.full(u.shape, float(np.min(d.means - 40 * sd)))
    hi = np.full(u.shape, float(np.max(d.means + 40 * sd)))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = cdf(d, mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < 1e-12:
            break
    return 0.5 * (lo + hi)


def support_bounds(d: ValueDistribution, pad_sd: float = 8.0) -> tuple[float, float]:
    w, mu, var = components(d)
    sd = float(np.sqrt(var.max()))
    return float(mu.min() - pad_sd * sd), float(mu.max() + pad_sd * sd)


def pdf(d: GaussianMixture, z):
    z = np.asarray(z, dtype=float)
    u = (z[..., None] - d.means) / np.sqrt(d.variances)
    dens = np.exp(-0.5 * u**2) / np.sqrt(2 * np.pi * d.variances)
    return dens @ d.weights
