"""Distances between value distributions and the critic loss kernels.

The closed-form energy distance between Gaussian mixtures is built on the mean
of a folded normal, ``E|X|`` for ``X ~ N(mu, s)``.  Dirac atoms enter the same
formulas as zero-variance components, so every distance here accepts any
:data:`~distac.distcore.ValueDistribution`.

Batch kernels (``*_batch``) evaluate one loss per row and return gradients with
respect to the prediction side; the agent and the tabular lab train through
them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import integrate

from . import flops
from .distcore import (
    DiracMixture,
    ValueDistribution,
    cdf,
    components,
    ppf,
    std_normal_cdf,
)

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
CLAMP_TOL = 1e-9


class NumericAccuracyError(RuntimeError):
    """Raised when numeric quadrature misses its accuracy target."""


@dataclass(frozen=True)
class DistanceReport:
    value: float
    method: Literal["closed_form", "sample", "numeric_cdf"]
    sample_count: int | None = None


def _clamp(value: float) -> float:
    if value < -CLAMP_TOL:
        raise ArithmeticError(f"distance {value!r} is negative beyond rounding")
    return max(float(value), 0.0)


# ---------------------------------------------------------------------------
# folded normal
# ---------------------------------------------------------------------------

def folded_normal_abs_mean(mu, var, variant: str = "standard"):
    """``E|X|`` for ``X ~ N(mu, var)``, elementwise.

    ``variant="as_printed"`` evaluates the published loss expression, whose
    second term uses ``(mu)(1 - 2 Phi(mu / sqrt(2)))`` instead of
    ``mu (2 Phi(mu / sigma) - 1)``.  It is kept only to demonstrate that it
    disagrees with numeric integration; never train with it.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    sd = np.sqrt(var)
    safe_sd = np.where(sd > 0, sd, 1.0)
    gauss = sd * _SQRT_2_OVER_PI * np.exp(-0.5 * (mu / safe_sd) ** 2)
    if variant == "standard":
        lin = mu * (2.0 * std_normal_cdf(mu / safe_sd) - 1.0)
        out = gauss + lin
    elif variant == "as_printed":
        out = gauss + mu * (1.0 - 2.0 * std_normal_cdf(mu / np.sqrt(2.0)))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return np.where(sd > 0, out, np.abs(mu))


def _folded_partials(mu, var):
    """Partial derivatives of ``E|X|`` w.r.t. ``mu`` and ``var``."""
    sd = np.sqrt(var)
    safe_sd = np.where(sd > 0, sd, 1.0)
    u = mu / safe_sd
    d_mu = np.where(sd > 0, 2.0 * std_normal_cdf(u) - 1.0, np.sign(mu))
    d_var = np.where(sd > 0, _INV_SQRT_2PI * np.exp(-0.5 * u * u) / safe_sd, 0.0)
    return d_mu, d_var


# ---------------------------------------------------------------------------
# closed-form energy distance
# ---------------------------------------------------------------------------

_BLOCK = 1 << 21


def _delta(wu, mu_u, var_u, wv, mu_v, var_v) -> float:
    rows = max(1, _BLOCK // max(len(mu_v), 1))
    total = 0.0
    for i in range(0, len(mu_u), rows):
        d = mu_u[i:i + rows, None] - mu_v[None, :]
        s = var_u[i:i + rows, None] + var_v[None, :]
        total += float(wu[i:i + rows] @ folded_normal_abs_mean(d, s) @ wv)
    return total


def _self_delta(w, mu, var) -> float:
    """``E|U - U'|``; point masses use the sorted O(n log n) pair sum."""
    if np.all(var == 0):
        return _sorted_pair_sum(mu, w)
    return _delta(w, mu, var, w, mu, var)


def delta_gmm(U: ValueDistribution, V: ValueDistribution) -> float:
    """``E|U - V|`` for independent mixtures (cross expectation)."""
    return _delta(*components(U), *components(V))


def _dedupe(w, mu, var):
    """Merge exactly repeated components (pooled SR samples repeat a lot)."""
    key = np.stack([mu, var], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    return np.bincount(inv.ravel(), weights=w), uniq[:, 0], uniq[:, 1]


def energy_gmm(U: ValueDistribution, V: ValueDistribution) -> float:
    """Closed-form energy distance ``2E|U-V| - E|U-U'| - E|V-V'|``."""
    cu, cv = components(U), components(V)
    value = 2.0 * _delta(*cu, *cv) - _delta(*cu, *cu) - _delta(*cv, *cv)
    return _clamp(value)


def _sorted_pair_sum(x, w):
    """``sum_{i,j} w_i w_j |x_i - x_j|`` in O(n log n)."""
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cw = np.cumsum(ws)
    cwx = np.cumsum(ws * xs)
    # each x_k contributes w_k * (x_k * W_<k - sum_<k w x) twice
    below_w = cw - ws
    below_wx = cwx - ws * xs
    return float(2.0 * np.sum(ws * (xs * below_w - below_wx)))


def _weighted_energy_points(x, wx, y, wy) -> float:
    """Energy distance between two weighted point sets via the CDF identity."""
    z = np.concatenate([x, y])
    s_all = _sorted_pair_sum(z, np.concatenate([wx, -wy]))
    # sum over (x,x) + (y,y) - 2 (x,y) cross terms == -(energy)
    return _clamp(-s_all)


def energy_samples(xs, ys) -> float:
    """V-statistic sample energy distance between two point sets."""
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if len(xs) < 1 or len(ys) < 1:
        raise ValueError("both sample sets must be nonempty")
    return _weighted_energy_points(xs, np.full(len(xs), 1.0 / len(xs)),
                                   ys, np.full(len(ys), 1.0 / len(ys)))


def energy_distance(P: ValueDistribution, Q: ValueDistribution) -> DistanceReport:
    """Energy distance between any two representations.

    Dirac-vs-Dirac uses the exact sorted formula; anything involving a Gaussian
    component uses the closed form after merging duplicate components.
    """
    if isinstance(P, DiracMixture) and isinstance(Q, DiracMixture):
        value = _weighted_energy_points(P.atoms, P.probs, Q.atoms, Q.probs)
        return DistanceReport(value, "closed_form")
    cu, cv = _dedupe(*components(P)), _dedupe(*components(Q))
    value = 2.0 * _delta(*cu, *cv) - _self_delta(*cu) - _self_delta(*cv)
    return DistanceReport(_clamp(value), "closed_form")


# ---------------------------------------------------------------------------
# numeric CDF distances
# ---------------------------------------------------------------------------

def cramer_lp_numeric(P: ValueDistribution, Q: ValueDistribution, p: float = 2.0) -> float:
    """``(int |F_P - F_Q|^p dz)^(1/p)`` by adaptive quadrature.

    The domain is the union support padded by 8 standard deviations and is
    split at every atom and component mean so each piece is smooth.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    wp, mp, vp = components(P)
    wq, mq, vq = components(Q)
    sd_max = float(np.sqrt(max(vp.max(), vq.max())))
    lo = min(mp.min(), mq.min()) - 8.0 * sd_max
    hi = max(mp.max(), mq.max()) + 8.0 * sd_max
    knots = np.unique(np.concatenate([[lo, hi], mp, mq]))
    if sd_max == 0.0:
        # both sides are point sets: the integrand is piecewise constant
        mids = 0.5 * (knots[1:] + knots[:-1])
        diff = np.abs(cdf(P, mids) - cdf(Q, mids)) ** p
        return float(np.sum(diff * np.diff(knots)) ** (1.0 / p))

    def integrand(z):
        return abs(float(cdf(P, z)) - float(cdf(Q, z))) ** p

    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b - a <= 0:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, err = integrate.quad(integrand, a, b, epsabs=1e-11, epsrel=1e-10, limit=200)
            except integrate.IntegrationWarning as exc:
                raise NumericAccuracyError(f"quadrature on [{a}, {b}] failed: {exc}") from exc
        if err > 1e-6:
            raise NumericAccuracyError(f"quadrature error {err:.2e} on [{a}, {b}]")
        total += val
    return float(total ** (1.0 / p))


def wasserstein_p_numeric(
    P: ValueDistribution, Q: ValueDistribution, p: float = 1.0, grid_bits: int = 14
) -> float:
    """``(int_0^1 |F_P^-1(u) - F_Q^-1(u)|^p du)^(1/p)`` by midpoint rule."""
    if p < 1:
        raise ValueError("p must be >= 1")
    n = 2**grid_bits
    u = (np.arange(n) + 0.5) / n
    diff = np.abs(ppf(P, u) - ppf(Q, u))
    return float(np.mean(diff**p) ** (1.0 / p))


# ---------------------------------------------------------------------------
# Huber quantile loss
# ---------------------------------------------------------------------------

def quantile_fractions(m: int) -> np.ndarray:
    """Midpoint fractions ``(2i - 1) / 2m``."""
    return (2.0 * np.arange(1, m + 1) - 1.0) / (2.0 * m)


def _huber(delta, kappa):
    a = np.abs(delta)
    return np.where(a <= kappa, 0.5 * delta * delta, kappa * (a - 0.5 * kappa))


def huber_quantile_loss(targets, values, taus, kappa: float = 1.0) -> float:
    """Quantile Huber loss of predictions ``values`` at fractions ``taus``."""
    loss, _ = huber_quantile_batch(
        np.asarray(values, dtype=float)[None, :],
        np.asarray(taus, dtype=float),
        np.asarray(targets, dtype=float)[None, :],
        kappa,
    )
    return float(loss[0])


def huber_quantile_batch(pred, taus, target, kappa: float = 1.0):
    """Row-wise quantile Huber loss and its gradient w.r.t. ``pred``.

    ``pred``: (B, N) quantile values at fractions ``taus`` (N,);
    ``target``: (B, N') target atoms.  Returns ``(loss (B,), grad (B, N))``.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    taus = np.asarray(taus, dtype=float)
    if np.any((taus <= 0) | (taus >= 1)):
        raise ValueError("taus must lie in (0, 1)")
    b, n = pred.shape
    n_t = target.shape[1]
    delta = target[:, None, :] - pred[:, :, None]  # (B, N, N')
    neg = delta < 0
    weight = np.abs(taus[None, :, None] - neg)
    loss = np.sum(weight * _huber(delta, kappa), axis=(1, 2)) / (kappa * n_t)
    dh = np.clip(delta, -kappa, kappa)  # derivative of the Huber branch
    grad = -np.sum(weight * dh, axis=2) / (kappa * n_t)
    pairs = b * n * n_t
    flops.record(elementwise=9 * pairs, compare=2 * pairs)
    return loss, grad


# ---------------------------------------------------------------------------
# sample energy loss
# ---------------------------------------------------------------------------

def energy_samples_batch(pred, target, with_target_term: bool = True):
    """Row-wise sample energy distance and its gradient w.r.t. ``pred``.

    The target-target term has no gradient; ``with_target_term=False`` skips
    it and returns the loss up to that additive constant.
    """
    b, n = pred.shape
    n_t = target.shape[1]
    cross = pred[:, :, None] - target[:, None, :]
    selfd = pred[:, :, None] - pred[:, None, :]
    loss = 2.0 * np.abs(cross).mean(axis=(1, 2)) - np.abs(selfd).mean(axis=(1, 2))
    if with_target_term:
        tt = target[:, :, None] - target[:, None, :]
        loss = loss - np.abs(tt).mean(axis=(1, 2))
        flops.record(elementwise=2 * b * n_t * n_t)
    grad = (2.0 / (n * n_t)) * np.sign(cross).sum(axis=2) - (2.0 / (n * n)) * np.sign(selfd).sum(axis=2)
    pairs = b * (n * n_t + n * n)
    flops.record(elementwise=4 * pairs, compare=pairs)
    return loss, grad


# ---------------------------------------------------------------------------
# Gaussian-mixture energy loss
# ---------------------------------------------------------------------------

def _delta_terms(w1, m1, v1, w2, m2, v2):
    d = m1[:, :, None] - m2[:, None, :]
    s = v1[:, :, None] + v2[:, None, :]
    f = folded_normal_abs_mean(d, s)
    f_mu, f_var = _folded_partials(d, s)
    ww = w1[:, :, None] * w2[:, None, :]
    return f, f_mu, f_var, ww


def energy_gmm_batch(w, mu, var, tw, tmu, tvar, with_target_term: bool = True):
    """Row-wise closed-form energy loss between predicted and target mixtures.

    Prediction parameters ``w, mu, var`` are (B, K); targets are (B, M).
    Returns ``(loss (B,), (grad_w, grad_mu, grad_var))`` with gradients w.r.t.
    the raw mixture parameters of the prediction.
    """
    b, k = w.shape
    m = tw.shape[1]
    f_c, fmu_c, fvar_c, ww_c = _delta_terms(w, mu, var, tw, tmu, tvar)
    f_s, fmu_s, fvar_s, ww_s = _delta_terms(w, mu, var, w, mu, var)
    loss = 2.0 * np.sum(ww_c * f_c, axis=(1, 2)) - np.sum(ww_s * f_s, axis=(1, 2))
    if with_target_term:
        f_t = folded_normal_abs_mean(tmu[:, :, None] - tmu[:, None, :],
                                     tvar[:, :, None] + tvar[:, None, :])
        loss = loss - np.einsum("bi,bij,bj->b", tw, f_t, tw)
        flops.record(elementwise=8 * b * m * m, special=3 * b * m * m, madd=2 * b * m * m)
    # cross term 2 sum_ij w_i v_j f(mu_i - nu_j, var_i + tau_j)
    g_w = 2.0 * np.einsum("bij,bj->bi", f_c, tw)
    g_mu = 2.0 * np.sum(ww_c * fmu_c, axis=2)
    g_var = 2.0 * np.sum(ww_c * fvar_c, axis=2)
    # self term sum_ii' w_i w_i' f(mu_i - mu_i', var_i + var_i'); symmetric
    g_w -= 2.0 * np.einsum("bij,bj->bi", f_s, w)
    g_mu -= 2.0 * np.sum(ww_s * fmu_s, axis=2)
    g_var -= 2.0 * np.sum(ww_s * fvar_s, axis=2)
    pairs = b * (k * m + k * k)
    # forward: diff, sum, sqrt, ratio, square, exp, erfc, 4 combine ops, weight madd
    # backward: 2 partials (reuse ratio/exp/erfc) + 3 weighted accumulations
    flops.record(elementwise=14 * pairs, special=3 * pairs, madd=5 * pairs)
    return loss, (g_w, g_mu, g_var)


def energy_gmm_grad(U, V):
    """Gradient of ``energy_gmm(U, V)`` w.r.t. U's weights, means, variances."""
    wu, mu_u, var_u = components(U)
    wv, mu_v, var_v = components(V)
    _, (gw, gm, gv) = energy_gmm_batch(wu[None], mu_u[None], var_u[None],
                                       wv[None], mu_v[None], var_v[None])
    return gw[0], gm[0], gv[0]
