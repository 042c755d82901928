"""Multi-step distributional targets: n-step laws, exact lambda mixtures, SR(lambda).

Indexing convention: a trajectory of length N has rewards ``r_0 .. r_{N-1}``
and ``values[t]`` is the critic distribution of the *successor* state
``x_{t+1}``, so ``values[-1]`` is the bootstrap ``Z(x_N)``.

Episode boundaries inside a trajectory are flagged per step: ``terminals[t]``
means ``x_{t+1}`` is terminal (successor value 0); ``truncated[t]`` means the
episode was cut after step t and ``values[t]`` is bootstrapped.

Sample replacement runs a reverse sweep over a working set of m particles
(atoms, or Gaussian ``(mu, var)`` pairs).  All random draws for a sweep are
taken up front as ``(N, m)`` uniform arrays, so draw ``[t, i]`` is tied to step
t and slot i regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distcore import (
    VARIANCE_FLOOR,
    DiracMixture,
    GaussianMixture,
    ValueDistribution,
    affine,
    components,
    from_components,
    mean,
)
from .metrics import DistanceReport, energy_distance

LambdaTargets = list  # list[ValueDistribution], one per step t = 0 .. N-1


@dataclass(frozen=True, eq=False)
class RewardTrajectory:
    rewards: np.ndarray
    values: Sequence[ValueDistribution]
    gamma: float
    lam: float
    terminals: np.ndarray = field(default=None)
    truncated: np.ndarray = field(default=None)

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.rewards, dtype=float))
        n = len(r)
        if n < 1:
            raise ValueError("trajectory needs at least one step")
        if len(self.values) != n:
            raise ValueError("need one successor value distribution per step")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        term = np.zeros(n, bool) if self.terminals is None else np.asarray(self.terminals, bool)
        trunc = np.zeros(n, bool) if self.truncated is None else np.asarray(self.truncated, bool)
        if term.shape != (n,) or trunc.shape != (n,):
            raise ValueError("flag arrays must match the number of rewards")
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "terminals", term)
        object.__setattr__(self, "truncated", trunc)

    @property
    def n(self) -> int:
        return len(self.rewards)

    @property
    def bootstrap(self) -> ValueDistribution:
        return self.values[-1]

    def horizon(self, t: int) -> int:
        """Steps from t up to and including the first episode boundary."""
        ends = np.flatnonzero(self.terminals[t:] | self.truncated[t:])
        return int(ends[0]) + 1 if len(ends) else self.n - t


def _point_like(d: ValueDistribution, value: float) -> ValueDistribution:
    if isinstance(d, GaussianMixture):
        return GaussianMixture.single(value, VARIANCE_FLOOR)
    return DiracMixture([value])


def n_step_target(traj: RewardTrajectory, t: int, n: int) -> ValueDistribution:
    """Law of ``sum_{i<n} gamma^i r_{t+i} + gamma^n Z(x_{t+n})``.

    A terminal flag inside the window collapses the law to a point mass at the
    partial return; a truncation flag bootstraps early from that step.
    """
    if n < 1 or t < 0 or t + n > traj.n:
        raise ValueError(f"horizon overrun: t={t}, n={n}, N={traj.n}")
    n_eff = min(n, traj.horizon(t))
    disc = traj.gamma ** np.arange(n_eff)
    partial = float(np.dot(disc, traj.rewards[t : t + n_eff]))
    last = t + n_eff - 1
    if traj.terminals[last]:
        return _point_like(traj.values[last], partial)
    return affine(traj.values[last], partial, traj.gamma**n_eff)


def lambda_weights(horizon: int, lam: float) -> np.ndarray:
    """Truncated geometric weights over n = 1..horizon; the tail lumps on the last."""
    n = np.arange(1, horizon + 1)
    w = (1.0 - lam) * lam ** (n - 1)
    w[-1] = lam ** (horizon - 1)
    return w


def exact_lambda_mixture(traj: RewardTrajectory, t: int) -> ValueDistribution:
    """Exact truncated lambda-return law at step t as a finite mixture."""
    if not 0 <= t < traj.n:
        raise ValueError("t out of range")
    h = traj.horizon(t)
    weights = lambda_weights(h, traj.lam)
    ws, ms, vs = [], [], []
    for n, wn in enumerate(weights, start=1):
        if wn == 0.0:
            continue
        w, mu, var = components(n_step_target(traj, t, n))
        ws.append(wn * w)
        ms.append(mu)
        vs.append(var)
    w, mu, var = np.concatenate(ws), np.concatenate(ms), np.concatenate(vs)
    if all(isinstance(v, DiracMixture) for v in traj.values):
        var = np.zeros_like(var)
    return from_components(w, mu, var)


def lambda_returns_scalar(rewards, next_values, gamma, lam, terminals=None, truncated=None):
    """Truncated scalar lambda-returns by the backward recursion.

    ``next_values[t]`` is ``V(x_{t+1})``.  Works on the last axis, so batched
    ``(E, N)`` inputs are accepted.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(next_values, dtype=float)
    term = np.zeros(r.shape, bool) if terminals is None else np.asarray(terminals, bool)
    trunc = np.zeros(r.shape, bool) if truncated is None else np.asarray(truncated, bool)
    out = np.empty_like(r)
    n = r.shape[-1]
    g = v[..., n - 1]
    for t in range(n - 1, -1, -1):
        boot = v[..., t]
        if t < n - 1:
            g = (1.0 - lam) * boot + lam * g
        g = np.where(trunc[..., t] | (t == n - 1), boot, g)
        g = r[..., t] + gamma * np.where(term[..., t], 0.0, g)
        out[..., t] = g
    return out


# ---------------------------------------------------------------------------
# batched sweeps
# ---------------------------------------------------------------------------

def sweep_atoms(rewards, next_atoms, terminals, truncated, gamma, lam, u_rep, resample_idx=None):
    """SR(lambda) over Dirac particles, batched over a leading env axis.

    rewards, terminals, truncated: (E, N); next_atoms, u_rep: (E, N, m) where
    ``next_atoms[:, t]`` are the critic atoms of ``x_{t+1}``.  Replacement of
    slot i takes atom i of ``Z(x_t)``.  When ``resample_idx`` (E, N, m) is
    given, the working set is redrawn from itself with those indices right
    after each target is recorded.  Returns targets (E, N, m).
    """
    e, n, m = next_atoms.shape
    out = np.empty((e, n, m))
    x = next_atoms[:, n - 1].copy()
    keep = 1.0 - lam
    for t in range(n - 1, -1, -1):
        reset = truncated[:, t] if t < n - 1 else np.ones(e, bool)
        x = np.where(reset[:, None], next_atoms[:, t], x)
        x = np.where(terminals[:, t][:, None], 0.0, x)
        x = rewards[:, t][:, None] + gamma * x
        out[:, t] = x
        if t > 0:
            if resample_idx is not None:
                x = np.take_along_axis(x, resample_idx[:, t], axis=1)
            x = np.where(u_rep[:, t] < keep, next_atoms[:, t - 1], x)
    return out


def _categorical(w, u):
    """Inverse-CDF categorical draws: w (E, K), u (E, m) -> indices (E, m)."""
    cw = np.cumsum(w, axis=-1)
    idx = (u[..., :, None] >= cw[..., None, :]).sum(axis=-1)
    return np.minimum(idx, w.shape[-1] - 1)


def sweep_params(rewards, next_w, next_mu, next_var, terminals, truncated,
                 gamma, lam, u_rep, u_cat):
    """SR(lambda) over Gaussian ``(mu, var)`` particles, batched over envs.

    next_w/next_mu/next_var: (E, N, K) successor mixtures; u_rep, u_cat:
    (E, N, m).  Slot i drawn from ``Z(x_{t+1})`` uses component
    ``Categorical(w)`` via ``u_cat[:, t, i]``.  Returns (mu, var), each (E, N, m).
    """
    e, n, _ = next_w.shape
    m = u_rep.shape[2]
    pick = _categorical(next_w, u_cat)  # (E, N, m)
    draw_mu = np.take_along_axis(next_mu, pick, axis=2)
    draw_var = np.take_along_axis(next_var, pick, axis=2)
    out_mu = np.empty((e, n, m))
    out_var = np.empty((e, n, m))
    mu = draw_mu[:, n - 1].copy()
    var = draw_var[:, n - 1].copy()
    keep = 1.0 - lam
    g2 = gamma * gamma
    for t in range(n - 1, -1, -1):
        reset = (truncated[:, t] if t < n - 1 else np.ones(e, bool))[:, None]
        mu = np.where(reset, draw_mu[:, t], mu)
        var = np.where(reset, draw_var[:, t], var)
        term = terminals[:, t][:, None]
        mu = np.where(term, 0.0, mu)
        var = np.where(term, VARIANCE_FLOOR, var)
        mu = rewards[:, t][:, None] + gamma * mu
        var = np.maximum(g2 * var, VARIANCE_FLOOR)
        out_mu[:, t] = mu
        out_var[:, t] = var
        if t > 0:
            swap = u_rep[:, t] < keep
            mu = np.where(swap, draw_mu[:, t - 1], mu)
            var = np.where(swap, draw_var[:, t - 1], var)
    return out_mu, out_var


# ---------------------------------------------------------------------------
# per-trajectory API
# ---------------------------------------------------------------------------

def _flags(traj):
    return traj.rewards[None], traj.terminals[None], traj.truncated[None]


def sr_lambda_dirac(traj: RewardTrajectory, rng: np.random.Generator,
                    resample: bool = False) -> LambdaTargets:
    """SR(lambda) targets for a critic represented by m-atom Dirac mixtures.

    With ``resample=True`` the working set is redrawn with replacement from
    itself after each target is recorded; the default keeps it as is.
    """
    if not all(isinstance(v, DiracMixture) for v in traj.values):
        raise TypeError("sr_lambda_dirac needs Dirac-mixture critic values")
    m = traj.values[0].m
    if any(v.m != m for v in traj.values):
        raise ValueError("all critic distributions must carry the same atom count")
    atoms = np.stack([v.atoms for v in traj.values])[None]
    u_rep = rng.random((traj.n, m))[None]
    idx = rng.integers(0, m, size=(1, traj.n, m)) if resample else None
    r, term, trunc = _flags(traj)
    out = sweep_atoms(r, atoms, term, trunc, traj.gamma, traj.lam, u_rep, idx)[0]
    return [DiracMixture(row) for row in out]


def _stack_mixtures(values):
    k = max(components(v)[0].size for v in values)
    w = np.zeros((len(values), k))
    mu = np.zeros((len(values), k))
    var = np.full((len(values), k), VARIANCE_FLOOR)
    for t, v in enumerate(values):
        cw, cm, cv = components(v)
        w[t, : cw.size], mu[t, : cm.size], var[t, : cv.size] = cw, cm, np.maximum(cv, VARIANCE_FLOOR)
    return w, mu, var


def sr_lambda_gmm(traj: RewardTrajectory, m: int, rng: np.random.Generator) -> LambdaTargets:
    """SR(lambda) on Gaussian parameters; each target is an equal-weight m-mixture."""
    if m < 1:
        raise ValueError("m must be >= 1")
    w, mu, var = _stack_mixtures(traj.values)
    u_rep = rng.random((traj.n, m))[None]
    u_cat = rng.random((traj.n, m))[None]
    r, term, trunc = _flags(traj)
    out_mu, out_var = sweep_params(r, w[None], mu[None], var[None], term, trunc,
                                   traj.gamma, traj.lam, u_rep, u_cat)
    return [GaussianMixture(np.full(m, 1.0 / m), a, b) for a, b in zip(out_mu[0], out_var[0])]


def sr_lambda_distribution_check(traj: RewardTrajectory, m: int, replications: int,
                                 seed: int = 0, t: int = 0) -> DistanceReport:
    """Energy distance between pooled SR(lambda) output and the exact mixture.

    Dirac critic values run the atom sweep (``m`` is then the atom count);
    Gaussian critic values run the parameter sweep with ``m`` particles.
    """
    if traj.n > 16 or m > 256:
        raise ValueError("distribution check is sized for tabular trajectories (N<=16, m<=256)")
    rng = np.random.default_rng(seed)
    dirac = all(isinstance(v, DiracMixture) for v in traj.values)
    pooled_mu, pooled_var = [], []
    for _ in range(replications):
        if dirac:
            target = sr_lambda_dirac(traj, rng)[t]
            pooled_mu.append(target.atoms)
        else:
            target = sr_lambda_gmm(traj, m, rng)[t]
            pooled_mu.append(target.means)
            pooled_var.append(target.variances)
    mu = np.concatenate(pooled_mu)
    w = np.full(mu.size, 1.0 / mu.size)
    pooled = DiracMixture(mu) if dirac else GaussianMixture(w, mu, np.concatenate(pooled_var))
    report = energy_distance(pooled, exact_lambda_mixture(traj, t))
    return DistanceReport(report.value, "closed_form", sample_count=int(mu.size))


def target_means(targets: LambdaTargets) -> np.ndarray:
    return np.array([mean(d) for d in targets])
