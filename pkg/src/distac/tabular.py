"""Tabular distributional Bellman laboratory.

Finite MDPs with stochastic reward laws, exact application of the
distributional Bellman operators on mixture tables, Monte Carlo ground truth,
contraction checks and the five-state fitting experiment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .distcore import (
    VARIANCE_FLOOR,
    DiracMixture,
    GaussianMixture,
    ValueDistribution,
    components,
    from_components,
    mean,
)
from .metrics import (
    cramer_lp_numeric,
    energy_distance,
    energy_gmm_batch,
    energy_samples_batch,
    folded_normal_abs_mean,
    huber_quantile_batch,
    quantile_fractions,
)
from .nn import Adam, softplus, softplus_grad, softmax
from .srlambda import sweep_atoms, sweep_params

log = logging.getLogger(__name__)

MAX_COMPONENTS = 256
STEP_CAP = 100_000


@dataclass(frozen=True)
class RewardLaw:
    """Reward distribution of one (state, action) pair."""

    kind: Literal["constant", "discrete", "normal"]
    values: tuple
    probs: tuple | None = None

    def __post_init__(self):
        if self.kind == "constant" and len(self.values) != 1:
            raise ValueError("constant law takes one value")
        if self.kind == "normal" and (len(self.values) != 2 or self.values[1] < 0):
            raise ValueError("normal law takes (mean, variance >= 0)")
        if self.kind == "discrete":
            p = np.asarray(self.probs, float)
            if p.shape != (len(self.values),) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
                raise ValueError("discrete law needs one probability per outcome, summing to 1")
        if self.kind not in ("constant", "discrete", "normal"):
            raise ValueError(f"unknown reward law {self.kind!r}")

    @classmethod
    def constant(cls, c: float) -> "RewardLaw":
        return cls("constant", (float(c),))

    @classmethod
    def discrete(cls, values, probs=None) -> "RewardLaw":
        values = tuple(float(v) for v in values)
        if probs is None:
            probs = (1.0 / len(values),) * len(values)
        return cls("discrete", values, tuple(float(p) for p in probs))

    @classmethod
    def normal(cls, mu: float, var: float) -> "RewardLaw":
        return cls("normal", (float(mu), float(var)))

    def components(self):
        if self.kind == "constant":
            return np.ones(1), np.array(self.values), np.zeros(1)
        if self.kind == "discrete":
            return np.array(self.probs), np.array(self.values), np.zeros(len(self.values))
        return np.ones(1), np.array([self.values[0]]), np.array([self.values[1]])

    def mean(self) -> float:
        w, mu, _ = self.components()
        return float(w @ mu)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.values[0])
        if self.kind == "discrete":
            return rng.choice(np.array(self.values), size=n, p=np.array(self.probs))
        return self.values[0] + np.sqrt(self.values[1]) * rng.standard_normal(n)


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transitions: np.ndarray  # (S, A, S)
    rewards: tuple  # rewards[s][a] -> RewardLaw
    gamma: float
    terminal: np.ndarray = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError("transitions must have shape (S, A, S)")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("each P(.|x,a) must be a probability vector")
        s, a, _ = p.shape
        if len(self.rewards) != s or any(len(row) != a for row in self.rewards):
            raise ValueError("need one reward law per (state, action)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        term = np.zeros(s, bool) if self.terminal is None else np.asarray(self.terminal, bool)
        for x in np.flatnonzero(term):
            for act in range(a):
                law = self.rewards[x][act]
                if p[x, act, x] != 1.0 or law.kind != "constant" or law.values[0] != 0.0:
                    raise ValueError(f"terminal state {x} must self-absorb with zero reward")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", tuple(tuple(r) for r in self.rewards))
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def uniform_policy(self) -> np.ndarray:
        return np.full((self.n_states, self.n_actions), 1.0 / self.n_actions)

    def scalar_bellman(self, v: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """Scalar evaluation operator on a state-value vector."""
        r = np.array([[law.mean() for law in row] for row in self.rewards])
        q = r + self.gamma * self.transitions @ v
        return np.sum(pi * q, axis=1)


def five_state_mdp(gamma: float = 1.0, reward_noise_var: float = 0.01) -> TabularMDP:
    """Chain S1 -> S2 -> S3 -> S4 -> S5 -> T with two stochastic rewards.

    Leaving S4 pays Uniform{-1, +1}; leaving S5 pays N(0, reward_noise_var).
    State 5 is the absorbing terminal.
    """
    p = np.zeros((6, 1, 6))
    for s in range(5):
        p[s, 0, s + 1] = 1.0
    p[5, 0, 5] = 1.0
    zero = RewardLaw.constant(0.0)
    rewards = [[zero], [zero], [zero], [RewardLaw.discrete([-1.0, 1.0])],
               [RewardLaw.normal(0.0, reward_noise_var)], [zero]]
    return TabularMDP(p, rewards, gamma, terminal=[False] * 5 + [True])


def five_state_truth(gamma: float = 1.0, reward_noise_var: float = 0.01, state: int = 0) -> ValueDistribution:
    """Closed-form value law of a five-state-chain state (0-based index)."""
    if state == 4:
        return GaussianMixture.single(0.0, reward_noise_var)
    if state == 5:
        return DiracMixture([0.0])
    depth = 3 - state  # discount exponent of the +-1 reward
    c = gamma**depth
    var = gamma ** (2 * depth + 2) * reward_noise_var
    return GaussianMixture([0.5, 0.5], [-c, c], [var, var])


def load_mdp(path: str | Path) -> TabularMDP:
    """Parse the line-oriented MDP text format (see README)."""
    n_states = n_actions = None
    gamma = 1.0
    terminal: list[int] = []
    trans: list[tuple] = []
    laws: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            if key == "states":
                n_states = int(rest[0])
            elif key == "actions":
                n_actions = int(rest[0])
            elif key == "gamma":
                gamma = float(rest[0])
            elif key == "terminal":
                terminal.extend(int(s) for s in rest)
            elif key == "transition":
                s, a, s2, prob = rest
                trans.append((int(s), int(a), int(s2), float(prob)))
            elif key == "reward":
                s, a, kind, *args = rest
                if kind == "constant":
                    law = RewardLaw.constant(float(args[0]))
                elif kind == "normal":
                    law = RewardLaw.normal(float(args[0]), float(args[1]))
                elif kind == "discrete":
                    pairs = [tok.split(":") for tok in args]
                    law = RewardLaw.discrete([float(v) for v, _ in pairs], [float(p) for _, p in pairs])
                else:
                    raise ValueError(f"unknown reward law {kind!r}")
                laws[(int(s), int(a))] = law
            else:
                raise ValueError(f"unknown directive {key!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if n_states is None or n_actions is None:
        raise ValueError(f"{path}: 'states' and 'actions' are required")
    p = np.zeros((n_states, n_actions, n_states))
    for s, a, s2, prob in trans:
        p[s, a, s2] += prob
    for s in terminal:
        p[s, :, :] = 0.0
        p[s, :, s] = 1.0
    zero = RewardLaw.constant(0.0)
    rewards = [[laws.get((s, a), zero) for a in range(n_actions)] for s in range(n_states)]
    is_term = np.zeros(n_states, bool)
    is_term[terminal] = True
    return TabularMDP(p, rewards, gamma, is_term)


# ---------------------------------------------------------------------------
# value tables and Bellman operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularValueTable:
    """One distribution per state, or per (state, action) when ``n_actions`` is set."""

    entries: tuple
    n_actions: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.n_actions is not None and len(self.entries) % self.n_actions:
            raise ValueError("entry count must be a multiple of n_actions")

    @property
    def per_action(self) -> bool:
        return self.n_actions is not None

    def get(self, s: int, a: int | None = None) -> ValueDistribution:
        if self.per_action:
            return self.entries[s * self.n_actions + (0 if a is None else a)]
        return self.entries[s]

    def means(self) -> np.ndarray:
        m = np.array([mean(d) for d in self.entries])
        return m.reshape(-1, self.n_actions) if self.per_action else m


def _merge_cost(w, mu, var):
    """Weighted energy between adjacent component pairs and their moment match."""
    w1, w2 = w[:-1], w[1:]
    tot = w1 + w2
    a, b = w1 / tot, w2 / tot
    m = a * mu[:-1] + b * mu[1:]
    v = a * (var[:-1] + (mu[:-1] - m) ** 2) + b * (var[1:] + (mu[1:] - m) ** 2)
    pm = np.stack([mu[:-1], mu[1:]], 1)
    pv = np.stack([var[:-1], var[1:]], 1)
    pw = np.stack([a, b], 1)
    cross = np.sum(pw * folded_normal_abs_mean(pm - m[:, None], pv + v[:, None]), axis=1)
    self_pair = (a * a * folded_normal_abs_mean(0.0, 2 * var[:-1])
                 + b * b * folded_normal_abs_mean(0.0, 2 * var[1:])
                 + 2 * a * b * folded_normal_abs_mean(mu[:-1] - mu[1:], var[:-1] + var[1:]))
    self_g = folded_normal_abs_mean(0.0, 2 * v)
    return tot * (2 * cross - self_pair - self_g), m, v


def reduce_mixture(w, mu, var, cap: int = MAX_COMPONENTS):
    """Merge duplicates, then greedily merge adjacent (by mean) components.

    A merge is moment matching on an adjacent pair; pairs are taken in order of
    the energy distance they add.  Each round merges up to half of the excess
    as disjoint pairs, so large mixtures shrink in a few rounds.
    """
    key = np.stack([mu, var], 1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    w = np.bincount(inv.ravel(), weights=w)
    mu, var = uniq[:, 0].copy(), uniq[:, 1].copy()
    keep = w > 0
    w, mu, var = w[keep], mu[keep], var[keep]
    if len(w) <= cap:
        return w, mu, var
    order = np.argsort(mu, kind="stable")
    w, mu, var = w[order], mu[order], var[order]
    while len(w) > cap:
        cost, m, v = _merge_cost(w, mu, var)
        quota = max(1, (len(w) - cap + 1) // 2)
        taken = np.zeros(len(w), bool)
        chosen = []
        for i in np.argsort(cost, kind="stable"):
            if not (taken[i] or taken[i + 1]):
                taken[i] = taken[i + 1] = True
                chosen.append(i)
                if len(chosen) == quota:
                    break
        chosen = np.array(chosen)
        w, mu, var = w.copy(), mu.copy(), var.copy()
        w[chosen] += w[chosen + 1]
        mu[chosen], var[chosen] = m[chosen], v[chosen]
        drop = np.ones(len(w), bool)
        drop[chosen + 1] = False
        w, mu, var = w[drop], mu[drop], var[drop]
    return w, mu, var


def _compose(mdp: TabularMDP, s: int, a: int, successor) -> ValueDistribution:
    """Law of ``R(s,a) + gamma * Z'`` where ``successor(s')`` gives (w, mu, var) of Z'."""
    rw, rmu, rvar = mdp.rewards[s][a].components()
    ws, ms, vs = [], [], []
    for s2 in np.flatnonzero(mdp.transitions[s, a]):
        p = mdp.transitions[s, a, s2]
        zw, zmu, zvar = successor(s2)
        ws.append(p * np.outer(rw, zw).ravel())
        ms.append(np.add.outer(rmu, mdp.gamma * zmu).ravel())
        vs.append(np.add.outer(rvar, mdp.gamma**2 * zvar).ravel())
    w, mu, var = reduce_mixture(np.concatenate(ws), np.concatenate(ms), np.concatenate(vs))
    return from_components(w, mu, var)


def _policy_mixture(table: TabularValueTable, s2: int, pi: np.ndarray):
    ws, ms, vs = [], [], []
    for a2 in np.flatnonzero(pi[s2]):
        w, mu, var = components(table.get(s2, a2))
        ws.append(pi[s2, a2] * w)
        ms.append(mu)
        vs.append(var)
    return np.concatenate(ws), np.concatenate(ms), np.concatenate(vs)


def bellman_apply(table: TabularValueTable, mdp: TabularMDP, pi: np.ndarray) -> TabularValueTable:
    """Exact distributional evaluation operator for policy ``pi`` (S, A)."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions) or np.max(np.abs(pi.sum(1) - 1)) > 1e-12:
        raise ValueError("pi must be an (S, A) row-stochastic matrix")
    if table.per_action:
        succ = lambda s2: _policy_mixture(table, s2, pi)  # noqa: E731
        out = [_compose(mdp, s, a, succ) for s in range(mdp.n_states) for a in range(mdp.n_actions)]
        return TabularValueTable(out, mdp.n_actions)
    succ = lambda s2: components(table.get(s2))  # noqa: E731
    out = []
    for s in range(mdp.n_states):
        ws, ms, vs = [], [], []
        for a in np.flatnonzero(pi[s]):
            w, mu, var = components(_compose(mdp, s, a, succ))
            ws.append(pi[s, a] * w)
            ms.append(mu)
            vs.append(var)
        out.append(from_components(*reduce_mixture(np.concatenate(ws), np.concatenate(ms), np.concatenate(vs))))
    return TabularValueTable(out)


def bellman_optimality_apply(table: TabularValueTable, mdp: TabularMDP) -> TabularValueTable:
    """Control operator: successor action is the argmax of the mean (lowest index on ties)."""
    if not table.per_action:
        raise ValueError("the optimality operator needs a state-action table")
    greedy = np.argmax(table.means(), axis=1)
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    pi[np.arange(mdp.n_states), greedy] = 1.0
    return bellman_apply(table, mdp, pi)


def iterate_bellman(table, mdp, pi, iterations: int):
    for _ in range(iterations):
        table = bellman_apply(table, mdp, pi)
    return table


def point_table(mdp: TabularMDP, value: float = 0.0, per_action: bool = False) -> TabularValueTable:
    n = mdp.n_states * (mdp.n_actions if per_action else 1)
    return TabularValueTable([DiracMixture([value])] * n, mdp.n_actions if per_action else None)


# ---------------------------------------------------------------------------
# Monte Carlo ground truth
# ---------------------------------------------------------------------------

def rollout_batch(mdp: TabularMDP, pi: np.ndarray, start: int, episodes: int,
                  rng: np.random.Generator, max_steps: int = STEP_CAP):
    """Simulate episodes from ``start``; returns (states, rewards, terminal) padded (E, L).

    ``terminal[e, t]`` marks the step whose successor is terminal; later
    entries of a finished episode are padding.
    """
    states = np.full(episodes, start)
    alive = ~mdp.terminal[states]
    s_hist, r_hist, t_hist = [], [], []
    cum_pi = np.cumsum(pi, axis=1)
    cum_p = np.cumsum(mdp.transitions, axis=2)
    for _ in range(max_steps):
        if not alive.any():
            break
        acts = np.minimum((rng.random(episodes)[:, None] >= cum_pi[states]).sum(1), mdp.n_actions - 1)
        rew = np.zeros(episodes)
        for s, a in set(zip(states[alive].tolist(), acts[alive].tolist())):
            sel = alive & (states == s) & (acts == a)
            rew[sel] = mdp.rewards[s][a].sample(rng, int(sel.sum()))
        u = rng.random(episodes)
        nxt = np.minimum((u[:, None] >= cum_p[states, acts]).sum(1), mdp.n_states - 1)
        done = alive & mdp.terminal[nxt]
        s_hist.append(np.where(alive, states, -1))
        r_hist.append(rew)
        t_hist.append(done)
        states = np.where(alive, nxt, states)
        alive = alive & ~done
    else:
        raise RuntimeError(f"episodes exceeded {max_steps} steps; the MDP is not episodic under pi")
    return np.array(s_hist).T, np.array(r_hist).T, np.array(t_hist).T


def ground_truth_monte_carlo(mdp: TabularMDP, pi: np.ndarray, state: int, episodes: int,
                             rng: np.random.Generator, max_steps: int = STEP_CAP) -> DiracMixture:
    """Empirical law of discounted returns from ``state``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if mdp.terminal[state]:
        return DiracMixture(np.zeros(episodes))
    states, rewards, _ = rollout_batch(mdp, pi, state, episodes, rng, max_steps)
    disc = mdp.gamma ** np.arange(rewards.shape[1])
    returns = np.sum(np.where(states >= 0, rewards, 0.0) * disc, axis=1)
    return DiracMixture(returns)


# ---------------------------------------------------------------------------
# contraction checks
# ---------------------------------------------------------------------------

def random_mixture(rng: np.random.Generator) -> GaussianMixture:
    k = int(rng.integers(1, 4))
    return GaussianMixture(rng.dirichlet(np.ones(k)), rng.uniform(-5, 5, k), rng.uniform(0.1, 2.0, k))


def random_table(mdp: TabularMDP, rng: np.random.Generator) -> TabularValueTable:
    n = mdp.n_states * mdp.n_actions
    return TabularValueTable([random_mixture(rng) for _ in range(n)], mdp.n_actions)


def random_mdp(rng: np.random.Generator, n_states: int = 6, n_actions: int = 2) -> TabularMDP:
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    laws = []
    for _ in range(n_states):
        row = []
        for _ in range(n_actions):
            kind = rng.integers(3)
            if kind == 0:
                row.append(RewardLaw.constant(rng.uniform(-1, 1)))
            elif kind == 1:
                row.append(RewardLaw.discrete(rng.uniform(-1, 1, 2), rng.dirichlet(np.ones(2))))
            else:
                row.append(RewardLaw.normal(rng.uniform(-1, 1), rng.uniform(0.01, 0.5)))
        laws.append(row)
    return TabularMDP(p, laws, float(rng.uniform(0.5, 0.99)))


def cramer_lp(P: ValueDistribution, Q: ValueDistribution, p: float) -> float:
    """Cramer l_p; p = 2 uses the closed-form energy identity, others quadrature."""
    if p == 2:
        return float(np.sqrt(energy_distance(P, Q).value / 2.0))
    return cramer_lp_numeric(P, Q, p)


def sup_distance(t1: TabularValueTable, t2: TabularValueTable, metric) -> float:
    return max(metric(a, b) for a, b in zip(t1.entries, t2.entries))


@dataclass
class ContractionReport:
    trials: int
    p: float
    cramer_passed: int = 0
    energy_passed: int = 0
    ratios: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return self.cramer_passed == self.trials and self.energy_passed == self.trials


def contraction_check(mdp: TabularMDP | None, pi: np.ndarray | None, trials: int, p: float,
                      rng: np.random.Generator, tol: float = 1e-6) -> ContractionReport:
    """Check sup-Cramer and energy contraction of the evaluation operator.

    With ``mdp=None`` every trial draws a fresh random 6-state MDP and uses the
    uniform policy.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = ContractionReport(trials, p)
    energy = lambda a, b: energy_distance(a, b).value  # noqa: E731
    for trial in range(trials):
        m = random_mdp(rng) if mdp is None else mdp
        policy = m.uniform_policy() if pi is None else pi
        z1, z2 = random_table(m, rng), random_table(m, rng)
        t1, t2 = bellman_apply(z1, m, policy), bellman_apply(z2, m, policy)
        lp = lambda a, b: cramer_lp(a, b, p)  # noqa: E731
        before, after = sup_distance(z1, z2, lp), sup_distance(t1, t2, lp)
        e_before, e_after = sup_distance(z1, z2, energy), sup_distance(t1, t2, energy)
        ok_c = after <= m.gamma ** (1.0 / p) * before + tol
        ok_e = e_after <= m.gamma * e_before + tol
        report.cramer_passed += ok_c
        report.energy_passed += ok_e
        report.ratios.append(after / before if before > 0 else 0.0)
        if not (ok_c and ok_e):
            report.violations.append({
                "trial": trial, "gamma": m.gamma, "before": before, "after": after,
                "energy_before": e_before, "energy_after": e_after,
                "z1": [repr(d) for d in z1.entries], "z2": [repr(d) for d in z2.entries],
            })
    return report


# ---------------------------------------------------------------------------
# fitting experiment
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    table: TabularValueTable
    curve: list  # (step, energy distance to truth at the start state)
    params: dict
    loss: str
    repr: str

    def quantile_values(self, s: int) -> np.ndarray:
        return np.sort(self.params["atoms"][s])


def impute_from_quantiles(values, taus, n: int, rng: np.random.Generator) -> np.ndarray:
    """Samples from the distribution whose quantile function interpolates (taus, values)."""
    q = np.sort(np.asarray(values, dtype=float))
    u = rng.random(n)
    return np.interp(u, np.asarray(taus, dtype=float), q)


def _critic_dist(params, repr_, s):
    if repr_ == "dirac_m":
        return DiracMixture(params["atoms"][s])
    w = softmax(params["logits"][s])
    var = softplus(params["raw_var"][s]) + VARIANCE_FLOOR
    return GaussianMixture(w / w.sum(), params["means"][s], var)


def fit_tabular_critic(
    mdp: TabularMDP,
    pi: np.ndarray,
    loss: Literal["huber_quantile", "energy_samples", "energy_gmm"],
    repr: Literal["dirac_m", "gmm_K"],
    steps: int,
    lr: float,
    rng: np.random.Generator,
    *,
    size: int | None = None,
    lam: float = 0.95,
    batch: int = 16,
    particles: int | None = None,
    kappa: float = 1.0,
    start: int = 0,
    truth: ValueDistribution | None = None,
    eval_every: int = 50,
    anneal: bool = True,
) -> FitResult:
    """Fit per-state distributions by SGD (Adam) against SR(lambda) targets.

    Each step rolls out ``batch`` episodes from ``start``, builds SR(lambda)
    targets from the current table, and descends the chosen loss summed over
    visited states.  ``size`` is m atoms (default 15) or K components
    (default 5).  With ``anneal`` the learning rate decays linearly to zero.
    """
    if loss == "huber_quantile" and repr != "dirac_m":
        raise ValueError("huber_quantile requires the dirac_m representation")
    if loss == "energy_gmm" and repr != "gmm_K":
        raise ValueError("energy_gmm requires the gmm_K representation")
    if loss == "energy_samples" and repr != "dirac_m":
        raise ValueError("energy_samples requires the dirac_m representation")
    n_s = mdp.n_states
    if repr == "dirac_m":
        m = size or 15
        params = {"atoms": np.sort(rng.normal(0.0, 0.1, (n_s, m)), axis=1)}
        params["atoms"][mdp.terminal] = 0.0
    else:
        m = size or 5
        params = {
            "logits": np.zeros((n_s, m)),
            "means": rng.normal(0.0, 0.5, (n_s, m)),
            "raw_var": np.full((n_s, m), -1.0),
        }
        params["means"][mdp.terminal] = 0.0
        params["raw_var"][mdp.terminal] = -30.0
    n_particles = particles or m
    taus = quantile_fractions(m)
    opt = Adam(lr=lr)
    learn = ~mdp.terminal
    curve = []

    def evaluate(step):
        if truth is not None:
            curve.append((step, energy_distance(_critic_dist(params, repr, start), truth).value))

    evaluate(0)
    for step in range(1, steps + 1):
        states, rewards, term = rollout_batch(mdp, pi, start, batch, rng)
        valid = states >= 0
        nxt = np.concatenate([states[:, 1:], np.full((batch, 1), -1)], axis=1)
        nxt = np.where(term | (nxt < 0), 0, nxt)
        e, n = states.shape
        trunc = np.zeros_like(term)
        if repr == "dirac_m":
            atoms = params["atoms"][nxt]
            targets = sweep_atoms(rewards, atoms, term, trunc, mdp.gamma, lam, rng.random((e, n, m)))
            pred = params["atoms"][np.maximum(states, 0)]
            flat_p, flat_t = pred[valid], targets[valid]
            if loss == "huber_quantile":
                losses, g = huber_quantile_batch(flat_p, taus, flat_t, kappa)
            else:
                losses, g = energy_samples_batch(flat_p, flat_t, with_target_term=False)
            grads = {"atoms": np.zeros_like(params["atoms"])}
            np.add.at(grads["atoms"], states[valid], g / batch)
        else:
            w = softmax(params["logits"])
            var = softplus(params["raw_var"]) + VARIANCE_FLOOR
            tmu, tvar = sweep_params(rewards, w[nxt], params["means"][nxt], var[nxt], term, trunc,
                                     mdp.gamma, lam, rng.random((e, n, n_particles)),
                                     rng.random((e, n, n_particles)))
            s_idx = states[valid]
            tw = np.full(tmu[valid].shape, 1.0 / n_particles)
            losses, (gw, gmu, gvar) = energy_gmm_batch(w[s_idx], params["means"][s_idx], var[s_idx],
                                                       tw, tmu[valid], tvar[valid], with_target_term=False)
            ws = w[s_idx]
            g_logits = ws * (gw - np.sum(gw * ws, axis=1, keepdims=True))
            g_raw = gvar * softplus_grad(params["raw_var"][s_idx])
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            np.add.at(grads["logits"], s_idx, g_logits / batch)
            np.add.at(grads["means"], s_idx, gmu / batch)
            np.add.at(grads["raw_var"], s_idx, g_raw / batch)
        if not np.all(np.isfinite(losses)) or np.max(np.abs(losses)) > 1e6:
            raise FloatingPointError(f"tabular fit diverged at step {step}: max loss {np.max(np.abs(losses))}")
        for k in grads:
            grads[k][~learn] = 0.0
        if anneal:
            opt.lr = lr * (1.0 - (step - 1) / steps)
        opt.step(params, grads)
        if step % eval_every == 0 or step == steps:
            evaluate(step)
    table = TabularValueTable([_critic_dist(params, repr, s) for s in range(n_s)])
    return FitResult(table, curve, params, loss, repr)


@dataclass(frozen=True)
class ModeCluster:
    weight: float
    mean: float
    std: float  # spread of the whole cluster
    component_sigma: float  # weight-averaged component std; atom spread for Dirac tables


def mode_clusters(d: ValueDistribution, split: float = 0.0) -> list:
    """Summaries of the mass whose component means fall below / at-or-above ``split``."""
    w, mu, var = components(d)
    dirac = isinstance(d, DiracMixture)
    out = []
    for side in (mu < split, mu >= split):
        ws = w[side]
        if ws.sum() == 0:
            out.append(ModeCluster(0.0, np.nan, np.nan, np.nan))
            continue
        p = ws / ws.sum()
        m = float(p @ mu[side])
        sd = float(np.sqrt(p @ (var[side] + (mu[side] - m) ** 2)))
        comp = sd if dirac else float(p @ np.sqrt(var[side]))
        out.append(ModeCluster(float(ws.sum()), m, sd, comp))
    return out


def optimality_instability_demo(eps: float = 1e-3, gamma: float = 0.9, p: float = 2.0) -> dict:
    """Two tables eps apart whose images under the optimality operator are far apart.

    State 0 moves to state 1; at state 1 action 0 pays 0 and action 1 pays
    +-1 with equal odds, both ending the episode.  The tables differ only by
    shifting ``Z(1, 0)`` to +eps or -eps, which flips the greedy action.  The
    sup Cramer distance jumps from O(sqrt(eps)) to O(1), so no factor below 1
    bounds the map.
    """
    p_mat = np.zeros((3, 2, 3))
    p_mat[0, :, 1] = 1.0
    p_mat[1, :, 2] = 1.0
    p_mat[2, :, 2] = 1.0
    zero = RewardLaw.constant(0.0)
    rewards = [[zero, zero], [zero, RewardLaw.discrete([-1.0, 1.0])], [zero, zero]]
    mdp = TabularMDP(p_mat, rewards, gamma, [False, False, True])
    coin = DiracMixture([-1.0, 1.0])
    point = DiracMixture([0.0])

    def table(shift):
        return TabularValueTable([point, point, DiracMixture([shift]), coin, point, point], 2)

    z1, z2 = table(eps), table(-eps)
    lp = lambda a, b: cramer_lp(a, b, p)  # noqa: E731
    before = sup_distance(z1, z2, lp)
    t1, t2 = bellman_optimality_apply(z1, mdp), bellman_optimality_apply(z2, mdp)
    after = sup_distance(t1, t2, lp)
    return {"eps": eps, "gamma": gamma, "before": before, "after": after,
            "ratio": after / before, "contraction_bound": gamma ** (1.0 / p)}
