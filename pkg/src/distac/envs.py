"""Desk-scale environments and a vectorized rollout runner.

Every environment owns a ``numpy`` Generator seeded at construction (or via
``seed``), so a seed fully determines its stream.  ``step`` distinguishes
termination (no bootstrap) from truncation at the step cap (bootstrap).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_kind: str  # "discrete" | "continuous"
    action_dim: int  # number of actions, or continuous dimension
    max_steps: int
    low: float | None = None
    high: float | None = None

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1 or self.max_steps < 1:
            raise ValueError("dimensions and step cap must be >= 1")
        if self.action_kind not in ("discrete", "continuous"):
            raise ValueError(f"unknown action kind {self.action_kind!r}")
        if self.action_kind == "continuous" and not (
            np.isfinite(self.low) and np.isfinite(self.high) and self.low < self.high
        ):
            raise ValueError("continuous actions need finite bounds low < high")

    @property
    def action(self) -> tuple:
        return (self.action_kind, self.action_dim)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


class Env:
    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.t = 0

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        self.t = 0
        return self._reset()

    def step(self, action) -> StepResult:
        obs, reward, terminal = self._step(action)
        self.t += 1
        truncated = (not terminal) and self.t >= self.spec.max_steps
        return StepResult(obs, float(reward), bool(terminal), bool(truncated))

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


def _onehot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


class FiveStateEnv(Env):
    """Single-action chain S1..S5 -> terminal; r4 ~ U{-1,+1}, r5 ~ N(0, noise_var)."""

    def __init__(self, seed: int | None = None, reward_noise_var: float = 0.01):
        super().__init__(seed)
        self.noise_sd = float(np.sqrt(reward_noise_var))
        self.spec = EnvSpec(5, "discrete", 1, 5)
        self.state = 0

    def _reset(self):
        self.state = 0
        return _onehot(0, 5)

    def _step(self, action):
        s = self.state
        if s == 3:
            r = self.rng.choice((-1.0, 1.0))
        elif s == 4:
            r = self.noise_sd * self.rng.standard_normal()
        else:
            r = 0.0
        if s == 4:
            return np.zeros(5), r, True
        self.state = s + 1
        return _onehot(s + 1, 5), r, False


# moves for actions up, right, down, left
_MOVES = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])


def gridworld_layout(size: int, variant: str) -> list[str]:
    """Character map for a preset: '.' free, '#' wall, 'S' start, 'G' goal."""
    if size < 3:
        raise ValueError("gridworld size must be >= 3")
    grid = [["."] * size for _ in range(size)]
    if variant == "two_room":
        if size < 5:
            raise ValueError("two_room needs size >= 5")
        wall = size // 2
        for r in range(size):
            grid[r][wall] = "#"
        grid[size // 2][wall] = "."
    elif variant not in ("dense", "sparse"):
        raise ValueError(f"unknown gridworld variant {variant!r}")
    grid[0][0] = "S"
    grid[size - 1][size - 1] = "G"
    return ["".join(row) for row in grid]


class GridworldEnv(Env):
    """4-action gridworld with one-hot observations.

    Dense rewards: +1 on reaching the goal, ``step_penalty`` otherwise.
    Sparse rewards: +1 on reaching the goal, 0 otherwise.  With probability
    ``slip`` the chosen action is replaced by a uniformly random one.
    """

    def __init__(self, size: int = 5, variant: str = "dense", slip: float = 0.0,
                 seed: int | None = None, layout: list[str] | None = None,
                 max_steps: int | None = None, step_penalty: float = -0.01):
        super().__init__(seed)
        if not 0.0 <= slip <= 1.0:
            raise ValueError("slip must lie in [0, 1]")
        rows = layout if layout is not None else gridworld_layout(size, variant)
        self.grid = np.array([list(r) for r in rows])
        if self.grid.ndim != 2 or min(self.grid.shape) < 3:
            raise ValueError("layout must be a rectangle at least 3x3")
        if not set(np.unique(self.grid)) <= set(".#SG"):
            raise ValueError("layout may only contain '.', '#', 'S', 'G'")
        starts, goals = np.argwhere(self.grid == "S"), np.argwhere(self.grid == "G")
        if len(starts) != 1 or len(goals) != 1:
            raise ValueError("layout needs exactly one 'S' and one 'G'")
        self.start, self.goal = tuple(starts[0]), tuple(goals[0])
        self.dense = variant != "sparse" and variant != "two_room"
        self.step_penalty = step_penalty if self.dense else 0.0
        self.slip = float(slip)
        self.variant = variant
        if self.shortest_path() is None:
            raise ValueError("goal unreachable from start")
        h, w = self.grid.shape
        cap = max_steps or (50 if h * w <= 49 else 4 * h * w)
        self.spec = EnvSpec(h * w, "discrete", 4, cap)
        self.pos = self.start

    @property
    def n_cells(self) -> int:
        return self.grid.size

    def _index(self, pos) -> int:
        return pos[0] * self.grid.shape[1] + pos[1]

    def _move(self, pos, a):
        r, c = pos[0] + _MOVES[a][0], pos[1] + _MOVES[a][1]
        h, w = self.grid.shape
        if 0 <= r < h and 0 <= c < w and self.grid[r, c] != "#":
            return (int(r), int(c))
        return pos

    def shortest_path(self) -> int | None:
        """Breadth-first step count from start to goal."""
        seen, queue = {self.start: 0}, deque([self.start])
        while queue:
            p = queue.popleft()
            if p == self.goal:
                return seen[p]
            for a in range(4):
                q = self._move(p, a)
                if q not in seen:
                    seen[q] = seen[p] + 1
                    queue.append(q)
        return None

    def optimal_return(self) -> float:
        """Undiscounted return of a shortest path with slip = 0."""
        n = self.shortest_path()
        return 1.0 + (n - 1) * self.step_penalty

    def tabular_model(self):
        """(P (S,4,S), R (S,4), terminal (S,)) with the goal made absorbing."""
        s_n = self.n_cells
        p = np.zeros((s_n, 4, s_n))
        r = np.zeros((s_n, 4))
        g = self._index(self.goal)
        for idx in range(s_n):
            pos = divmod(idx, self.grid.shape[1])
            if idx == g or self.grid[pos] == "#":
                p[idx, :, idx] = 1.0
                continue
            for a in range(4):
                for b in range(4):
                    prob = (1 - self.slip) * (a == b) + self.slip / 4
                    q = self._move(pos, b)
                    p[idx, a, self._index(q)] += prob
                    r[idx, a] += prob * (1.0 if q == self.goal else self.step_penalty)
        term = np.zeros(s_n, bool)
        term[g] = True
        return p, r, term

    def _reset(self):
        self.pos = self.start
        return _onehot(self._index(self.pos), self.n_cells)

    def _step(self, action):
        a = int(action)
        if not 0 <= a < 4:
            raise ValueError(f"invalid action {action!r}")
        if self.slip > 0 and self.rng.random() < self.slip:
            a = int(self.rng.integers(4))
        self.pos = self._move(self.pos, a)
        if self.pos == self.goal:
            return np.zeros(self.n_cells), 1.0, True
        return _onehot(self._index(self.pos), self.n_cells), self.step_penalty, False


def value_iteration(p, r, terminal, gamma: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Optimal state values and greedy policy for a finite model."""
    v = np.zeros(p.shape[0])
    for _ in range(max_iter):
        q = r + gamma * p @ v
        q[terminal] = 0.0
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    return v, np.argmax(r + gamma * p @ v, axis=1)


class Lqr1dEnv(Env):
    """Scalar integrator x' = x + u + sigma * w with per-step reward -(x^2 + u^2).

    Actions are clipped to [-bound, bound]; x0 ~ U(-1, 1); episodes truncate
    after ``horizon`` steps and never terminate.
    """

    def __init__(self, noise_sigma: float = 0.0, seed: int | None = None,
                 horizon: int = 32, bound: float = 2.0):
        super().__init__(seed)
        if noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        self.sigma = float(noise_sigma)
        self.bound = float(bound)
        self.spec = EnvSpec(1, "continuous", 1, horizon, -bound, bound)
        self.x = 0.0

    def _reset(self):
        self.x = float(self.rng.uniform(-1.0, 1.0))
        return np.array([self.x])

    def set_state(self, x: float) -> np.ndarray:
        self.x = float(x)
        return np.array([self.x])

    def _step(self, action):
        u = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -self.bound, self.bound))
        cost = self.x**2 + u**2
        self.x = self.x + u + (self.sigma * self.rng.standard_normal() if self.sigma > 0 else 0.0)
        return np.array([self.x]), -cost, False


def riccati_gain(a: float = 1.0, b: float = 1.0, q: float = 1.0, r: float = 1.0,
                 gamma: float = 1.0, iters: int = 10_000, tol: float = 1e-14):
    """Stationary (P, k) of the discounted scalar Riccati recursion; u = -k x."""
    p = q
    for _ in range(iters):
        p_new = q + gamma * a * a * p - (gamma * a * b * p) ** 2 / (r + gamma * b * b * p)
        if abs(p_new - p) < tol:
            p = p_new
            break
        p = p_new
    return p, gamma * a * b * p / (r + gamma * b * b * p)


def make_env(name: str, seed: int | None = None, **kw) -> Env:
    if name == "five_state":
        return FiveStateEnv(seed, **kw)
    if name == "gridworld":
        return GridworldEnv(seed=seed, **kw)
    if name == "lqr1d":
        return Lqr1dEnv(seed=seed, **kw)
    raise ValueError(f"unknown environment {name!r}")


# ---------------------------------------------------------------------------
# vectorized runner
# ---------------------------------------------------------------------------

@dataclass
class Rollout:
    """E x N batch of transitions; arrays are indexed (env, step, ...).

    ``next_obs`` holds the true successor observation (before any auto-reset),
    so truncated steps can bootstrap from the state the episode stopped in.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    truncated: np.ndarray
    next_obs: np.ndarray
    info: dict
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)

    @property
    def frames(self) -> int:
        return self.rewards.size


class VectorRunner:
    """Steps E homogeneous environments in lockstep with auto-reset."""

    def __init__(self, envs: list):
        if not envs:
            raise ValueError("need at least one environment")
        if any(e.spec != envs[0].spec for e in envs):
            raise ValueError("all environments must share the same EnvSpec")
        self.envs = envs
        self.spec = envs[0].spec
        self.obs = np.stack([e.reset() for e in envs])
        self._ret = np.zeros(len(envs))
        self._len = np.zeros(len(envs), dtype=int)

    def run(self, policy, n_steps: int) -> Rollout:
        """``policy(obs (E, d)) -> (actions (E, ...), info dict of (E, ...) arrays)``."""
        e_n = len(self.envs)
        obs, acts, rews, terms, truncs, nxt, infos = [], [], [], [], [], [], []
        ep_ret, ep_len = [], []
        for _ in range(n_steps):
            a, info = policy(self.obs)
            results = [env.step(a[i]) for i, env in enumerate(self.envs)]
            obs.append(self.obs)
            acts.append(np.asarray(a))
            infos.append(info)
            rews.append([r.reward for r in results])
            terms.append([r.terminal for r in results])
            truncs.append([r.truncated for r in results])
            nxt.append(np.stack([r.obs for r in results]))
            new_obs = nxt[-1].copy()
            for i, res in enumerate(results):
                self._ret[i] += res.reward
                self._len[i] += 1
                if res.terminal or res.truncated:
                    ep_ret.append(float(self._ret[i]))
                    ep_len.append(int(self._len[i]))
                    self._ret[i], self._len[i] = 0.0, 0
                    new_obs[i] = self.envs[i].reset()
            self.obs = new_obs
        swap = lambda x: np.swapaxes(np.asarray(x), 0, 1)  # noqa: E731
        info = {k: swap([inf[k] for inf in infos]) for k in (infos[0] if infos else {})}
        return Rollout(swap(obs), swap(acts), swap(rews).astype(float), swap(terms).astype(bool),
                       swap(truncs).astype(bool), swap(nxt), info, ep_ret, ep_len)
