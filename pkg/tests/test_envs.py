import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from distac.envs import (
    FiveStateEnv,
    GridworldEnv,
    Lqr1dEnv,
    VectorRunner,
    gridworld_layout,
    make_env,
    riccati_gain,
    value_iteration,
)


def _episode(env, policy):
    env.reset()
    total, n = 0.0, 0
    while True:
        res = env.step(policy())
        total += res.reward
        n += 1
        if res.terminal or res.truncated:
            return total, n, res


def test_five_state_episodes():
    env = FiveStateEnv(seed=0)
    returns = []
    for _ in range(2000):
        total, n, last = _episode(env, lambda: 0)
        assert n == 5 and last.terminal and not last.truncated
        assert np.all(last.obs == 0)
        returns.append(total)
    r = np.array(returns)
    assert np.all(np.abs(np.abs(r) - 1) < 0.6)
    assert abs(np.abs(r).mean() - 1) < 0.01
    assert np.std(np.abs(r) - 1) == pytest.approx(0.1, abs=0.01)


def test_five_state_mean_zero():
    env = make_env("five_state", seed=3)
    r = np.array([_episode(env, lambda: 0)[0] for _ in range(100_000)])
    assert abs(r.mean()) < 4 * r.std() / np.sqrt(len(r))


def test_gridworld_optimal_return_matches_dp():
    env = GridworldEnv(5, "dense")
    assert env.shortest_path() == 8
    assert env.optimal_return() == pytest.approx(0.93)
    p, r, term = env.tabular_model()
    v, greedy = value_iteration(p, r, term, 1.0)
    assert v[0] == pytest.approx(0.93, abs=1e-9)
    # follow the DP-greedy policy in the real environment
    total, _, last = _episode(env, lambda: greedy[env._index(env.pos)])
    assert total == pytest.approx(0.93) and last.terminal


def test_two_room_and_sparse():
    env = GridworldEnv(7, "two_room")
    assert "#" in "".join(gridworld_layout(7, "two_room"))
    p, r, term = env.tabular_model()
    v, _ = value_iteration(p, r, term, 0.9)
    assert v[0] == pytest.approx(0.9 ** (env.shortest_path() - 1))
    sparse = GridworldEnv(5, "sparse")
    assert sparse.optimal_return() == 1.0


def test_gridworld_slip_and_obs(rng):
    env = GridworldEnv(5, "dense", slip=0.0, seed=1)
    assert env.spec.obs_dim == 25
    obs = env.reset()
    assert obs.shape == (25,) and obs.sum() == 1 and obs[0] == 1
    for _ in range(3):
        env.reset()
        env.step(1)
        assert env.pos == (0, 1)
    slippy = GridworldEnv(5, "dense", slip=1.0, seed=2)
    moves = set()
    for _ in range(200):
        slippy.reset()
        slippy.step(2)
        moves.add(slippy.pos)
    assert moves == {(0, 0), (0, 1), (1, 0)}
    p, _, _ = GridworldEnv(5, "dense", slip=0.2).tabular_model()
    assert np.allclose(p.sum(axis=2), 1.0)


def test_gridworld_step_cap():
    env = GridworldEnv(5, "dense")
    total, n, last = _episode(env, lambda: 0)
    assert n == 50 and last.truncated and not last.terminal
    assert GridworldEnv(8, "sparse").spec.max_steps == 4 * 64


@pytest.mark.parametrize("layout", [
    ["S..", "...", "..."],
    ["S.G", "...", "..G"],
    ["S#.", "##.", "..G"][:2] + ["..."],
    ["S#G", "##.", "..."],
    ["SxG", "...", "..."],
    ["S.G", ".."],
])
def test_invalid_layouts(layout):
    with pytest.raises(ValueError):
        GridworldEnv(layout=layout)


def test_invalid_params():
    with pytest.raises(ValueError):
        GridworldEnv(5, "maze")
    with pytest.raises(ValueError):
        GridworldEnv(5, slip=1.5)
    with pytest.raises(ValueError):
        Lqr1dEnv(noise_sigma=-1)
    with pytest.raises(ValueError):
        make_env("pong")
    with pytest.raises(ValueError):
        GridworldEnv(5).step(7)


def test_lqr_origin_zero_cost():
    env = Lqr1dEnv(0.0, seed=0)
    env.reset()
    env.set_state(0.0)
    for _ in range(31):
        res = env.step([0.0])
        assert res.reward == 0.0 and res.obs[0] == 0.0 and not res.truncated
    assert env.step([0.0]).truncated


def test_riccati_against_scipy():
    for gamma in (0.9, 0.99, 1.0):
        p, k = riccati_gain(gamma=gamma)
        ref = solve_discrete_are(np.array([[np.sqrt(gamma)]]), np.array([[np.sqrt(gamma)]]), np.eye(1), np.eye(1))[0, 0]
        assert p == pytest.approx(ref, rel=1e-10)
    p, k = riccati_gain()
    assert p == pytest.approx((1 + np.sqrt(5)) / 2) and k == pytest.approx(p / (1 + p))


def _lqr_cost(gain, sigma, seed, episodes=200):
    env = Lqr1dEnv(sigma, seed=seed)
    out = []
    for _ in range(episodes):
        obs = env.reset()
        total = 0.0
        while True:
            res = env.step([-gain * obs[0]])
            total += res.reward
            obs = res.obs
            if res.truncated:
                break
        out.append(-total)
    return np.array(out)


def test_riccati_beats_zero_policy():
    _, k = riccati_gain()
    assert _lqr_cost(k, 0.0, 0).mean() < _lqr_cost(0.0, 0.0, 0).mean()


def test_noise_widens_returns():
    _, k = riccati_gain()
    var = [np.mean([_lqr_cost(k, s, seed, 300).var() for seed in range(3)]) for s in (0.0, 0.1, 0.3)]
    assert var[0] < var[1] < var[2]


@pytest.mark.parametrize("name,kw", [("five_state", {}), ("gridworld", {"size": 5, "slip": 0.1}),
                                     ("lqr1d", {"noise_sigma": 0.0})])
def test_bounds_under_random_actions(name, kw):
    env = make_env(name, seed=0, **kw)
    rng = np.random.default_rng(0)
    spec = env.spec
    env.reset()
    n = 1_000_000
    bound_x = 1.0 + spec.max_steps * (spec.high or 0)
    for _ in range(n):
        a = rng.integers(spec.action_dim) if spec.action_kind == "discrete" else rng.uniform(-3, 3, 1)
        res = env.step(a)
        if name == "gridworld":
            assert res.reward in (1.0, -0.01)
        elif name == "lqr1d":
            assert res.reward <= 0.0 and abs(res.obs[0]) <= bound_x
        if res.terminal or res.truncated:
            env.reset()


def test_runner_matches_direct_stepping():
    def policy(obs):
        return np.zeros(len(obs), dtype=int), {"tag": np.arange(len(obs))}

    runner = VectorRunner([GridworldEnv(5, slip=0.3, seed=4)])
    roll = runner.run(policy, 60)
    env = GridworldEnv(5, slip=0.3, seed=4)
    obs = env.reset()
    for t in range(60):
        assert np.array_equal(roll.obs[0, t], obs)
        res = env.step(0)
        assert roll.rewards[0, t] == res.reward and roll.truncated[0, t] == res.truncated
        assert np.array_equal(roll.next_obs[0, t], res.obs)
        obs = env.reset() if res.terminal or res.truncated else res.obs
    assert roll.info["tag"].shape == (1, 60)


def test_runner_identical_seeds_and_frames():
    def policy(obs):
        return np.ones(len(obs), dtype=int), {}

    runner = VectorRunner([FiveStateEnv(seed=9) for _ in range(3)])
    roll = runner.run(policy, 13)
    assert roll.frames == 3 * 13 and roll.rewards.shape == (3, 13)
    assert np.array_equal(roll.rewards[0], roll.rewards[1]) and np.array_equal(roll.rewards[1], roll.rewards[2])
    # auto-reset: the observation after a terminal step is the start state, but next_obs keeps the terminal one
    t = int(np.flatnonzero(roll.terminals[0])[0])
    assert np.all(roll.next_obs[0, t] == 0) and roll.obs[0, t + 1][0] == 1
    assert len(roll.episode_lengths) == 3 * 2 and set(roll.episode_lengths) == {5}


def test_runner_rejects_mixed_specs():
    with pytest.raises(ValueError):
        VectorRunner([GridworldEnv(5), GridworldEnv(6)])
    with pytest.raises(ValueError):
        VectorRunner([])
