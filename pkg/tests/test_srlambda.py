import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distac.distcore import DiracMixture, GaussianMixture, mean
from distac.metrics import energy_distance
from distac.srlambda import (
    RewardTrajectory,
    exact_lambda_mixture,
    lambda_returns_scalar,
    lambda_weights,
    n_step_target,
    sr_lambda_dirac,
    sr_lambda_distribution_check,
    sr_lambda_gmm,
    sweep_atoms,
    target_means,
)
from distac.tabular import five_state_mdp, five_state_truth

from conftest import random_gmm


def _scalar_lambda_brute(r, v, gamma, lam, t):
    """Direct weighted sum of n-step returns (oracle for the recursion)."""
    n = len(r)
    h = n - t
    g = [sum(gamma**i * r[t + i] for i in range(k)) + gamma**k * v[t + k - 1] for k in range(1, h + 1)]
    return float(np.dot(lambda_weights(h, lam), g))


def _dirac_traj(rng, n=6, m=8, gamma=0.9, lam=0.5, **kw):
    values = [DiracMixture(rng.normal(size=m)) for _ in range(n)]
    return RewardTrajectory(rng.normal(size=n), values, gamma, lam, **kw)


def test_n_step_examples():
    v = [DiracMixture([1.0, 3.0]), DiracMixture([10.0]), DiracMixture([-2.0, 2.0])]
    traj = RewardTrajectory([1.0, 2.0, 3.0], v, 0.5, 0.5)
    d = n_step_target(traj, 0, 2)
    assert np.allclose(sorted(d.atoms), [1 + 0.5 * 2 + 0.25 * 10])
    d = n_step_target(traj, 1, 2)
    assert np.allclose(sorted(d.atoms), [2 + 1.5 - 0.5, 2 + 1.5 + 0.5])
    assert mean(n_step_target(traj, 0, 3)) == pytest.approx(1 + 1 + 0.75)
    with pytest.raises(ValueError):
        n_step_target(traj, 2, 2)


def test_lambda_weights_sum_to_one():
    for h in (1, 2, 7):
        for lam in (0.0, 0.3, 1.0):
            w = lambda_weights(h, lam)
            assert w.sum() == pytest.approx(1.0)
            assert np.all(w >= 0)


def test_exact_mixture_extremes(rng):
    traj0 = _dirac_traj(rng, lam=0.0)
    traj1 = RewardTrajectory(traj0.rewards, traj0.values, traj0.gamma, 1.0)
    for t in range(traj0.n):
        assert energy_distance(exact_lambda_mixture(traj0, t), n_step_target(traj0, t, 1)).value < 1e-12
        assert energy_distance(exact_lambda_mixture(traj1, t), n_step_target(traj1, t, traj1.n - t)).value < 1e-12


@settings(max_examples=30)
@given(st.integers(1, 7), st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_scalar_recursion_matches_brute_force(n, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n), rng.normal(size=n)
    g = lambda_returns_scalar(r, v, gamma, lam)
    for t in range(n):
        assert g[t] == pytest.approx(_scalar_lambda_brute(r, v, gamma, lam, t), abs=1e-10)


@settings(max_examples=25)
@given(st.integers(1, 6), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_exact_mixture_mean_is_scalar_lambda_return(n, lam, seed):
    rng = np.random.default_rng(seed)
    values = [random_gmm(rng, 2) for _ in range(n)]
    traj = RewardTrajectory(rng.normal(size=n), values, 0.9, lam)
    g = lambda_returns_scalar(traj.rewards, [mean(v) for v in values], 0.9, lam)
    for t in range(n):
        assert mean(exact_lambda_mixture(traj, t)) == pytest.approx(g[t], abs=1e-9)


def test_dirac_lambda_one_is_monte_carlo(rng):
    traj = _dirac_traj(rng, lam=1.0)
    out = sr_lambda_dirac(traj, rng)
    boot = traj.bootstrap.atoms
    for t in range(traj.n):
        k = traj.n - t
        partial = sum(traj.gamma**i * traj.rewards[t + i] for i in range(k))
        assert np.allclose(out[t].atoms, partial + traj.gamma**k * boot, atol=1e-12)


def test_dirac_lambda_zero_is_one_step(rng):
    traj = _dirac_traj(rng, lam=0.0)
    out = sr_lambda_dirac(traj, rng)
    for t in range(traj.n):
        assert np.allclose(out[t].atoms, traj.rewards[t] + traj.gamma * traj.values[t].atoms, atol=1e-12)


def test_counts_preserved(rng):
    traj = _dirac_traj(rng, m=11)
    assert all(d.m == 11 for d in sr_lambda_dirac(traj, rng))
    g = RewardTrajectory(traj.rewards, [random_gmm(rng, 3) for _ in range(traj.n)], 0.9, 0.5)
    assert all(d.k == 7 for d in sr_lambda_gmm(g, 7, rng))


def test_gmm_reduces_to_dirac_on_means(rng):
    n, m = 5, 6
    atoms = rng.normal(size=(n, m))
    rewards = rng.normal(size=n)
    dirac = RewardTrajectory(rewards, [DiracMixture(a) for a in atoms], 0.8, 0.0)
    gmm = RewardTrajectory(rewards, [GaussianMixture([1.0], [a[0]], [1e-8]) for a in atoms], 0.8, 0.4)
    # K = 1: every replacement draws the only component, same as a Dirac critic with m equal atoms
    flat = RewardTrajectory(rewards, [DiracMixture(np.full(m, a[0])) for a in atoms], 0.8, 0.4)
    out_g = sr_lambda_gmm(gmm, m, np.random.default_rng(3))
    out_d = sr_lambda_dirac(flat, np.random.default_rng(3))
    for a, b in zip(out_g, out_d):
        assert np.allclose(a.means, b.atoms, atol=1e-12)
    assert len(sr_lambda_dirac(dirac, rng)) == n


def test_gmm_lambda_zero_is_one_step_mixture(rng):
    values = [random_gmm(rng, 3) for _ in range(4)]
    traj = RewardTrajectory(rng.normal(size=4), values, 0.9, 0.0)
    out = sr_lambda_gmm(traj, 4000, rng)
    for t in range(4):
        target = n_step_target(traj, t, 1)
        assert energy_distance(out[t], target).value < 5e-3
        assert set(np.round(out[t].means, 9)) <= set(np.round(target.means, 9))


def test_no_forward_leakage(rng):
    traj = _dirac_traj(rng, n=6)
    base = sr_lambda_dirac(traj, np.random.default_rng(7))
    for t in range(1, traj.n):
        r = traj.rewards.copy()
        r[t - 1] += 5.0
        pert = RewardTrajectory(r, traj.values, traj.gamma, traj.lam)
        out = sr_lambda_dirac(pert, np.random.default_rng(7))
        for s in range(t, traj.n):
            assert np.array_equal(out[s].atoms, base[s].atoms)


@pytest.mark.parametrize("lam", [0.0, 0.6, 1.0])
def test_terminal_step_is_point_mass(rng, lam):
    term = np.array([False, False, True, False, False])
    traj = _dirac_traj(rng, n=5, lam=lam, terminals=term)
    out = sr_lambda_dirac(traj, rng)
    assert np.allclose(out[2].atoms, traj.rewards[2])
    g = RewardTrajectory(traj.rewards, [random_gmm(rng, 2) for _ in range(5)], 0.9, lam, terminals=term)
    out_g = sr_lambda_gmm(g, 5, rng)
    assert np.allclose(out_g[2].means, traj.rewards[2])
    assert np.all(out_g[2].variances <= 1e-7)
    # steps before the terminal never see the bootstrap after it
    assert energy_distance(exact_lambda_mixture(traj, 0), exact_lambda_mixture(
        RewardTrajectory(traj.rewards[:3], traj.values[:3], 0.9, lam, terminals=term[:3]), 0)).value < 1e-12


def test_truncation_bootstraps(rng):
    trunc = np.array([False, True, False, False])
    traj = _dirac_traj(rng, n=4, lam=1.0, truncated=trunc)
    out = sr_lambda_dirac(traj, rng)
    expect = traj.rewards[0] + 0.9 * traj.rewards[1] + 0.81 * traj.values[1].atoms
    assert np.allclose(out[0].atoms, expect)


def test_bootstrap_survival_probability():
    # atoms of the bootstrap carry a marker; the fraction surviving to step t is lam^(N-1-t)
    n, m, lam = 4, 20000, 0.7
    next_atoms = np.zeros((1, n, m))
    next_atoms[0, -1] = 1.0
    u = np.random.default_rng(0).random((1, n, m))
    z = np.zeros((1, n))
    out = sweep_atoms(z, next_atoms, z.astype(bool), z.astype(bool), 1.0, lam, u)[0]
    for t in range(n):
        frac = out[t].mean()
        p = lam ** (n - 1 - t)
        assert abs(frac - p) < 4 * np.sqrt(p * (1 - p) / m) + 1e-12


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.95, 1.0])
def test_mean_unbiased(lam):
    rng = np.random.default_rng(11)
    traj = _dirac_traj(rng, n=5, m=64, lam=lam)
    g = lambda_returns_scalar(traj.rewards, [mean(v) for v in traj.values], traj.gamma, lam)
    means = np.array([target_means(sr_lambda_dirac(traj, rng)) for _ in range(2000)])
    se = means.std(axis=0) / np.sqrt(len(means))
    assert np.all(np.abs(means.mean(axis=0) - g) <= 4 * se + 1e-12)


def _five_state_traj(dirac: bool, m: int, lam: float, seed: int = 0):
    gamma = 0.9
    rng = np.random.default_rng(seed)
    truths = [five_state_truth(gamma, state=s) for s in range(1, 5)]
    if dirac:
        from distac.distcore import sample
        values = [DiracMixture(sample(d, rng, m)) for d in truths]
    else:
        values = truths
    return RewardTrajectory([0.0, 0.0, 0.0, 1.0], values, gamma, lam)


def test_five_state_mdp_shape():
    mdp = five_state_mdp()
    assert mdp.transitions.shape == (6, 1, 6)


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_distribution_check_exact_cases(lam):
    traj = _five_state_traj(True, 64, lam)
    assert sr_lambda_distribution_check(traj, 64, 20).value < 1e-9


@pytest.mark.parametrize("dirac", [True, False])
def test_distribution_check_half_lambda(dirac):
    traj = _five_state_traj(dirac, 64, 0.5)
    assert sr_lambda_distribution_check(traj, 64, 1000).value < 0.02


def test_distribution_check_rate():
    traj = _five_state_traj(False, 16, 0.5)
    small = np.mean([sr_lambda_distribution_check(traj, 16, 10, seed=s).value for s in range(8)])
    large = np.mean([sr_lambda_distribution_check(traj, 16, 160, seed=s).value for s in range(8)])
    # energy distance of an empirical law decays like 1/(R m): a 16x larger pool cuts it ~16x
    assert large < small / 6


def test_resample_flag(rng):
    traj = _dirac_traj(rng, n=5, m=32, lam=1.0)
    plain = sr_lambda_dirac(traj, np.random.default_rng(1))
    res = sr_lambda_dirac(traj, np.random.default_rng(1), resample=True)
    assert np.array_equal(plain[-1].atoms, res[-1].atoms)
    # resampled sets are drawn from the previous set
    for t in range(traj.n - 1):
        shifted = (res[t].atoms - sum(traj.gamma**i * traj.rewards[t + i] for i in range(traj.n - t))) / traj.gamma ** (traj.n - t)
        assert np.all(np.isin(np.round(shifted, 8), np.round(traj.bootstrap.atoms, 8)))
    assert not all(np.array_equal(a.atoms, b.atoms) for a, b in zip(plain, res))


def test_invalid_trajectories():
    d = DiracMixture([0.0])
    with pytest.raises(ValueError):
        RewardTrajectory([], [], 0.9, 0.5)
    with pytest.raises(ValueError):
        RewardTrajectory([1.0], [d], 0.9, 1.5)
    with pytest.raises(ValueError):
        RewardTrajectory([1.0], [d], 0.0, 0.5)
    with pytest.raises(ValueError):
        RewardTrajectory([1.0, 2.0], [d], 0.9, 0.5)
    with pytest.raises(TypeError):
        sr_lambda_dirac(RewardTrajectory([1.0], [GaussianMixture.single(0, 1)], 0.9, 0.5), np.random.default_rng())
