"""Actor-critic training with scalar or distributional critics.

Variants share one pipeline (rollout, SR(lambda) or lambda-return targets,
GAE, clipped policy surrogate) and differ only in the value head and loss:

* ``ppo_scalar`` - scalar value, clipped squared error
* ``iqac``       - m fixed-fraction quantiles, quantile Huber loss
* ``iqac_e``     - m atoms, sample energy distance
* ``gmac``       - K-component Gaussian mixture, closed-form energy distance
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flops
from .distcore import ValueDistribution
from .envs import VectorRunner, make_env
from .metrics import (
    energy_distance,
    energy_gmm,
    energy_gmm_batch,
    energy_samples,
    energy_samples_batch,
    huber_quantile_batch,
    huber_quantile_loss,
    quantile_fractions,
)
from .nn import (
    ActorCritic,
    Adam,
    GmmHead,
    clip_grads,
    categorical_entropy,
    categorical_grads,
    categorical_logp,
    gaussian_entropy,
    gaussian_grads,
    gaussian_logp,
    make_value_head,
    softmax,
)
from .srlambda import lambda_returns_scalar, sweep_atoms, sweep_params

log = logging.getLogger(__name__)

VARIANTS = ("ppo_scalar", "iqac", "iqac_e", "gmac")


@dataclass
class TrainConfig:
    variant: str = "gmac"
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 128
    rollout_steps: int = 64
    n_envs: int = 8
    lr: float = 2.5e-4
    entropy_coef: float | None = None  # None: 0.01 discrete, 0.0 continuous
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    n_atoms: int = 64
    n_modes: int = 5
    sr_particles: int = 5
    kappa: float = 1.0
    hidden: tuple = (64, 64)
    intrinsic_coef: float = 0.0
    init_log_std: float = 0.0
    anneal_iterations: int = 0  # > 0: lr decays linearly to zero over this many iterations
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip epsilon must be positive")
        if self.anneal_iterations < 0:
            raise ValueError("anneal_iterations must be >= 0")
        for name in ("epochs", "minibatch_size", "rollout_steps", "n_envs", "n_atoms", "n_modes", "sr_particles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0 or self.value_coef < 0 or self.max_grad_norm < 0 or self.kappa <= 0:
            raise ValueError("lr, value_coef, max_grad_norm must be >= 0 and kappa > 0")
        if self.intrinsic_coef < 0:
            raise ValueError("intrinsic_coef must be >= 0")
        if self.intrinsic_coef > 0 and self.variant == "ppo_scalar":
            raise ValueError("the distributional intrinsic reward needs a distributional critic")

    def value_head(self):
        if self.variant == "ppo_scalar":
            return make_value_head("scalar")
        if self.variant == "gmac":
            return make_value_head("gmm", self.n_modes)
        return make_value_head("quantile", self.n_atoms)


# ---------------------------------------------------------------------------
# advantage, policy and value losses
# ---------------------------------------------------------------------------

@dataclass
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray  # advantages + values, the scalar lambda-returns
    mean: float = 0.0
    std: float = 1.0


def gae(rewards, values, next_values, terminals=None, truncated=None,
        gamma: float = 0.99, lam: float = 0.95) -> AdvantageEstimate:
    """Generalized advantage estimation along the last axis.

    ``next_values[..., t]`` is V(x_{t+1}); terminal steps do not bootstrap and
    truncated steps bootstrap but stop the recursion.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    nv = np.asarray(next_values, dtype=float)
    term = np.zeros(r.shape, bool) if terminals is None else np.asarray(terminals, bool)
    trunc = np.zeros(r.shape, bool) if truncated is None else np.asarray(truncated, bool)
    adv = np.zeros_like(r)
    acc = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        delta = r[..., t] + gamma * np.where(term[..., t], 0.0, nv[..., t]) - v[..., t]
        acc = delta + gamma * lam * np.where(term[..., t] | trunc[..., t], 0.0, acc)
        adv[..., t] = acc
    return AdvantageEstimate(adv, adv + v, float(adv.mean()), float(adv.std()))


def normalize(adv):
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_clip_loss(logp_new, logp_old, adv, eps: float = 0.2):
    """Clipped surrogate ``-mean(min(r A, g(eps, A)))``.

    Returns ``(loss, dloss/dlogp_new, clipped mask)``.
    """
    ratio = np.exp(logp_new - logp_old)
    g = np.where(adv >= 0, (1.0 + eps) * adv, (1.0 - eps) * adv)
    unclipped = ratio * adv
    clipped = unclipped > g
    obj = np.minimum(unclipped, g)
    n = adv.size
    grad = np.where(clipped, 0.0, -ratio * adv / n)
    flops.record(special=n, elementwise=6 * n, compare=2 * n)
    return float(-obj.mean()), grad, clipped


def value_loss_gmac(critic: ValueDistribution, target: ValueDistribution) -> float:
    return energy_gmm(critic, target)


def value_loss_iqac(quantiles, taus, target_atoms, kappa: float = 1.0) -> float:
    return huber_quantile_loss(target_atoms, quantiles, taus, kappa)


def value_loss_iqac_e(critic_atoms, target_atoms) -> float:
    return energy_samples(critic_atoms, target_atoms)


class RunningRms:
    """Running root-mean-square, used to scale intrinsic rewards."""

    def __init__(self):
        self.count = 0
        self.sq = 0.0

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float).ravel()
        if x.size:
            self.sq = (self.sq * self.count + float(np.sum(x * x))) / (self.count + x.size)
            self.count += x.size

    @property
    def rms(self) -> float:
        return float(np.sqrt(self.sq))


def intrinsic_reward_cramer(critic: ValueDistribution, target: ValueDistribution, stats: RunningRms) -> float:
    """Squared Cramer distance (half the energy distance), scaled by the running RMS."""
    d = energy_distance(critic, target).value / 2.0
    stats.update(d)
    return d / stats.rms if stats.rms > 0 else 0.0


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    returns: np.ndarray  # scalar lambda-returns
    value_old: np.ndarray  # scalar V(x_t) at collection
    target: dict = field(default_factory=dict)  # variant-specific value targets

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.actions[idx], self.logp_old[idx], self.adv[idx],
                     self.returns[idx], self.value_old[idx], {k: v[idx] for k, v in self.target.items()})


class NonFiniteLoss(FloatingPointError):
    pass


class Agent:
    """Owns network, optimizer, environments and RNG streams for one run."""

    def __init__(self, cfg: TrainConfig, env_name: str, env_kwargs: dict | None = None):
        self.cfg = cfg
        self.env_name = env_name
        self.env_kwargs = dict(env_kwargs or {})
        ss = np.random.SeedSequence(cfg.seed)
        net_ss, agent_ss, env_ss = ss.spawn(3)
        env_seeds = env_ss.generate_state(cfg.n_envs)
        envs = [make_env(env_name, int(s), **self.env_kwargs) for s in env_seeds]
        self.runner = VectorRunner(envs)
        self.spec = self.runner.spec
        self.net = ActorCritic(self.spec.obs_dim, self.spec.action, cfg.value_head(), cfg.hidden,
                               rng=np.random.default_rng(net_ss), init_log_std=cfg.init_log_std)
        self.opt = Adam(lr=cfg.lr)
        self.rng = np.random.default_rng(agent_ss)
        self.iteration = 0
        self.frames = 0
        self.intrinsic_stats = RunningRms()
        self.counter = flops.FlopCounter()
        ent = cfg.entropy_coef
        self.entropy_coef = (0.01 if self.discrete else 0.0) if ent is None else ent

    @property
    def discrete(self) -> bool:
        return self.spec.action_kind == "discrete"

    # -- acting ----------------------------------------------------------

    def _policy_stats(self, fwd, actions):
        if self.discrete:
            return categorical_logp(fwd.policy, actions), categorical_entropy(fwd.policy)
        return gaussian_logp(fwd.policy, fwd.log_std, actions), gaussian_entropy(fwd.log_std, len(actions))

    def act(self, obs, greedy: bool = False):
        fwd = self.net.forward(obs)
        b = fwd.policy.shape[0]
        if self.discrete:
            if greedy:
                a = np.argmax(fwd.policy, axis=1)
            else:
                p = softmax(fwd.policy)
                a = np.minimum((self.rng.random(b)[:, None] >= np.cumsum(p, axis=1)).sum(1), p.shape[1] - 1)
            flops.record(special=fwd.policy.size, elementwise=3 * fwd.policy.size, compare=fwd.policy.size)
        else:
            a = fwd.policy if greedy else fwd.policy + np.exp(fwd.log_std) * self.rng.standard_normal(fwd.policy.shape)
            flops.record(madd=fwd.policy.size, special=fwd.policy.size)
        logp, _ = self._policy_stats(fwd, a)
        return a, {"logp": logp, "value": fwd.value}

    def _value_params(self, raw):
        """Split raw value outputs into variant-specific arrays."""
        if isinstance(self.net.value_head, GmmHead):
            return self.net.value_head.params(raw)
        return raw

    # -- one iteration ---------------------------------------------------

    def collect(self):
        with flops.counting(self.counter, "inference"):
            roll = self.runner.run(self.act, self.cfg.rollout_steps)
        return roll

    def build_batch(self, roll) -> tuple[Batch, dict]:
        cfg = self.cfg
        e, n = roll.rewards.shape
        raw = roll.info["value"]  # (E, N, out)
        # successor critic outputs: reuse the next step's outputs inside an episode
        next_raw = np.empty_like(raw)
        next_raw[:, :-1] = raw[:, 1:]
        need = roll.truncated.copy()
        need[:, -1] = True
        need &= ~roll.terminals
        if need.any():
            next_raw[need] = self.net.forward(roll.next_obs[need]).value
        values = self.net.value_means(raw)
        next_values = self.net.value_means(next_raw)
        rewards = roll.rewards
        target = {}
        u_rep = self.rng.random((e, n, cfg.sr_particles if cfg.variant == "gmac" else cfg.n_atoms))
        if cfg.variant == "gmac":
            w, mu, var = self._value_params(next_raw)
            u_cat = self.rng.random(u_rep.shape)
            tmu, tvar = sweep_params(rewards, w, mu, var, roll.terminals, roll.truncated,
                                     cfg.gamma, cfg.lam, u_rep, u_cat)
            target = {"mu": tmu.reshape(e * n, -1), "var": tvar.reshape(e * n, -1)}
        elif cfg.variant in ("iqac", "iqac_e"):
            atoms = sweep_atoms(rewards, next_raw, roll.terminals, roll.truncated, cfg.gamma, cfg.lam, u_rep)
            target = {"atoms": atoms.reshape(e * n, -1)}
        extra = {}
        if cfg.intrinsic_coef > 0:
            r_int = self._intrinsic(raw.reshape(e * n, -1), target).reshape(e, n)
            rewards = rewards + cfg.intrinsic_coef * r_int
            extra["intrinsic_mean"] = float(r_int.mean())
        est = gae(rewards, values, next_values, roll.terminals, roll.truncated, cfg.gamma, cfg.lam)
        if cfg.variant == "ppo_scalar":
            ret = lambda_returns_scalar(roll.rewards, next_values, cfg.gamma, cfg.lam, roll.terminals, roll.truncated)
            target = {"returns": ret.reshape(e * n)}
        flat = lambda x: x.reshape(e * n, *x.shape[2:])  # noqa: E731
        batch = Batch(flat(roll.obs), flat(roll.actions), flat(roll.info["logp"]), flat(est.advantages),
                      flat(est.returns), flat(values), target)
        return batch, extra

    def _intrinsic(self, raw, target) -> np.ndarray:
        if self.cfg.variant == "gmac":
            w, mu, var = self._value_params(raw)
            tw = np.full(target["mu"].shape, 1.0 / target["mu"].shape[1])
            d, _ = energy_gmm_batch(w, mu, var, tw, target["mu"], target["var"])
        else:
            d, _ = energy_samples_batch(raw, target["atoms"])
        d = np.maximum(d, 0.0) / 2.0
        self.intrinsic_stats.update(d)
        rms = self.intrinsic_stats.rms
        return d / rms if rms > 0 else np.zeros_like(d)

    def value_loss_and_grad(self, raw, mb: Batch):
        """Mean value loss over the minibatch and its gradient wrt raw value outputs."""
        cfg, b = self.cfg, raw.shape[0]
        if cfg.variant == "ppo_scalar":
            v = raw[:, 0]
            ret = mb.target["returns"]
            v_clip = mb.value_old + np.clip(v - mb.value_old, -cfg.clip_eps, cfg.clip_eps)
            l1, l2 = (v - ret) ** 2, (v_clip - ret) ** 2
            use_clip = l2 > l1
            grad = np.where(use_clip & (np.abs(v - mb.value_old) > cfg.clip_eps), 0.0,
                            np.where(use_clip, v_clip - ret, v - ret)) / b
            flops.record(elementwise=10 * b, compare=3 * b)
            return float(0.5 * np.mean(np.maximum(l1, l2))), grad[:, None]
        if cfg.variant == "iqac":
            loss, g = huber_quantile_batch(raw, quantile_fractions(cfg.n_atoms), mb.target["atoms"], cfg.kappa)
            return float(loss.mean()), g / b
        if cfg.variant == "iqac_e":
            loss, g = energy_samples_batch(raw, mb.target["atoms"], with_target_term=False)
            return float(loss.mean()), g / b
        head = self.net.value_head
        w, mu, var = head.params(raw)
        tw = np.full(mb.target["mu"].shape, 1.0 / mb.target["mu"].shape[1])
        loss, (gw, gmu, gvar) = energy_gmm_batch(w, mu, var, tw, mb.target["mu"], mb.target["var"],
                                                  with_target_term=False)
        return float(loss.mean()), head.backward(raw, gw / b, gmu / b, gvar / b)

    def minibatch_update(self, mb: Batch) -> dict:
        cfg = self.cfg
        fwd = self.net.forward(mb.obs)
        b = mb.obs.shape[0]
        logp, ent = self._policy_stats(fwd, mb.actions)
        adv = normalize(mb.adv) if cfg.normalize_advantages and b > 1 else mb.adv
        pl, g_logp, clipped = ppo_clip_loss(logp, mb.logp_old, adv, cfg.clip_eps)
        vl, g_value = self.value_loss_and_grad(fwd.value, mb)
        total = pl + cfg.value_coef * vl - self.entropy_coef * float(ent.mean())
        if not np.isfinite(total):
            raise NonFiniteLoss(f"non-finite loss (policy {pl}, value {vl})")
        g_ent = np.full(b, -self.entropy_coef / b)
        g_log_std = None
        if self.discrete:
            g_policy = categorical_grads(fwd.policy, mb.actions, g_logp, g_ent)
        else:
            g_policy, g_log_std = gaussian_grads(fwd.policy, fwd.log_std, mb.actions, g_logp, g_ent)
        flops.record(elementwise=6 * fwd.policy.size, special=2 * fwd.policy.size)
        grads = self.net.backward(fwd.tape, g_policy, cfg.value_coef * g_value, g_log_std)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss("non-finite gradient")
        norm = clip_grads(grads, cfg.max_grad_norm)
        self.opt.step(self.net.params, grads)
        return {"policy_loss": pl, "value_loss": vl, "entropy": float(ent.mean()),
                "clip_fraction": float(clipped.mean()), "grad_norm": norm,
                "approx_kl": float(np.mean(mb.logp_old - logp))}

    def train_iteration(self) -> dict:
        cfg = self.cfg
        self.counter.reset("inference")
        self.counter.reset("update")
        if cfg.anneal_iterations:
            self.opt.lr = cfg.lr * max(0.0, 1.0 - self.iteration / cfg.anneal_iterations)
        roll = self.collect()
        batch, extra = self.build_batch(roll)
        n = batch.obs.shape[0]
        stats = []
        with flops.counting(self.counter, "update"):
            for _ in range(cfg.epochs):
                perm = self.rng.permutation(n)
                for start in range(0, n, cfg.minibatch_size):
                    try:
                        stats.append(self.minibatch_update(batch.take(perm[start:start + cfg.minibatch_size])))
                    except NonFiniteLoss as exc:
                        dump = {"iteration": self.iteration + 1, "error": str(exc),
                                "param_norms": {k: float(np.linalg.norm(v)) for k, v in self.net.params.items()}}
                        raise NonFiniteLoss(json.dumps(dump)) from exc
        self.iteration += 1
        self.frames += roll.frames
        record = {
            "iteration": self.iteration,
            "frames": self.frames,
            "mean_return": float(np.mean(roll.episode_returns)) if roll.episode_returns else None,
            "episodes": len(roll.episode_returns),
        }
        for k in stats[0]:
            record[k] = float(np.mean([s[k] for s in stats]))
        record["flops_inference"] = self.counter.total("inference")
        record["flops_update"] = self.counter.total("update")
        record.update(extra)
        return record

    # -- evaluation ------------------------------------------------------

    def evaluate(self, episodes: int, seed: int, greedy: bool = True, max_steps: int | None = None) -> list:
        """Returns of ``episodes`` fresh episodes on a separately seeded env."""
        env = make_env(self.env_name, seed, **self.env_kwargs)
        saved, self.rng = self.rng, np.random.default_rng(seed)
        returns = []
        try:
            for _ in range(episodes):
                obs, total = env.reset(), 0.0
                for _ in range(max_steps or env.spec.max_steps):
                    a, _ = self.act(obs[None], greedy=greedy)
                    res = env.step(a[0])
                    total += res.reward
                    obs = res.obs
                    if res.terminal or res.truncated:
                        break
                returns.append(total)
        finally:
            self.rng = saved
        return returns

    def critic_distribution(self, obs) -> ValueDistribution:
        fwd = self.net.forward(np.atleast_2d(obs))
        return self.net.value_distribution(fwd.value[0])


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
