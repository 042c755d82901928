"""Per-variant FLOP totals at matched settings.

Inference is one policy/critic pass on a single observation including action
sampling.  Update is one full minibatch step: forward, losses, backward, and
the Adam step.  Counts are analytic (from array shapes), so they are exactly
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..agent import VARIANTS, Agent, TrainConfig
from ..flops import FlopCounter, PhaseCounts, counting

FLOP_ENV = ("gridworld", {"size": 5})
# closed-form energy: forward + backward cost per component pair (see energy_gmm_batch)
GMM_PAIR_FLOPS = 14 + 3 + 2 * 5


@dataclass(frozen=True)
class FlopSettings:
    minibatch: int = 128
    atoms: int = 64  # N = N' for the quantile critics
    modes: int = 5  # K for the mixture critic
    particles: int = 5  # SR(lambda) target components for the mixture critic
    hidden: tuple = (64, 64)


def _agent(variant: str, s: FlopSettings) -> Agent:
    cfg = TrainConfig(variant=variant, seed=0, n_envs=8, rollout_steps=max(1, -(-s.minibatch // 8)),
                      minibatch_size=s.minibatch, n_atoms=s.atoms, n_modes=s.modes,
                      sr_particles=s.particles, hidden=s.hidden)
    return Agent(cfg, FLOP_ENV[0], FLOP_ENV[1])


def count_flops(variant: str, phase: str, settings: FlopSettings | None = None) -> PhaseCounts:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    s = settings or FlopSettings()
    ag = _agent(variant, s)
    roll = ag.runner.run(ag.act, ag.cfg.rollout_steps)
    batch, _ = ag.build_batch(roll)
    counter = FlopCounter()
    if phase == "inference":
        with counting(counter, "inference"):
            ag.act(batch.obs[:1])
    elif phase == "update":
        with counting(counter, "update"):
            ag.minibatch_update(batch.take(np.arange(s.minibatch)))
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return counter.phases[phase]


def gmm_head_overhead(settings: FlopSettings | None = None) -> int:
    """Documented update-phase overhead of the mixture critic over a scalar one.

    Dominant terms only: widening the value layer from 1 to 3K outputs (one
    forward and two backward matrix products) and the pairwise closed-form
    energy terms over K*M cross pairs and K*K self pairs.
    """
    s = settings or FlopSettings()
    b, h, k, m = s.minibatch, s.hidden[-1], s.modes, s.particles
    widening = 3 * 2 * b * h * (3 * k - 1)
    pairs = GMM_PAIR_FLOPS * b * (k * m + k * k)
    return widening + pairs


def flop_table(variants=VARIANTS, settings: FlopSettings | None = None) -> list[dict]:
    rows = []
    for v in variants:
        inf, upd = count_flops(v, "inference", settings), count_flops(v, "update", settings)
        rows.append({"variant": v, "inference_flops": inf.flops, "update_flops": upd.flops,
                     "update_madd": upd.madd, "update_elementwise": upd.elementwise,
                     "update_special": upd.special, "update_compare": upd.compare})
    return rows
