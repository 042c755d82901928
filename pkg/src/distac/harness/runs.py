"""Implementations behind the CLI commands."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..agent import VARIANTS, Agent, config_dict
from ..distcore import DiracMixture, support_bounds, variance
from ..metrics import energy_distance, quantile_fractions
from ..tabular import (
    contraction_check,
    fit_tabular_critic,
    five_state_mdp,
    five_state_truth,
    ground_truth_monte_carlo,
    impute_from_quantiles,
    load_mdp,
    mode_clusters,
)
from . import report
from .config import RunConfig, build_config
from .flopcount import FlopSettings, flop_table, gmm_head_overhead
from .persist import RunDir, read_metrics

log = logging.getLogger(__name__)

# loss -> (representation, size) used by the tabular fitting experiment
TOY_METHODS = {
    "energy_gmm": ("gmm_K", 5),
    "energy_samples": ("dirac_m", 16),
    "huber_quantile": ("dirac_m", 15),
}
TOY_STEPS, TOY_LR, TOY_LAM, TOY_EVAL_EVERY = 4000, 0.02, 0.95, 100


def run_toy(out: Path, mdp_name: str = "five_state", losses=None, steps: int = TOY_STEPS,
            seed: int = 0, gamma: float | None = None, contraction_trials: int = 0,
            truth_episodes: int = 20000, lr: float = TOY_LR, lam: float = TOY_LAM) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    losses = list(losses or TOY_METHODS)
    rng = np.random.default_rng(seed)
    if mdp_name == "five_state":
        mdp = five_state_mdp(1.0 if gamma is None else gamma)
        truth = five_state_truth(mdp.gamma)
    else:
        mdp = load_mdp(mdp_name)
        truth = ground_truth_monte_carlo(mdp, mdp.uniform_policy(), 0, truth_episodes, rng)
    pi = mdp.uniform_policy()
    fits, summary = {}, {"mdp": mdp_name, "gamma": mdp.gamma, "seed": seed, "steps": steps,
                         "truth_variance": variance(truth), "methods": {}}
    for loss in losses:
        rep, size = TOY_METHODS[loss]
        res = fit_tabular_critic(mdp, pi, loss, rep, steps, lr, np.random.default_rng([seed, len(fits)]),
                                 size=size, lam=lam, truth=truth, eval_every=TOY_EVAL_EVERY)
        fits[loss] = res
        d = res.table.get(0)
        summary["methods"][loss] = {
            "final_energy_distance": res.curve[-1][1],
            "variance": variance(d),
            "clusters": [c.__dict__ for c in mode_clusters(d)],
        }
        log.info("%s: energy distance %.4g", loss, res.curve[-1][1])
    lo, hi = support_bounds(truth, 4.0) if not isinstance(truth, DiracMixture) else (
        float(truth.atoms.min()) - 0.5, float(truth.atoms.max()) + 0.5)
    z = np.linspace(lo, hi, 401)
    cols = {"truth": report.density(truth, z)}
    for loss, res in fits.items():
        cols[loss] = report.density(res.table.get(0), z)
        if loss == "huber_quantile":
            m = TOY_METHODS[loss][1]
            imputed = impute_from_quantiles(res.quantile_values(0), quantile_fractions(m), 20000,
                                            np.random.default_rng(seed + 1))
            cols["huber_quantile_imputed"] = report.density(DiracMixture(imputed), z)
            summary["methods"][loss]["imputed_energy_distance"] = energy_distance(DiracMixture(imputed), truth).value
    report.write_csv(out / "densities.csv", "densities", ["z", *cols], zip(z, *cols.values()))
    report.plot_densities(out / "densities.png", z, cols, "value distribution at the start state")
    steps_axis = [s for s, _ in next(iter(fits.values())).curve]
    curve_cols = {k: [e for _, e in r.curve] for k, r in fits.items()}
    report.write_csv(out / "curve.csv", "distance_curve", ["step", *curve_cols], zip(steps_axis, *curve_cols.values()))
    report.plot_curves(out / "curve.png", steps_axis, curve_cols, "step", "energy distance to truth", logy=True)
    if contraction_trials:
        rep = contraction_check(None, None, contraction_trials, 2.0, np.random.default_rng(seed))
        summary["contraction"] = {"trials": rep.trials, "cramer_passed": rep.cramer_passed,
                                  "energy_passed": rep.energy_passed, "max_ratio": max(rep.ratios)}
        report.write_csv(out / "contraction.csv", "contraction", ["trial", "cramer_ratio"], enumerate(rep.ratios))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _make_agent(cfg: RunConfig) -> Agent:
    return Agent(cfg.train_config(), cfg["env"], cfg.env_kwargs())


def _eval_block(agent: Agent, cfg: RunConfig) -> dict:
    returns = agent.evaluate(cfg["eval_episodes"], cfg["eval_seed"])
    return {"episodes": len(returns), "seed": cfg["eval_seed"], "returns": returns,
            "mean": float(np.mean(returns)), "std": float(np.std(returns))}


def run_train(cfg: RunConfig, out: Path, progress=None) -> dict:
    rd = RunDir(out)
    for stale in list(rd.root.glob("checkpoint-*.bin")) + [rd.root / "metrics.jsonl"]:
        if stale.exists():
            stale.unlink()
    rd.write_config(cfg.snapshot())
    writer = rd.metrics()
    agent = _make_agent(cfg)
    n = cfg["iterations"]
    for _ in range(n):
        rec = agent.train_iteration()
        it = rec["iteration"]
        if it % cfg["eval_every"] == 0 or it == n:
            rec["eval_return"] = float(np.mean(agent.evaluate(cfg["eval_episodes"], cfg["eval_seed"])))
        writer.append(rec)
        if cfg["checkpoint_every"] and it % cfg["checkpoint_every"] == 0 and it != n:
            rd.save_checkpoint(f"checkpoint-{it:06d}.bin", agent.net, agent.opt, {"iteration": it})
        if progress:
            progress(rec)
    final = f"checkpoint-{n:06d}.bin"
    rd.save_checkpoint(final, agent.net, agent.opt, {"iteration": n})
    return rd.write_manifest({"final_checkpoint": final, "final_eval": _eval_block(agent, cfg),
                              "train_config": config_dict(agent.cfg)})


def run_eval(run: Path, episodes: int | None = None, checkpoint: str | None = None) -> dict:
    """Reload a run from its manifest and re-evaluate; checks reproduction of the recorded eval."""
    rd = RunDir(run)
    manifest = rd.read_manifest()
    rd.verify("config.snapshot")
    cfg = build_config(rd.root / "config.snapshot", environ={})
    if episodes is not None:
        cfg = RunConfig({**cfg.values, "eval_episodes": episodes})
    name = checkpoint or manifest["final_checkpoint"]
    net, opt, _ = rd.load_checkpoint(name)
    agent = _make_agent(cfg)
    agent.net, agent.opt = net, opt
    block = _eval_block(agent, cfg)
    recorded = manifest.get("final_eval")
    block["checkpoint"] = name
    block["matches_recorded"] = (
        recorded is not None and name == manifest["final_checkpoint"]
        and recorded["episodes"] == block["episodes"] and recorded["returns"] == block["returns"]
    )
    return block


EXPORT_FIELDS = ["iteration", "frames", "mean_return", "eval_return", "policy_loss", "value_loss",
                 "entropy", "clip_fraction", "flops_inference", "flops_update"]


def run_export(runs: list[Path], out: Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves, written = [], {}, []
    for run in runs:
        recs = read_metrics(Path(run) / "metrics.jsonl")
        if not recs:
            raise ValueError(f"{run}: no metrics records")
        label = Path(run).name
        for r in recs:
            rows.append([label] + [r.get(k) for k in EXPORT_FIELDS])
        curves[label] = ([r["iteration"] for r in recs], [r.get("mean_return") for r in recs])
    written.append(report.write_csv(out / "learning_curves.csv", "learning_curves", ["run", *EXPORT_FIELDS], rows))
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, (x, y) in curves.items():
        ax.plot(x, np.array([np.nan if v is None else v for v in y], dtype=float), label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode return")
    ax.legend(fontsize=8)
    written.append(report._save(fig, out / "learning_curves.png"))
    return written


def run_flops(out: Path | None, variants=VARIANTS, settings: FlopSettings | None = None) -> dict:
    s = settings or FlopSettings()
    rows = flop_table(variants, s)
    by = {r["variant"]: r for r in rows}
    result = {"settings": s.__dict__, "rows": rows}
    if "gmac" in by and "ppo_scalar" in by:
        bound = by["ppo_scalar"]["update_flops"] + gmm_head_overhead(s)
        result["gmm_head_overhead"] = gmm_head_overhead(s)
        result["gmac_vs_scalar_plus_overhead"] = by["gmac"]["update_flops"] / bound
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        keys = list(rows[0])
        report.write_csv(out / "flops.csv", "flops", keys, [[r[k] for k in keys] for r in rows])
        report.plot_bars(out / "flops.png", [r["variant"] for r in rows], [r["update_flops"] for r in rows],
                         "update FLOPs per minibatch")
    return result
