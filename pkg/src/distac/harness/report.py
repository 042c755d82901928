"""CSV writers and matplotlib figures (Agg backend, PNG next to the CSV)."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..distcore import DiracMixture, GaussianMixture, components  # noqa: E402
from .persist import atomic_write  # noqa: E402

CSV_SCHEMA = "distac-csv/1"
KDE_BANDWIDTH = 0.05


def write_csv(path: str | Path, kind: str, header: list[str], rows) -> Path:
    """CSV with a leading ``# distac-csv/1 <kind>`` schema comment."""
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA} {kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    atomic_write(path, buf.getvalue().encode())
    return Path(path)


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def density(d, z, bandwidth: float = KDE_BANDWIDTH) -> np.ndarray:
    """Density on grid ``z``; Dirac mixtures are smoothed with a Gaussian kernel."""
    w, mu, var = components(d)
    if isinstance(d, DiracMixture):
        var = np.full_like(var, bandwidth**2)
    z = np.asarray(z, dtype=float)
    u = (z[:, None] - mu) / np.sqrt(var)
    return (np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi * var)) @ w


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_densities(path, z, columns: dict, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, vals in columns.items():
        ax.plot(z, vals, label=name, lw=2.0 if name == "truth" else 1.2,
                ls="--" if name == "truth" else "-")
    ax.set_xlabel("return z")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_curves(path, x, columns: dict, xlabel: str, ylabel: str, logy: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, vals in columns.items():
        vals = np.array([np.nan if v is None else v for v in vals], dtype=float)
        ax.plot(x, vals, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_bars(path, labels, values, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(labels, values, color="tab:blue")
    ax.set_ylabel(ylabel)
    return _save(fig, Path(path))


def describe(d) -> str:
    if isinstance(d, GaussianMixture):
        return repr(d)
    return f"DiracMixture(m={d.m})"
