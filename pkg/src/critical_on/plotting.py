"""Static figures for the report directory (Agg backend, no timestamps)."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG files carry only what is passed here, so reruns give identical bytes
PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def rate_figure(path, n_grid, values, std_errors, slope=None, floor=None, title="", ylabel="W1"):
    """Log-log metric against n with error bars and the fitted power law."""
    n = np.asarray(n_grid, dtype=float)
    v = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.errorbar(n, v, yerr=2 * np.asarray(std_errors, dtype=float), fmt="o", capsize=3, label="estimate")
    if slope is not None and len(n) > 1:
        x = np.log(n)
        b = np.mean(np.log(v)) - slope * np.mean(x)
        ax.plot(n, np.exp(b + slope * x), "-", label=f"fit slope {slope:.3f}")
        ref = v[0] * (n / n[0]) ** -0.5
        ax.plot(n, ref, ":", color="gray", label="n^-1/2")
    if floor is not None:
        ax.axhline(floor, ls="--", color="tab:red", lw=1, label="two-sample floor")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def multi_rate_figure(path, n_grid, series: dict, title=""):
    """Several diagnostics on one log-log panel, keyed by label."""
    n = np.asarray(n_grid, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for label, (vals, ses) in series.items():
        ax.errorbar(n, vals, yerr=2 * np.asarray(ses, dtype=float), fmt="o-", capsize=2, ms=3, label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def curve_figure(path, x, curves: dict, title="", xlabel="x", ylabel="", logy=False):
    """Line plot of one or more curves sharing an x-grid."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for label, y in curves.items():
        ax.plot(x, y, "o-" if len(x) < 20 else "-", ms=3, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
