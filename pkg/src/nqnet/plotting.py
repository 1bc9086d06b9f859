"""Static figures: quantile fans over data and error-versus-level curves.

Everything renders through the Agg/SVG backends into standalone vector
files; nothing here opens a window.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",
    "svg.hashsalt": "nqnet",  # stable element ids, so identical inputs give identical files
}


class SchemaError(ValueError):
    pass


def _size(scale=1.0):
    width = 5.5 * scale
    return width, width * (np.sqrt(5.0) - 1.0) / 2.0


def read_fan_csv(path):
    """Read a fan table: column ``x`` then one ``q_<tau>`` column per level.

    Optional ``true_<tau>`` columns hold reference curves. Returns
    ``(x, taus, Q, truth)`` with ``truth`` None when absent.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) < 2:
        raise SchemaError(f"{path}: empty fan table")
    header = rows[0]
    if header[0] != "x":
        raise SchemaError(f"{path}: first column must be 'x', got {header[0]!r}")
    q_cols = [i for i, h in enumerate(header) if h.startswith("q_")]
    t_cols = [i for i, h in enumerate(header) if h.startswith("true_")]
    if not q_cols or len(q_cols) + len(t_cols) + 1 != len(header):
        raise SchemaError(f"{path}: expected columns x, q_<tau>..., [true_<tau>...]")
    try:
        data = np.array(rows[1:], dtype=np.float64)
        taus = np.array([float(header[i][2:]) for i in q_cols])
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric entry ({exc})") from None
    truth = data[:, t_cols] if t_cols else None
    return data[:, 0], taus, data[:, q_cols], truth


def write_fan_csv(path, x, taus, Q, truth=None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["x"] + [f"q_{t:g}" for t in taus]
        if truth is not None:
            header += [f"true_{t:g}" for t in taus]
        w.writerow(header)
        for i, xi in enumerate(x):
            row = [repr(float(xi))] + [repr(float(v)) for v in Q[i]]
            if truth is not None:
                row += [repr(float(v)) for v in truth[i]]
            w.writerow(row)
    return path


def fan_figure(x, taus, Q, data=None, truth=None, title=None):
    """Estimated quantile curves (solid), optional truth (dashed) and data scatter."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        if data is not None:
            ax.scatter(np.ravel(data[0]), data[1], s=4, c="0.6", alpha=0.6, linewidths=0, label="data")
        colors = plt.cm.viridis(np.linspace(0.05, 0.95, len(taus)))
        for k, tau in enumerate(taus):
            ax.plot(x, Q[:, k], color=colors[k], lw=1.2, label=f"{tau:g}")
        if truth is not None:
            for k in range(len(taus)):
                ax.plot(x, truth[:, k], color=colors[k], lw=0.9, ls="--")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        if title:
            ax.set_title(title)
        if len(taus) <= 10:
            ax.legend(title="level", frameon=False, loc="best")
        fig.tight_layout()
    return fig


def errors_figure(rows, model, metrics=("l1", "l2sq")):
    """Per-level error curves for every method in a replication summary."""
    rows = [r for r in rows if r["model"] == model]
    if not rows:
        raise SchemaError(f"no summary rows for model {model!r}")
    methods = list(dict.fromkeys(r["method"] for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=_size(1.4), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            for method in methods:
                mine = sorted((r for r in rows if r["method"] == method), key=lambda r: r["tau"])
                tau = np.array([r["tau"] for r in mine])
                mean = np.array([r[metric + "_mean"] for r in mine])
                std = np.array([r[metric + "_std"] for r in mine])
                ax.plot(tau, mean, marker="o", ms=2.5, lw=1.1, label=method)
                ax.fill_between(tau, mean - std, mean + std, alpha=0.15)
            ax.set_xlabel("quantile level")
            ax.set_ylabel({"l1": "$L_1$ error", "l2sq": "$L_2^2$ error"}.get(metric, metric))
        axes[0][0].legend(frameon=False)
        fig.suptitle(model)
        fig.tight_layout()
    return fig


def policy_figure(states, q_values, oracle_actions=None):
    """Mean return per action along the state grid, with the greedy choice marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        for a in range(q_values.shape[1]):
            ax.plot(states, q_values[:, a], lw=1.2, label=f"Q(s, {a})")
        greedy = np.argmax(q_values, axis=1)
        lo = q_values.min()
        ax.scatter(states, np.full(len(states), lo), c=greedy, cmap="coolwarm", s=6, marker="|",
                   label="greedy")
        if oracle_actions is not None:
            ax.scatter(states, np.full(len(states), lo - 0.05 * np.ptp(q_values)), c=oracle_actions,
                       cmap="coolwarm", s=6, marker="|", label="oracle")
        ax.set_xlabel("state")
        ax.set_ylabel("mean return")
        ax.legend(frameon=False)
        fig.tight_layout()
    return fig


def read_summary_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = reader.fieldnames or []
    needed = {"model", "method", "tau", "l1_mean", "l1_std", "l2sq_mean", "l2sq_std"}
    if not rows or not needed <= set(fields):
        raise SchemaError(f"{path}: not a replication summary table")
    for r in rows:
        for k in fields:
            if k not in ("model", "method"):
                r[k] = float(r[k])
    return rows


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)
    return path
