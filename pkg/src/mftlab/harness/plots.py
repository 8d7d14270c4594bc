"""Figure rendering for the experiment reports.

Every experiment that writes a CSV also renders a PNG beside it; figures are
diagnostic companions to the delimited output, never the primary record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def gradcheck_figure(rel_errs, tol, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(np.arange(len(rel_errs)), np.maximum(rel_errs, 1e-18), ".", ms=4)
    ax.axhline(tol, color="crimson", ls="--", label=f"tolerance {tol:g}")
    ax.set_xlabel("checked coordinate")
    ax.set_ylabel("relative error vs finite differences")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def sweep_figure(values, means, slope, band, axis_name, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(values, means, "o-", label="sup-t error (seed mean)")
    if slope is not None and len(values) > 1:
        anchor = means[0] * (np.asarray(values, dtype=float) / values[0]) ** slope
        ax.loglog(values, anchor, "--", color="gray",
                  label=f"fitted slope {slope:.2f} (band [{band[0]}, {band[1]}])")
    ax.set_xlabel(axis_name)
    ax.set_ylabel("sup-t Frobenius gap")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def closeness_figure(taus, q_ref, runs, gaps, path):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(taus, q_ref, "k-", lw=2, label="reference law")
    for (depth, width), q in runs.items():
        axes[0].plot(taus, q, "--", label=f"L={depth}, M={width}")
    axes[0].set_xlabel("flow time")
    axes[0].set_ylabel("objective")
    axes[0].legend(fontsize=8)
    axes[0].grid(True, alpha=0.3)
    labels = [f"({d},{m})" for (d, m) in runs]
    axes[1].semilogy(labels, gaps, "s-")
    axes[1].set_xlabel("(depth, width)")
    axes[1].set_ylabel("sup-tau objective gap to reference")
    axes[1].grid(True, alpha=0.3)
    return _save(fig, path)


def converge_figure(trajectories, lam, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, (taus, risks) in trajectories.items():
        ax.semilogy(taus, np.maximum(risks, 1e-18), label=f"seed {seed}")
    ax.set_xlabel("flow time")
    ax.set_ylabel("risk")
    ax.set_title(f"weight decay {lam:g}")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def w2_figure(deltas, ratios, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(deltas, ratios, "o-")
    ax.set_xlabel("flow-time lag")
    ax.set_ylabel("max W2 / sqrt(lag)")
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def probe_figure(reports, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(reports)
    margins = [reports[n]["max_violation_margin"] for n in names]
    colors = ["seagreen" if m <= 0 else "crimson" for m in margins]
    ax.bar(names, margins, color=colors)
    ax.axhline(0.0, color="black", lw=1)
    ax.set_ylabel("worst growth-bound margin (<= 0 passes)")
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)
