"""Figure rendering for the command-line report paths.

The delimited output stays canonical; these helpers render matplotlib
figures next to it when a figures directory is requested.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curve(evals, out_dir: str, name: str = "training.png") -> str:
    """Held-out ELBO against training step with stderr band."""
    steps = np.array([s for s, _ in evals])
    totals = np.array([e.total for _, e in evals])
    errs = np.array([e.stderr for _, e in evals])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, totals, marker="o", lw=1.2)
    ax.fill_between(steps, totals - 2 * errs, totals + 2 * errs, alpha=0.25)
    ax.set_xlabel("step")
    ax.set_ylabel("held-out ELBO (nats)")
    ax.grid(alpha=0.3)
    return _save(fig, out_dir, name)


def sample_scatter(z: np.ndarray, out_dir: str, name: str = "samples.png",
                   reference: np.ndarray = None) -> str:
    """Scatter of generated samples, optionally against held-out data."""
    z = np.atleast_2d(z)
    fig, ax = plt.subplots(figsize=(5, 5))
    if z.shape[1] == 1:
        ax.hist(z[:, 0], bins=60, density=True, alpha=0.7, label="generated")
        if reference is not None:
            ax.hist(reference[:, 0], bins=60, density=True, alpha=0.4,
                    histtype="step", label="data")
        ax.set_xlabel("z")
        ax.legend()
    else:
        if reference is not None:
            ax.scatter(reference[:, 0], reference[:, 1], s=4, alpha=0.3,
                       label="data")
        ax.scatter(z[:, 0], z[:, 1], s=4, alpha=0.5, label="generated")
        ax.set_xlabel("z1")
        ax.set_ylabel("z2")
        ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_dir, name)


def compare_bars(rows, out_dir: str, name: str = "compare.png") -> str:
    """Final ELBO per process with 2-stderr error bars.

    rows: iterables of (label, elbo, stderr).
    """
    labels = [r[0] for r in rows]
    vals = np.array([r[1] for r in rows])
    errs = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, vals, yerr=2 * errs, capsize=4, alpha=0.8)
    ax.set_ylabel("final held-out ELBO (nats)")
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, out_dir, name)
