"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scoring import pr_curve  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(history, path):
    """Train and validation total loss per epoch, components dashed."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [r["epoch"] for r in history]
        ax.plot(ep, [r["train_total"] for r in history], label="train total", color="C0")
        ax.plot(ep, [r["valid_total"] for r in history], label="valid total", color="C1")
        for i, part in enumerate(("noise", "graph", "recon")):
            ax.plot(ep, [r[f"valid_{part}"] for r in history], ls="--", lw=0.9,
                    color=f"C{i + 2}", label=f"valid {part}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def score_panels(report, path):
    """Score histogram by class with the threshold, and the test PR curve."""
    y = np.asarray(report.labels) > 0
    s = np.asarray(report.s)
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        bins = np.linspace(s.min(), s.max(), 40) if s.max() > s.min() else 10
        a1.hist(s[~y], bins=bins, alpha=0.6, label="normal")
        a1.hist(s[y], bins=bins, alpha=0.6, label="abnormal")
        if np.isfinite(report.tau):
            a1.axvline(report.tau, color="k", lw=1, ls="--", label="threshold")
        a1.set_xlabel("anomaly score")
        a1.set_ylabel("count")
        a1.legend()
        rec, prec = pr_curve(s, report.labels)
        a2.step(np.r_[0.0, rec], np.r_[prec[0], prec], where="post")
        a2.axhline(y.mean(), color="gray", lw=1, ls=":", label="prevalence")
        a2.set_xlim(0, 1)
        a2.set_ylim(0, 1.02)
        a2.set_xlabel("recall")
        a2.set_ylabel("precision")
        a2.set_title(f"APR {report.metrics['APR']:.3f}")
        a2.legend()
        return _save(fig, path)


def sweep_plot(rows, axis, path):
    """F1, Rec and APR against the swept value."""
    labels = [str(r["value"]) for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key, marker in (("F1", "o"), ("Rec", "s"), ("APR", "^")):
            ax.plot(x, [r[key] for r in rows], marker=marker, label=key)
        ax.set_xticks(x, labels)
        ax.set_xlabel(axis)
        ax.set_ylim(0, 1.02)
        ax.legend()
        return _save(fig, path)


def observation_plot(x, x0_hat, x_rec, v, path):
    """One observation with its decontaminated and reconstructed versions."""
    K = x.shape[0]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(K, 1, figsize=(7.0, 1.3 * K + 0.6), sharex=True, squeeze=False)
        for k, ax in enumerate(axes[:, 0]):
            ax.plot(x[k], color="k", lw=0.9, label="observed")
            ax.plot(x0_hat[k], color="C0", lw=0.9, label="decontaminated")
            ax.plot(x_rec[k], color="C1", lw=0.9, ls="--", label="reconstruction")
            ax.fill_between(np.arange(x.shape[1]), 0, 1, where=v[k] == 0, step="mid",
                            color="gray", alpha=0.15, transform=ax.get_xaxis_transform())
            ax.set_ylabel(f"var {k}")
        axes[0, 0].legend(ncol=3, loc="upper right")
        axes[-1, 0].set_xlabel("time stamp")
        return _save(fig, path)
