"""Optional PNG rendering of the plot-data files (needs matplotlib)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("figures need matplotlib; install the 'plot' extra") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_adapt_figures(records, reference, out_dir) -> list[Path]:
    """Eigenvalue history, error vs ndof and effectivity figures of one run."""
    plt = _pyplot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    its = [r.iteration for r in records]
    ndof = np.array([r.ndof for r in records], float)
    lam = np.array([r.eigenvalues for r in records])

    fig, ax = plt.subplots(figsize=(5, 4))
    for k in range(lam.shape[1]):
        ax.plot(its, lam[:, k], marker="o", ms=3, label=rf"$\lambda_{{{k + 1},h}}$")
    if reference is not None:
        ax.axhline(reference, color="k", lw=0.8, ls="--", label="reference")
    ax.set_xlabel("iteration")
    ax.set_ylabel("eigenvalue")
    ax.legend()
    files.append(_save(fig, out / "eigenvalues.png", plt))

    if reference is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        for k in records[-1].cluster:
            err = np.abs(reference - lam[:, k - 1])
            ax.loglog(ndof, err, marker="o", ms=3, label=rf"$|\lambda-\lambda_{{{k},h}}|$")
        mu2 = np.array([r.mu2_cluster for r in records])
        ax.loglog(ndof, mu2, ls=":", label=r"$\sum\mu^2$")
        ax.loglog(ndof, mu2[0] * ndof[0] / ndof, color="gray", lw=0.8, label="slope -1")
        ax.set_xlabel("ndof")
        ax.legend()
        files.append(_save(fig, out / "error_vs_ndof.png", plt))

        from .bench import effectivity
        eff = [row[4] for row in effectivity(records, reference)]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(its, eff, marker="o", ms=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel("effectivity")
        files.append(_save(fig, out / "effectivity.png", plt))
    return files


def _save(fig, path, plt):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
