"""Figures rendered next to the JSON/CSV reports (``--figures DIR``)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

CHEMICAL_ACCURACY = 0.0016


def _save(fig, directory, name: str) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.png"
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def convergence(reports: list[dict], directory, reference: float | None = None) -> list[Path]:
    """Energy and selected-space size per iteration; error vs ``reference`` if given."""
    it = [r["iteration"] for r in reports]
    with plt.rc_context(STYLE):
        fig, (ax_e, ax_s) = plt.subplots(2, 1, figsize=(4.5, 4.5), sharex=True)
        if reference is None:
            ax_e.plot(it, [r["energy"] for r in reports], "o-", ms=3)
            ax_e.set_ylabel("energy (hartree)")
        else:
            err = [max(r["energy"] - reference, 1e-16) for r in reports]
            ax_e.semilogy(it, err, "o-", ms=3)
            ax_e.axhline(CHEMICAL_ACCURACY, ls="--", lw=0.8, color="0.4")
            ax_e.set_ylabel("E - E_ref (hartree)")
        ax_s.plot(it, [r["n_selected"] for r in reports], "s-", ms=3, label="|S|")
        ax_s.plot(it, [r["unique"] for r in reports], "^-", ms=3, label="unique")
        ax_s.set_yscale("log")
        ax_s.set_xlabel("iteration")
        ax_s.legend(frameon=False)
        paths = [_save(fig, directory, "convergence")]

        fig, ax = plt.subplots(figsize=(4.5, 2.5))
        ax.plot(it, [r["redundancy"] for r in reports], "o-", ms=3)
        ax.set_ylim(0, 1)
        ax.set_xlabel("iteration")
        ax.set_ylabel("redundant fraction")
        paths.append(_save(fig, directory, "redundancy"))
    return paths


def balance(report: dict, directory) -> list[Path]:
    counts = report["per_rank_counts"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.5))
        ax.bar(range(len(counts)), counts, color="0.5")
        mean = sum(counts) / len(counts)
        ax.axhline(mean, ls="--", lw=0.8, color="k")
        ax.set_xlabel("rank")
        ax.set_ylabel("unique keys owned")
        return [_save(fig, directory, "balance")]


def scaling(points: list[dict], directory) -> list[Path]:
    ranks = [p["ranks"] for p in points]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.5))
        ax.plot(ranks, [p["unique_ratio"] for p in points], "o-", ms=3)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("ranks")
        ax.set_ylabel("unique / generated")
        return [_save(fig, directory, "weak_scaling")]
