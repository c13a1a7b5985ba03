"""Figures for training runs: reward curves, format rate, answer length, eval scores."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(scale=1.0):
    width = 5.5 * scale
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * golden


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def _save(fig, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(rows, out_dir) -> list:
    out_dir = Path(out_dir)
    if not rows:
        return []
    steps = [r["step"] for r in rows]
    written = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(steps, [r["mean_r_all"] for r in rows], label="mean r_all")
        ax.plot(steps, [r["mean_r_self"] for r in rows], label="mean r_self")
        ax.set_xlabel("step")
        ax.set_ylabel("reward")
        ax.legend(frameon=False)
        written.append(_save(fig, out_dir, "rewards.png"))

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=figsize(1.3))
        ax1.plot(steps, [r["format_rate"] for r in rows], color="C2")
        ax1.set_ylim(-0.02, 1.02)
        ax1.set_xlabel("step")
        ax1.set_ylabel("format rate")
        ax2.plot(steps, [r["mean_answer_tokens"] for r in rows], color="C3")
        ax2.set_xlabel("step")
        ax2.set_ylabel("mean answer tokens")
        written.append(_save(fig, out_dir, "format_and_length.png"))
    return written


def plot_evals(evals: dict, out_dir) -> list:
    """``evals`` maps step -> EvalReport (or its JSON dict)."""
    out_dir = Path(out_dir)
    if not evals:
        return []
    steps = sorted(evals)
    get = (lambda r, k: r[k]) if isinstance(evals[steps[0]], dict) else getattr
    directions = sorted(get(evals[steps[0]], "ref_score"))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=figsize(1.3), sharey=True)
        for i, d in enumerate(directions):
            ax1.plot(steps, [get(evals[s], "ref_score")[d] for s in steps], marker="o", color=f"C{i}",
                     label=f"{d} ref")
            free = [get(evals[s], "free_score").get(d) for s in steps]
            if all(v is not None for v in free):
                ax1.plot(steps, free, marker="s", ls="--", color=f"C{i}", label=f"{d} free")
        ax1.set_xlabel("checkpoint step")
        ax1.set_ylabel("oracle score")
        ax1.legend(frameon=False)
        ax2.plot(steps, [get(evals[s], "raw_score") for s in steps], marker="o", label="raw")
        ax2.plot(steps, [get(evals[s], "stripped_score") for s in steps], marker="s", ls="--",
                 label="quotes stripped")
        ax2.set_xlabel("checkpoint step")
        ax2.legend(frameon=False)
        ax2.set_ylim(-0.02, 1.02)
        return [_save(fig, out_dir, "eval_scores.png")]
