"""Render histogram, trajectory-bundle, and comparison figures.

A FigureJob names the input files, the figure kind, and the output image
path. Rendering draws one series per input (or per plotted column) and is a
pure function of the input files: the plotted arrays depend on nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import read_compare, read_ensemble, read_histogram, read_trajectory

KINDS = ("hist", "trajectories", "compare")


@dataclass
class FigureJob:
    kind: str
    inputs: list
    output: Path
    labels: list = field(default_factory=list)
    observable: str = "n"
    ensemble: Path | None = None  # trajectories kind: ensemble overlay CSV
    bundle_alpha: float = 0.25
    title: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")
        self.inputs = [Path(p) for p in self.inputs]
        self.output = Path(self.output)
        for p in self.inputs:
            if not p.exists():
                raise FileNotFoundError(f"input file {p} does not exist")
        if self.kind == "trajectories":
            if self.ensemble is None:
                raise ValueError("trajectories job needs an ensemble CSV")
            self.ensemble = Path(self.ensemble)
            if not self.ensemble.exists():
                raise FileNotFoundError(f"ensemble file {self.ensemble} does not exist")


def _label(job, index, default):
    return job.labels[index] if index < len(job.labels) else default


def _render_hist(job: FigureJob, ax):
    # later inputs are drawn in front, narrower alpha, like layered counting
    # distributions
    for i, path in enumerate(job.inputs):
        left, right, count = read_histogram(path)
        if count.size == 0 or count.sum() == 0:
            continue
        edges = np.append(left, right[-1] if right.size else left)
        ax.stairs(count, edges, fill=True, alpha=0.55 if i else 0.85,
                  label=_label(job, i, path.stem))
    ax.set_xlabel("integrated record")
    ax.set_ylabel("trajectories")


def _render_trajectories(job: FigureJob, ax):
    for i, path in enumerate(job.inputs):
        t, v = read_trajectory(path, job.observable)
        ax.plot(t, v, color="C0", alpha=job.bundle_alpha, linewidth=0.8,
                zorder=1)
    t, mean, stderr = read_ensemble(job.ensemble, job.observable)
    ax.plot(t, mean, color="C1", linestyle="--", linewidth=1.8, zorder=3,
            label=_label(job, 0, "ensemble mean"))
    ax.fill_between(t, mean - stderr, mean + stderr, color="C1", alpha=0.3,
                    zorder=2)
    ax.set_xlabel("time")
    ax.set_ylabel(job.observable)


def _render_compare(job: FigureJob, ax):
    for i, path in enumerate(job.inputs):
        t, mean, stderr, oracle, _z = read_compare(path)
        ax.plot(t, mean, color=f"C{2 * i}", label=_label(job, 2 * i, "collision"))
        ax.fill_between(t, mean - 3 * stderr, mean + 3 * stderr,
                        color=f"C{2 * i}", alpha=0.25)
        ax.plot(t, oracle, color=f"C{2 * i + 1}", linestyle=":",
                label=_label(job, 2 * i + 1, "oracle"))
    ax.set_xlabel("time")
    ax.set_ylabel("population")


def render(job: FigureJob):
    """Draw the figure, write job.output, and return the matplotlib Figure."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0), layout="constrained")
    if job.kind == "hist":
        _render_hist(job, ax)
    elif job.kind == "trajectories":
        _render_trajectories(job, ax)
    else:
        _render_compare(job, ax)
    if job.title:
        ax.set_title(job.title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False)
    job.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(job.output, dpi=150)
    return fig
