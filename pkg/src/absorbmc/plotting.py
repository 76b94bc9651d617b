"""Static PNG figures written next to the CSV output (Agg backend only)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .receptor_queue import QueueSolution  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
}


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    style: str = "-"


@dataclass
class Panel:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    xscale: str = "linear"
    yscale: str = "linear"


def render(path: Path, panels: Sequence[Panel], width: float = 4.2) -> Path:
    """Draw ``panels`` side by side into a PNG at ``path``."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(width * len(panels), 3.2), squeeze=False)
        for ax, panel in zip(axes[0], panels):
            for s in panel.series:
                ax.plot(s.x, s.y, s.style, label=s.label)
            ax.set_xscale(panel.xscale)
            ax.set_yscale(panel.yscale)
            ax.set_title(panel.title)
            ax.set_xlabel(panel.xlabel)
            ax.set_ylabel(panel.ylabel)
            if 1 < len(panel.series) <= 12:
                ax.legend(loc="best")
        fig.tight_layout()
        # no Software tag: keeps the file identical across matplotlib builds
        fig.savefig(path, format="png", metadata={"Software": None})
        plt.close(fig)
    return path


def _walk_panels(series):
    panel = Panel("Occupancy", "n (steps)", "probability")
    for label, n, p in series:
        panel.series.append(Series(label, n, p))
    return [panel]


def _param_panels(tables):
    panels = [Panel(name, "q", name) for name in ("alpha", "beta_prime", "gamma")]
    for t in tables:
        label = f"x={list(t.site)} m={list(t.absorber)}"
        for panel in panels:
            panel.series.append(Series(label, t.q, t.column(panel.title), "o-"))
    return panels


def _curve_panels(curves):
    panel = Panel("Markov targets and fitted model", "t", "2 x probability")
    for label, n, target, model in curves:
        panel.series.append(Series(label, n, target, "."))
        panel.series.append(Series("_nolegend_", n, model, "-"))
    return [panel]


def _concentration_panels(rows):
    panel = Panel("Steady-state concentration", "q", "C")
    for table, qs, cs in rows:
        panel.series.append(Series(f"x={list(table.site)} m={list(table.absorber)}", qs, cs, "o-"))
    if len(rows) > 1 and all(len(qs) for _, qs, _ in rows):
        # one table per destination: also show the profile along x
        by_x = Panel("Steady-state concentration", "|x|", "C")
        grid = sorted({q for _, qs, _ in rows for q in qs})
        for q in grid:
            xs, cs = [], []
            for table, qq, cc in rows:
                if q in qq:
                    xs.append(table.distance)
                    cs.append(cc[qq.index(q)])
            by_x.series.append(Series(f"q={q:g}", xs, cs, "o-"))
        return [panel, by_x]
    return [panel]


def _queue_panels(payload):
    jobs, sols = payload
    panels = [
        Panel("Absorption probability", "Q", "q*", xscale="log"),
        Panel("Arrival rate", "Q", "lambda_in", xscale="log", yscale="log"),
        Panel("Absorption rate", "Q", "lambda_a", xscale="log"),
    ]
    groups: dict = {}
    for (spec, Q), sol in zip(jobs, sols):
        if isinstance(sol, QueueSolution):
            groups.setdefault((spec.site, spec.T_trafficking), []).append(sol)
    for (site, T), ss in groups.items():
        label = f"m={list(site)} T={T:g}"
        Qs = [s.Q for s in ss]
        panels[0].series.append(Series(label, Qs, [s.q for s in ss], "o-"))
        panels[1].series.append(Series(label, Qs, [s.lambda_in for s in ss], "o-"))
        panels[2].series.append(Series(label, Qs, [s.lambda_a for s in ss], "o-"))
    return panels


_BUILDERS = {
    "walk": _walk_panels,
    "params": _param_panels,
    "curves": _curve_panels,
    "concentration": _concentration_panels,
    "queue": _queue_panels,
}


def draw(path: Path, payload, cfg=None) -> Path:
    """Render one command figure; ``payload`` is ``(kind, data)``."""
    kind, data = payload
    return render(path, _BUILDERS[kind](data))
