"""Figures from summary CSVs.  Each figure gets a CSV sidecar holding exactly the plotted values."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import GroupSummary, read_summary_csv  # noqa: E402

log = logging.getLogger(__name__)

FIGURES = ("noise-curve", "ce-bars", "lnl-curves")
SIDECAR_COLUMNS = ("figure", "series", "metric", "p", "mean", "std", "trials")
METRICS = ("best", "last")


@dataclass
class PlotResult:
    figure: str
    images: list[Path]
    sidecar: Path
    warnings: list[str] = field(default_factory=list)


def _series(groups: list[GroupSummary], key) -> dict[str, dict[float, GroupSummary]]:
    out: dict[str, dict[float, GroupSummary]] = {}
    for g in groups:
        out.setdefault(key(g), {})[g.p] = g
    return out


def _stat(g: GroupSummary, metric: str) -> tuple[float, float]:
    return (g.best_mean, g.best_std) if metric == "best" else (g.last_mean, g.last_std)


def _check(series: dict, ps: list[float], warnings: list[str]) -> None:
    for name, by_p in series.items():
        missing = [p for p in ps if p not in by_p]
        if missing:
            warnings.append(f"series {name} has no results for p={missing}; plotted with gaps")
        if any(g.trials == 1 for g in by_p.values()):
            warnings.append(f"series {name} has single-trial groups; no variability shading")


def _draw_line(ax, by_p: dict, ps: list[float], metric: str, label: str, **style):
    mean = np.array([_stat(by_p[p], metric)[0] if p in by_p else np.nan for p in ps])
    std = np.array([_stat(by_p[p], metric)[1] if p in by_p else np.nan for p in ps])
    (line,) = ax.plot(ps, mean, marker="o", label=label, **style)
    multi = np.array([p in by_p and by_p[p].trials > 1 for p in ps])
    if multi.any():
        ax.fill_between(ps, np.where(multi, mean - std, np.nan), np.where(multi, mean + std, np.nan),
                        color=line.get_color(), alpha=0.2)


def _style_axis(ax, ps, title):
    ax.set_title(title)
    ax.set_xlabel("noise rate p")
    ax.set_xticks(ps)
    ax.set_ylabel("test accuracy")
    ax.grid(alpha=0.3)


def _noise_curve(series: dict, ps: list[float]):
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (name, by_p) in enumerate(series.items()):
        color = f"C{i}"
        _draw_line(ax, by_p, ps, "best", f"{name} BEST", color=color)
        _draw_line(ax, by_p, ps, "last", f"{name} LAST", color=color, linestyle="--")
    _style_axis(ax, ps, "CE test accuracy against label noise")
    ax.legend(fontsize=8)
    return fig


def _lnl_curves(series: dict, ps: list[float]):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, metric in zip(axes, METRICS):
        for name, by_p in series.items():
            _draw_line(ax, by_p, ps, metric, name)
        _style_axis(ax, ps, metric.upper())
    axes[0].legend(fontsize=8)
    return fig


def _bar_panels(series: dict, ps: list[float]):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    names = list(series)
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(ps))
    for ax, metric in zip(axes, METRICS):
        for i, name in enumerate(names):
            by_p = series[name]
            mean = [_stat(by_p[p], metric)[0] if p in by_p else np.nan for p in ps]
            std = [_stat(by_p[p], metric)[1] if p in by_p and by_p[p].trials > 1 else 0.0 for p in ps]
            ax.bar(x + (i - (len(names) - 1) / 2) * width, mean, width, yerr=std, capsize=3, label=name)
        ax.set_xticks(x, [f"{p:g}" for p in ps])
        ax.set_xlabel("noise rate p")
        ax.set_title(f"CE {metric.upper()}")
        ax.grid(alpha=0.3, axis="y")
    axes[0].set_ylabel("test accuracy")
    axes[0].legend(fontsize=8)
    return fig


def _write_sidecar(path: Path, figure: str, series: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIDECAR_COLUMNS)
        for name, by_p in series.items():
            for metric in METRICS:
                for p in sorted(by_p):
                    mean, std = _stat(by_p[p], metric)
                    w.writerow([figure, name, metric, repr(p), repr(mean), repr(std), by_p[p].trials])


def read_sidecar(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r, p=float(r["p"]), mean=float(r["mean"]), std=float(r["std"]), trials=int(r["trials"]))
                for r in csv.DictReader(fh)]


def make_plot(summary_csv: str | Path, figure: str, out_dir: str | Path) -> PlotResult:
    """Render ``figure`` from a summary CSV into ``out_dir`` as PNG, SVG and a CSV sidecar.

    noise-curve: cross-entropy BEST and LAST against p, one colour per pretext.
    ce-bars: cross-entropy results grouped by p, one bar per pretext.
    lnl-curves: one line per method+pretext, BEST and LAST panels.
    """
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; expected one of {FIGURES}")
    groups = read_summary_csv(summary_csv)
    if figure in ("ce-bars", "noise-curve"):
        groups = [g for g in groups if g.method == "ce"]
    if not groups:
        raise ValueError(f"{summary_csv} has no groups for figure {figure!r}")
    ps = sorted({g.p for g in groups})
    if figure in ("ce-bars", "noise-curve"):
        series = _series(groups, lambda g: g.pretext)
    else:
        series = _series(groups, lambda g: f"{g.method}+{g.pretext}")
    warnings: list[str] = []
    _check(series, ps, warnings)
    for w in warnings:
        log.warning("%s: %s", figure, w)

    draw = {"noise-curve": _noise_curve, "ce-bars": _bar_panels, "lnl-curves": _lnl_curves}[figure]
    fig = draw(series, ps)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / figure
    images = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    fig.tight_layout()
    fig.savefig(images[0], dpi=120, metadata={"Software": None})
    fig.savefig(images[1], metadata={"Date": None})
    plt.close(fig)
    sidecar = stem.with_suffix(".csv")
    _write_sidecar(sidecar, figure, series)
    return PlotResult(figure, images, sidecar, warnings)
