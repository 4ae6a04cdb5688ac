"""PNG figures for sweep reports (Agg backend, files only)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from fuse4d.metrics import MetricsReport, ReportRow  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.markersize": 4,
}


def _series(rows: List[ReportRow], sweep: str) -> Dict[str, list]:
    out = defaultdict(list)
    for r in rows:
        if r.sweep == sweep and r.value is not None and r.mean_roughness_mm is not None:
            out[r.label].append(r)
    for label in out:
        out[label].sort(key=lambda r: r.value)
    return out


def _emph(label: str) -> dict:
    if label.startswith("ours"):
        return {"color": "k", "lw": 2.0, "marker": "o", "zorder": 5}
    if label.startswith("raw"):
        return {"color": "0.5", "ls": "--", "marker": "x"}
    return {"marker": "s", "lw": 1.0}


def plot_fig2(report: MetricsReport, path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, sweep, xlabel in ((axes[0], "depth_sigma_mm", "depth noise sigma (mm)"),
                                  (axes[1], "intensity_sigma", "intensity noise sigma")):
            for label, rows in _series(report.rows, sweep).items():
                ax.plot([r.value for r in rows], [r.mean_roughness_mm for r in rows],
                        label=label, **_emph(label))
            ax.set_xlabel(xlabel)
            ax.set_ylabel("mean roughness (mm)")
        axes[0].legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_fig3(report: MetricsReport, path) -> Path:
    groups = defaultdict(list)
    for r in report.rows:
        if r.kind == "tradeoff" and r.shape_correctness is not None:
            groups[r.label].append(r)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.8))
        for label, rows in groups.items():
            rows = sorted(rows, key=lambda r: (r.sweep, r.value))
            x = [r.mean_roughness_mm for r in rows]
            y = [100 * r.shape_correctness for r in rows]
            style = _emph(label)
            if label == "raw":
                ax.plot(x, y, ls="none", marker="*", ms=10, color="r", label=label)
            else:
                ax.plot(x, y, label=label, **style)
        ax.set_xlabel("mean roughness (mm)")
        ax.set_ylabel("shape correctness (%)")
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_fig4(report: MetricsReport, path) -> Path:
    fits = {r.label: r for r in report.rows if r.kind == "decay"}
    series = _series([r for r in report.rows if r.kind == "sweep"], "frames_fused")
    scenes = sorted({label.split(":", 1)[1] for label in series if ":" in label})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(scenes), 2, figsize=(8, 3 * len(scenes)), squeeze=False)
        for row, scene in zip(axes, scenes):
            for label, rows in series.items():
                if not label.endswith(":" + scene):
                    continue
                n = [r.value for r in rows]
                row[0].plot(n, [r.mean_roughness_mm for r in rows], label=label, **_emph(label))
                row[1].plot(n, [r.std_roughness_mm for r in rows], label=label, **_emph(label))
            fit = fits.get(f"ours:{scene}")
            if fit is not None and fit.delta_s_mm is not None:
                nn = np.linspace(1, 9, 100)
                model = np.sqrt(fit.delta_s_mm ** 2 + fit.delta_t_mm ** 2 / nn)
                row[0].plot(nn, model, color="r", lw=1, label=f"decay fit (R2={fit.r_squared:.3f})")
            row[0].set_title(f"{scene}: mean roughness")
            row[1].set_title(f"{scene}: std of roughness")
            for ax in row:
                ax.set_xlabel("frames fused")
                ax.set_ylabel("mm")
            row[0].legend(loc="upper right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


PLOTTERS = {"fig2": plot_fig2, "fig3": plot_fig3, "fig4": plot_fig4}


def plot_report(experiment: str, report: MetricsReport, path) -> Path:
    return PLOTTERS[experiment](report, path)
