"""Matplotlib renderings of experiment reports (PNG files).

Imported lazily by :func:`rptlab.report.emit_report`, so the library works
without matplotlib unless PNG output is requested.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"ntp": "tab:blue", "rpt": "tab:red"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def _hist_bars(ax, h, color, label):
    edges = np.asarray(h["edges"])
    ax.stairs(h["counts"], edges, fill=True, alpha=0.5, color=color, label=label)


def synthetic_figures(report, out_dir):
    paths = []
    aggs = {(a["base_noise"], a["ratio"]): a for a in report.aggregates}
    for bn in sorted({h["base_noise"] for h in report.histograms}):
        hs = [h for h in report.histograms if h["base_noise"] == bn]
        ratios = sorted({h["ratio"] for h in hs})
        fig, axes = plt.subplots(2, len(ratios), figsize=(3.4 * len(ratios), 5.4), squeeze=False)
        for row, metric in enumerate(("max", "tv")):
            for col, ratio in enumerate(ratios):
                ax = axes[row, col]
                for h in hs:
                    if h["ratio"] == ratio and h["metric"] == metric:
                        _hist_bars(ax, h, COLORS[h["method"]], h["method"].upper())
                        mean = aggs[(bn, ratio)][f"{h['method']}_{metric}_mean"]
                        ax.axvline(mean, color=COLORS[h["method"]], lw=1)
                ax.set_title(f"{metric} error, ratio {ratio:g}", fontsize=9)
                ax.tick_params(labelsize=7)
        axes[0, 0].legend(fontsize=7)
        fig.suptitle(f"base noise {bn:g}", fontsize=10)
        paths.append(_save(fig, Path(out_dir) / f"synthetic_hist_noise{bn:g}.png"))
    return paths


def trace_figure(report, out_dir, smooth=200):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    steps = np.array([r["step"] for r in report.records])
    for col in report.columns:
        if not col.endswith("_loss"):
            continue
        y = np.array([np.nan if r[col] is None else r[col] for r in report.records], dtype=float)
        ok = np.isfinite(y)
        if ok.sum() == 0:
            continue
        k = min(smooth, int(ok.sum()))
        ys = np.convolve(y[ok], np.ones(k) / k, mode="valid")
        ax.plot(steps[ok][k - 1 :], ys, label=col.replace("_loss", "").replace("_", "-").upper(), lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.legend(fontsize=8)
    return [_save(fig, Path(out_dir) / "train-toy_loss.png")]


def improvement_figure(report, out_dir):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    h = report.histograms[0]
    ax.stairs(h["counts"], np.asarray(h["edges"]), fill=True, color="tab:green", alpha=0.7)
    ax.axvline(0.0, color="black", lw=0.8)
    agg = report.aggregates[0]
    ax.set_title(f"improved {agg['improved']} / worsened {agg['worsened']} / ties {agg['ties']}", fontsize=9)
    ax.set_xlabel("p1(x) - p0(x)")
    return [_save(fig, Path(out_dir) / "improve-hist.png")]


def tv_table_figure(report, out_dir):
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    ks = [r["k"] for r in report.records]
    for col in report.columns:
        if col == "k" or col.endswith("_se"):
            continue
        ax.errorbar(ks, [r[col] for r in report.records], yerr=[r.get(f"{col}_se") or 0 for r in report.records],
                    marker="o", capsize=2, label=col)
    ax.set_xlabel("refinement iterations k")
    ax.set_ylabel("mean 1 - p(x)")
    ax.set_xticks(ks)
    ax.legend(fontsize=8)
    return [_save(fig, Path(out_dir) / "tv-table.png")]


RENDERERS = {
    "synthetic": synthetic_figures,
    "train-toy": trace_figure,
    "improve-hist": improvement_figure,
    "tv-table": tv_table_figure,
}


def render_figures(report, out_dir) -> list:
    fn = RENDERERS.get(report.command)
    if fn is None or not report.records:
        return []
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return fn(report, out_dir)
