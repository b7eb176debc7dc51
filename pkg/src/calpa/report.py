"""Tables (CSV plus aligned text) and matplotlib figures for run reports."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from calpa.arch import ArchGraph, ShrinkPlan, cost_report, shrunk_width  # noqa: E402
from calpa.arch.cost import sci  # noqa: E402

# fixed PNG metadata keeps figures byte-identical across reruns
_PNG_META = {"Software": None}


def render_table(header: list[str], rows: list[list]) -> tuple[str, str]:
    """``(csv_text, aligned_text)`` for one table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return buf.getvalue(), "\n".join(lines) + "\n"


def cost_rows(models: list[tuple[str, ArchGraph]]) -> tuple[list[str], list[list], list[list]]:
    """Cost table in the parameters/FLOPs layout; the first model is the reference.

    Returns the header, display rows and raw CSV rows.
    """
    header = ["model", "params", "params_ratio_pct", "flops", "flops_ratio_pct",
              "conv_params", "conv_flops"]
    ref = cost_report(models[0][1])
    # exponents follow the reference magnitudes: 10^4 and 10^9 for a full-size SRNet
    pexp = max(0, int(math.floor(math.log10(max(ref.total_params, 1)))) - 2)
    fexp = int(math.floor(math.log10(max(ref.total_flops, 1))))
    display, raw = [], []
    for name, graph in models:
        rep = cost_report(graph)
        pr = 100.0 * rep.total_params / ref.total_params
        fr = 100.0 * rep.total_flops / ref.total_flops
        raw.append([name, rep.total_params, f"{pr:.2f}", rep.total_flops, f"{fr:.1f}",
                    rep.conv_params, rep.conv_flops])
        display.append([name, f"{sci(rep.total_params, pexp)} ({pr:.2f}%)", f"{pr:.2f}",
                        f"{sci(rep.total_flops, fexp)} ({fr:.1f}%)", f"{fr:.1f}",
                        sci(rep.conv_params, pexp), sci(rep.conv_flops, fexp)])
    return header, display, raw


def metrics_rows(entries: list[tuple[str, object]]) -> tuple[list[str], list[list]]:
    header = ["model", "P_FA(70%)", "P_FA(50%)", "P_FA(30%)", "P_MD", "P_E", "accuracy"]
    rows = []
    for name, m in entries:
        rows.append([name, f"{m.p_fa[0.7]:.4f}", f"{m.p_fa[0.5]:.4f}", f"{m.p_fa[0.3]:.4f}",
                     f"{m.p_md:.4f}", f"{m.p_e:.4f}", f"{m.accuracy:.4f}"])
    return header, rows


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_curves(curves: dict[str, list], path) -> Path:
    """Validation accuracy against iteration, one line per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in curves.items():
        if rows:
            ax.plot([r[0] for r in rows], [r[2] for r in rows], marker="o", ms=3, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("validation accuracy")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_plan(graph: ArchGraph, plan: ShrinkPlan, path) -> Path:
    """Per-layer channel counts before and after shrinking."""
    ids = [c.id for c in graph.prunable_convs()]
    before = [graph.layer(i).out_channels for i in ids]
    after = [shrunk_width(graph.layer(i).out_channels, plan.rates[i]) for i in ids]
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(ids)), 4))
    xs = range(len(ids))
    ax.bar(xs, before, color="0.8", label="reference")
    ax.bar(xs, after, color="tab:blue", label="shrunk")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(ids, rotation=90, fontsize=7)
    ax.set_ylabel("output channels")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_sweep(rows: list[tuple[str, float, float]], path) -> Path:
    """Accuracy against pruning rate, one line per layer."""
    fig, ax = plt.subplots(figsize=(6, 4))
    layers = list(dict.fromkeys(r[0] for r in rows))
    for lid in layers:
        pts = [(g, a) for l, g, a in rows if l == lid]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=lid)
    ax.set_xlabel("pruning rate")
    ax.set_ylabel("validation accuracy")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_suppression(j, ratio, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(j, ratio, marker="o", ms=3)
    ax.set_xlabel("aggregated terms J")
    ax.set_ylabel("amplitude ratio")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))
