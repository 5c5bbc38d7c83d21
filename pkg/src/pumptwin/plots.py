"""Matplotlib figures for experiment reports, written with the Agg backend."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}   # keep files byte-identical across runs


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in s).strip("_")


def accuracy_figure(report, path: Path) -> list[Path]:
    from .workbench import report_axes
    archs, kinds = report_axes(report)
    archs += sorted(a for a in report.in_domain if a not in archs)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(archs) + 2), 3.6))
    width = 0.8 / max(1, len(kinds) + bool(report.in_domain))
    x = np.arange(len(archs))
    for j, k in enumerate(kinds):
        means = [100 * report.cells.get(f"{a}|{k}", {}).get("mean", np.nan) for a in archs]
        stds = [100 * report.cells.get(f"{a}|{k}", {}).get("std", np.nan) for a in archs]
        ax.bar(x + j * width, means, width, yerr=stds, capsize=3, label=k)
    if report.in_domain:
        j = len(kinds)
        means = [100 * report.in_domain.get(a, {}).get("mean", np.nan) for a in archs]
        ax.bar(x + j * width, means, width, label="in-domain", color="0.6")
    ax.set_xticks(x + width * (len(kinds) - 1) / 2)
    ax.set_xticklabels(archs, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("plant accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return [_save(fig, path)]


def calibration_figure(cal: dict, path: Path) -> list[Path]:
    hist = np.asarray(cal.get("history") or [], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if hist.size:
        ax.semilogy(hist[:, 0], np.maximum(hist[:, 1], 1e-300))
    ax.set_xlabel("generation")
    ax.set_ylabel("best objective")
    fig.tight_layout()
    return [_save(fig, path)]


def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def example_figures(key: str, examples: dict, out: Path) -> list[Path]:
    """Twin and plant example inputs: overlaid traces (1D) or image grids (2D)."""
    _, kind, rep = key.split("|")
    stem = f"examples_{_slug(kind)}_{rep}"
    names = sorted(examples)
    arrays = [np.asarray(examples[n]) for n in names]
    files = []
    if arrays[0].ndim == 2:
        n = arrays[0].shape[-1]
        header = ["index"] + [f"{nm}:ch{c}" for nm, a in zip(names, arrays) for c in range(a.shape[0])]
        cols = [a[c] for a in arrays for c in range(a.shape[0])]
        rows = [[i] + [f"{col[i]:.7g}" for col in cols] for i in range(n)]
        files.append(_write_rows(out / f"{stem}.csv", header, rows))
        fig, axes = plt.subplots(arrays[0].shape[0], 1, figsize=(7, 2.2 * arrays[0].shape[0]),
                                 squeeze=False)
        for c, ax in enumerate(axes[:, 0]):
            for nm, a in zip(names, arrays):
                ax.plot(a[c], lw=0.7, ls="-" if nm.startswith("plant") else "--", label=nm)
            ax.set_ylabel(f"channel {c}")
        axes[0, 0].legend(fontsize=6, ncol=4)
        axes[-1, 0].set_xlabel("sample")
        fig.tight_layout()
        files.append(_save(fig, out / f"{stem}.png"))
    else:
        fig, axes = plt.subplots(1, len(names), figsize=(1.8 * len(names), 2.2), squeeze=False)
        for ax, nm, a in zip(axes[0], names, arrays):
            ax.imshow(a[0], origin="lower", aspect="auto", cmap="viridis")
            ax.set_title(nm, fontsize=7)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        files.append(_save(fig, out / f"{stem}.png"))
    return files


def gradcam_figures(key: str, maps: list, out: Path) -> list[Path]:
    _, arch, kind = key.split("|")
    stem = f"gradcam_{_slug(arch)}_{_slug(kind)}"
    files = []
    fig, axes = plt.subplots(len(maps), 1, figsize=(7, 1.8 * max(1, len(maps))), squeeze=False)
    rows = []
    for ax, m in zip(axes[:, 0], maps):
        values = np.asarray(m["map"])
        x = np.asarray(m["input"])
        peak = values.max()
        norm = values / peak if peak > 0 else values
        if values.ndim == 1:
            ax.plot(x[0], lw=0.6, color="0.3")
            ax2 = ax.twinx()
            ax2.fill_between(np.arange(values.size), norm, color="tab:red", alpha=0.35)
            ax2.set_ylim(0, 1.05)
            ax2.set_yticks([])
            rows += [[m["label"], m["class_index"], i, f"{v:.7g}"] for i, v in enumerate(norm)]
        else:
            ax.imshow(x[0], origin="lower", aspect="auto", cmap="gray")
            ax.imshow(norm, origin="lower", aspect="auto", cmap="jet", alpha=0.4)
            prof = norm.sum(axis=0)
            rows += [[m["label"], m["class_index"], i, f"{v:.7g}"] for i, v in enumerate(prof)]
        ax.set_title(f"plant {m['label']} -> class {m['class_index']}", fontsize=7)
    fig.tight_layout()
    files.append(_save(fig, out / f"{stem}.png"))
    files.append(_write_rows(out / f"{stem}.csv", ["label", "class_index", "index", "value"], rows))
    return files
