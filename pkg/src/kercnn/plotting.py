"""Report figures: accuracy curves, stopping-time heatmaps, kernel montages."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corruptions import KINDS  # noqa: E402
from .experiments import _arch, _label, mean_ci  # noqa: E402
from .lateral import kernel_montage  # noqa: E402

__all__ = ["STYLE", "use_style", "severity_curves", "stopping_time_heatmap", "save_montage", "render_report"]

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "image.cmap": "viridis",
}

AXIS_LABELS = {"patches": "patch std (px)", "strips": "max shift D (px)", "fgsm": "FGSM step"}


def use_style() -> None:
    plt.rcParams.update(STYLE)


def _means(records, kind):
    # arch -> severity -> {seed: accuracy}
    table = defaultdict(lambda: defaultdict(dict))
    for r in records:
        if r.kind == kind or r.kind == "none":
            table[_arch(r)][r.severity if r.kind == kind else 0.0][r.seed] = r.accuracy
    return table


def severity_curves(records, kind: str, path, top: int | None = 4) -> Path:
    """Mean accuracy against severity for the base CNN and the ``top`` best other models.

    Models are ranked by mean accuracy at the highest severity; ``top=None``
    draws every architecture.
    """
    use_style()
    table = _means(records, kind)
    fig, ax = plt.subplots()
    archs = sorted(table, key=lambda a: (a[0] != "cnn", a[1] + a[2], a))
    if top is not None:
        def worst_case(a):
            s = max(table[a])
            return float(np.mean(list(table[a][s].values())))

        others = sorted((a for a in archs if a[0] != "cnn"), key=lambda a: -worst_case(a))[:top]
        archs = [a for a in archs if a[0] == "cnn" or a in others]
    colors = plt.cm.viridis(np.linspace(0, 0.9, max(len(archs), 1)))
    for arch, color in zip(archs, colors):
        sevs = sorted(table[arch])
        stats = [mean_ci(list(table[arch][s].values())) for s in sevs]
        mean = np.array([m for m, _ in stats])
        ci = np.array([c for _, c in stats])
        base = arch[0] == "cnn"
        ax.errorbar(sevs, 100 * mean, yerr=100 * ci, color="k" if base else color, marker="o",
                    lw=2.0 if base else 1.0, capsize=2, label=_label(arch), zorder=3 if base else 2)
    ax.axhline(10, ls="--", lw=0.8, color="tab:blue", label="chance")
    ax.set_xlabel(AXIS_LABELS.get(kind, kind))
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(ncol=2, loc="upper right")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def stopping_time_heatmap(records, kind: str, severity: float, path) -> Path:
    """Mean KerCNN accuracy over the (T1, T2) grid, best cell starred."""
    use_style()
    cells = defaultdict(dict)
    for r in records:
        if r.kind == kind and r.severity == severity and r.variant in ("cnn", "kercnn"):
            cells[(r.T1, r.T2)][r.seed] = r.accuracy
    if not cells:
        raise ValueError(f"no records for {kind} at {severity:g}")
    t1s = sorted({t[0] for t in cells})
    t2s = sorted({t[1] for t in cells})
    grid = np.full((len(t2s), len(t1s)), np.nan)
    for (t1, t2), seeds in cells.items():
        grid[t2s.index(t2), t1s.index(t1)] = 100 * np.mean(list(seeds.values()))
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(grid, origin="lower", vmin=0, vmax=100)
    ax.set_xticks(range(len(t1s)), [str(t) for t in t1s])
    ax.set_yticks(range(len(t2s)), [str(t) for t in t2s])
    ax.set_xlabel("T1")
    ax.set_ylabel("T2")
    ax.grid(False)
    for i in range(len(t2s)):
        for j in range(len(t1s)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.0f}", ha="center", va="center", fontsize=7, color="w")
    iy, ix = np.unravel_index(np.nanargmax(grid), grid.shape)
    ax.plot(ix, iy, marker="*", color="r", markersize=14, markerfacecolor="none")
    ax.set_title(f"{kind} {severity:g}")
    fig.colorbar(im, ax=ax, label="accuracy (%)")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def save_montage(kernel, path, feature: int | None = None, title: str = "") -> Path:
    """Write a kernel montage as PNG (or PGM when the suffix says so)."""
    canvas = kernel_montage(kernel, feature)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        from .lateral import write_pgm

        write_pgm(path, canvas)
        return path
    use_style()
    h, w = canvas.shape
    fig, ax = plt.subplots(figsize=(min(10, 0.08 * w + 1), min(10, 0.08 * h + 1)))
    ax.imshow(canvas, cmap="gray", interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_report(records, out_dir) -> list[Path]:
    """Every figure a results table supports: one curve plot per corruption
    kind and one heatmap per (kind, severity) covered by the KerCNN grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    kinds = [k for k in KINDS[1:] if any(r.kind == k for r in records)]
    for kind in kinds:
        written.append(severity_curves(records, kind, out_dir / f"accuracy_{kind}.png"))
    grid_kinds = {(r.kind, r.severity) for r in records if r.variant == "kercnn"}
    for kind, sev in sorted(grid_kinds, key=lambda k: (KINDS.index(k[0]), k[1])):
        written.append(stopping_time_heatmap(records, kind, sev, out_dir / f"grid_{kind}_{sev:g}.png"))
    return written
