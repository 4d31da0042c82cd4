"""Evaluation report writers: TSV records, aligned text tables, figures.

Emits one machine-readable TSV record per scope per scene plus a
cross-scene aggregate TSV, a human-readable aligned table, and
matplotlib renderings (DSM color map, signed error map, error
histogram) saved as PNG files next to the delimited output.

Field order of metrics.tsv: scene, scope, n_cells, p90, nmad, rmse,
mae, valid_pct, offset (meters except counts and percent; valid_pct is
empty when not computed). Field order of aggregate.tsv: scope, metric,
mean, std, n.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .evaluation import METRIC_NAMES, aggregate_scenes

METRICS_TSV_FIELDS = ("scene", "scope", "n_cells", "p90", "nmad", "rmse",
                      "mae", "valid_pct", "offset")
AGGREGATE_TSV_FIELDS = ("scope", "metric", "mean", "std", "n")

_TABLE_LABELS = {"p90": "P90", "nmad": "NMAD", "rmse": "RMSE", "mae": "MAE",
                 "valid_pct": "%Valid"}


def _fmt(value) -> str:
    if value is None:
        return ""
    return format(float(value), ".10g")


def write_metrics_tsv(path, reports) -> Path:
    """Write one TSV record per scope per scene (see module docstring)."""
    path = Path(path)
    lines = ["\t".join(METRICS_TSV_FIELDS)]
    for report in reports:
        for scope, sm in report.scopes.items():
            lines.append("\t".join((
                report.scene, scope, str(sm.n_cells), _fmt(sm.p90),
                _fmt(sm.nmad), _fmt(sm.rmse), _fmt(sm.mae),
                _fmt(sm.valid_pct), _fmt(report.offset))))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_aggregate_tsv(path, summary) -> Path:
    """Write the cross-scene summary, one record per scope and metric."""
    path = Path(path)
    lines = ["\t".join(AGGREGATE_TSV_FIELDS)]
    for scope, per_metric in summary.items():
        for metric, entry in per_metric.items():
            lines.append("\t".join((
                scope, metric, _fmt(entry.mean), _fmt(entry.std),
                str(entry.n))))
    path.write_text("\n".join(lines) + "\n")
    return path


def format_report_text(reports, summary=None) -> str:
    """Human-readable aligned tables: per-scene scopes + cross-scene summary."""
    reports = list(reports)
    if summary is None:
        summary = aggregate_scenes(reports)
    out: list[str] = []

    scene_w = max([14] + [len(r.scene) + 2 for r in reports])
    scope_w = max([38] + [len(s) + 2 for r in reports for s in r.scopes]
                  + [len(s) + 2 for s in summary])
    header = (f"{'Scene':<{scene_w}}{'Scope':<{scope_w}}{'P90':>9}"
              f"{'NMAD':>9}{'RMSE':>9}{'MAE':>9}{'%Valid':>9}{'Cells':>10}"
              f"{'Offset':>9}")
    out.append("Per-scene metrics (meters)")
    out.append(header)
    out.append("-" * len(header))
    for report in reports:
        for scope, sm in report.scopes.items():
            pct = f"{sm.valid_pct:9.2f}" if sm.valid_pct is not None else " " * 9
            out.append(
                f"{report.scene:<{scene_w}}{scope:<{scope_w}}{sm.p90:9.2f}"
                f"{sm.nmad:9.2f}{sm.rmse:9.2f}{sm.mae:9.2f}{pct}"
                f"{sm.n_cells:>10}{report.offset:9.2f}")
    out.append("")

    n_scenes = len(reports)
    out.append(f"Cross-scene summary (mean ± sample std over "
               f"{n_scenes} scene{'s' if n_scenes != 1 else ''})")
    cols = [m for m in METRIC_NAMES
            if any(m in per_metric for per_metric in summary.values())]
    header2 = f"{'Scope':<{scope_w}}" + "".join(
        f"{_TABLE_LABELS[m]:>16}" for m in cols)
    out.append(header2)
    out.append("-" * len(header2))
    for scope, per_metric in summary.items():
        cells = []
        for m in cols:
            entry = per_metric.get(m)
            if entry is None:
                cells.append(" " * 16)
            else:
                cells.append(f"{entry.mean:.2f} ± {entry.std:.2f}".rjust(16))
        out.append(f"{scope:<{scope_w}}" + "".join(cells))
    out.append("")
    return "\n".join(out)


def render_figures(outdir, dsm=None, gt=None, field=None) -> list[Path]:
    """Render the available rasters to PNG files; returns written paths.

    dsm/gt render as elevation color maps; the error field renders as a
    signed error map (symmetric diverging scale) and a histogram.
    """
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def save(fig, name):
        path = outdir / name
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    for grid, name, title in ((dsm, "dsm.png", "DSM elevation"),
                              (gt, "gt.png", "Ground-truth elevation")):
        if grid is None:
            continue
        fig, ax = plt.subplots(figsize=(6, 5))
        shown = np.ma.masked_invalid(grid.values)
        im = ax.imshow(shown, cmap="terrain", interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("cell (east)")
        ax.set_ylabel("cell (south)")
        fig.colorbar(im, ax=ax, label="elevation (m)")
        save(fig, name)

    if field is not None and field.n_valid > 0:
        data = field.valid_errors()
        lim = float(np.percentile(np.abs(data), 99)) or 1.0
        fig, ax = plt.subplots(figsize=(6, 5))
        shown = np.ma.masked_invalid(field.errors)
        im = ax.imshow(shown, cmap="RdBu_r", vmin=-lim, vmax=lim,
                       interpolation="nearest")
        ax.set_title("Signed elevation error (dsm - gt)")
        fig.colorbar(im, ax=ax, label="error (m)")
        save(fig, "error_map.png")

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(data, bins=60, color="steelblue")
        ax.axvline(0.0, color="black", linewidth=1)
        ax.set_xlabel("elevation error (m)")
        ax.set_ylabel("cells")
        ax.set_title("Error distribution")
        save(fig, "error_hist.png")

    return written


def write_report(outdir, reports, dsm=None, gt=None, field=None,
                 summary=None) -> list[Path]:
    """Write the full report bundle into ``outdir``; returns written paths.

    Bundle: metrics.tsv (per-scene records), aggregate.tsv (cross-scene
    summary), report.txt (aligned tables) and the rendered figures.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    reports = list(reports)
    if summary is None:
        summary = aggregate_scenes(reports)
    written = [
        write_metrics_tsv(outdir / "metrics.tsv", reports),
        write_aggregate_tsv(outdir / "aggregate.tsv", summary),
    ]
    report_txt = outdir / "report.txt"
    report_txt.write_text(format_report_text(reports, summary))
    written.append(report_txt)
    written.extend(render_figures(outdir, dsm=dsm, gt=gt, field=field))
    return written
