"""Report and figure export.

CSV floats are written with repr (shortest round-trip form), so a reloaded
matrix equals the in-memory one to full precision. Heatmap rasters use the
viridis colormap with values clamped to [0, 1] and a fixed cell size of
24 px, rendered without timestamps so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .diversity import DiversityReport  # noqa: E402

REPORT_SCHEMA_VERSION = 1
HEATMAP_CMAP = "viridis"
HEATMAP_CELL_PX = 24
_PNG_META = {"Software": None}  # strip the matplotlib version text chunk


def _fmt(x) -> str:
    if x is None:
        return "undefined"
    return repr(float(x))


def write_report_json(report: DiversityReport, path) -> None:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, **asdict(report)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_report_csv(report: DiversityReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_a", "model_b", "kappa", "kappa_error_overlap",
                    "jsd_percent", "edr"])
        for p in report.pairs:
            w.writerow([p.model_a, p.model_b, _fmt(p.kappa),
                        _fmt(p.kappa_error_overlap), _fmt(p.jsd_percent), _fmt(p.edr)])
        w.writerow(["average", "", _fmt(report.mean_kappa), "",
                    _fmt(report.mean_jsd), _fmt(report.mean_edr)])


def _kappa_matrix(report: DiversityReport) -> np.ndarray:
    ids = report.model_ids
    m = np.full((len(ids), len(ids)), np.nan)
    np.fill_diagonal(m, 1.0)
    index = {mid: i for i, mid in enumerate(ids)}
    for p in report.pairs:
        i, j = index[p.model_a], index[p.model_b]
        v = np.nan if p.kappa is None else p.kappa
        m[i, j] = m[j, i] = v
    return m


def write_kappa_figure(report: DiversityReport, path) -> None:
    m = _kappa_matrix(report)
    n = len(report.model_ids)
    fig, ax = plt.subplots(figsize=(1.2 * n + 2.2, 1.2 * n + 1.2))
    im = ax.imshow(m, cmap="coolwarm", vmin=-1.0, vmax=1.0)
    ax.set_xticks(range(n), report.model_ids, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(n), report.model_ids, fontsize=8)
    for i in range(n):
        for j in range(n):
            if np.isfinite(m[i, j]):
                ax.text(j, i, f"{m[i, j]:.3f}", ha="center", va="center", fontsize=8)
    ax.set_title("pairwise error consistency (Cohen's kappa)")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def write_matrix_csv(matrix: np.ndarray, path, row_label="tap_a", col_label="tap_b") -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{row_label}\\{col_label}"] + [str(j + 1) for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([str(i + 1)] + [_fmt(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])


def write_diagonal_csv(matrix: np.ndarray, path) -> None:
    matrix = np.asarray(matrix)
    k = min(matrix.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tap", "lincka"])
        for i in range(k):
            w.writerow([str(i + 1), _fmt(matrix[i, i])])


def write_heatmap_png(matrix: np.ndarray, path, cell_px: int = HEATMAP_CELL_PX) -> None:
    """Raster of exactly (rows*cell_px) x (cols*cell_px) pixels, clamped to [0,1]."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    scaled = np.kron(m, np.ones((cell_px, cell_px)))
    plt.imsave(path, scaled, cmap=HEATMAP_CMAP, vmin=0.0, vmax=1.0,
               metadata=_PNG_META)
