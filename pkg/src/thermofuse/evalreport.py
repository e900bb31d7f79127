"""Evaluation metrics and report emission.

Metrics: ADP (average per-voxel absolute difference), absolute % error,
mean/population-std error statistics, and Pearson correlation. Reports are
three delimited tables (``summary.csv``, ``per_part.csv``,
``bed_density.csv``) plus a matching static SVG rendering of each; every
number in the summary is recomputable from the emitted per-part rows, and
two emissions of the same report are byte-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalError", "PartResult", "EvalReport", "TARGET_NAMES",
    "adp", "pct_error", "error_stats", "pearson",
    "build_report", "summary_rows", "correlation_rows", "bed_density_rows",
    "emit_report",
]

TARGET_NAMES = ("length_mm", "width_mm", "height_mm", "density_g_cm3")

#: aggregate thermal features carried on each per-part row, so correlation
#: entries in the summary recompute exactly from per_part.csv
AGGREGATE_NAMES = ("t_min", "t_mean", "t_max")


class EvalError(ValueError):
    """Invalid metric input or unusable report."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def adp(a: np.ndarray, b: np.ndarray) -> float:
    """Average per-voxel absolute difference between two equal-shape grids.

    Units follow the inputs (degC for denormalized thermal grids, raw 0-255
    for geometry grids).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"adp: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def pct_error(pred: float, truth: float) -> float:
    """Absolute percent error 100*|pred - truth| / truth; truth must be > 0."""
    truth = float(truth)
    if truth <= 0:
        raise EvalError(f"pct_error: truth must be positive, got {truth}")
    return 100.0 * abs(float(pred) - truth) / truth


def error_stats(errors) -> dict[str, float]:
    """Mean and population standard deviation of a list of % errors (n >= 2)."""
    arr = np.asarray(list(errors), dtype=np.float64)
    if arr.size < 2:
        raise EvalError(f"error_stats: need at least 2 values, got {arr.size}")
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}


def pearson(x, y) -> float:
    """Pearson product-moment correlation; requires equal lengths >= 3 and
    nonzero variance in both arguments."""
    xa = np.asarray(list(x), dtype=np.float64)
    ya = np.asarray(list(y), dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise EvalError(f"pearson: length mismatch {xa.shape} vs {ya.shape}")
    if xa.size < 3:
        raise EvalError(f"pearson: need at least 3 points, got {xa.size}")
    xd = xa - xa.mean()
    yd = ya - ya.mean()
    sx = float(np.sqrt(np.sum(xd * xd)))
    sy = float(np.sqrt(np.sum(yd * yd)))
    if sx == 0.0 or sy == 0.0:
        raise EvalError("pearson: an argument has zero variance, "
                        "correlation is undefined")
    return float(np.sum(xd * yd) / (sx * sy))


# ---------------------------------------------------------------------------
# report structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartResult:
    """Predicted vs true quality for one part under one predictor variant."""
    part_id: str
    variant: str
    bed_x: int
    bed_y: int
    predicted: tuple[float, float, float, float]   # TARGET_NAMES order
    true: tuple[float, float, float, float]
    aggregates: tuple[float, float, float]         # AGGREGATE_NAMES order

    def pct_errors(self) -> tuple[float, ...]:
        return tuple(pct_error(p, t) for p, t in zip(self.predicted, self.true))


@dataclass
class EvalReport:
    """Per-part results plus the derived tables emitted by emit_report."""
    parts: list[PartResult]
    recon_adp: dict[str, float] = field(default_factory=dict)
    correlations: list[tuple[str, str, float, int]] = field(default_factory=list)

    def variants(self) -> list[str]:
        return sorted({p.variant for p in self.parts})


def build_report(parts: list[PartResult],
                 recon_adp: dict[str, float] | None = None) -> EvalReport:
    """Assemble a report, computing the aggregate-vs-density correlation
    entries over the unique parts."""
    if not parts:
        raise EvalError("build_report: no per-part results")
    uniq: dict[str, PartResult] = {}
    for p in parts:
        uniq.setdefault(p.part_id, p)
    ordered = [uniq[k] for k in sorted(uniq)]
    density = [p.true[TARGET_NAMES.index("density_g_cm3")] for p in ordered]
    correlations = []
    for fi, fname in enumerate(AGGREGATE_NAMES):
        feat = [p.aggregates[fi] for p in ordered]
        try:
            r = pearson(feat, density)
        except EvalError:
            continue  # degenerate feature (constant): no correlation entry
        correlations.append((fname, "density_g_cm3", r, len(ordered)))
    return EvalReport(parts=list(parts), recon_adp=dict(recon_adp or {}),
                      correlations=correlations)


# ---------------------------------------------------------------------------
# derived tables
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    """6-significant-digit decimal rendering used in all emitted tables."""
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        raise EvalError(f"non-finite value in report: {x}")
    return f"{x:.6g}"


def summary_rows(report: EvalReport) -> list[tuple[str, str, float, float, int]]:
    """(variant, target, mean % error, population-std % error, n) rows."""
    rows = []
    for variant in report.variants():
        sub = [p for p in report.parts if p.variant == variant]
        errs = np.array([p.pct_errors() for p in sub])
        for ti, target in enumerate(TARGET_NAMES):
            stats = error_stats(errs[:, ti])
            rows.append((variant, target, stats["mean"], stats["std"], len(sub)))
    return rows


def correlation_rows(report: EvalReport) -> list[tuple[str, str, float, int]]:
    return list(report.correlations)


def bed_density_rows(report: EvalReport, cell: int = 40
                     ) -> list[tuple[str, int, int, float, int]]:
    """(variant, cell_x, cell_y, mean predicted density, n) over a bed grid."""
    rows = []
    for variant in report.variants():
        acc: dict[tuple[int, int], list[float]] = {}
        for p in report.parts:
            if p.variant != variant:
                continue
            key = (p.bed_x // cell, p.bed_y // cell)
            acc.setdefault(key, []).append(
                p.predicted[TARGET_NAMES.index("density_g_cm3")])
        for (cx, cy) in sorted(acc):
            vals = acc[(cx, cy)]
            rows.append((variant, cx, cy, float(np.mean(vals)), len(vals)))
    return rows


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _per_part_csv(report: EvalReport) -> str:
    header = (["variant", "part_id", "bed_x", "bed_y"]
              + list(AGGREGATE_NAMES)
              + [f"pred_{t}" for t in TARGET_NAMES]
              + [f"true_{t}" for t in TARGET_NAMES]
              + [f"pct_error_{t}" for t in TARGET_NAMES])
    lines = ["# per-part predicted vs true quality; "
             "pct_error is absolute percent deviation",
             ",".join(header)]
    for p in sorted(report.parts, key=lambda r: (r.variant, r.part_id)):
        cells = ([p.variant, p.part_id, str(p.bed_x), str(p.bed_y)]
                 + [_fmt(v) for v in p.aggregates]
                 + [_fmt(v) for v in p.predicted]
                 + [_fmt(v) for v in p.true]
                 + [_fmt(v) for v in p.pct_errors()])
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _summary_csv(report: EvalReport) -> str:
    lines = ["# % error is the mean absolute percent deviation; "
             "std is the population standard deviation",
             "variant,target,mean_pct_error,std_pct_error,n"]
    for variant, target, mean, std, n in summary_rows(report):
        lines.append(f"{variant},{target},{_fmt(mean)},{_fmt(std)},{n}")
    lines.append("# reconstruction average-pixel-difference (model,adp)")
    for name in sorted(report.recon_adp):
        lines.append(f"recon_adp,{name},{_fmt(report.recon_adp[name])},,")
    lines.append("# correlations over unique parts (feature,target,pearson_r,n)")
    for feature, target, r, n in correlation_rows(report):
        lines.append(f"correlation,{feature}->{target},{_fmt(r)},,{n}")
    return "\n".join(lines) + "\n"


def _bed_density_csv(report: EvalReport, cell: int) -> str:
    lines = [f"# mean predicted density per {cell}x{cell}-pixel bed cell",
             "variant,cell_x,cell_y,mean_pred_density,n"]
    for variant, cx, cy, mean, n in bed_density_rows(report, cell):
        lines.append(f"{variant},{cx},{cy},{_fmt(mean)},{n}")
    return "\n".join(lines) + "\n"


def _render_svgs(report: EvalReport, out_dir: str, cell: int) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    rc = {"svg.hashsalt": "thermofuse", "figure.dpi": 96}

    def save(fig, name):
        path = os.path.join(out_dir, name)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    with plt.rc_context(rc):
        # summary: grouped bars of mean % error with population-std whiskers
        rows = summary_rows(report)
        variants = report.variants()
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / max(len(variants), 1)
        xs = np.arange(len(TARGET_NAMES))
        for vi, variant in enumerate(variants):
            vr = [r for r in rows if r[0] == variant]
            means = [r[2] for r in vr]
            stds = [r[3] for r in vr]
            ax.bar(xs + vi * width, means, width=width, yerr=stds,
                   capsize=3, label=variant)
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(TARGET_NAMES, rotation=20)
        ax.set_ylabel("mean % error (whisker: population std)")
        ax.set_title("prediction error by variant")
        ax.legend()
        fig.tight_layout()
        save(fig, "summary.svg")

        # per-part deviation scatter, one panel per variant
        fig, axes = plt.subplots(1, max(len(variants), 1),
                                 figsize=(4 * max(len(variants), 1), 4),
                                 squeeze=False)
        for vi, variant in enumerate(variants):
            axp = axes[0][vi]
            sub = sorted((p for p in report.parts if p.variant == variant),
                         key=lambda r: r.part_id)
            errs = np.array([p.pct_errors() for p in sub])
            for ti, target in enumerate(TARGET_NAMES):
                axp.scatter(np.arange(len(sub)), errs[:, ti], s=6, label=target)
            axp.set_title(variant)
            axp.set_xlabel("part index")
            axp.set_ylabel("% deviation")
        axes[0][0].legend(fontsize=7)
        fig.tight_layout()
        save(fig, "per_part.svg")

        # bed-location density heatmap, one panel per variant
        grid_rows = bed_density_rows(report, cell)
        nx = max((r[1] for r in grid_rows), default=0) + 1
        ny = max((r[2] for r in grid_rows), default=0) + 1
        fig, axes = plt.subplots(1, max(len(variants), 1),
                                 figsize=(4 * max(len(variants), 1), 3.5),
                                 squeeze=False)
        for vi, variant in enumerate(variants):
            grid = np.full((ny, nx), np.nan)
            for v, cx, cy, mean, _ in grid_rows:
                if v == variant:
                    grid[cy, cx] = mean
            axp = axes[0][vi]
            im = axp.imshow(grid, origin="lower", aspect="auto")
            axp.set_title(f"{variant}: predicted density")
            axp.set_xlabel("bed cell x")
            axp.set_ylabel("bed cell y")
            fig.colorbar(im, ax=axp)
        fig.tight_layout()
        save(fig, "bed_density.svg")
    return written


def emit_report(report: EvalReport, out_dir: str, cell: int = 40) -> list[str]:
    """Write the three delimited tables and their SVG renderings; returns the
    list of written paths. Byte-stable for identical input."""
    if not report.parts:
        raise EvalError("emit_report: report has no per-part results")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, text in (("summary.csv", _summary_csv(report)),
                       ("per_part.csv", _per_part_csv(report)),
                       ("bed_density.csv", _bed_density_csv(report, cell))):
        path = os.path.join(out_dir, name)
        _write_text(path, text)
        paths.append(path)
    paths.extend(_render_svgs(report, out_dir, cell))
    return paths
