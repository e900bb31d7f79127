"""Per-part preprocessing pipeline.

Undistorts bed frames, selects one frame per fusing layer, crops each part's
ROI, normalizes print orientation to the canonical 18 x 35 x 7 voxel, computes
thermal aggregates, cleans raw telemetry into a fixed-length feature vector,
voxelizes part geometry, and assigns build-aware dataset splits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synthbed import (
    NOMINAL_X, NOMINAL_Y, NOMINAL_Z,
    BedLayout, PartPlacement, QualityVector, ThermalFrame,
    bilinear_sample, part_mask,
)

VOXEL_SHAPE = (18, 35, 7)   # width x length x height after orientation normalization

# dead-pixel clamp bounds; values outside are replaced by the neighborhood median
VALID_TEMP_RANGE = (0.0, 400.0)


class PreprocessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# undistortion
# ---------------------------------------------------------------------------

_undistort_map_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _undistort_map(shape: tuple[int, int], k1: float, k2: float,
                   max_iter: int = 20, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Sample coordinates inverting r' = r (1 + k1 r^2 + k2 r^4).

    Fixed-point iteration s <- r / (1 + k1 s^2 + k2 s^4) in normalized radius;
    raises if any pixel fails to converge within ``max_iter`` iterations.
    """
    key = (shape, k1, k2)
    if key in _undistort_map_cache:
        return _undistort_map_cache[key]
    w, h = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float64)[:, None] - cx
    ys = np.arange(h, dtype=np.float64)[None, :] - cy
    rmax = np.hypot(cx, cy)
    r = np.hypot(xs, ys) / rmax
    s = r.copy()
    converged = False
    for _ in range(max_iter):
        s_next = r / (1.0 + k1 * s * s + k2 * s ** 4)
        delta = np.max(np.abs(s_next - s))
        s = s_next
        if delta <= tol:
            converged = True
            break
    if not converged:
        worst = float(r.reshape(-1)[np.argmax(np.abs(s - r / (1.0 + k1 * s * s + k2 * s ** 4)))])
        raise PreprocessError(
            f"undistortion did not converge within {max_iter} iterations "
            f"(k1={k1}, k2={k2}, offending normalized radius ~{worst:.4f})")
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(r > 0, s / r, 1.0)
    sample_x = cx + xs * ratio
    sample_y = cy + ys * ratio
    _undistort_map_cache[key] = (sample_x, sample_y)
    return sample_x, sample_y


def undistort(frame: ThermalFrame, k1: float, k2: float) -> ThermalFrame:
    """Invert the capture-time radial distortion with bilinear resampling."""
    if k1 == 0.0 and k2 == 0.0:
        return ThermalFrame(frame.values.copy(), frame.layer_index, frame.frame_index)
    sx, sy = _undistort_map(frame.values.shape, k1, k2)
    return ThermalFrame(bilinear_sample(frame.values, sx, sy),
                        frame.layer_index, frame.frame_index)


def clamp_dead_pixels(values: np.ndarray,
                      valid_range: tuple[float, float] = VALID_TEMP_RANGE) -> np.ndarray:
    """Replace out-of-range pixels by their 3x3 neighborhood median."""
    lo, hi = valid_range
    bad = (values < lo) | (values > hi) | ~np.isfinite(values)
    if not bad.any():
        return values
    med = ndimage.median_filter(np.where(bad, np.nan, values), size=3, mode="nearest")
    # median_filter propagates NaN; fall back to the generic median for clusters
    med = np.where(np.isfinite(med), med, np.nanmedian(np.where(bad, np.nan, values)))
    return np.where(bad, med, values)


# ---------------------------------------------------------------------------
# frame selection / ROI cropping / orientation
# ---------------------------------------------------------------------------

def select_fusing_frames(frames_per_layer: list[list[ThermalFrame]],
                         fusing_index: int = -1) -> list[ThermalFrame]:
    """Pick the configured fusing-state frame from each layer's frame list."""
    missing = [i for i, fl in enumerate(frames_per_layer) if len(fl) == 0]
    if missing:
        raise PreprocessError(f"layers with no frames: {missing}")
    selected = []
    for i, fl in enumerate(frames_per_layer):
        if fusing_index >= len(fl) or fusing_index < -len(fl):
            raise PreprocessError(
                f"fusing frame index {fusing_index} out of range for layer {i} "
                f"({len(fl)} frames)")
        selected.append(fl[fusing_index])
    return selected


def crop_roi(layer_fields: list[np.ndarray], placement: PartPlacement,
             bed_w: int, bed_h: int) -> np.ndarray:
    """Crop the part's raw (fx, fy, 7) grid from per-layer bed fields."""
    fx, fy = placement.footprint()
    if (placement.x < 0 or placement.y < 0
            or placement.x + fx > bed_w or placement.y + fy > bed_h):
        raise PreprocessError(
            f"part {placement.part_id} ROI [{placement.x},{placement.x + fx})x"
            f"[{placement.y},{placement.y + fy}) clipped by bed {bed_w}x{bed_h}")
    z0, z1 = placement.z_range()
    if z0 < 0 or z1 > len(layer_fields):
        raise PreprocessError(
            f"part {placement.part_id} z-range [{z0},{z1}) outside {len(layer_fields)} layers")
    return np.stack([layer_fields[z][placement.x:placement.x + fx,
                                     placement.y:placement.y + fy]
                     for z in range(z0, z1)], axis=-1)


def normalize_orientation(raw: np.ndarray, orientation: str) -> np.ndarray:
    """Transpose the raw cropped grid into the canonical (18, 35, 7) shape.

    Pure axis permutation, no resampling; applying it to an already-normalized
    grid is the identity, so the operation is idempotent.
    """
    if raw.shape == VOXEL_SHAPE:
        return raw
    if raw.shape == (NOMINAL_X, NOMINAL_Y, NOMINAL_Z):
        return np.ascontiguousarray(raw.transpose(1, 0, 2))
    raise PreprocessError(
        f"unexpected raw voxel shape {raw.shape} for orientation {orientation!r}; "
        f"expected {VOXEL_SHAPE} or {(NOMINAL_X, NOMINAL_Y, NOMINAL_Z)}")


def aggregate(voxel: np.ndarray) -> dict[str, float]:
    """Exact min/mean/max over all voxels."""
    if not np.all(np.isfinite(voxel)):
        raise PreprocessError("voxel contains non-finite values")
    return {"min": float(voxel.min()), "mean": float(voxel.mean()),
            "max": float(voxel.max())}


# ---------------------------------------------------------------------------
# tabular feature cleaning
# ---------------------------------------------------------------------------

N_PRINTERS = 5

_KNOB_FIELDS = (
    "powder_batch_age_days", "roller_speed_mm_s", "print_speed_mm_s",
    "cure_lamp_power_w", "binder_viscosity_cp", "powder_flow_index",
    "spread_uniformity_pct", "chamber_setpoint_c", "binder_temp_c",
    "nozzle_health_pct", "z_backlash_um", "powder_moisture_pct", "lamp_age_h",
)

FEATURE_NAMES: tuple[str, ...] = (
    tuple(f"printer_{i}" for i in range(N_PRINTERS))
    + ("bed_x", "bed_y", "bed_z", "orientation", "binder_level",
       "layer_thickness_um", "recycle_count", "material", "shadowing")
    + _KNOB_FIELDS
)

_MANDATORY_FIELDS = ("printer_id", "bed_x", "bed_y", "bed_z", "orientation",
                     "binder_level", "layer_thickness_um", "recycle_count",
                     "material", "shadowing") + _KNOB_FIELDS


def extract_features(record: dict) -> np.ndarray:
    """Raw telemetry record -> unstandardized numeric feature vector.

    Drops distractor fields, one-hot encodes the printer, and encodes
    orientation/material as {0, 1}. Raises naming any missing mandatory field.
    """
    for f in _MANDATORY_FIELDS:
        if f not in record:
            raise PreprocessError(f"telemetry record missing mandatory field {f!r}")
    onehot = np.zeros(N_PRINTERS)
    onehot[int(record["printer_id"]) % N_PRINTERS] = 1.0
    scalars = [
        float(record["bed_x"]), float(record["bed_y"]), float(record["bed_z"]),
        0.0 if record["orientation"] == "horizontal" else 1.0,
        float(record["binder_level"]),
        float(record["layer_thickness_um"]),
        float(record["recycle_count"]),
        0.0 if record["material"] == "316" else 1.0,
        float(record["shadowing"]),
    ]
    knobs = [float(record[f]) for f in _KNOB_FIELDS]
    vec = np.concatenate([onehot, scalars, knobs])
    assert 25 <= vec.size <= 30, vec.size
    return vec


def compute_feature_stats(matrix: np.ndarray) -> dict[str, np.ndarray]:
    """Per-feature mean/std over the train split; zero-variance std maps to 1."""
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return {"mean": mean, "std": std}


def standardize(matrix: np.ndarray, stats: dict[str, np.ndarray]) -> np.ndarray:
    return (matrix - stats["mean"]) / stats["std"]


def clean_tabular(record: dict, stats: dict[str, np.ndarray]) -> np.ndarray:
    """Full tabular cleaning: filter, encode, standardize with train stats."""
    return standardize(extract_features(record), stats)


# ---------------------------------------------------------------------------
# geometry voxelization
# ---------------------------------------------------------------------------

def design_slices(layout: BedLayout) -> list[np.ndarray]:
    """Binary design slice per layer: 255 inside print geometry, 0 elsewhere."""
    return [part_mask(layout, z).astype(np.uint8) * 255 for z in range(layout.layers)]


def voxelize_geometry(slices: list[np.ndarray], placement: PartPlacement,
                      roi_edge: int = 50) -> np.ndarray:
    """Part-centered binary cube of edge ``roi_edge`` (values 0 / 255).

    Regions beyond the bed or layer stack are zero-padded; neighboring parts
    inside the ROI are intentionally kept (they encode the local part-powder
    ratio).
    """
    bed_w, bed_h = slices[0].shape
    layers = len(slices)
    fx, fy = placement.footprint()
    cx = placement.x + fx // 2
    cy = placement.y + fy // 2
    cz = placement.z + NOMINAL_Z // 2
    half = roi_edge // 2
    out = np.zeros((roi_edge, roi_edge, roi_edge), dtype=np.uint8)
    x0, y0, z0 = cx - half, cy - half, cz - half
    for k in range(roi_edge):
        z = z0 + k
        if not 0 <= z < layers:
            continue
        sx0, sx1 = max(x0, 0), min(x0 + roi_edge, bed_w)
        sy0, sy1 = max(y0, 0), min(y0 + roi_edge, bed_h)
        if sx0 >= sx1 or sy0 >= sy1:
            continue
        out[sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0, k] = slices[z][sx0:sx1, sy0:sy1]
    return out


# ---------------------------------------------------------------------------
# dataset records and splits
# ---------------------------------------------------------------------------

@dataclass
class PartRecord:
    """One preprocessed part: cleaned features, aggregates, and ground truth."""
    part_id: str
    build_id: int
    printer_id: int
    bed_x: int
    bed_y: int
    bed_z: int
    orientation: str
    features: np.ndarray            # raw (unstandardized) cleaned feature vector
    aggregates: dict[str, float]    # measured, from the normalized thermal voxel
    target: QualityVector


def split_by_build(records: list[PartRecord], ratios: tuple[float, float, float],
                   seed: int) -> dict[str, list[PartRecord]]:
    """Build-level holdout test split, part-level random train/val split.

    Whole builds are assigned to the test split (never seen in train/val)
    until the test ratio is covered; remaining parts are shuffled part-level.
    Deterministic under the seed.
    """
    from .rng import substream

    if abs(sum(ratios) - 1.0) > 1e-9:
        raise PreprocessError(f"split ratios {ratios} do not sum to 1")
    builds = sorted({r.build_id for r in records})
    if len(builds) < 3:
        raise PreprocessError(f"need >= 3 builds to split, got {len(builds)}")
    rng = substream(seed, "split")
    order = [builds[i] for i in rng.permutation(len(builds))]
    total = len(records)
    by_build = {b: [r for r in records if r.build_id == b] for b in builds}
    test_builds: set[int] = set()
    n_test = 0
    for b in order:
        if n_test >= ratios[2] * total:
            break
        test_builds.add(b)
        n_test += len(by_build[b])
    if len(test_builds) == len(builds):
        raise PreprocessError("test ratio consumed every build; nothing left to train on")
    test = [r for b in sorted(test_builds) for r in by_build[b]]
    rest = [r for r in records if r.build_id not in test_builds]
    perm = rng.permutation(len(rest))
    rest = [rest[i] for i in perm]
    n_val = int(round(len(rest) * ratios[1] / (ratios[0] + ratios[1])))
    return {"train": rest[n_val:], "val": rest[:n_val], "test": test}


def preprocess_build(frames_per_layer: list[list[ThermalFrame]], layout: BedLayout,
                     telemetry: list[dict], truths: dict[str, QualityVector],
                     k1: float, k2: float,
                     fusing_index: int = -1) -> tuple[list[PartRecord], dict[str, np.ndarray]]:
    """Run the full per-build pipeline; returns part records and their
    orientation-normalized thermal voxels keyed by part id."""
    selected = select_fusing_frames(frames_per_layer, fusing_index)
    fields = [clamp_dead_pixels(undistort(f, k1, k2).values) for f in selected]
    records: list[PartRecord] = []
    voxels: dict[str, np.ndarray] = {}
    tele_by_id = {t["part_id"]: t for t in telemetry}
    for part in layout.parts:
        raw = crop_roi(fields, part, layout.bed_w, layout.bed_h)
        voxel = normalize_orientation(raw, part.orientation)
        rec = tele_by_id[part.part_id]
        records.append(PartRecord(
            part_id=part.part_id,
            build_id=int(rec["build_id"]),
            printer_id=int(rec["printer_id"]),
            bed_x=part.x, bed_y=part.y, bed_z=part.z,
            orientation=part.orientation,
            features=extract_features(rec),
            aggregates=aggregate(voxel),
            target=truths[part.part_id],
        ))
        voxels[part.part_id] = voxel
    return records, voxels
