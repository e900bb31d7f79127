"""Deterministic synthetic print-bucket generator.

Emits layer-by-layer thermal frames, per-part printer telemetry records, and
a planted ground-truth quality oracle, so every downstream claim of the
pipeline is testable without proprietary printer data.

The thermal field closed form (documented so tests can evaluate it by hand):

    T(x, y) = base + disc_fraction(x, y) * (binder_boost * binder
                                            - recycle_penalty * recycle_count
                                            + density_coeff)
              + crowding_coeff * gaussian(occupancy, crowding_sigma)(x, y)
              + clipped Gaussian noise

where ``base = base_temp + printer_step * printer_id
+ chamber_coeff * (chamber_setpoint - chamber_ref)`` and ``disc_fraction``
is the fraction of part pixels inside a radius-r disc around (x, y). The
binder boost is weighted by the local part fraction rather than a hard
occupancy indicator so the field stays smooth across part edges (hard steps
do not survive the distortion/undistortion resampling round trip); at a part
center with the disc fully inside the part the fraction is 1 and the
short-range contribution reduces to binder_boost * binder + density_coeff.

The crowding term is the bed occupancy mask diffused by a wide Gaussian: a
long-range neighbor-heat model. It is the one quality-relevant signal that
exists only in the thermal imagery — a part's local heat depends on which
neighboring slots are occupied and how close their footprints landed, and
none of that is visible in the per-part process telemetry. All in-part
effects scale with the frame's fusing fraction (the canonical fusing frame
uses 1.0).

The quality oracle plants a linear density law so that the aggregated
minimum part temperature correlates perfectly with density at zero noise:

    density = density_base + density_slope * (min_temp - t_ref) + noise
    dim     = nominal_dim * (1 - shrink) + noise
    shrink  = shrink_base + shrink_temp_slope * (mean_temp - t_ref)
              + shrink_binder_slope * (binder - 0.5)
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rng import substream

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

# TRS bar proxy, voxel units at horizontal orientation: 35 (x) x 18 (y) x 7 (z)
NOMINAL_X = 35
NOMINAL_Y = 18
NOMINAL_Z = 7

TEMP_MIN_C = 80.0
TEMP_MAX_C = 220.0


class LayoutError(ValueError):
    """Raised when part placements clip the bed edge or overlap."""


@dataclass(frozen=True)
class PartPlacement:
    part_id: str
    x: int
    y: int
    z: int
    orientation: str  # HORIZONTAL or VERTICAL

    def footprint(self) -> tuple[int, int]:
        """(extent_x, extent_y) in bed pixels; vertical is the axis swap."""
        if self.orientation == HORIZONTAL:
            return (NOMINAL_X, NOMINAL_Y)
        if self.orientation == VERTICAL:
            return (NOMINAL_Y, NOMINAL_X)
        raise LayoutError(f"unknown orientation {self.orientation!r} for part {self.part_id}")

    def z_range(self) -> tuple[int, int]:
        return (self.z, self.z + NOMINAL_Z)


@dataclass(frozen=True)
class BedLayout:
    bed_w: int = 160
    bed_h: int = 120
    layers: int = 64
    parts: tuple[PartPlacement, ...] = ()

    def validate(self) -> None:
        for p in self.parts:
            fx, fy = p.footprint()
            if p.x < 0 or p.y < 0 or p.x + fx > self.bed_w or p.y + fy > self.bed_h:
                raise LayoutError(
                    f"part {p.part_id} footprint [{p.x},{p.x + fx})x[{p.y},{p.y + fy}) "
                    f"outside bed {self.bed_w}x{self.bed_h}")
            if p.z < 0 or p.z + NOMINAL_Z > self.layers:
                raise LayoutError(f"part {p.part_id} z-range {p.z_range()} outside {self.layers} layers")
        for i, a in enumerate(self.parts):
            for b in self.parts[i + 1:]:
                if _overlap(a, b):
                    raise LayoutError(f"parts {a.part_id} and {b.part_id} overlap")


def _overlap(a: PartPlacement, b: PartPlacement) -> bool:
    az0, az1 = a.z_range()
    bz0, bz1 = b.z_range()
    if az1 <= bz0 or bz1 <= az0:
        return False
    afx, afy = a.footprint()
    bfx, bfy = b.footprint()
    return not (a.x + afx <= b.x or b.x + bfx <= a.x or a.y + afy <= b.y or b.y + bfy <= a.y)


@dataclass(frozen=True)
class JobConfig:
    printer_id: int = 0
    build_id: int = 0
    binder_level: float = 0.6          # dimensionless, 0..1
    layer_thickness_um: float = 60.0
    recycle_count: int = 0
    material: str = "316"              # "316" or "17-4PH"
    noise_amp_c: float = 0.8           # Gaussian sigma, clipped at +/- 3 sigma
    k1: float = 0.04                   # radial distortion, normalized radius
    k2: float = 0.01
    seed: int = 0

    # thermal field constants
    base_temp_c: float = 140.0
    printer_step_c: float = 2.0
    chamber_setpoint_c: float = 50.0   # per-build oven setpoint (telemetry knob)
    chamber_ref_c: float = 50.0
    chamber_coeff_c: float = 1.8       # bed-wide degC per degC of setpoint deviation
    binder_boost_c: float = 30.0
    density_coeff_c: float = 15.0
    disc_radius_px: int = 9
    recycle_penalty_c: float = 1.5
    crowding_coeff_c: float = 28.0     # neighbor-heat amplitude
    crowding_sigma_px: float = 20.0    # Gaussian diffusion radius

    # planted quality-oracle constants
    density_base: float = 4.0          # g/cm^3
    density_slope: float = 0.02        # g/cm^3 per degC
    t_ref_c: float = 165.0
    density_noise: float = 0.004       # g/cm^3
    shrink_base: float = 0.01
    shrink_temp_slope: float = 4e-4    # per degC
    shrink_binder_slope: float = 0.01
    dim_noise_mm: float = 0.01


@dataclass(frozen=True)
class ThermalFrame:
    """One bed-wide temperature frame; values indexed [x, y] in bed pixels."""
    values: np.ndarray
    layer_index: int
    frame_index: int


@dataclass(frozen=True)
class QualityVector:
    length_mm: float
    width_mm: float
    height_mm: float
    density_g_cm3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.length_mm, self.width_mm, self.height_mm, self.density_g_cm3])


@dataclass
class BuildData:
    layout: BedLayout
    config: JobConfig
    frames: list[list[ThermalFrame]]          # [layer][frame_index]
    telemetry: list[dict]                     # raw record per part
    truths: dict[str, QualityVector]          # part_id -> ground truth


# ---------------------------------------------------------------------------
# thermal field
# ---------------------------------------------------------------------------

def _disc_kernel(radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    mask = (ax[:, None] ** 2 + ax[None, :] ** 2) <= radius * radius
    return mask.astype(np.float64) / mask.sum()

def part_mask(layout: BedLayout, layer: int) -> np.ndarray:
    """Boolean (bed_w, bed_h) occupancy mask of all parts present at ``layer``."""
    mask = np.zeros((layout.bed_w, layout.bed_h), dtype=bool)
    for p in layout.parts:
        z0, z1 = p.z_range()
        if z0 <= layer < z1:
            fx, fy = p.footprint()
            mask[p.x:p.x + fx, p.y:p.y + fy] = True
    return mask


def _crowding(mask: np.ndarray, config: JobConfig) -> np.ndarray | None:
    """Long-range neighbor heat: the occupancy mask diffused by a wide
    Gaussian. Zero everywhere when the layer is empty or the term is off."""
    if config.crowding_coeff_c == 0.0 or not mask.any():
        return None
    return ndimage.gaussian_filter(mask.astype(np.float64),
                                   config.crowding_sigma_px, mode="constant")


def _clean_field(mask: np.ndarray, frac: np.ndarray | None, config: JobConfig,
                 fusing_fraction: float,
                 crowd: np.ndarray | None = None) -> np.ndarray:
    base = (config.base_temp_c + config.printer_step_c * config.printer_id
            + config.chamber_coeff_c * (config.chamber_setpoint_c - config.chamber_ref_c))
    vals = np.full(mask.shape, base, dtype=np.float64)
    if frac is not None:
        in_part = (config.binder_boost_c * config.binder_level
                   - config.recycle_penalty_c * config.recycle_count)
        vals = vals + fusing_fraction * frac * (in_part + config.density_coeff_c)
    if crowd is not None:
        vals = vals + fusing_fraction * config.crowding_coeff_c * crowd
    if not np.all((vals >= TEMP_MIN_C) & (vals <= TEMP_MAX_C)):
        raise ValueError("noise-free field escaped the configured physical range")
    return vals


def _apply_noise(vals: np.ndarray, config: JobConfig, layer: int,
                 frame_index: int) -> np.ndarray:
    if config.noise_amp_c <= 0:
        return vals
    rng = substream(config.seed, "thermal-noise", config.build_id, layer, frame_index)
    n = rng.normal(0.0, config.noise_amp_c, size=vals.shape)
    n = np.clip(n, -3.0 * config.noise_amp_c, 3.0 * config.noise_amp_c)
    return np.clip(vals + n, TEMP_MIN_C, TEMP_MAX_C)


def thermal_field(layout: BedLayout, config: JobConfig, layer: int,
                  fusing_fraction: float = 1.0, noise: bool = True,
                  frame_index: int = 0) -> ThermalFrame:
    """Synthesize one bed-wide thermal frame at the given layer.

    Deterministic for a given (config.seed, layer, frame_index); the noise
    substream is independent per frame. ``noise=False`` gives the closed-form
    field used by the quality oracle.
    """
    if not 0 <= layer < layout.layers:
        raise LayoutError(f"layer {layer} outside [0, {layout.layers})")
    mask = part_mask(layout, layer)
    frac = None
    if mask.any():
        frac = ndimage.convolve(mask.astype(np.float64),
                                _disc_kernel(config.disc_radius_px), mode="constant")
    vals = _clean_field(mask, frac, config, fusing_fraction, _crowding(mask, config))
    if noise:
        vals = _apply_noise(vals, config, layer, frame_index)
    return ThermalFrame(values=vals, layer_index=layer, frame_index=frame_index)


# ---------------------------------------------------------------------------
# radial lens distortion (forward model; preprocess owns the inverse)
# ---------------------------------------------------------------------------

def _radius_norm(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, float, float, float]:
    w, h = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float64)[:, None] - cx
    ys = np.arange(h, dtype=np.float64)[None, :] - cy
    rmax = np.hypot(cx, cy)
    return xs, ys, cx, cy, rmax


def bilinear_sample(values: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``values`` at float coordinates, edge-clamped."""
    w, h = values.shape
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    v00 = values[x0, y0]
    v01 = values[x0, y1]
    v10 = values[x1, y0]
    v11 = values[x1, y1]
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


def distort(frame: ThermalFrame, k1: float, k2: float) -> ThermalFrame:
    """Apply the forward radial model r' = r (1 + k1 r^2 + k2 r^4) about the
    frame center (r in units of the half-diagonal), bilinear resampling.

    k1 = k2 = 0 is the identity up to interpolation round-off; the center
    pixel is the fixed point of the map.
    """
    vals = frame.values
    if k1 == 0.0 and k2 == 0.0:
        return ThermalFrame(vals.copy(), frame.layer_index, frame.frame_index)
    xs, ys, cx, cy, rmax = _radius_norm(vals.shape)
    r2 = (xs * xs + ys * ys) / (rmax * rmax)
    scale = 1.0 + k1 * r2 + k2 * r2 * r2
    out = bilinear_sample(vals, cx + xs * scale, cy + ys * scale)
    return ThermalFrame(out, frame.layer_index, frame.frame_index)


# ---------------------------------------------------------------------------
# quality oracle
# ---------------------------------------------------------------------------

def quality_oracle(part: PartPlacement, aggregates: dict, config: JobConfig) -> QualityVector:
    """Planted ground truth from the part's noise-free thermal aggregates.

    ``aggregates`` carries {"min", "mean", "max"} in degC. The density law is
    linear in the aggregated minimum temperature by construction.
    """
    rng = substream(config.seed, "oracle", zlib.crc32(part.part_id.encode("utf-8")))
    noise = rng.normal(0.0, 1.0, size=4)
    density = (config.density_base
               + config.density_slope * (aggregates["min"] - config.t_ref_c)
               + config.density_noise * noise[0])
    shrink = (config.shrink_base
              + config.shrink_temp_slope * (aggregates["mean"] - config.t_ref_c)
              + config.shrink_binder_slope * (config.binder_level - 0.5))
    dims = np.array([NOMINAL_X, NOMINAL_Y, NOMINAL_Z], dtype=np.float64)
    dims = dims * (1.0 - shrink) + config.dim_noise_mm * noise[1:]
    return QualityVector(length_mm=float(dims[0]), width_mm=float(dims[1]),
                         height_mm=float(dims[2]), density_g_cm3=float(density))


# ---------------------------------------------------------------------------
# build generation
# ---------------------------------------------------------------------------

FUSING_FRACTIONS = (0.45, 1.0)   # frame 0 = mid-fuse, frame 1 = canonical fusing state
CANONICAL_FRAME_INDEX = 1

# raw telemetry fields dropped by feature cleaning (planted zero-signal distractors)
DISTRACTOR_FIELDS = ("ambient_humidity_pct", "ambient_temp_c", "operator_shift", "job_timestamp")

# per-build process knobs; realistic-looking but planted with zero signal
PROCESS_KNOBS = {
    "powder_batch_age_days": (5.0, 60.0),
    "roller_speed_mm_s": (80.0, 120.0),
    "print_speed_mm_s": (150.0, 250.0),
    "cure_lamp_power_w": (400.0, 600.0),
    "binder_viscosity_cp": (4.0, 9.0),
    "powder_flow_index": (0.6, 0.95),
    "spread_uniformity_pct": (92.0, 99.5),
    "chamber_setpoint_c": (45.0, 55.0),
    "binder_temp_c": (25.0, 35.0),
    "nozzle_health_pct": (85.0, 100.0),
    "z_backlash_um": (1.0, 8.0),
    "powder_moisture_pct": (0.05, 0.4),
    "lamp_age_h": (10.0, 900.0),
}


def part_voxel_from_fields(fields: list[np.ndarray], part: PartPlacement) -> np.ndarray:
    """Crop a part's raw (fx, fy, 7) voxel from per-layer bed fields."""
    fx, fy = part.footprint()
    z0, z1 = part.z_range()
    return np.stack([fields[z][part.x:part.x + fx, part.y:part.y + fy]
                     for z in range(z0, z1)], axis=-1)


def generate_build(layout: BedLayout, config: JobConfig) -> BuildData:
    """Emit one build: F=2 frames per layer (distorted, noisy), a raw
    telemetry record per part, and oracle quality truths.

    Pure function of (layout, config): two calls with the same inputs yield
    bit-identical output.
    """
    layout.validate()
    # masks repeat across layers within a z-band; cache the convolutions
    cache: dict[tuple[str, ...],
                tuple[np.ndarray, np.ndarray | None, np.ndarray | None]] = {}

    def components(layer: int):
        key = tuple(p.part_id for p in layout.parts if p.z <= layer < p.z + NOMINAL_Z)
        if key not in cache:
            mask = part_mask(layout, layer)
            frac = None
            if mask.any():
                frac = ndimage.convolve(mask.astype(np.float64),
                                        _disc_kernel(config.disc_radius_px), mode="constant")
            cache[key] = (mask, frac, _crowding(mask, config))
        return cache[key]

    clean_fields = []
    frames: list[list[ThermalFrame]] = []
    for z in range(layout.layers):
        mask, frac, crowd = components(z)
        clean_fields.append(_clean_field(mask, frac, config, 1.0, crowd))
        per_layer = []
        for j, fuse in enumerate(FUSING_FRACTIONS):
            vals = _apply_noise(_clean_field(mask, frac, config, fuse, crowd),
                                config, z, j)
            per_layer.append(distort(ThermalFrame(vals, z, j), config.k1, config.k2))
        frames.append(per_layer)

    knob_rng = substream(config.seed, "telemetry", config.build_id)
    build_knobs = {name: knob_rng.uniform(lo, hi) for name, (lo, hi) in PROCESS_KNOBS.items()}
    # the chamber setpoint is a real field input, not a planted distractor:
    # telemetry must report the value the job actually ran with
    build_knobs["chamber_setpoint_c"] = config.chamber_setpoint_c
    shadowing = int(knob_rng.integers(0, 2))

    telemetry: list[dict] = []
    truths: dict[str, QualityVector] = {}
    for idx, part in enumerate(layout.parts):
        vox = part_voxel_from_fields(clean_fields, part)
        aggregates = {"min": float(vox.min()), "mean": float(vox.mean()), "max": float(vox.max())}
        truths[part.part_id] = quality_oracle(part, aggregates, config)
        jit = substream(config.seed, "telemetry-part", config.build_id, idx)
        record = {
            "part_id": part.part_id,
            "build_id": config.build_id,
            "printer_id": config.printer_id,
            "bed_x": part.x,
            "bed_y": part.y,
            "bed_z": part.z,
            "orientation": part.orientation,
            "binder_level": config.binder_level,
            "layer_thickness_um": config.layer_thickness_um,
            "recycle_count": config.recycle_count,
            "material": config.material,
            "shadowing": shadowing,
            # planted distractors; carry zero signal and are cleaned away
            "ambient_humidity_pct": float(jit.uniform(20.0, 70.0)),
            "ambient_temp_c": float(jit.uniform(18.0, 28.0)),
            "operator_shift": int(jit.integers(0, 3)),
            "job_timestamp": int(1_700_000_000 + config.build_id * 86_400),
        }
        for name, value in build_knobs.items():
            record[name] = float(value + 0.01 * value * jit.normal())
        telemetry.append(record)
    return BuildData(layout=layout, config=config, frames=frames,
                     telemetry=telemetry, truths=truths)


# ---------------------------------------------------------------------------
# layout generation and the layout file format
# ---------------------------------------------------------------------------

def random_layout(build_id: int, seed: int, bed_w: int = 160, bed_h: int = 120,
                  layers: int = 64, parts_per_build: int = 30) -> BedLayout:
    """Non-overlapping random layout on a 40x40-pixel slot grid.

    Each slot fits the TRS footprint at either orientation with a few pixels
    of jitter; z-bands are stacked every 20 layers. Crowding (which slots are
    occupied) varies per build, which is what makes the neighborhood-density
    thermal term informative downstream.
    """
    cell = 40
    cols, rows = bed_w // cell, bed_h // cell
    bands = [z for z in range(2, layers - NOMINAL_Z, 20)]
    slots = [(c, r, z) for z in bands for r in range(rows) for c in range(cols)]
    if parts_per_build > len(slots):
        raise LayoutError(f"{parts_per_build} parts do not fit {len(slots)} slots")
    rng = substream(seed, "layout", build_id)
    chosen = rng.choice(len(slots), size=parts_per_build, replace=False)
    parts = []
    for i, si in enumerate(sorted(int(s) for s in chosen)):
        c, r, z = slots[si]
        orientation = HORIZONTAL if rng.random() < 0.5 else VERTICAL
        fx, fy = (NOMINAL_X, NOMINAL_Y) if orientation == HORIZONTAL else (NOMINAL_Y, NOMINAL_X)
        jx = int(rng.integers(0, cell - fx + 1))
        jy = int(rng.integers(0, cell - fy + 1))
        parts.append(PartPlacement(part_id=f"b{build_id:03d}_p{i:02d}",
                                   x=c * cell + jx, y=r * cell + jy, z=z,
                                   orientation=orientation))
    layout = BedLayout(bed_w=bed_w, bed_h=bed_h, layers=layers, parts=tuple(parts))
    layout.validate()
    return layout


def random_job(build_id: int, seed: int, noise_amp_c: float = 0.8,
               printer_count: int = 5) -> JobConfig:
    """Per-build job parameters drawn from the seeded "job" substream.

    Varies the process knobs that carry planted signal (printer, binder
    level, layer thickness, recycle count, material) so a multi-build
    dataset spans the oracle's input space.
    """
    rng = substream(seed, "job", build_id)
    return JobConfig(
        printer_id=int(rng.integers(0, printer_count)),
        build_id=build_id,
        binder_level=float(rng.uniform(0.3, 0.9)),
        layer_thickness_um=float(rng.choice([50.0, 60.0, 70.0])),
        recycle_count=int(rng.integers(0, 9)),
        material=str(rng.choice(["316", "17-4PH"])),
        chamber_setpoint_c=float(rng.uniform(45.0, 55.0)),
        noise_amp_c=float(noise_amp_c),
        seed=seed,
    )


def write_layout(layout: BedLayout) -> str:
    lines = [f"bed_w = {layout.bed_w}", f"bed_h = {layout.bed_h}", f"layers = {layout.layers}"]
    for p in layout.parts:
        lines.append(f"part = {p.part_id},{p.x},{p.y},{p.z},{p.orientation}")
    return "\n".join(lines) + "\n"


def parse_layout(text: str) -> BedLayout:
    kv = {"bed_w": 160, "bed_h": 120, "layers": 64}
    parts = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "part":
            pid, x, y, z, orientation = (s.strip() for s in value.split(","))
            parts.append(PartPlacement(part_id=pid, x=int(x), y=int(y), z=int(z),
                                       orientation=orientation))
        elif key in kv:
            kv[key] = int(value)
        else:
            raise LayoutError(f"unknown layout key {key!r}")
    layout = BedLayout(bed_w=kv["bed_w"], bed_h=kv["bed_h"], layers=kv["layers"],
                       parts=tuple(parts))
    layout.validate()
    return layout
