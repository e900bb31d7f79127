"""Command-line entry point and experiment orchestration.

Commands operate on one workspace directory (``--out``) with this layout::

    data/       raw synthetic builds        (synth)
    dataset/    preprocessed voxels + features (preprocess)
    models/     reconstruction + predictor checkpoints (pretrain, train, sweep)
    report/     evaluation tables and figures (eval, plot)

Every command is idempotent: a rerun with unchanged inputs either verifies
the existing outputs and skips, or regenerates byte-identical files. All
randomness flows from the master seed through named substreams. Upstream
artifacts are hash-verified before use; a mismatch aborts the command.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys

import numpy as np

from . import autodiff as ad
from . import evalreport as er
from . import models as md
from . import preprocess as pp
from . import storage as st
from . import synthbed as sb

FORMAT_VERSION = 1

#: accepted config keys with defaults; values are stored as strings
CONFIG_DEFAULTS = {
    "seed": "42",
    # synth
    "builds": "38",
    "parts_per_build": "30",
    "bed_w": "160",
    "bed_h": "120",
    "layers": "64",
    "noise_amp_c": "0.8",
    "k1": "0.04",
    "k2": "0.01",
    # preprocess
    "split_train": "0.78",
    "split_val": "0.09",
    "split_test": "0.13",
    "geometry": "0",
    "roi_edge": "16",
    # training
    "latent": "9",
    "channels": "1,8,16,32",
    "kinds": "AE,VAE3D",
    "pretrain_epochs": "12",
    "predictor_epochs": "80",
    "lr": "1e-3",
    "batch_size": "32",
    "w1": "1.0",
    "w2": "1e-3",
    "variant": "LatentThermal",
    "encoder_mode": "frozen",
    "sweep_latents": "5,9,20",
    "eval_variants": "NoThermal,SequentialThermal,LatentThermal",
}

AXIS_CONVENTION = "voxel dims (W,L,H) = (18,35,7): width, length, height"


class CliError(RuntimeError):
    """User-facing command failure (bad input, missing/corrupt artifact)."""


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def load_config(path: str | None, overrides: dict[str, str]) -> dict[str, str]:
    cfg = dict(CONFIG_DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise CliError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            parsed = st.parse_config(f.read())
        for key, value in parsed.items():
            if key not in CONFIG_DEFAULTS:
                raise CliError(
                    f"invalid config key {key!r}; accepted keys: "
                    + ", ".join(sorted(CONFIG_DEFAULTS)))
            cfg[key] = value
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _cfg_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError as e:
        raise CliError(f"config key {key!r}: expected integer, got {cfg[key]!r}") from e


def _cfg_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError as e:
        raise CliError(f"config key {key!r}: expected number, got {cfg[key]!r}") from e


def _cfg_int_list(cfg, key):
    try:
        return tuple(int(s) for s in cfg[key].split(","))
    except ValueError as e:
        raise CliError(f"config key {key!r}: expected comma-separated "
                       f"integers, got {cfg[key]!r}") from e


# ---------------------------------------------------------------------------
# manifest helpers
# ---------------------------------------------------------------------------

def _tree_hashes(root: str, skip=("manifest.json",)) -> dict[str, str]:
    hashes = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            if rel in skip:
                continue
            hashes[rel.replace(os.sep, "/")] = st.sha256_file(
                os.path.join(dirpath, name))
    return hashes


def _write_stage_manifest(stage_dir: str, kind: str, cfg: dict,
                          extra: dict | None = None) -> None:
    manifest = {"kind": kind, "version": FORMAT_VERSION,
                "seed": _cfg_int(cfg, "seed"), "config": dict(cfg),
                "hashes": _tree_hashes(stage_dir)}
    if extra:
        manifest.update(extra)
    st.write_manifest(os.path.join(stage_dir, "manifest.json"), manifest)


def _stage_up_to_date(stage_dir: str, kind: str, cfg: dict) -> bool:
    """True when the stage's manifest exists, records the same config, and
    every blob verifies."""
    path = os.path.join(stage_dir, "manifest.json")
    if not os.path.exists(path):
        return False
    try:
        manifest = st.read_manifest(path)
        if manifest.get("kind") != kind or manifest.get("config") != dict(cfg):
            return False
        st.verify_manifest(manifest, stage_dir)
    except (st.StorageError, json.JSONDecodeError):
        return False
    return True


def _verified_manifest(stage_dir: str, kind: str) -> dict:
    """Load and hash-verify an upstream stage; abort on any mismatch."""
    path = os.path.join(stage_dir, "manifest.json")
    if not os.path.exists(path):
        raise CliError(f"missing upstream artifact: {path} "
                       f"(run the producing command first)")
    manifest = st.read_manifest(path)
    if manifest.get("kind") != kind:
        raise CliError(f"{path}: expected a {kind!r} manifest, "
                       f"got {manifest.get('kind')!r}")
    try:
        st.verify_manifest(manifest, stage_dir)
    except st.StorageError as e:
        raise CliError(f"refusing to proceed: {e}") from e
    return manifest


def _fresh_dir(path: str) -> None:
    if os.path.exists(path):
        shutil.rmtree(path)
    os.makedirs(path)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, out_root: str) -> int:
    data_dir = os.path.join(out_root, "data")
    if _stage_up_to_date(data_dir, "synth", cfg):
        print(f"synth: {data_dir} is up to date, skipping")
        return 0
    seed = _cfg_int(cfg, "seed")
    n_builds = _cfg_int(cfg, "builds")
    _fresh_dir(data_dir)
    with open(os.path.join(data_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(st.format_config(cfg))
    n_parts = 0
    printers = set()
    for b in range(n_builds):
        layout = sb.random_layout(
            b, seed, bed_w=_cfg_int(cfg, "bed_w"), bed_h=_cfg_int(cfg, "bed_h"),
            layers=_cfg_int(cfg, "layers"),
            parts_per_build=_cfg_int(cfg, "parts_per_build"))
        job = sb.random_job(b, seed, noise_amp_c=_cfg_float(cfg, "noise_amp_c"))
        job = dataclasses.replace(job, k1=_cfg_float(cfg, "k1"),
                                  k2=_cfg_float(cfg, "k2"))
        build = sb.generate_build(layout, job)
        bdir = os.path.join(data_dir, "builds", f"b{b:03d}")
        os.makedirs(bdir)
        with open(os.path.join(bdir, "layout.txt"), "w", encoding="utf-8") as f:
            f.write(sb.write_layout(layout))
        stack = np.stack([fr.values for per_layer in build.frames
                          for fr in per_layer]).astype("<f4")
        st.write_voxel_blob(os.path.join(bdir, "frames.thvx"), stack, st.DTYPE_F32)
        with open(os.path.join(bdir, "telemetry.json"), "w", encoding="utf-8") as f:
            json.dump(build.telemetry, f, sort_keys=True, indent=1)
            f.write("\n")
        truths = {pid: list(q.as_array()) for pid, q in build.truths.items()}
        with open(os.path.join(bdir, "truths.json"), "w", encoding="utf-8") as f:
            json.dump(truths, f, sort_keys=True, indent=1)
            f.write("\n")
        job_echo = {k: (v if not isinstance(v, float) else repr(v))
                    for k, v in job.__dict__.items()}
        with open(os.path.join(bdir, "job.json"), "w", encoding="utf-8") as f:
            json.dump(job_echo, f, sort_keys=True, indent=1)
            f.write("\n")
        n_parts += len(layout.parts)
        printers.add(job.printer_id)
    _write_stage_manifest(data_dir, "synth", cfg,
                          {"counts": {"builds": n_builds, "parts": n_parts,
                                      "printers": len(printers)}})
    print(f"synth: {n_builds} builds, {n_parts} parts, "
          f"{len(printers)} printer ids -> {data_dir}")
    return 0


def _load_build(bdir: str):
    layout = sb.parse_layout(open(os.path.join(bdir, "layout.txt"),
                                  encoding="utf-8").read())
    stack = st.read_voxel_blob(os.path.join(bdir, "frames.thvx")).astype(np.float64)
    nf = len(sb.FUSING_FRACTIONS)
    frames = [[sb.ThermalFrame(stack[z * nf + j], z, j) for j in range(nf)]
              for z in range(layout.layers)]
    telemetry = json.load(open(os.path.join(bdir, "telemetry.json"),
                               encoding="utf-8"))
    truths_raw = json.load(open(os.path.join(bdir, "truths.json"),
                                encoding="utf-8"))
    truths = {pid: sb.QualityVector(*vals) for pid, vals in truths_raw.items()}
    job = json.load(open(os.path.join(bdir, "job.json"), encoding="utf-8"))
    return layout, frames, telemetry, truths, job


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

_FEATURES_HEADER = (["part_id", "build_id", "printer_id", "bed_x", "bed_y",
                     "bed_z", "orientation", "split",
                     "t_min", "t_mean", "t_max"]
                    + [f"f_{name}" for name in pp.FEATURE_NAMES]
                    + ["length_mm", "width_mm", "height_mm", "density_g_cm3"])


def cmd_preprocess(cfg: dict, out_root: str) -> int:
    ds_dir = os.path.join(out_root, "dataset")
    if _stage_up_to_date(ds_dir, "dataset", cfg):
        print(f"preprocess: {ds_dir} is up to date, skipping")
        return 0
    data_dir = os.path.join(out_root, "data")
    _verified_manifest(data_dir, "synth")
    seed = _cfg_int(cfg, "seed")
    _fresh_dir(ds_dir)
    os.makedirs(os.path.join(ds_dir, "voxels"))
    want_geometry = _cfg_int(cfg, "geometry") != 0
    roi_edge = _cfg_int(cfg, "roi_edge")
    if want_geometry:
        os.makedirs(os.path.join(ds_dir, "geom"))

    records: list[pp.PartRecord] = []
    build_dirs = sorted(os.listdir(os.path.join(data_dir, "builds")))
    for bname in build_dirs:
        bdir = os.path.join(data_dir, "builds", bname)
        layout, frames, telemetry, truths, job = _load_build(bdir)
        recs, voxels = pp.preprocess_build(frames, layout, telemetry, truths,
                                           float(job["k1"]), float(job["k2"]))
        records.extend(recs)
        for pid, vox in voxels.items():
            st.write_voxel_blob(os.path.join(ds_dir, "voxels", f"{pid}.thvx"),
                                vox, st.DTYPE_F32)
        if want_geometry:
            slices = pp.design_slices(layout)
            for part in layout.parts:
                geo = pp.voxelize_geometry(slices, part, roi_edge)
                st.write_voxel_blob(os.path.join(ds_dir, "geom", f"{part.part_id}.thvx"),
                                    geo, st.DTYPE_U8)

    ratios = (_cfg_float(cfg, "split_train"), _cfg_float(cfg, "split_val"),
              _cfg_float(cfg, "split_test"))
    splits = pp.split_by_build(records, ratios, seed)
    split_of = {r.part_id: name for name, recs in splits.items() for r in recs}
    train_matrix = np.stack([r.features for r in splits["train"]])
    stats = pp.compute_feature_stats(train_matrix)

    lines = [",".join(_FEATURES_HEADER)]
    for r in sorted(records, key=lambda r: r.part_id):
        t = r.target
        cells = ([r.part_id, str(r.build_id), str(r.printer_id),
                  str(r.bed_x), str(r.bed_y), str(r.bed_z), r.orientation,
                  split_of[r.part_id],
                  repr(r.aggregates["min"]), repr(r.aggregates["mean"]),
                  repr(r.aggregates["max"])]
                 + [repr(float(v)) for v in r.features]
                 + [repr(t.length_mm), repr(t.width_mm), repr(t.height_mm),
                    repr(t.density_g_cm3)])
        lines.append(",".join(cells))
    with open(os.path.join(ds_dir, "features.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write("\n".join(lines) + "\n")

    _write_stage_manifest(ds_dir, "dataset", cfg, {
        "axis_convention": AXIS_CONVENTION,
        "splits": split_of,
        "feature_names": list(pp.FEATURE_NAMES),
        "feature_stats": {"mean": list(stats["mean"]), "std": list(stats["std"])},
        "roi_edge": roi_edge if want_geometry else None,
        "counts": {name: len(recs) for name, recs in splits.items()},
    })
    print("preprocess: "
          + ", ".join(f"{name}={len(recs)}" for name, recs in splits.items())
          + f" parts -> {ds_dir}")
    return 0


# ---------------------------------------------------------------------------
# dataset loading for training/eval
# ---------------------------------------------------------------------------

class LoadedDataset:
    """In-memory view of a preprocessed dataset directory."""

    def __init__(self, ds_dir: str, need_voxels: bool = True,
                 geometry: bool = False):
        self.manifest = _verified_manifest(ds_dir, "dataset")
        self.ds_dir = ds_dir
        self.feature_stats = {
            "mean": np.array(self.manifest["feature_stats"]["mean"]),
            "std": np.array(self.manifest["feature_stats"]["std"])}
        rows = open(os.path.join(ds_dir, "features.csv"),
                    encoding="utf-8").read().splitlines()
        header = rows[0].split(",")
        self.rows = [dict(zip(header, line.split(","))) for line in rows[1:]]
        self.rows.sort(key=lambda r: r["part_id"])
        self.geometry = geometry
        self.vox: dict[str, np.ndarray] = {}
        if need_voxels:
            sub = "geom" if geometry else "voxels"
            for r in self.rows:
                path = os.path.join(ds_dir, sub, f"{r['part_id']}.thvx")
                if not os.path.exists(path):
                    raise CliError(f"missing upstream artifact: {path}")
                self.vox[r["part_id"]] = st.read_voxel_blob(path)

    def split_rows(self, split: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == split]

    def predictor_split(self, split: str) -> md.PredictorDataset:
        rows = self.split_rows(split)
        tab_raw = np.array([[float(r[f"f_{n}"]) for n in pp.FEATURE_NAMES]
                            for r in rows])
        tab = pp.standardize(tab_raw, self.feature_stats)
        targets = np.array([[float(r[t]) for t in er.TARGET_NAMES] for r in rows])
        vox = None
        if self.vox:
            stack = np.stack([self.vox[r["part_id"]] for r in rows]).astype(np.float64)
            vox = (md.normalize_geometry(stack) if self.geometry
                   else md.normalize_thermal(stack))
        return md.PredictorDataset(tab=tab, vox=vox, targets_std=targets,
                                   targets_raw=targets,
                                   part_ids=[r["part_id"] for r in rows])

    def voxel_split(self, split: str) -> np.ndarray:
        rows = self.split_rows(split)
        stack = np.stack([self.vox[r["part_id"]] for r in rows]).astype(np.float64)
        return (md.normalize_geometry(stack) if self.geometry
                else md.normalize_thermal(stack))


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _recon_name(kind: str, latent: int, geometry: bool) -> str:
    tag = "geom" if geometry else "thermal"
    return f"recon_{kind}_{tag}_d{latent}.tfck"


def cmd_pretrain(cfg: dict, out_root: str) -> int:
    models_dir = os.path.join(out_root, "models")
    stage = os.path.join(models_dir, "pretrain")
    if _stage_up_to_date(stage, "pretrain", cfg):
        print(f"pretrain: {stage} is up to date, skipping")
        return 0
    geometry = _cfg_int(cfg, "geometry") != 0
    ds = LoadedDataset(os.path.join(out_root, "dataset"), geometry=geometry)
    seed = _cfg_int(cfg, "seed")
    latent = _cfg_int(cfg, "latent")
    channels = _cfg_int_list(cfg, "channels")
    kinds = [k.strip() for k in cfg["kinds"].split(",") if k.strip()]
    for kind in kinds:
        if kind not in ("AE", "VAE3D"):
            raise CliError(f"config key 'kinds': unknown model kind {kind!r}; "
                           f"accepted: AE, VAE3D")
    train = ds.voxel_split("train")
    val = ds.voxel_split("val")
    test = ds.voxel_split("test")
    scale = (md.GEOM_NORM_MAX if geometry else md.denormalize_scale_thermal())
    input_shape = train.shape[1:]

    _fresh_dir(stage)
    metrics = {"mean_baseline": md.mean_voxel_baseline_adp(train, test, scale)}
    curve_lines = ["kind,epoch,val_adp"]
    for kind in kinds:
        config = md.TrainConfig(
            latent_dim=latent, seed=seed, epochs=_cfg_int(cfg, "pretrain_epochs"),
            lr=_cfg_float(cfg, "lr"), batch_size=_cfg_int(cfg, "batch_size"),
            w1=_cfg_float(cfg, "w1"), w2=_cfg_float(cfg, "w2"))
        model = md.ReconModel(kind, latent_dim=latent, input_shape=input_shape,
                              seed=seed, channels=channels)
        curve = md.pretrain_recon(model, train, val, config, denorm_scale=scale)
        for epoch, adp_val in enumerate(curve):
            curve_lines.append(f"{kind},{epoch},{adp_val:.6g}")
        metrics[kind] = md.reconstruction_adp(model, test, scale)
        st.save_checkpoint(os.path.join(stage, _recon_name(kind, latent, geometry)),
                           model.descriptor(),
                           {k: p.data for k, p in model.params.items()})
        print(f"pretrain {kind}: test ADP {metrics[kind]:.4g} "
              f"(baseline {metrics['mean_baseline']:.4g})")
    with open(os.path.join(stage, "adp_curves.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write("\n".join(curve_lines) + "\n")
    with open(os.path.join(stage, "metrics.json"), "w", encoding="utf-8") as f:
        json.dump({k: float(v) for k, v in metrics.items()}, f, sort_keys=True,
                  indent=1)
        f.write("\n")
    _write_stage_manifest(stage, "pretrain", cfg)
    return 0


def _load_recon(stage: str, kind: str, latent: int, geometry: bool) -> md.ReconModel:
    path = os.path.join(stage, _recon_name(kind, latent, geometry))
    if not os.path.exists(path):
        raise CliError(f"missing upstream artifact: {path} (run pretrain first)")
    desc, params = st.load_checkpoint(path)
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    return md.ReconModel.from_descriptor(desc, tensors)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(cfg: dict, out_root: str) -> int:
    variant = cfg["variant"]
    if variant not in md.VARIANTS:
        raise CliError(f"config key 'variant': unknown variant {variant!r}; "
                       f"accepted: {', '.join(md.VARIANTS)}")
    models_dir = os.path.join(out_root, "models")
    stage = os.path.join(models_dir, f"train_{variant}")
    if _stage_up_to_date(stage, "train", cfg):
        print(f"train: {stage} is up to date, skipping")
        return 0
    geometry = variant == "GeometryLatent"
    ds = LoadedDataset(os.path.join(out_root, "dataset"),
                       need_voxels=variant != "NoThermal", geometry=geometry)
    seed = _cfg_int(cfg, "seed")
    latent = _cfg_int(cfg, "latent")
    train_set = ds.predictor_split("train")
    target_stats = md.compute_target_stats(train_set.targets_raw)
    train_set.targets_std = ((train_set.targets_raw - target_stats["mean"])
                             / target_stats["std"])

    encoder = None
    if variant in md.LATENT_VARIANTS:
        kind = "VAE3D" if "VAE3D" in cfg["kinds"] else "AE"
        encoder = _load_recon(os.path.join(models_dir, "pretrain"), kind,
                              latent, geometry)
    voxel_size = None
    if variant == "SequentialThermal":
        voxel_size = int(np.prod(train_set.vox.shape[1:]))
    model = md.Predictor(variant, tabular_width=train_set.tab.shape[1],
                         encoder=encoder, voxel_size=voxel_size, seed=seed)
    config = md.TrainConfig(
        latent_dim=latent, seed=seed, epochs=_cfg_int(cfg, "predictor_epochs"),
        lr=_cfg_float(cfg, "lr"), batch_size=_cfg_int(cfg, "batch_size"),
        w1=_cfg_float(cfg, "w1"), w2=_cfg_float(cfg, "w2"),
        encoder_mode=cfg["encoder_mode"])
    curve = md.train_predictor(model, train_set, config)

    _fresh_dir(stage)
    desc = model.descriptor()
    desc["target_stats"] = {"mean": list(target_stats["mean"]),
                            "std": list(target_stats["std"])}
    desc["encoder_mode"] = cfg["encoder_mode"]
    # path relative to models/ so loaders find sweep-specific encoders too
    desc["encoder_checkpoint"] = (
        f"pretrain/{_recon_name(encoder.kind, latent, geometry)}"
        if encoder else None)
    params = {k: p.data for k, p in model.params.items()}
    if encoder is not None and cfg["encoder_mode"] == "finetune":
        params.update({f"enc::{k}": p.data for k, p in encoder.params.items()})
    st.save_checkpoint(os.path.join(stage, f"predictor_{variant}.tfck"),
                       desc, params)
    with open(os.path.join(stage, "loss_curve.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write("epoch,train_loss\n")
        f.write("".join(f"{i},{v:.6g}\n" for i, v in enumerate(curve)))
    _write_stage_manifest(stage, "train", cfg)
    print(f"train {variant}: final loss {curve[-1]:.6g} -> {stage}")
    return 0


def _load_predictor(stage: str, variant: str, models_dir: str) -> md.Predictor:
    path = os.path.join(stage, f"predictor_{variant}.tfck")
    if not os.path.exists(path):
        raise CliError(f"missing upstream artifact: {path} (run train first)")
    desc, params = st.load_checkpoint(path)
    encoder = None
    if desc["variant"] in md.LATENT_VARIANTS:
        enc_params = {k[len("enc::"):]: v for k, v in params.items()
                      if k.startswith("enc::")}
        enc_path = os.path.join(models_dir, desc["encoder_checkpoint"])
        if not os.path.exists(enc_path):
            raise CliError(f"missing upstream artifact: {enc_path} "
                           f"(run pretrain first)")
        enc_desc, enc_raw = st.load_checkpoint(enc_path)
        if enc_params:
            # finetuned weights travel inside the predictor checkpoint
            enc_tensors = {k: ad.Tensor(v, requires_grad=True)
                           for k, v in enc_params.items()}
        else:
            enc_tensors = {k: ad.Tensor(v, requires_grad=True)
                           for k, v in enc_raw.items()}
        encoder = md.ReconModel.from_descriptor(enc_desc, enc_tensors)
    head = {k: ad.Tensor(v, requires_grad=True)
            for k, v in params.items() if not k.startswith("enc::")}
    model = md.Predictor(desc["variant"], tabular_width=desc["tabular_width"],
                         encoder=encoder, voxel_size=desc["voxel_size"],
                         seed=desc["seed"], params=head)
    model.target_stats = {"mean": np.array(desc["target_stats"]["mean"]),
                          "std": np.array(desc["target_stats"]["std"])}
    return model


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(cfg: dict, out_root: str) -> int:
    report_dir = os.path.join(out_root, "report")
    if _stage_up_to_date(report_dir, "report", cfg):
        print(f"eval: {report_dir} is up to date, skipping")
        return 0
    models_dir = os.path.join(out_root, "models")
    variants = [v.strip() for v in cfg["eval_variants"].split(",") if v.strip()]
    for v in variants:
        if v not in md.VARIANTS:
            raise CliError(f"config key 'eval_variants': unknown variant {v!r}; "
                           f"accepted: {', '.join(md.VARIANTS)}")
    parts: list[er.PartResult] = []
    for variant in variants:
        stage = os.path.join(models_dir, f"train_{variant}")
        _verified_manifest(stage, "train")
        model = _load_predictor(stage, variant, models_dir)
        geometry = variant == "GeometryLatent"
        ds = LoadedDataset(os.path.join(out_root, "dataset"),
                           need_voxels=variant != "NoThermal", geometry=geometry)
        test = ds.predictor_split("test")
        preds = md.predict(model, test.tab, test.vox)
        rows = ds.split_rows("test")
        for row, pred, true in zip(rows, preds, test.targets_raw):
            parts.append(er.PartResult(
                part_id=row["part_id"], variant=variant,
                bed_x=int(row["bed_x"]), bed_y=int(row["bed_y"]),
                predicted=tuple(float(x) for x in pred),
                true=tuple(float(x) for x in true),
                aggregates=(float(row["t_min"]), float(row["t_mean"]),
                            float(row["t_max"]))))
    recon_adp = {}
    metrics_path = os.path.join(models_dir, "pretrain", "metrics.json")
    if os.path.exists(metrics_path):
        recon_adp = json.load(open(metrics_path, encoding="utf-8"))
    report = er.build_report(parts, recon_adp)
    _fresh_dir(report_dir)
    er.emit_report(report, report_dir)
    _write_stage_manifest(report_dir, "report", cfg)
    print(f"eval: {len(variants)} variants, {len(parts)} rows -> {report_dir}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(cfg: dict, out_root: str) -> int:
    sweep_dir = os.path.join(out_root, "sweep")
    if _stage_up_to_date(sweep_dir, "sweep", cfg):
        print(f"sweep: {sweep_dir} is up to date, skipping")
        return 0
    dims = _cfg_int_list(cfg, "sweep_latents")
    lines = ["latent_dim,target,mean_pct_error,std_pct_error,n"]
    results = {}
    tmp_root = out_root  # reuse the workspace; per-d stages keyed by config
    for d in dims:
        sub_cfg = dict(cfg)
        sub_cfg["latent"] = str(d)
        sub_cfg["kinds"] = "VAE3D"
        sub_cfg["variant"] = "LatentThermal"
        sub_cfg["eval_variants"] = "LatentThermal"
        # stages live under models/sweep_d<d> so dims don't clobber each other
        stage_pre = os.path.join(tmp_root, "models", f"sweep_d{d}_pretrain")
        stage_train = os.path.join(tmp_root, "models", f"sweep_d{d}_train")
        _run_sweep_point(sub_cfg, tmp_root, d, stage_pre, stage_train)
        model = _load_predictor(stage_train, "LatentThermal",
                                os.path.join(tmp_root, "models"))
        ds = LoadedDataset(os.path.join(tmp_root, "dataset"))
        test = ds.predictor_split("test")
        preds = md.predict(model, test.tab, test.vox)
        errs = np.array([[er.pct_error(p, t) for p, t in zip(pr, tr)]
                         for pr, tr in zip(preds, test.targets_raw)])
        results[d] = errs.mean()
        for ti, target in enumerate(er.TARGET_NAMES):
            stats = er.error_stats(errs[:, ti])
            lines.append(f"{d},{target},{stats['mean']:.6g},"
                         f"{stats['std']:.6g},{len(errs)}")
    _fresh_dir(sweep_dir)
    with open(os.path.join(sweep_dir, "sweep.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    _write_stage_manifest(sweep_dir, "sweep", cfg)
    for d in dims:
        print(f"sweep d={d}: mean % error {results[d]:.4g}")
    return 0


def _run_sweep_point(cfg: dict, out_root: str, d: int,
                     stage_pre: str, stage_train: str) -> None:
    """Pretrain a VAE3D at latent d and train a LatentThermal head on it,
    writing into sweep-specific stage directories."""
    seed = _cfg_int(cfg, "seed")
    channels = _cfg_int_list(cfg, "channels")
    ds = LoadedDataset(os.path.join(out_root, "dataset"))
    train_vox = ds.voxel_split("train")
    val_vox = ds.voxel_split("val")
    if not _stage_up_to_date(stage_pre, "pretrain", cfg):
        config = md.TrainConfig(
            latent_dim=d, seed=seed, epochs=_cfg_int(cfg, "pretrain_epochs"),
            lr=_cfg_float(cfg, "lr"), batch_size=_cfg_int(cfg, "batch_size"),
            w1=_cfg_float(cfg, "w1"), w2=_cfg_float(cfg, "w2"))
        model = md.ReconModel("VAE3D", latent_dim=d, seed=seed, channels=channels)
        md.pretrain_recon(model, train_vox, val_vox, config)
        _fresh_dir(stage_pre)
        st.save_checkpoint(os.path.join(stage_pre, _recon_name("VAE3D", d, False)),
                           model.descriptor(),
                           {k: p.data for k, p in model.params.items()})
        _write_stage_manifest(stage_pre, "pretrain", cfg)
    if not _stage_up_to_date(stage_train, "train", cfg):
        encoder = _load_recon(stage_pre, "VAE3D", d, False)
        train_set = ds.predictor_split("train")
        target_stats = md.compute_target_stats(train_set.targets_raw)
        train_set.targets_std = ((train_set.targets_raw - target_stats["mean"])
                                 / target_stats["std"])
        model = md.Predictor("LatentThermal", tabular_width=train_set.tab.shape[1],
                             encoder=encoder, seed=seed)
        config = md.TrainConfig(
            latent_dim=d, seed=seed, epochs=_cfg_int(cfg, "predictor_epochs"),
            lr=_cfg_float(cfg, "lr"), batch_size=_cfg_int(cfg, "batch_size"),
            w1=_cfg_float(cfg, "w1"), w2=_cfg_float(cfg, "w2"),
            encoder_mode=cfg["encoder_mode"])
        md.train_predictor(model, train_set, config)
        _fresh_dir(stage_train)
        desc = model.descriptor()
        desc["target_stats"] = {"mean": list(target_stats["mean"]),
                                "std": list(target_stats["std"])}
        desc["encoder_mode"] = cfg["encoder_mode"]
        desc["encoder_checkpoint"] = (
            f"sweep_d{d}_pretrain/{_recon_name('VAE3D', d, False)}")
        st.save_checkpoint(os.path.join(stage_train, "predictor_LatentThermal.tfck"),
                           desc, {k: p.data for k, p in model.params.items()})
        _write_stage_manifest(stage_train, "train", cfg)


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def cmd_plot(cfg: dict, out_root: str) -> int:
    """Re-render the report SVGs from the emitted per-part table."""
    report_dir = os.path.join(out_root, "report")
    per_part = os.path.join(report_dir, "per_part.csv")
    if not os.path.exists(per_part):
        raise CliError(f"missing upstream artifact: {per_part} (run eval first)")
    lines = [ln for ln in open(per_part, encoding="utf-8").read().splitlines()
             if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    parts = []
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        parts.append(er.PartResult(
            part_id=row["part_id"], variant=row["variant"],
            bed_x=int(row["bed_x"]), bed_y=int(row["bed_y"]),
            predicted=tuple(float(row[f"pred_{t}"]) for t in er.TARGET_NAMES),
            true=tuple(float(row[f"true_{t}"]) for t in er.TARGET_NAMES),
            aggregates=tuple(float(row[a]) for a in er.AGGREGATE_NAMES)))
    report = er.build_report(parts)
    written = er._render_svgs(report, report_dir, cell=40)
    print(f"plot: re-rendered {len(written)} figures in {report_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermofuse",
        description="Synthetic thermal-voxel quality-prediction pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--out", required=True, help="workspace directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--variant", default=None, choices=list(md.VARIANTS))
    parser.add_argument("--latent", type=int, default=None)
    parser.add_argument("--encoder-mode", default=None,
                        choices=["frozen", "finetune"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": None if args.seed is None else str(args.seed),
        "variant": args.variant,
        "latent": None if args.latent is None else str(args.latent),
        "encoder_mode": args.encoder_mode,
    }
    try:
        cfg = load_config(args.config, overrides)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except (CliError, st.StorageError, st.ConfigError, er.EvalError,
            md.ModelError, md.TrainingError, pp.PreprocessError,
            sb.LayoutError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
