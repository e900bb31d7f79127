"""Reconstruction and prediction networks.

Two reconstruction architectures over the 18x35x7 part thermal voxel (plain
autoencoder and 3D variational autoencoder) and four quality-predictor
variants:

    NoThermal          tabular features only
    SequentialThermal  tabular + flattened raw voxel, one joint dense stack
    LatentThermal      tabular branch + pretrained thermal encoder latent
    GeometryLatent     tabular branch + pretrained geometry encoder latent

Training optimizes the joint objective

    L = prediction_mse + w1 * reconstruction_mse + w2 * kld

with w1/w2 terms defined as zero for variants without an encoder/decoder.
All training is single-threaded and bit-deterministic under the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import substream

TEMP_NORM_MIN = 80.0
TEMP_NORM_MAX = 220.0
GEOM_NORM_MAX = 255.0

ENCODER_CHANNELS = (1, 8, 16, 32)
KERNEL = 3

VARIANTS = ("NoThermal", "SequentialThermal", "LatentThermal", "GeometryLatent")
LATENT_VARIANTS = ("LatentThermal", "GeometryLatent")


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    w1: float = 1.0                 # reconstruction weight
    w2: float = 1e-3                # KLD weight
    latent_dim: int = 9
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    encoder_mode: str = "frozen"    # "frozen" or "finetune"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ModelError(f"loss weights must be non-negative, got w1={self.w1}, w2={self.w2}")
        if self.encoder_mode not in ("frozen", "finetune"):
            raise ModelError(f"encoder_mode must be 'frozen' or 'finetune', got {self.encoder_mode!r}")


def normalize_thermal(vox: np.ndarray) -> np.ndarray:
    return (vox - TEMP_NORM_MIN) / (TEMP_NORM_MAX - TEMP_NORM_MIN)


def denormalize_scale_thermal() -> float:
    return TEMP_NORM_MAX - TEMP_NORM_MIN


def normalize_geometry(vox: np.ndarray) -> np.ndarray:
    return vox.astype(np.float64) / GEOM_NORM_MAX


def _stage_plan(spatial: tuple[int, int, int], n_stages: int = 3):
    """Spatial shape after each conv stage: kernel 3, pad 1, stride 2 on axes
    still >= 8 and stride 1 elsewhere. Shapes are recorded so the decoder can
    mirror them exactly."""
    shapes = [tuple(int(s) for s in spatial)]
    strides = []
    cur = list(spatial)
    for _ in range(n_stages):
        st = tuple(2 if s >= 8 else 1 for s in cur)
        cur = [(s + 2 - KERNEL) // t + 1 for s, t in zip(cur, st)]
        strides.append(st)
        shapes.append(tuple(cur))
    return shapes, strides


class ReconModel:
    """Encoder/decoder over a single-channel 3D voxel.

    ``kind`` is "AE" (point latent) or "VAE3D" (mu / logvar heads with
    reparameterized sampling). The decoder is identical for both kinds.
    """

    def __init__(self, kind: str, latent_dim: int, input_shape=(18, 35, 7),
                 seed: int = 0, params: dict[str, ad.Tensor] | None = None,
                 channels: tuple[int, ...] = ENCODER_CHANNELS):
        if kind not in ("AE", "VAE3D"):
            raise ModelError(f"unknown reconstruction kind {kind!r}")
        if latent_dim <= 0:
            raise ModelError(f"latent dim must be positive, got {latent_dim}")
        channels = tuple(int(c) for c in channels)
        if len(channels) != 4 or channels[0] != 1 or any(c < 1 for c in channels):
            raise ModelError(f"channels must be (1, c1, c2, c3), got {channels}")
        self.kind = kind
        self.latent_dim = int(latent_dim)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.channels = channels
        self.shapes, self.strides = _stage_plan(self.input_shape)
        self.flat = channels[-1] * int(np.prod(self.shapes[-1]))
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, ad.Tensor]:
        rng = substream(self.seed, "init")
        p: dict[str, ad.Tensor] = {}
        ch = self.channels
        k3 = KERNEL ** 3
        for i in range(3):
            p[f"enc_conv{i}_k"] = ad.glorot_uniform(
                (ch[i + 1], ch[i], KERNEL, KERNEL, KERNEL),
                fan_in=ch[i] * k3, fan_out=ch[i + 1] * k3, rng=rng)
        d, flat = self.latent_dim, self.flat
        if self.kind == "AE":
            p["enc_z_W"] = ad.glorot_uniform((flat, d), flat, d, rng)
            p["enc_z_b"] = ad.Tensor(np.zeros(d), requires_grad=True)
        else:
            p["enc_mu_W"] = ad.glorot_uniform((flat, d), flat, d, rng)
            p["enc_mu_b"] = ad.Tensor(np.zeros(d), requires_grad=True)
            # logvar head starts at a small fixed variance so early sampling
            # noise does not swamp the reconstruction signal
            p["enc_logvar_W"] = ad.Tensor(np.zeros((flat, d)), requires_grad=True)
            p["enc_logvar_b"] = ad.Tensor(np.full(d, -4.0), requires_grad=True)
        p["dec_fc_W"] = ad.glorot_uniform((d, flat), d, flat, rng)
        p["dec_fc_b"] = ad.Tensor(np.zeros(flat), requires_grad=True)
        # per-voxel output bias, shared across the batch
        p["dec_out_b"] = ad.Tensor(np.zeros(self.input_shape), requires_grad=True)
        for i in range(3):
            cin, cout = ch[3 - i], ch[2 - i]
            p[f"dec_conv{i}_k"] = ad.glorot_uniform(
                (cout, cin, KERNEL, KERNEL, KERNEL),
                fan_in=cin * k3, fan_out=cout * k3, rng=rng)
        return p

    # -- forward ----------------------------------------------------------

    def encode(self, x: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor | None]:
        """(N, D, H, W) normalized input -> (mu, logvar); logvar is None for AE."""
        n = x.shape[0]
        h = ad.reshape(x, (n, 1) + self.input_shape)
        for i in range(3):
            h = ad.relu(ad.conv3d(h, self.params[f"enc_conv{i}_k"],
                                  stride=self.strides[i], padding=1))
        h = ad.flatten(h, start_axis=1)
        if self.kind == "AE":
            z = ad.dense(h, self.params["enc_z_W"], self.params["enc_z_b"])
            return z, None
        mu = ad.dense(h, self.params["enc_mu_W"], self.params["enc_mu_b"])
        logvar = ad.dense(h, self.params["enc_logvar_W"], self.params["enc_logvar_b"])
        return mu, logvar

    def decode(self, z: ad.Tensor) -> ad.Tensor:
        n = z.shape[0]
        h = ad.relu(ad.dense(z, self.params["dec_fc_W"], self.params["dec_fc_b"]))
        h = ad.reshape(h, (n, self.channels[-1]) + self.shapes[-1])
        for i in range(3):
            h = ad.upsample_nearest(h, self.shapes[2 - i])
            h = ad.conv3d(h, self.params[f"dec_conv{i}_k"], stride=1, padding=1)
            if i < 2:
                h = ad.relu(h)
        h = ad.reshape(h, (n,) + self.input_shape)
        return ad.add(h, self.params["dec_out_b"])

    def forward(self, x: ad.Tensor, eps: np.ndarray | None = None):
        """Full pass; returns (recon, mu, logvar, z). For the VAE, eps=None
        decodes the mean (deterministic path)."""
        mu, logvar = self.encode(x)
        if self.kind == "AE" or eps is None:
            z = mu
        else:
            z = ad.reparameterize(mu, logvar, eps)
        return self.decode(z), mu, logvar, z

    # -- persistence ------------------------------------------------------

    def descriptor(self) -> dict:
        return {"model": "recon", "kind": self.kind, "latent_dim": self.latent_dim,
                "input_shape": list(self.input_shape), "seed": self.seed,
                "channels": list(self.channels), "kernel": KERNEL,
                "conv_bias": False, "output_bias": True}

    @classmethod
    def from_descriptor(cls, desc: dict, params: dict[str, ad.Tensor]) -> "ReconModel":
        return cls(kind=desc["kind"], latent_dim=desc["latent_dim"],
                   input_shape=tuple(desc["input_shape"]), seed=desc["seed"],
                   params=params,
                   channels=tuple(desc.get("channels", ENCODER_CHANNELS)))

    def parameter_count(self, prefix: str = "") -> int:
        return sum(p.size for k, p in self.params.items() if k.startswith(prefix))


def mean_voxel_baseline_adp(train: np.ndarray, test: np.ndarray,
                            denorm_scale: float) -> float:
    """ADP of the constant mean-voxel predictor fit on the train split.

    Independent reference the trained models must beat; no learned machinery.
    """
    mean_img = train.mean(axis=0)
    return float(np.mean(np.abs(test - mean_img))) * denorm_scale


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    idx = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _lr_decay(epoch: int, epochs: int) -> float:
    """Step schedule: full rate for the first half, then halved, then
    quartered for the final quarter. Settles the oscillation Adam shows once
    the reconstruction loss reaches its plateau."""
    frac = epoch / max(epochs, 1)
    if frac >= 0.75:
        return 0.25
    if frac >= 0.5:
        return 0.5
    return 1.0


def pretrain_recon(model: ReconModel, train_vox: np.ndarray, val_vox: np.ndarray,
                   config: TrainConfig, denorm_scale: float | None = None,
                   log=None) -> list[float]:
    """Train the reconstruction model; returns the per-epoch validation ADP
    curve (degC for thermal input, raw 0-255 units for geometry input)."""
    if denorm_scale is None:
        denorm_scale = denormalize_scale_thermal()
    opt = ad.Adam(model.params, lr=config.lr)
    curve: list[float] = []
    for epoch in range(config.epochs):
        opt.lr = config.lr * _lr_decay(epoch, config.epochs)
        shuffle_rng = substream(config.seed, "shuffle", epoch)
        for bi, idx in enumerate(batches(len(train_vox), config.batch_size, shuffle_rng)):
            xb = ad.Tensor(train_vox[idx])
            eps = None
            if model.kind == "VAE3D":
                eps_rng = substream(config.seed, "reparameterize", epoch, bi)
                eps = eps_rng.standard_normal((len(idx), model.latent_dim))
            recon, mu, logvar, _ = model.forward(xb, eps)
            loss = ad.mse(recon, ad.Tensor(train_vox[idx]))
            if model.kind == "VAE3D" and config.w2 > 0:
                loss = ad.add(loss, ad.scale(ad.kld(mu, logvar), config.w2))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite reconstruction loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        curve.append(reconstruction_adp(model, val_vox, denorm_scale))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs}: val ADP = {curve[-1]:.4f}")
    return curve


def reconstruction_adp(model: ReconModel, vox: np.ndarray, denorm_scale: float,
                       batch_size: int = 128) -> float:
    """Mean absolute per-voxel reconstruction error on the deterministic
    (mean-latent) path, in denormalized units."""
    total = 0.0
    for start in range(0, len(vox), batch_size):
        xb = ad.Tensor(vox[start:start + batch_size])
        recon, _, _, _ = model.forward(xb, eps=None)
        total += float(np.sum(np.abs(recon.data - vox[start:start + batch_size])))
    return total / vox.size * denorm_scale


def encode_mu(model: ReconModel, vox: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Deterministic latent codes (mu; the point latent for AE) for a voxel stack."""
    out = []
    for start in range(0, len(vox), batch_size):
        mu, _ = model.encode(ad.Tensor(vox[start:start + batch_size]))
        out.append(mu.data)
    return np.concatenate(out, axis=0)


def recon_constants(model: ReconModel, vox: np.ndarray,
                    batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Per-part reconstruction MSE and KLD on the deterministic path.

    Used as constant objective terms when the encoder is frozen: the values
    enter the reported joint loss but carry no gradient.
    """
    mses, klds = [], []
    for start in range(0, len(vox), batch_size):
        xb = vox[start:start + batch_size]
        recon, mu, logvar, _ = model.forward(ad.Tensor(xb), eps=None)
        mses.append(np.mean((recon.data - xb) ** 2, axis=(1, 2, 3)))
        if logvar is None:
            klds.append(np.zeros(len(xb)))
        else:
            klds.append(0.5 * np.sum(mu.data ** 2 + np.exp(logvar.data)
                                     - logvar.data - 1.0, axis=1))
    return np.concatenate(mses), np.concatenate(klds)


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

def _mlp_params(name: str, widths: list[int], rng, params: dict[str, ad.Tensor]) -> None:
    for i in range(len(widths) - 1):
        params[f"{name}_W{i}"] = ad.glorot_uniform((widths[i], widths[i + 1]),
                                                   widths[i], widths[i + 1], rng)
        params[f"{name}_b{i}"] = ad.Tensor(np.zeros(widths[i + 1]), requires_grad=True)


def _mlp_forward(name: str, x: ad.Tensor, n_layers: int, params: dict[str, ad.Tensor],
                 final_relu: bool) -> ad.Tensor:
    h = x
    for i in range(n_layers):
        h = ad.dense(h, params[f"{name}_W{i}"], params[f"{name}_b{i}"])
        if i < n_layers - 1 or final_relu:
            h = ad.relu(h)
    return h


class Predictor:
    """Quality predictor head over tabular features and an optional thermal
    or geometry input, emitting the standardized 4-vector (L, W, H, density)."""

    def __init__(self, variant: str, tabular_width: int,
                 encoder: ReconModel | None = None,
                 voxel_size: int | None = None, seed: int = 0,
                 params: dict[str, ad.Tensor] | None = None):
        if variant not in VARIANTS:
            raise ModelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant in LATENT_VARIANTS and encoder is None:
            raise ModelError(f"variant {variant} requires a pretrained encoder")
        self.variant = variant
        self.tabular_width = int(tabular_width)
        self.encoder = encoder
        self.voxel_size = int(voxel_size) if voxel_size is not None else None
        self.seed = int(seed)
        self.target_stats: dict[str, np.ndarray] | None = None
        self.manifest_hash: str | None = None
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, ad.Tensor]:
        rng = substream(self.seed, "init-predictor")
        p: dict[str, ad.Tensor] = {}
        if self.variant == "NoThermal":
            _mlp_params("stack", [self.tabular_width, 32, 32, 4], rng, p)
        elif self.variant == "SequentialThermal":
            if self.voxel_size is None:
                raise ModelError("SequentialThermal requires the flattened voxel size")
            _mlp_params("stack", [self.voxel_size + self.tabular_width, 64, 32, 4], rng, p)
        else:
            d = self.encoder.latent_dim
            _mlp_params("thermal", [d, 16], rng, p)
            _mlp_params("tabular", [self.tabular_width, 32, 16], rng, p)
            _mlp_params("head", [32, 32, 4], rng, p)
        return p

    def forward(self, tab: ad.Tensor, extra: ad.Tensor | None) -> ad.Tensor:
        """``extra`` is the flattened voxel (SequentialThermal) or the latent
        code (latent variants); ignored entirely for NoThermal."""
        if self.variant == "NoThermal":
            return _mlp_forward("stack", tab, 3, self.params, final_relu=False)
        if self.variant == "SequentialThermal":
            x = ad.concat(extra, tab, axis=1)
            return _mlp_forward("stack", x, 3, self.params, final_relu=False)
        th = _mlp_forward("thermal", extra, 1, self.params, final_relu=True)
        tb = _mlp_forward("tabular", tab, 2, self.params, final_relu=True)
        h = ad.concat(th, tb, axis=1)   # thermal-latent branch first
        return _mlp_forward("head", h, 2, self.params, final_relu=False)

    def descriptor(self) -> dict:
        return {"model": "predictor", "variant": self.variant,
                "tabular_width": self.tabular_width,
                "voxel_size": self.voxel_size, "seed": self.seed,
                "latent_dim": self.encoder.latent_dim if self.encoder else None}


@dataclass
class PredictorDataset:
    """Arrays for one split: standardized tabular features, normalized voxels,
    and standardized targets, plus raw targets for reporting."""
    tab: np.ndarray
    vox: np.ndarray | None
    targets_std: np.ndarray
    targets_raw: np.ndarray
    part_ids: list[str] = field(default_factory=list)


def compute_target_stats(targets: np.ndarray) -> dict[str, np.ndarray]:
    mean = targets.mean(axis=0)
    std = targets.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return {"mean": mean, "std": std}


def predictor_inputs(model: Predictor, tab: np.ndarray, vox: np.ndarray | None,
                     latents: np.ndarray | None) -> tuple[ad.Tensor, ad.Tensor | None]:
    tab_t = ad.Tensor(tab)
    if model.variant == "NoThermal":
        return tab_t, None
    if model.variant == "SequentialThermal":
        return tab_t, ad.Tensor(vox.reshape(len(vox), -1))
    return tab_t, ad.Tensor(latents)


def train_predictor(model: Predictor, train: PredictorDataset, config: TrainConfig,
                    log=None) -> list[float]:
    """Optimize the joint objective on the train split; returns the per-epoch
    training loss curve.

    Frozen encoder mode precomputes latent codes and the per-part w1/w2
    objective terms once: they are exact constants with zero gradient, so the
    optimization path is identical to evaluating the full graph.
    """
    params = dict(model.params)
    latents = None
    const_terms = np.zeros(len(train.tab))
    finetune = (model.variant in LATENT_VARIANTS and config.encoder_mode == "finetune"
                and model.encoder is not None)
    if model.variant in LATENT_VARIANTS:
        if train.vox is None:
            raise ModelError(f"variant {model.variant} requires voxel input")
        if finetune:
            params.update({f"enc::{k}": v for k, v in model.encoder.params.items()})
        else:
            latents = encode_mu(model.encoder, train.vox)
            if config.w1 > 0 or config.w2 > 0:
                mses, klds = recon_constants(model.encoder, train.vox)
                const_terms = config.w1 * mses + config.w2 * klds
    opt = ad.Adam(params, lr=config.lr)
    curve: list[float] = []
    n = len(train.tab)
    for epoch in range(config.epochs):
        opt.lr = config.lr * _lr_decay(epoch, config.epochs)
        shuffle_rng = substream(config.seed, "shuffle-pred", epoch)
        epoch_loss = 0.0
        n_batches = 0
        for bi, idx in enumerate(batches(n, config.batch_size, shuffle_rng)):
            tab_b = ad.Tensor(train.tab[idx])
            extra = None
            loss_extra = None
            if model.variant == "SequentialThermal":
                extra = ad.Tensor(train.vox[idx].reshape(len(idx), -1))
            elif model.variant in LATENT_VARIANTS:
                if finetune:
                    xb = ad.Tensor(train.vox[idx])
                    mu, logvar = model.encoder.encode(xb)
                    if model.encoder.kind == "VAE3D":
                        eps_rng = substream(config.seed, "reparameterize-pred", epoch, bi)
                        eps = eps_rng.standard_normal((len(idx), model.encoder.latent_dim))
                        z = ad.reparameterize(mu, logvar, eps)
                    else:
                        z = mu
                    extra = z
                    if config.w1 > 0:
                        recon = model.encoder.decode(z)
                        loss_extra = ad.scale(ad.mse(recon, ad.Tensor(train.vox[idx])), config.w1)
                    if config.w2 > 0 and logvar is not None:
                        k = ad.scale(ad.kld(mu, logvar), config.w2)
                        loss_extra = k if loss_extra is None else ad.add(loss_extra, k)
                else:
                    extra = ad.Tensor(latents[idx])
            pred = model.forward(tab_b, extra)
            loss = ad.mse(pred, ad.Tensor(train.targets_std[idx]))
            if loss_extra is not None:
                loss = ad.add(loss, loss_extra)
            if not finetune and model.variant in LATENT_VARIANTS:
                loss = ad.add(loss, ad.Tensor(np.asarray(const_terms[idx].mean())))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite predictor loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        curve.append(epoch_loss / n_batches)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs}: train loss = {curve[-1]:.6f}")
    return curve


def predict(model: Predictor, tab: np.ndarray, vox: np.ndarray | None = None,
            batch_size: int = 256) -> np.ndarray:
    """Denormalized quality predictions, shape (n, 4): L, W, H, density.

    Batch prediction equals per-part prediction elementwise (pure functions,
    no batch statistics anywhere in the stack).
    """
    if model.target_stats is None:
        raise ModelError("predictor has no target statistics; train or load it first")
    latents = None
    if model.variant in LATENT_VARIANTS:
        if vox is None:
            raise ModelError(f"variant {model.variant} requires voxel input")
        latents = encode_mu(model.encoder, vox)
    outs = []
    for start in range(0, len(tab), batch_size):
        sl = slice(start, start + batch_size)
        tab_t, extra = predictor_inputs(
            model, tab[sl], None if vox is None else vox[sl],
            None if latents is None else latents[sl])
        outs.append(model.forward(tab_t, extra).data)
    pred_std = np.concatenate(outs, axis=0)
    return pred_std * model.target_stats["std"] + model.target_stats["mean"]
