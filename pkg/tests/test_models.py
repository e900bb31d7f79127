"""Unit tests for the reconstruction models and the quality predictor:
architecture plan, persistence, determinism, overfit oracles, and the joint
objective decomposition."""

import numpy as np
import pytest

import thermofuse.autodiff as ad
import thermofuse.models as md
import thermofuse.storage as st

CI_CHANNELS = (1, 4, 8, 16)


def smooth_voxels(n, seed=0, shape=(18, 35, 7)):
    """Normalized [0,1] smooth random fields, the regime real voxels live in."""
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    vox = np.stack([ndimage.gaussian_filter(rng.uniform(0.3, 0.8, shape), 2.0)
                    for _ in range(n)])
    return vox


class TestStagePlan:
    def test_shapes_for_canonical_input(self):
        shapes, strides = md._stage_plan((18, 35, 7))
        assert shapes == [(18, 35, 7), (9, 18, 7), (5, 9, 7), (5, 5, 7)]
        assert strides == [(2, 2, 1), (2, 2, 1), (1, 2, 1)]

    def test_flat_width(self):
        m = md.ReconModel("AE", 9)
        assert m.flat == 32 * 5 * 5 * 7
        m_slim = md.ReconModel("AE", 9, channels=CI_CHANNELS)
        assert m_slim.flat == 16 * 5 * 5 * 7


class TestReconModel:
    def test_validation(self):
        with pytest.raises(md.ModelError, match="kind"):
            md.ReconModel("GAN", 9)
        with pytest.raises(md.ModelError, match="latent"):
            md.ReconModel("AE", 0)
        with pytest.raises(md.ModelError, match="channels"):
            md.ReconModel("AE", 9, channels=(2, 4, 8, 16))

    def test_forward_shapes(self):
        m = md.ReconModel("VAE3D", 5, channels=CI_CHANNELS)
        x = ad.Tensor(smooth_voxels(3))
        recon, mu, logvar, z = m.forward(x, eps=None)
        assert recon.shape == (3, 18, 35, 7)
        assert mu.shape == (3, 5) and logvar.shape == (3, 5)
        assert np.array_equal(z.data, mu.data)  # eps=None decodes the mean

    def test_ae_has_no_logvar(self):
        m = md.ReconModel("AE", 5, channels=CI_CHANNELS)
        _, mu, logvar, z = m.forward(ad.Tensor(smooth_voxels(2)), eps=None)
        assert logvar is None
        assert np.array_equal(z.data, mu.data)

    def test_same_seed_identical_init(self):
        a = md.ReconModel("VAE3D", 9, seed=4, channels=CI_CHANNELS)
        b = md.ReconModel("VAE3D", 9, seed=4, channels=CI_CHANNELS)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
        c = md.ReconModel("VAE3D", 9, seed=5, channels=CI_CHANNELS)
        assert any(not np.array_equal(a.params[k].data, c.params[k].data)
                   for k in a.params)

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        m = md.ReconModel("VAE3D", 7, seed=2, channels=CI_CHANNELS)
        path = str(tmp_path / "m.tfck")
        st.save_checkpoint(path, m.descriptor(),
                           {k: p.data for k, p in m.params.items()})
        desc, raw = st.load_checkpoint(path)
        m2 = md.ReconModel.from_descriptor(
            desc, {k: ad.Tensor(v, requires_grad=True) for k, v in raw.items()})
        assert m2.kind == "VAE3D" and m2.latent_dim == 7
        assert m2.channels == CI_CHANNELS
        x = ad.Tensor(smooth_voxels(2, seed=9))
        r1, mu1, _, _ = m.forward(x, eps=None)
        r2, mu2, _, _ = m2.forward(x, eps=None)
        assert np.array_equal(r1.data, r2.data)
        assert np.array_equal(mu1.data, mu2.data)


class TestBaselineAndAdp:
    def test_mean_voxel_baseline_hand_value(self):
        train = np.stack([np.zeros((2, 2, 2)), np.full((2, 2, 2), 2.0)])
        test = np.stack([np.full((2, 2, 2), 3.0)])
        # mean image = 1 everywhere; |3-1| * scale
        assert md.mean_voxel_baseline_adp(train, test, 140.0) == 2.0 * 140.0

    def test_reconstruction_adp_matches_direct(self):
        m = md.ReconModel("AE", 5, channels=CI_CHANNELS)
        vox = smooth_voxels(5, seed=3)
        recon, _, _, _ = m.forward(ad.Tensor(vox), eps=None)
        direct = float(np.mean(np.abs(recon.data - vox))) * 140.0
        assert abs(md.reconstruction_adp(m, vox, 140.0) - direct) < 1e-12

    def test_encode_mu_batching_invariant(self):
        m = md.ReconModel("VAE3D", 5, channels=CI_CHANNELS)
        vox = smooth_voxels(7, seed=4)
        a = md.encode_mu(m, vox, batch_size=2)
        b = md.encode_mu(m, vox, batch_size=128)
        # identical math; only BLAS reduction order differs across batch shapes
        assert np.max(np.abs(a - b)) < 1e-12


class TestOverfitOracles:
    @pytest.mark.parametrize("kind", ["AE", "VAE3D"])
    def test_single_sample_overfit(self, kind):
        """A single smooth voxel must be memorized to MSE < 1e-3 within 500
        optimizer steps (the pretraining sanity oracle)."""
        vox = smooth_voxels(1, seed=5)
        m = md.ReconModel(kind, 9, seed=0, channels=CI_CHANNELS)
        opt = ad.Adam(m.params, lr=3e-3)
        target = ad.Tensor(vox)
        mse_val = None
        for _ in range(500):
            recon, _, _, _ = m.forward(ad.Tensor(vox), eps=None)
            loss = ad.mse(recon, target)
            mse_val = loss.item()
            if mse_val < 1e-3:
                break
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        assert mse_val < 1e-3

    def test_predictor_overfit(self):
        """The tabular head must drive a small standardized regression below
        1e-2 train MSE."""
        rng = np.random.default_rng(6)
        tab = rng.standard_normal((16, 6))
        w = rng.standard_normal((6, 4))
        targets = tab @ w * 0.3
        model = md.Predictor("NoThermal", tabular_width=6, seed=0)
        data = md.PredictorDataset(tab=tab, vox=None, targets_std=targets,
                                   targets_raw=targets)
        cfg = md.TrainConfig(w1=0.0, w2=0.0, lr=1e-2, batch_size=16,
                             epochs=400, seed=0)
        curve = md.train_predictor(model, data, cfg)
        assert curve[-1] < 1e-2


class TestPretrainDeterminism:
    def test_same_seed_identical_curve_and_params(self):
        vox = smooth_voxels(8, seed=7)
        def run():
            m = md.ReconModel("VAE3D", 5, seed=1, channels=CI_CHANNELS)
            cfg = md.TrainConfig(latent_dim=5, seed=1, epochs=2, lr=1e-3,
                                 batch_size=4, w2=1e-6)
            curve = md.pretrain_recon(m, vox, vox[:2], cfg)
            return curve, {k: p.data.copy() for k, p in m.params.items()}
        c1, p1 = run()
        c2, p2 = run()
        assert c1 == c2
        for k in p1:
            assert np.array_equal(p1[k], p2[k])


class TestPredictor:
    def test_validation(self):
        with pytest.raises(md.ModelError, match="variant"):
            md.Predictor("Bogus", tabular_width=6)
        with pytest.raises(md.ModelError, match="encoder"):
            md.Predictor("LatentThermal", tabular_width=6)

    def test_forward_shapes_all_variants(self):
        enc = md.ReconModel("AE", 5, channels=CI_CHANNELS)
        tab = ad.Tensor(np.random.default_rng(0).standard_normal((3, 6)))
        flat = 18 * 35 * 7
        cases = [
            (md.Predictor("NoThermal", 6), None),
            (md.Predictor("SequentialThermal", 6, voxel_size=flat),
             ad.Tensor(np.random.default_rng(1).standard_normal((3, flat)))),
            (md.Predictor("LatentThermal", 6, encoder=enc),
             ad.Tensor(np.random.default_rng(2).standard_normal((3, 5)))),
        ]
        for model, extra in cases:
            assert model.forward(tab, extra).shape == (3, 4)

    def test_nothermal_ignores_extra(self):
        m = md.Predictor("NoThermal", 6)
        tab = ad.Tensor(np.ones((2, 6)))
        a = m.forward(tab, None)
        b = m.forward(tab, ad.Tensor(np.full((2, 9), 1e9)))
        assert np.array_equal(a.data, b.data)

    def test_predict_requires_target_stats(self):
        m = md.Predictor("NoThermal", 6)
        with pytest.raises(md.ModelError, match="target statistics"):
            md.predict(m, np.zeros((2, 6)))

    def test_predict_denormalizes_and_batches(self):
        m = md.Predictor("NoThermal", 6, seed=3)
        m.target_stats = {"mean": np.array([35.0, 18.0, 7.0, 4.0]),
                          "std": np.array([0.1, 0.1, 0.05, 0.02])}
        tab = np.random.default_rng(4).standard_normal((5, 6))
        full = md.predict(m, tab)
        rows = np.concatenate([md.predict(m, tab[i:i + 1]) for i in range(5)])
        assert np.array_equal(full, rows)
        raw = m.forward(ad.Tensor(tab), None).data
        assert np.allclose(full, raw * m.target_stats["std"]
                           + m.target_stats["mean"])


def frozen_dataset(n=64, seed=8):
    rng = np.random.default_rng(seed)
    tab = rng.standard_normal((n, 6))
    targets = rng.standard_normal((n, 4))
    vox = smooth_voxels(n, seed=seed + 1)
    return md.PredictorDataset(tab=tab, vox=vox, targets_std=targets,
                               targets_raw=targets)


class TestJointObjective:
    def test_frozen_w_terms_are_exact_constants(self):
        """With a frozen encoder the w1/w2 terms shift the reported loss by
        the dataset-mean reconstruction term but leave the optimization path
        identical: curve(w1=1) - curve(w1=0) == w1 * mean(recon MSE)."""
        enc = md.ReconModel("AE", 5, seed=2, channels=CI_CHANNELS)
        data = frozen_dataset()
        mses, klds = md.recon_constants(enc, data.vox)
        assert np.array_equal(klds, np.zeros(len(klds)))  # AE has no KLD

        def run(w1):
            model = md.Predictor("LatentThermal", 6, encoder=enc, seed=0)
            cfg = md.TrainConfig(w1=w1, w2=0.0, lr=1e-3, batch_size=32,
                                 epochs=2, seed=0, encoder_mode="frozen")
            return md.train_predictor(model, data, cfg)

        c0, c1 = run(0.0), run(1.0)
        for a, b in zip(c0, c1):
            assert abs((b - a) - mses.mean()) < 1e-10

    def test_w2_irrelevant_for_ae_encoder(self):
        enc = md.ReconModel("AE", 5, seed=2, channels=CI_CHANNELS)
        data = frozen_dataset()

        def run(w2):
            model = md.Predictor("LatentThermal", 6, encoder=enc, seed=0)
            cfg = md.TrainConfig(w1=1.0, w2=w2, lr=1e-3, batch_size=32,
                                 epochs=2, seed=0)
            return md.train_predictor(model, data, cfg)

        assert run(0.0) == run(7.0)  # KLD of a point latent is zero

    def test_train_predictor_deterministic(self):
        enc = md.ReconModel("VAE3D", 5, seed=2, channels=CI_CHANNELS)
        data = frozen_dataset()

        def run():
            model = md.Predictor("LatentThermal", 6, encoder=enc, seed=1)
            cfg = md.TrainConfig(w1=1.0, w2=1e-3, lr=1e-3, batch_size=32,
                                 epochs=2, seed=1)
            curve = md.train_predictor(model, data, cfg)
            return curve, {k: p.data.copy() for k, p in model.params.items()}

        c1, p1 = run()
        c2, p2 = run()
        assert c1 == c2
        for k in p1:
            assert np.array_equal(p1[k], p2[k])

    def test_finetune_mode_updates_encoder(self):
        enc = md.ReconModel("VAE3D", 5, seed=2, channels=CI_CHANNELS)
        before = {k: p.data.copy() for k, p in enc.params.items()}
        data = frozen_dataset(n=8)
        model = md.Predictor("LatentThermal", 6, encoder=enc, seed=1)
        cfg = md.TrainConfig(w1=1.0, w2=1e-6, lr=1e-3, batch_size=8,
                             epochs=1, seed=1, encoder_mode="finetune")
        md.train_predictor(model, data, cfg)
        assert any(not np.array_equal(before[k], enc.params[k].data)
                   for k in before)

    def test_frozen_mode_leaves_encoder_untouched(self):
        enc = md.ReconModel("VAE3D", 5, seed=2, channels=CI_CHANNELS)
        before = {k: p.data.copy() for k, p in enc.params.items()}
        data = frozen_dataset(n=8)
        model = md.Predictor("LatentThermal", 6, encoder=enc, seed=1)
        cfg = md.TrainConfig(w1=1.0, w2=1e-3, lr=1e-3, batch_size=8,
                             epochs=1, seed=1, encoder_mode="frozen")
        md.train_predictor(model, data, cfg)
        for k in before:
            assert np.array_equal(before[k], enc.params[k].data)


class TestNormalization:
    def test_thermal_roundtrip(self):
        vox = np.array([80.0, 150.0, 220.0])
        norm = md.normalize_thermal(vox)
        assert np.allclose(norm, [0.0, 0.5, 1.0])
        assert md.denormalize_scale_thermal() == 140.0

    def test_geometry(self):
        assert np.allclose(md.normalize_geometry(np.array([0.0, 255.0])),
                           [0.0, 1.0])

    def test_target_stats_zero_variance_safe(self):
        stats = md.compute_target_stats(np.ones((5, 4)))
        assert np.all(stats["std"] == 1.0)
