"""Unit tests for on-disk formats: voxel blobs, manifests, checkpoints,
and the key = value config dialect."""

import numpy as np
import pytest

import thermofuse.storage as st


class TestVoxelBlob:
    def test_f32_roundtrip(self, tmp_path):
        vox = np.random.default_rng(0).uniform(80, 220, (18, 35, 7)).astype("<f4")
        path = str(tmp_path / "v.thvx")
        st.write_voxel_blob(path, vox, st.DTYPE_F32)
        back = st.read_voxel_blob(path)
        assert back.dtype == np.dtype("<f4")
        assert np.array_equal(back, vox)

    def test_u8_roundtrip(self, tmp_path):
        vox = (np.random.default_rng(1).integers(0, 2, (16, 16, 16)) * 255
               ).astype("u1")
        path = str(tmp_path / "g.thvx")
        st.write_voxel_blob(path, vox, st.DTYPE_U8)
        assert np.array_equal(st.read_voxel_blob(path), vox)

    def test_write_deterministic(self, tmp_path):
        vox = np.random.default_rng(2).uniform(0, 1, (4, 5, 6))
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        st.write_voxel_blob(a, vox, st.DTYPE_F32)
        st.write_voxel_blob(b, vox, st.DTYPE_F32)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.thvx"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(st.StorageError, match="magic"):
            st.read_voxel_blob(str(path))

    def test_truncated_payload(self, tmp_path):
        vox = np.zeros((4, 4, 4))
        path = str(tmp_path / "t.thvx")
        st.write_voxel_blob(path, vox, st.DTYPE_F32)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-8])
        with pytest.raises(st.StorageError, match="payload"):
            st.read_voxel_blob(path)

    def test_non_3d_rejected(self, tmp_path):
        with pytest.raises(st.StorageError, match="3D"):
            st.write_voxel_blob(str(tmp_path / "x"), np.zeros((2, 2)),
                                st.DTYPE_F32)


class TestManifest:
    def test_roundtrip_and_verify(self, tmp_path):
        blob = tmp_path / "data.bin"
        blob.write_bytes(b"hello world")
        manifest = {"kind": "test",
                    "hashes": {"data.bin": st.sha256_file(str(blob))}}
        mpath = str(tmp_path / "manifest.json")
        st.write_manifest(mpath, manifest)
        assert st.read_manifest(mpath) == manifest
        st.verify_manifest(manifest, str(tmp_path))  # no raise

    def test_corruption_detected(self, tmp_path):
        blob = tmp_path / "data.bin"
        blob.write_bytes(b"hello world")
        manifest = {"hashes": {"data.bin": st.sha256_file(str(blob))}}
        blob.write_bytes(b"hello w0rld")
        with pytest.raises(st.StorageError, match="hash mismatch"):
            st.verify_manifest(manifest, str(tmp_path))

    def test_missing_blob_named(self, tmp_path):
        manifest = {"hashes": {"gone.bin": "0" * 64}}
        with pytest.raises(st.StorageError, match="gone.bin"):
            st.verify_manifest(manifest, str(tmp_path))

    def test_write_byte_stable(self, tmp_path):
        m = {"b": 1, "a": {"z": 2, "y": 3}}
        p1, p2 = str(tmp_path / "1.json"), str(tmp_path / "2.json")
        st.write_manifest(p1, m)
        st.write_manifest(p2, {"a": {"y": 3, "z": 2}, "b": 1})
        assert open(p1, "rb").read() == open(p2, "rb").read()


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        params = {"enc_w0": rng.standard_normal((8, 1, 3, 3, 3)),
                  "head_b": rng.standard_normal(4),
                  "one": rng.standard_normal(1)}
        desc = {"kind": "AE", "latent_dim": 9}
        path = str(tmp_path / "m.tfck")
        st.save_checkpoint(path, desc, params)
        desc2, params2 = st.load_checkpoint(path)
        assert desc2 == desc
        assert sorted(params2) == sorted(params)
        for name in params:
            assert np.array_equal(params2[name], params[name])  # bit-exact
            assert params2[name].shape == np.asarray(params[name]).shape

    def test_save_deterministic(self, tmp_path):
        params = {"a": np.ones(3), "b": np.arange(4.0)}
        p1, p2 = str(tmp_path / "1"), str(tmp_path / "2")
        st.save_checkpoint(p1, {"k": 1}, params)
        st.save_checkpoint(p2, {"k": 1}, dict(reversed(params.items())))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_truncation_detected(self, tmp_path):
        path = str(tmp_path / "m.tfck")
        st.save_checkpoint(path, {}, {"w": np.ones((4, 4))})
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-16])
        with pytest.raises(st.StorageError, match="truncated"):
            st.load_checkpoint(path)

    def test_trailing_bytes_detected(self, tmp_path):
        path = str(tmp_path / "m.tfck")
        st.save_checkpoint(path, {}, {"w": np.ones(2)})
        with open(path, "ab") as f:
            f.write(b"junk")
        with pytest.raises(st.StorageError, match="trailing"):
            st.load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(st.StorageError, match="missing"):
            st.load_checkpoint(str(tmp_path / "nope.tfck"))


class TestConfig:
    def test_parse_basics(self):
        cfg = st.parse_config("seed = 7\n# comment\nlatent=9 # trailing\n\n")
        assert cfg == {"seed": "7", "latent": "9"}

    def test_duplicate_rejected(self):
        with pytest.raises(st.ConfigError, match="duplicate"):
            st.parse_config("a = 1\na = 2\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(st.ConfigError, match="line 1"):
            st.parse_config("just some words\n")

    def test_invalid_key_rejected(self):
        with pytest.raises(st.ConfigError, match="invalid key"):
            st.parse_config("bad key = 1\n")

    def test_format_parse_roundtrip(self):
        cfg = {"seed": "7", "latent": "9", "kinds": "AE,VAE3D"}
        assert st.parse_config(st.format_config(cfg)) == cfg

    def test_format_canonical_order(self):
        assert (st.format_config({"b": "2", "a": "1"})
                == st.format_config({"a": "1", "b": "2"}))
