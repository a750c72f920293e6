"""Checkpoint directory format: round trips, byte determinism, error paths."""

import json
import os

import numpy as np
import pytest

from blursplat.articulation import Pose
from blursplat.blur import ExposureTrajectory
from blursplat.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from blursplat.gradcheck import make_check_scene


def small_model(seed=0):
    return make_check_scene(seed, n_gaussians=7, n_joints=2).model


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for fname in files:
            p = os.path.join(dirpath, fname)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestRoundTrip:
    def test_model_survives_f32_round_trip(self, tmp_path):
        model = small_model()
        save_checkpoint(str(tmp_path / "ck"), model, iteration=12)
        back, trajs, emb, meta = load_checkpoint(str(tmp_path / "ck"))
        assert trajs is None and emb is None
        assert meta["iteration"] == 12
        assert meta["n_gaussians"] == model.cloud.n
        # stored as little-endian float32: exact to f32 resolution
        np.testing.assert_allclose(back.cloud.positions,
                                   model.cloud.positions, rtol=1e-6, atol=1e-6)
        for (name_a, a), (name_b, b) in zip(back.named_params(),
                                            model.named_params()):
            assert name_a == name_b
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)

    def test_trajectories_and_embeddings_round_trip(self, tmp_path):
        model = small_model()
        k = model.chain.n_joints
        trajs = [ExposureTrajectory.from_pose(Pose.rest(k)) for _ in range(3)]
        trajs[1].end.root_translation[:] = (0.1, 0.2, 0.3)
        emb = np.arange(12, dtype=np.float64).reshape(3, 4)
        save_checkpoint(str(tmp_path / "ck"), model, trajectories=trajs,
                        frame_embeddings=emb)
        _, back_trajs, back_emb, _ = load_checkpoint(str(tmp_path / "ck"))
        assert len(back_trajs) == 3
        np.testing.assert_allclose(back_trajs[1].end.root_translation,
                                   (0.1, 0.2, 0.3), atol=1e-7)
        np.testing.assert_allclose(back_emb, emb, atol=1e-6)

    def test_extra_meta_preserved(self, tmp_path):
        save_checkpoint(str(tmp_path / "ck"), small_model(),
                        extra_meta={"seed": 5})
        _, _, _, meta = load_checkpoint(str(tmp_path / "ck"))
        assert meta["seed"] == 5


class TestByteDeterminism:
    def test_double_save_is_byte_identical(self, tmp_path):
        model = small_model(3)
        save_checkpoint(str(tmp_path / "a"), model, iteration=7)
        save_checkpoint(str(tmp_path / "b"), model, iteration=7)
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        for rel in a:
            assert a[rel] == b[rel], f"{rel} differs between saves"


class TestErrorPaths:
    def test_missing_directory_is_descriptive(self, tmp_path):
        with pytest.raises(ValueError, match="no checkpoint found"):
            load_checkpoint(str(tmp_path / "nope"))

    def test_corrupt_meta_is_descriptive(self, tmp_path):
        d = tmp_path / "ck"
        d.mkdir()
        (d / "meta.json").write_text("{not json")
        with pytest.raises(ValueError, match="corrupt checkpoint metadata"):
            load_checkpoint(str(d))

    def test_unsupported_format_version_rejected(self, tmp_path):
        save_checkpoint(str(tmp_path / "ck"), small_model())
        meta_path = tmp_path / "ck" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["format_version"] = FORMAT_VERSION + 1
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValueError, match="unsupported checkpoint format"):
            load_checkpoint(str(tmp_path / "ck"))
