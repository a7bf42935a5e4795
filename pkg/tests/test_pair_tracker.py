import os

import numpy as np
import pytest

from common.errors import DataError
from common.run_config import MaskConfig
from trainer.pair_tracker import PairTracker, family_schedule
from trainer.training_loop import make_training_pair
from trainer.transforms import IntensityJitter, affine_about_center, project_points


def _affine_pair(texture):
    t = affine_about_center(texture.shape, rotation_deg=7.0, translation=(2.0, -1.0), family="affine")
    return make_training_pair(texture, t, "affine", MaskConfig())


def test_pair_ids_are_stable(tmp_path):
    tracker = PairTracker(str(tmp_path))
    a = tracker.generate_pair_id("images/a.png", 0, 1)
    assert a == tracker.generate_pair_id("images/a.png", 0, 1)
    assert a != tracker.generate_pair_id("images/a.png", 1, 1)
    assert len(a) == 12


def test_write_and_load_pair(tmp_path, texture):
    tracker = PairTracker(str(tmp_path))
    pair = _affine_pair(texture)
    pair_dir = tracker.write_pair("abc", pair, "images/a.png")

    assert sorted(os.listdir(pair_dir)) == sorted(
        ["reference.raw", "reference.json", "target.raw", "target.json", "reference_mask.png",
         "target_mask.png", "transform.json"]
    )
    pair_id, loaded = tracker.load_pair(pair_dir)

    assert pair_id == "abc"
    assert loaded.family == "affine"
    np.testing.assert_allclose(loaded.target.pixels, pair.target.pixels, atol=1e-3)
    np.testing.assert_array_equal(loaded.reference_mask.values, pair.reference_mask.values)
    points = np.array([[10.0, 20.0], [40.5, 3.25]])
    np.testing.assert_allclose(project_points(points, loaded.transform), project_points(points, pair.transform))


def test_jittered_intensities_survive(tmp_path, texture):
    tracker = PairTracker(str(tmp_path))
    pair = make_training_pair(texture, IntensityJitter("brightness", -0.2), "intensity", MaskConfig())
    _, loaded = tracker.load_pair(tracker.write_pair("neg", pair))
    assert loaded.target.pixels.min() < 0
    np.testing.assert_allclose(loaded.target.pixels, pair.target.pixels, atol=1e-3)


def test_partial_directories_are_skipped(tmp_path, texture):
    tracker = PairTracker(str(tmp_path))
    complete = tracker.write_pair("good", _affine_pair(texture))
    partial = tracker.write_pair("bad", _affine_pair(texture))
    os.remove(os.path.join(partial, "transform.json"))

    assert tracker.list_pairs() == {partial: "partial", complete: "complete"}
    assert [pair_id for pair_id, _, _ in tracker.load_complete_pairs()] == ["good"]
    with pytest.raises(DataError):
        tracker.load_pair(partial)
    assert tracker.get_pair_status(str(tmp_path / "missing")) == "not_found"


def test_tracking_stats(tmp_path, texture):
    tracker = PairTracker(str(tmp_path))
    tracker.write_pair("one", _affine_pair(texture))
    stats = tracker.get_tracking_stats()
    assert stats["complete_pairs"] == 1
    assert stats["families"] == {"affine": 1}
    assert stats["total_size"] > 0


def test_family_schedule():
    assert family_schedule("elastic", ["intensity", "affine"], 3) == ["elastic"] * 3
    assert family_schedule("all", ["intensity", "affine", "elastic"], 4) == ["intensity", "affine", "elastic", "intensity"]
