"""Tests for TUM RGB-D loading and writing."""

import numpy as np
import pytest

from gpsdf.core.exceptions import DatasetError
from gpsdf.datasets.synthetic import generate_synthetic
from gpsdf.datasets.tum import (
    DEFAULT_INTRINSICS,
    associate,
    load_tum,
    read_file_list,
    read_trajectory,
    write_tum_sequence,
)


@pytest.fixture
def written_sequence(sphere_spec, tmp_path):
    sequence = generate_synthetic(sphere_spec, frames=3, seed=5)
    write_tum_sequence(tmp_path / "seq", sequence.frames, sequence.poses)
    return sequence, tmp_path / "seq"


@pytest.mark.unit
class TestAssociate:
    """Tests for timestamp matching."""

    def test_closest_pairs_within_tolerance(self):
        assert associate([0.0, 0.1, 0.2], [0.005, 0.19, 0.5]) == [(0, 0), (2, 1)]

    def test_each_entry_is_used_once(self):
        """Two rgb stamps competing for one depth stamp: the closer one wins."""
        assert associate([0.0, 0.012], [0.01]) == [(1, 0)]

    def test_custom_tolerance(self):
        assert associate([0.0], [0.03], max_difference=0.05) == [(0, 0)]
        assert associate([0.0], [0.03]) == []


@pytest.mark.unit
class TestIndexFiles:
    """Tests for rgb.txt / depth.txt / groundtruth.txt parsing."""

    def test_comments_skipped_and_sorted(self, tmp_path):
        path = tmp_path / "rgb.txt"
        path.write_text("# color images\n2.0 rgb/b.png\n\n1.0 rgb/a.png\n")
        assert read_file_list(path) == [(1.0, ["rgb/a.png"]), (2.0, ["rgb/b.png"])]

    def test_bad_timestamp(self, tmp_path):
        path = tmp_path / "rgb.txt"
        path.write_text("1.0 a.png\nnope b.png\n")
        with pytest.raises(DatasetError, match="line 2: bad timestamp"):
            read_file_list(path)

    def test_trajectory_needs_seven_values(self, tmp_path):
        path = tmp_path / "groundtruth.txt"
        path.write_text("1.0 0 0 0 0 0 1\n")
        with pytest.raises(DatasetError, match="expected 7 values"):
            read_trajectory(path)

    def test_missing_index(self, tmp_path):
        with pytest.raises(DatasetError, match="cannot read index file"):
            load_tum(tmp_path)


@pytest.mark.unit
class TestLoadTum:
    """Tests for sequence indexing and frame decoding."""

    def test_unmatched_rgb_is_skipped(self, tmp_path):
        (tmp_path / "rgb.txt").write_text("0.0 rgb/0.png\n0.5 rgb/1.png\n1.0 rgb/2.png\n")
        (tmp_path / "depth.txt").write_text("0.01 depth/0.png\n1.005 depth/2.png\n")
        sequence = load_tum(tmp_path)
        assert len(sequence) == 2
        assert sequence.skipped == 1
        assert sequence.intrinsics == DEFAULT_INTRINSICS
        assert sequence.truth_poses() is None

    def test_written_sequence_loads_back(self, written_sequence):
        """Depth survives to 1/5000 m and color to 1/255."""
        original, root = written_sequence
        sequence = load_tum(root)

        assert len(sequence) == 3
        assert sequence.intrinsics.shape == original.frames[0].intrinsics.shape
        frames = list(sequence)
        for loaded, source in zip(frames, original.frames):
            assert loaded.timestamp == pytest.approx(source.timestamp, abs=1e-6)
            np.testing.assert_allclose(loaded.depth, source.depth, atol=1.0 / 5000)
            np.testing.assert_allclose(loaded.rgb, source.rgb, atol=1.0 / 255)

        truth = sequence.truth_poses()
        assert truth is not None
        for loaded, pose in zip(truth, original.poses):
            np.testing.assert_allclose(loaded.translation, pose.translation, atol=1e-6)
            np.testing.assert_allclose(loaded.rotation, pose.rotation, atol=1e-5)

    def test_size_mismatch_with_calibration(self, written_sequence):
        _, root = written_sequence
        (root / "calibration.txt").write_text("50 50 10 10 20 20 5000\n")
        sequence = load_tum(root)
        with pytest.raises(DatasetError, match="does not match calibration"):
            sequence.frame(0)
