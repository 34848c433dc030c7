"""Round-trip and byte-determinism tests for the on-disk formats."""

import hashlib

import numpy as np
import pytest

from geocaps.container import write_container
from geocaps.formats import (
    MetricsLogger,
    read_capsules_text,
    read_cloud_binary,
    read_cloud_text,
    read_feature_db,
    read_manifest,
    sha256_file,
    write_capsules_text,
    write_cloud_binary,
    write_cloud_text,
    write_feature_db,
    write_manifest,
    write_ply,
)


@pytest.fixture
def cloud():
    rng = np.random.default_rng(7)
    return rng.standard_normal((20, 3))


class TestCloudText:
    def test_round_trip_exact(self, tmp_path, cloud):
        path = tmp_path / "c.txt"
        write_cloud_text(path, cloud)
        pts, labels = read_cloud_text(path)
        assert labels is None
        assert pts.dtype == np.float64
        np.testing.assert_array_equal(pts, cloud)

    def test_round_trip_with_labels(self, tmp_path, cloud):
        path = tmp_path / "c.txt"
        labels = np.arange(len(cloud)) % 4
        write_cloud_text(path, cloud, labels)
        pts, out = read_cloud_text(path)
        np.testing.assert_array_equal(pts, cloud)
        assert out.dtype == np.int64
        np.testing.assert_array_equal(out, labels)

    def test_awkward_values_survive(self, tmp_path):
        pts = np.array([[1e-300, -0.1, 1 / 3], [np.pi, 2**-52, -1e18]])
        path = tmp_path / "c.txt"
        write_cloud_text(path, pts)
        np.testing.assert_array_equal(read_cloud_text(path)[0], pts)

    def test_same_data_same_bytes(self, tmp_path, cloud):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        write_cloud_text(a, cloud)
        write_cloud_text(b, cloud.copy())
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_bad_shape(self, tmp_path):
        with pytest.raises(ValueError, match="expected"):
            write_cloud_text(tmp_path / "c.txt", np.zeros((4, 2)))

    def test_rejects_label_mismatch(self, tmp_path, cloud):
        with pytest.raises(ValueError, match="labels"):
            write_cloud_text(tmp_path / "c.txt", cloud, np.zeros(3, dtype=int))

    def test_rejects_empty_file(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("\n\n")
        with pytest.raises(ValueError, match="empty"):
            read_cloud_text(path)

    def test_rejects_ragged_columns(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("0.0 0.0 0.0\n1.0 1.0\n")
        with pytest.raises(ValueError, match="columns"):
            read_cloud_text(path)

    def test_blank_lines_skipped(self, tmp_path, cloud):
        path = tmp_path / "c.txt"
        write_cloud_text(path, cloud)
        path.write_text("\n" + path.read_text() + "\n\n")
        np.testing.assert_array_equal(read_cloud_text(path)[0], cloud)


class TestCloudBinary:
    def test_round_trip_exact(self, tmp_path, cloud):
        path = tmp_path / "c.gcap"
        labels = np.arange(len(cloud), dtype=np.int64)
        write_cloud_binary(path, cloud, labels)
        pts, out = read_cloud_binary(path)
        np.testing.assert_array_equal(pts, cloud)
        np.testing.assert_array_equal(out, labels)

    def test_labels_optional(self, tmp_path, cloud):
        path = tmp_path / "c.gcap"
        write_cloud_binary(path, cloud)
        _, labels = read_cloud_binary(path)
        assert labels is None

    def test_rejects_missing_points_record(self, tmp_path):
        path = tmp_path / "c.gcap"
        write_container(path, {"vertices": np.zeros((2, 3))}, meta="point-cloud")
        with pytest.raises(ValueError, match="points"):
            read_cloud_binary(path)


class TestPly:
    def test_header(self, tmp_path, cloud):
        path = tmp_path / "c.ply"
        write_ply(path, cloud)
        lines = path.read_text().splitlines()
        assert lines[0] == "ply"
        assert lines[1] == "format ascii 1.0"
        assert lines[2] == f"element vertex {len(cloud)}"
        assert lines[9] == "end_header"
        assert len(lines) == 10 + len(cloud)

    def test_default_color_is_gray(self, tmp_path):
        path = tmp_path / "c.ply"
        write_ply(path, np.zeros((1, 3)))
        assert path.read_text().splitlines()[-1].endswith(" 200 200 200")

    def test_part_colors_differ_and_repeat(self, tmp_path):
        path = tmp_path / "c.ply"
        pts = np.zeros((4, 3))
        write_ply(path, pts, part_ids=np.array([0, 1, 0, 16]))
        rows = [l.split()[3:] for l in path.read_text().splitlines()[10:]]
        assert rows[0] != rows[1]
        assert rows[0] == rows[2]
        # the palette wraps around after 16 entries
        assert rows[3] == rows[0]

    def test_coordinates_are_float32(self, tmp_path):
        pts = np.array([[1 / 3, 0.0, 0.0]])
        path = tmp_path / "c.ply"
        write_ply(path, pts)
        written = float(path.read_text().splitlines()[-1].split()[0])
        assert written == float(np.float32(1 / 3))

    def test_rejects_bad_shapes(self, tmp_path):
        with pytest.raises(ValueError, match="expected"):
            write_ply(tmp_path / "c.ply", np.zeros((2, 4)))
        with pytest.raises(ValueError, match="part_ids"):
            write_ply(tmp_path / "c.ply", np.zeros((2, 3)), part_ids=np.array([1]))


class TestCapsulesText:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        poses = rng.standard_normal((4, 7))
        feats = rng.standard_normal((4, 8))
        path = tmp_path / "caps.txt"
        write_capsules_text(path, poses, feats)
        p, f = read_capsules_text(path)
        np.testing.assert_array_equal(p, poses)
        np.testing.assert_array_equal(f, feats)

    def test_single_feature_column(self, tmp_path):
        path = tmp_path / "caps.txt"
        write_capsules_text(path, np.zeros((2, 7)), np.ones((2, 1)))
        p, f = read_capsules_text(path)
        assert p.shape == (2, 7) and f.shape == (2, 1)

    def test_rejects_bad_shapes(self, tmp_path):
        with pytest.raises(ValueError, match="capsule"):
            write_capsules_text(tmp_path / "c.txt", np.zeros((2, 6)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="capsule"):
            write_capsules_text(tmp_path / "c.txt", np.zeros((2, 7)), np.zeros((3, 3)))

    def test_rejects_short_rows(self, tmp_path):
        path = tmp_path / "caps.txt"
        path.write_text("0.0 1.0 2.0\n")
        with pytest.raises(ValueError, match="pose"):
            read_capsules_text(path)


class TestFeatureDb:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        ids = ["box-0000", "box-0001", "tee-0002"]
        poses = rng.standard_normal((3, 7))
        feats = rng.standard_normal((3, 16))
        path = tmp_path / "db.gcap"
        write_feature_db(path, ids, poses, feats)
        out_ids, out_poses, out_feats = read_feature_db(path)
        assert out_ids == ids
        np.testing.assert_array_equal(out_poses, poses)
        np.testing.assert_array_equal(out_feats, feats)

    def test_empty_db(self, tmp_path):
        path = tmp_path / "db.gcap"
        write_feature_db(path, [], np.zeros((0, 7)), np.zeros((0, 4)))
        ids, poses, feats = read_feature_db(path)
        assert ids == [] and poses.shape == (0, 7) and feats.shape == (0, 4)

    def test_rejects_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="equal lengths"):
            write_feature_db(tmp_path / "db.gcap", ["a"], np.zeros((2, 7)), np.zeros((2, 4)))

    def test_rejects_other_containers(self, tmp_path):
        path = tmp_path / "db.gcap"
        write_container(path, {"poses": np.zeros((1, 7))}, meta="point-cloud")
        with pytest.raises(ValueError, match="feature database"):
            read_feature_db(path)


class TestMetricsLogger:
    def test_header_and_rows(self, tmp_path):
        path = tmp_path / "m.csv"
        log = MetricsLogger(path, ["step", "loss", "note"])
        log.log(step=1, loss=0.5, note="warm")
        log.log(step=2, loss=1 / 3)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss,note"
        assert lines[1] == "1,0.5,warm"
        # floats print with repr, absent columns stay empty
        assert lines[2] == f"2,{1 / 3!r},"

    def test_reinit_truncates(self, tmp_path):
        path = tmp_path / "m.csv"
        MetricsLogger(path, ["a"]).log(a=1)
        MetricsLogger(path, ["a", "b"])
        assert path.read_text() == "a,b\n"

    def test_extra_keys_ignored(self, tmp_path):
        path = tmp_path / "m.csv"
        MetricsLogger(path, ["a"]).log(a=1, stray=9)
        assert path.read_text().splitlines()[1] == "1"


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = {"seed": "0", "data sha256": "ab" * 32, "cmd": "train --lr = 0.1"}
        path = tmp_path / "manifest.txt"
        write_manifest(path, entries)
        assert read_manifest(path) == entries

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("a = 1\n\nb = 2\n")
        assert read_manifest(path) == {"a": "1", "b": "2"}

    def test_insertion_order_preserved(self, tmp_path):
        path = tmp_path / "manifest.txt"
        write_manifest(path, {"z": "1", "a": "2"})
        assert list(read_manifest(path)) == ["z", "a"]


class TestSha256File:
    def test_matches_hashlib(self, tmp_path):
        payload = bytes(range(256)) * 13
        path = tmp_path / "blob"
        path.write_bytes(payload)
        assert sha256_file(path) == hashlib.sha256(payload).hexdigest()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "blob"
        path.write_bytes(b"")
        assert sha256_file(path) == hashlib.sha256(b"").hexdigest()
