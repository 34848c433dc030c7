"""Shape families, dataset determinism, asymmetry validation, and the
on-disk dataset format."""

import numpy as np
import pytest

from geocaps.config import desk_config
from geocaps.data import (
    ASYMMETRIC_FAMILIES,
    FAMILIES,
    DatasetError,
    augment_cloud,
    generate_dataset,
    instance_asymmetry,
    instance_geometry,
    load_dataset,
    normalize_cloud,
    octahedral_rotations,
    sample_family,
    symmetry_margin,
    write_dataset,
)
from geocaps.geometry import chamfer_sq, pose_apply, quat_mul, quat_rotate, rotation_error


class TestFamilies:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_sample_shape_and_bounds(self, family):
        pts = sample_family(family, np.random.default_rng(0), 300)
        assert pts.shape == (300, 3)
        assert pts.dtype == np.float64
        assert pts.min() >= -1.0 - 1e-12 and pts.max() <= 1.0 + 1e-12
        # normalization puts the largest extent exactly on the boundary
        extents = pts.max(0) - pts.min(0)
        assert extents.max() == pytest.approx(2.0, abs=1e-9)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_instances_vary(self, family):
        a = sample_family(family, np.random.default_rng(1), 200)
        b = sample_family(family, np.random.default_rng(2), 200)
        assert chamfer_sq(a, b) > 1e-4

    def test_unknown_family_rejected(self):
        with pytest.raises(DatasetError):
            sample_family("sphere", np.random.default_rng(0), 100)

    def test_deterministic_given_rng(self):
        a = sample_family("tee", np.random.default_rng(7), 128)
        b = sample_family("tee", np.random.default_rng(7), 128)
        np.testing.assert_array_equal(a, b)

    def test_normalize_rejects_degenerate(self):
        with pytest.raises(DatasetError):
            normalize_cloud(np.zeros((10, 3)))


class TestOctahedralGroup:
    def test_count_and_identity_first(self):
        quats = octahedral_rotations()
        assert quats.shape == (24, 4)
        np.testing.assert_allclose(quats[0], [1.0, 0, 0, 0], atol=1e-12)

    def test_all_distinct(self):
        quats = octahedral_rotations()
        err = rotation_error(quats[:, None, :], quats[None, :, :])
        off = err + np.eye(24)  # mask the diagonal
        assert off.min() > 0.2  # smallest non-identity cube rotation is 90 deg

    def test_closed_under_composition(self):
        quats = octahedral_rotations()
        for a in quats[::5]:
            for b in quats[::7]:
                prod = quat_mul(a, b)
                d = rotation_error(np.broadcast_to(prod, (24, 4)), quats)
                assert d.min() < 1e-9

    def test_box_is_symmetric_under_group(self):
        # a cube's symmetry margin over its own rotation group is ~0
        pts = sample_family("box", np.random.default_rng(3), 600)
        cube = pts * np.array([1.0, 1.0, 1.0])
        # boxes have unequal sides, only the identity-free margin of an
        # actual cube vanishes; build one directly
        rng = np.random.default_rng(4)
        u = rng.uniform(-1, 1, (800, 3))
        face = rng.integers(0, 3, 800)
        sign = rng.choice([-1.0, 1.0], 800)
        cube = u.copy()
        cube[np.arange(800), face] = sign
        assert symmetry_margin(cube) < 2e-2

    def test_asymmetric_families_have_margin(self):
        rotations = octahedral_rotations()
        for family in ASYMMETRIC_FAMILIES:
            geo = instance_geometry(family, np.random.default_rng(11))
            margin = instance_asymmetry(geo, np.random.default_rng(12), rotations)
            assert margin > 1e-3, family


class TestAugment:
    def test_returned_pose_maps_original_onto_moved(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(-1, 1, (120, 3))
        moved, pose = augment_cloud(X, np.random.default_rng(6))
        np.testing.assert_allclose(pose_apply(pose, X), moved, atol=1e-12)

    def test_rigidity(self):
        rng = np.random.default_rng(7)
        X = rng.uniform(-1, 1, (60, 3))
        moved, _ = augment_cloud(X, np.random.default_rng(8))
        d_orig = np.linalg.norm(X[:, None] - X[None], axis=-1)
        d_moved = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
        np.testing.assert_allclose(d_moved, d_orig, atol=1e-9)

    def test_zero_ranges_are_identity(self):
        X = np.random.default_rng(9).uniform(-1, 1, (30, 3))
        moved, pose = augment_cloud(X, np.random.default_rng(10), translation=0.0, angle_deg=0.0)
        np.testing.assert_array_equal(moved, X)
        np.testing.assert_array_equal(pose, [0, 0, 0, 1, 0, 0, 0])

    def test_respects_bounds(self):
        X = np.random.default_rng(11).uniform(-1, 1, (50, 3))
        for k in range(20):
            _, pose = augment_cloud(X, np.random.default_rng(k), translation=0.3, angle_deg=20.0)
            assert np.abs(pose[0:3]).max() <= 0.3
            angle = rotation_error(pose[3:7], np.array([1.0, 0, 0, 0]))
            assert angle <= 20.0 / 180.0 + 1e-12


class TestGenerate:
    def small_cfg(self):
        cfg = desk_config().data
        cfg.n_train = 12
        cfg.n_val = 6
        cfg.n_test = 6
        cfg.n_points = 96
        return cfg

    def test_counts_shapes_and_ids(self):
        cfg = self.small_cfg()
        ds = generate_dataset(cfg, seed=0)
        assert ds["train"]["points"].shape == (12, 96, 3)
        assert ds["val"]["points"].shape == (6, 96, 3)
        assert ds["test"]["points"].shape == (6, 96, 3)
        assert ds["train"]["points"].dtype == np.float32
        # ids carry the family name and a global counter
        assert ds["train"]["ids"][0] == "box-0000"
        assert ds["val"]["ids"][0].endswith("-0012")
        all_ids = ds["train"]["ids"] + ds["val"]["ids"] + ds["test"]["ids"]
        assert len(set(all_ids)) == len(all_ids)

    def test_labels_match_family_cycle(self):
        cfg = self.small_cfg()
        ds = generate_dataset(cfg, seed=0)
        for i, oid in enumerate(ds["train"]["ids"]):
            family = cfg.families[ds["train"]["labels"][i]]
            assert oid.startswith(family + "-")

    def test_regeneration_is_identical(self):
        cfg = self.small_cfg()
        a = generate_dataset(cfg, seed=3)
        b = generate_dataset(cfg, seed=3)
        for split in a:
            np.testing.assert_array_equal(a[split]["points"], b[split]["points"])
            assert a[split]["ids"] == b[split]["ids"]

    def test_different_seeds_differ(self):
        cfg = self.small_cfg()
        a = generate_dataset(cfg, seed=1)
        b = generate_dataset(cfg, seed=2)
        assert not np.array_equal(a["train"]["points"], b["train"]["points"])

    def test_clouds_fit_unit_cube(self):
        ds = generate_dataset(self.small_cfg(), seed=5)
        for split in ds:
            pts = ds[split]["points"]
            assert np.abs(pts).max() <= 1.0 + 1e-6

    def test_unknown_family_rejected(self):
        cfg = self.small_cfg()
        cfg.families = ("box", "pyramid")
        with pytest.raises(DatasetError):
            generate_dataset(cfg, seed=0)


class TestRoundTrip:
    def test_write_then_load(self, tmp_path):
        cfg_run = desk_config()
        cfg_run.data.n_train = 6
        cfg_run.data.n_val = 3
        cfg_run.data.n_test = 3
        cfg_run.data.n_points = 64
        ds = generate_dataset(cfg_run.data, seed=1)
        write_dataset(ds, tmp_path, cfg_run, seed=1)
        back = load_dataset(tmp_path)
        for split in ds:
            np.testing.assert_array_equal(back[split]["points"], ds[split]["points"])
            np.testing.assert_array_equal(back[split]["labels"], ds[split]["labels"])
            assert back[split]["ids"] == ds[split]["ids"]
        index = (tmp_path / "index.txt").read_text().splitlines()
        assert index[0].startswith("#")
        assert len(index) == 1 + 12
        assert (tmp_path / "manifest.txt").exists()
        assert (tmp_path / "config.txt").exists()

    def test_rewrite_is_byte_identical(self, tmp_path):
        cfg_run = desk_config()
        cfg_run.data.n_train = 4
        cfg_run.data.n_val = 2
        cfg_run.data.n_test = 2
        cfg_run.data.n_points = 48
        ds = generate_dataset(cfg_run.data, seed=2)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        write_dataset(ds, a_dir, cfg_run, seed=2)
        write_dataset(ds, b_dir, cfg_run, seed=2)
        for name in ("train.bin", "val.bin", "test.bin", "index.txt"):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes(), name

    def test_missing_split_detected(self, tmp_path):
        with pytest.raises(DatasetError, match="missing"):
            load_dataset(tmp_path)

    def test_wrong_container_kind_detected(self, tmp_path):
        from geocaps.container import write_container

        for split in ("train", "val", "test"):
            write_container(tmp_path / f"{split}.bin", {"points": np.zeros((1, 4, 3))}, meta="other")
        with pytest.raises(DatasetError, match="not a point-cloud"):
            load_dataset(tmp_path)
