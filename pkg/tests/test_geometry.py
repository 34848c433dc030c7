"""Quaternion/pose algebra against a 3x3 matrix oracle, Chamfer against
brute force, and the supporting point-cloud kernels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocaps.geometry import (
    DegenerateGeometryError,
    Pose,
    chamfer_sq,
    farthest_point_sample,
    pca_align,
    pose_apply,
    pose_compose,
    pose_identity,
    pose_inverse,
    quat_canonicalize,
    quat_conj,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_mul,
    quat_rotate,
    quat_to_matrix,
    random_perturbations,
    random_rotation,
    rotation_error,
)

RNG = np.random.default_rng(42)
MATRIX_TOL = 1e-9


def random_unit_quats(n, rng=RNG):
    return quat_canonicalize(rng.standard_normal((n, 4)))


class TestQuaternionMatrixOracle:
    """Every quaternion operation must agree with its 3x3 matrix image."""

    def test_mul_is_matrix_product(self):
        a, b = random_unit_quats(50), random_unit_quats(50)
        got = quat_to_matrix(quat_mul(a, b))
        want = quat_to_matrix(a) @ quat_to_matrix(b)
        assert np.abs(got - want).max() < MATRIX_TOL

    def test_rotate_is_matrix_vector_product(self):
        q = random_unit_quats(50)
        v = RNG.standard_normal((50, 3))
        got = quat_rotate(q, v)
        want = (quat_to_matrix(q) @ v[..., None])[..., 0]
        assert np.abs(got - want).max() < MATRIX_TOL

    def test_conj_is_matrix_transpose(self):
        q = random_unit_quats(50)
        got = quat_to_matrix(quat_conj(q))
        want = quat_to_matrix(q).swapaxes(-1, -2)
        assert np.abs(got - want).max() < MATRIX_TOL

    def test_matrix_round_trip(self):
        for q in random_unit_quats(50):
            back = quat_from_matrix(quat_to_matrix(q))
            assert np.abs(back - q).max() < MATRIX_TOL

    def test_to_matrix_is_special_orthogonal(self):
        m = quat_to_matrix(random_unit_quats(50))
        eye = m @ m.swapaxes(-1, -2)
        assert np.abs(eye - np.eye(3)).max() < MATRIX_TOL
        assert np.abs(np.linalg.det(m) - 1.0).max() < MATRIX_TOL

    def test_axis_angle_matches_rodrigues(self):
        # R v = v cos(t) + (k x v) sin(t) + k (k . v)(1 - cos(t))
        rng = np.random.default_rng(9)
        for _ in range(20):
            axis = rng.standard_normal(3)
            angle = rng.uniform(-np.pi, np.pi)
            k = axis / np.linalg.norm(axis)
            v = rng.standard_normal(3)
            want = (
                v * np.cos(angle)
                + np.cross(k, v) * np.sin(angle)
                + k * (k @ v) * (1 - np.cos(angle))
            )
            got = quat_rotate(quat_from_axis_angle(axis, angle), v)
            assert np.abs(got - want).max() < MATRIX_TOL

    def test_zero_axis_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            quat_from_axis_angle(np.zeros(3), 1.0)


class TestCanonicalForm:
    def test_zero_quaternion_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            quat_canonicalize(np.zeros(4))

    def test_unit_norm_and_sign(self):
        q = quat_canonicalize(RNG.standard_normal((200, 4)))
        assert np.abs((q * q).sum(-1) - 1.0).max() < 1e-12
        flat = q.reshape(-1, 4)
        lead = flat[np.arange(len(flat)), np.argmax(flat != 0, axis=1)]
        assert (lead > 0).all()

    def test_negative_w_flips(self):
        q = quat_canonicalize(np.array([-1.0, 0, 0, 0]))
        np.testing.assert_array_equal(q, [1.0, 0, 0, 0])

    def test_zero_w_tie_breaks_on_next_component(self):
        q = quat_canonicalize(np.array([0.0, -2.0, 0, 0]))
        np.testing.assert_array_equal(q, [0.0, 1.0, 0, 0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent_bit_for_bit(self, seed):
        q = np.random.default_rng(seed).standard_normal(4)
        once = quat_canonicalize(q)
        twice = quat_canonicalize(once)
        assert np.array_equal(once, twice)

    def test_antipodal_inputs_agree(self):
        q = RNG.standard_normal((100, 4))
        np.testing.assert_array_equal(quat_canonicalize(q), quat_canonicalize(-q))


class TestRotationError:
    def test_self_distance_is_exactly_zero(self):
        r = random_unit_quats(100)
        assert (rotation_error(r, r) == 0.0).all()

    def test_antipodal_distance_is_exactly_zero(self):
        r = random_unit_quats(100)
        assert (rotation_error(r, -r) == 0.0).all()

    def test_half_turn_scores_one(self):
        r = np.array([1.0, 0, 0, 0])
        r_hat = np.array([0.0, 1.0, 0, 0])  # 180 degrees about x
        assert rotation_error(r, r_hat) == pytest.approx(1.0, abs=1e-12)

    def test_quarter_turn_scores_half(self):
        r_hat = quat_from_axis_angle(np.array([0, 0, 1.0]), np.pi / 2)
        assert rotation_error(pose_identity()[3:7], r_hat) == pytest.approx(0.5, abs=1e-12)

    def test_left_invariance(self):
        r, s = random_unit_quats(100), random_unit_quats(100)
        g = random_unit_quats(100)
        base = rotation_error(r, s)
        moved = rotation_error(quat_mul(g, r), quat_mul(g, s))
        assert np.abs(base - moved).max() < 1e-6

    def test_matches_matrix_geodesic_angle(self):
        # theta = arccos((trace(Ra^T Rb) - 1) / 2), normalized by pi
        a, b = random_unit_quats(50), random_unit_quats(50)
        rel = quat_to_matrix(a).swapaxes(-1, -2) @ quat_to_matrix(b)
        tr = np.clip((np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
        want = np.arccos(tr) / np.pi
        got = rotation_error(a, b)
        assert np.abs(got - want).max() < 1e-6


class TestPoseAlgebra:
    def test_compose_matches_homogeneous_matrices(self):
        for _ in range(20):
            a = np.concatenate([RNG.standard_normal(3), random_rotation(RNG)])
            b = np.concatenate([RNG.standard_normal(3), random_rotation(RNG)])
            c = pose_compose(a, b)
            ha = np.eye(4)
            ha[:3, :3] = quat_to_matrix(a[3:7])
            ha[:3, 3] = a[:3]
            hb = np.eye(4)
            hb[:3, :3] = quat_to_matrix(b[3:7])
            hb[:3, 3] = b[:3]
            hc = ha @ hb
            assert np.abs(quat_to_matrix(c[3:7]) - hc[:3, :3]).max() < MATRIX_TOL
            assert np.abs(c[:3] - hc[:3, 3]).max() < MATRIX_TOL

    def test_inverse_composes_to_identity(self):
        p = np.concatenate([RNG.standard_normal((30, 3)), random_rotation(RNG, (30,))], axis=-1)
        ident = pose_compose(p, pose_inverse(p))
        assert np.abs(ident[:, 0:3]).max() < 1e-12
        assert rotation_error(ident[:, 3:7], np.broadcast_to(pose_identity()[3:7], (30, 4))).max() == 0.0

    def test_apply_is_rotate_then_translate(self):
        p = np.concatenate([[1.0, -2.0, 3.0], quat_from_axis_angle(np.array([0, 0, 1.0]), np.pi / 2)])
        x = np.array([[1.0, 0.0, 0.0]])
        got = pose_apply(p, x)
        np.testing.assert_allclose(got, [[1.0, -1.0, 3.0]], atol=1e-12)

    def test_apply_associates_with_compose(self):
        a = np.concatenate([RNG.standard_normal(3), random_rotation(RNG)])
        b = np.concatenate([RNG.standard_normal(3), random_rotation(RNG)])
        x = RNG.standard_normal((40, 3))
        direct = pose_apply(pose_compose(a, b), x)
        nested = pose_apply(a, pose_apply(b, x))
        assert np.abs(direct - nested).max() < 1e-12

    def test_apply_broadcasts_over_pose_batches(self):
        p = np.stack([pose_identity(), pose_identity()])
        p[1, 0] = 5.0  # shift the second pose along x
        x = RNG.standard_normal((2, 10, 3))
        out = pose_apply(p, x)
        np.testing.assert_array_equal(out[0], x[0])
        np.testing.assert_allclose(out[1, :, 0], x[1, :, 0] + 5.0)

    def test_pose_dataclass_round_trip(self):
        p = Pose(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 2.0, 0.0]))
        np.testing.assert_array_equal(p.r, [0.0, 0.0, 1.0, 0.0])  # canonicalized
        back = Pose.from_array(p.as_array())
        np.testing.assert_array_equal(back.t, p.t)
        np.testing.assert_array_equal(back.r, p.r)
        x = RNG.standard_normal(3)
        np.testing.assert_allclose(
            p.compose(p.inverse()).apply(x), x, atol=1e-12
        )

    def test_perturbations_respect_bounds(self):
        p = random_perturbations(np.random.default_rng(0), (500,), max_angle_deg=30.0, max_translation=0.2)
        assert np.abs(p[:, 0:3]).max() <= 0.2
        angles = rotation_error(p[:, 3:7], np.broadcast_to(pose_identity()[3:7], (500, 4)))
        assert angles.max() <= 30.0 / 180.0 + 1e-12
        assert angles.max() > 25.0 / 180.0  # the range is actually used

    def test_zero_translation_perturbations(self):
        p = random_perturbations(np.random.default_rng(0), (50,), max_angle_deg=10.0)
        assert np.abs(p[:, 0:3]).max() == 0.0


class TestChamfer:
    @staticmethod
    def brute(x, y):
        d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
        return d2.min(1).mean() + d2.min(0).mean()

    def test_exact_vs_brute_force_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            n, m = rng.integers(1, 60, size=2)
            x = rng.standard_normal((int(n), 3))
            y = rng.standard_normal((int(m), 3))
            assert chamfer_sq(x, y) == self.brute(x, y)

    def test_exact_with_chunking(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((100, 3))
        y = rng.standard_normal((37, 3))
        full = chamfer_sq(x, y, chunk=4096)
        assert chamfer_sq(x, y, chunk=7) == full
        assert chamfer_sq(x, y, chunk=1) == full

    def test_float32_inputs_stay_exact(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((50, 3)).astype(np.float32)
        y = rng.standard_normal((20, 3)).astype(np.float32)
        d2 = ((x[:, None, :] - y[None, :, :]) * (x[:, None, :] - y[None, :, :])).sum(-1)
        assert chamfer_sq(x, y) == d2.min(1).mean() + d2.min(0).mean()

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 30, 3))
        y = rng.standard_normal((5, 18, 3))
        batched = chamfer_sq(x, y)
        np.testing.assert_array_equal(batched, [chamfer_sq(x[i], y[i]) for i in range(5)])

    def test_identical_clouds_score_zero(self):
        x = RNG.standard_normal((25, 3))
        assert chamfer_sq(x, x) == 0.0

    def test_symmetry(self):
        x = RNG.standard_normal((30, 3))
        y = RNG.standard_normal((11, 3))
        assert chamfer_sq(x, y) == chamfer_sq(y, x)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            chamfer_sq(np.zeros((0, 3)), np.ones((4, 3)))

    def test_mismatched_batch_rejected(self):
        with pytest.raises(ValueError):
            chamfer_sq(np.zeros((2, 5, 3)), np.zeros((3, 5, 3)))


class TestFarthestPointSample:
    def test_returns_distinct_indices_and_spreads(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, size=(200, 3))
        idx = farthest_point_sample(pts, 10, start=0)
        assert len(set(idx.tolist())) == 10
        # the second pick is the single farthest point from the first
        d2 = ((pts - pts[0]) ** 2).sum(-1)
        assert idx[1] == np.argmax(d2)

    def test_greedy_invariant(self):
        # every selected point is at least as far from the prior picks as
        # any unselected point was at that step
        rng = np.random.default_rng(6)
        pts = rng.uniform(-1, 1, size=(60, 3))
        idx = farthest_point_sample(pts, 12, start=3)
        for k in range(1, 12):
            sel = pts[idx[:k]]
            dist_all = ((pts[:, None, :] - sel[None]) ** 2).sum(-1).min(1)
            assert dist_all[idx[k]] == dist_all.max()

    def test_full_count_is_permutation(self):
        pts = np.random.default_rng(7).standard_normal((15, 3))
        idx = farthest_point_sample(pts, 15, start=2)
        assert sorted(idx.tolist()) == list(range(15))

    def test_needs_rng_or_start(self):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((5, 3)), 2)

    def test_count_bounds(self):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((5, 3)), 6, start=0)


class TestPcaAlign:
    def test_recovers_constructed_frame(self):
        # anisotropic axis-aligned cloud, then rigidly moved: the recovered
        # pose must undo the motion up to axis-sign conventions
        rng = np.random.default_rng(8)
        local = rng.standard_normal((500, 3)) * np.array([3.0, 1.5, 0.5])
        pose = np.concatenate([rng.standard_normal(3), random_rotation(rng)])
        moved = pose_apply(pose, local)
        est = pca_align(moved)
        # de-rotating with the estimated frame must restore axis-aligned
        # covariance with descending variances
        back = (moved - est.t) @ quat_to_matrix(est.r)
        cov = back.T @ back / len(back)
        off_diag = cov - np.diag(np.diag(cov))
        assert np.abs(off_diag).max() < 1e-9
        assert cov[0, 0] > cov[1, 1] > cov[2, 2]

    def test_translation_is_centroid(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((100, 3)) * np.array([2.0, 1.0, 0.4]) + 7.0
        est = pca_align(pts)
        np.testing.assert_allclose(est.t, pts.mean(0), atol=1e-12)

    def test_deterministic_under_reorder(self):
        rng = np.random.default_rng(10)
        pts = rng.standard_normal((80, 3)) * np.array([2.0, 1.0, 0.3])
        est1 = pca_align(pts)
        est2 = pca_align(pts[::-1].copy())
        assert np.abs(est1.as_array() - est2.as_array()).max() < 1e-9

    def test_collinear_rejected(self):
        line = np.outer(np.linspace(0, 1, 50), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(DegenerateGeometryError):
            pca_align(line)

    def test_isotropic_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            pca_align(np.eye(3) * 2 - 2 / 3)  # simplex with equal spread

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            pca_align(np.zeros((2, 3)))
