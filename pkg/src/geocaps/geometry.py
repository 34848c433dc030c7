"""Rigid-pose algebra and point-cloud geometry kernels (plain numpy).

Quaternions are scalar-first ``[r0, r1, r2, r3]`` and canonical form means
unit norm with ``r0 > 0``, or ``r0 == 0`` and the first nonzero component
positive, so that a rotation has exactly one representative.  A pose is a
translation plus a unit quaternion, serialized as a 7-vector
``[tx, ty, tz, r0, r1, r2, r3]``; applying a pose rotates first, then
translates.  All quaternion/pose helpers broadcast over leading axes.

The differentiable counterparts used inside training graphs live in
``diffgeo``; this module is the evaluation-side single source of truth and
the reference the graph versions are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "quat_canonicalize",
    "quat_mul",
    "quat_conj",
    "quat_rotate",
    "quat_to_matrix",
    "quat_from_matrix",
    "quat_from_axis_angle",
    "random_rotation",
    "rotation_error",
    "pose_identity",
    "pose_compose",
    "pose_inverse",
    "pose_apply",
    "random_perturbations",
    "Pose",
    "chamfer_sq",
    "farthest_point_sample",
    "pca_align",
]


class DegenerateGeometryError(ValueError):
    """Raised for geometrically ill-posed inputs (zero quaternions, collinear
    clouds, isotropic covariance)."""


# ---------------------------------------------------------------------------
# quaternions


def quat_canonicalize(q: np.ndarray) -> np.ndarray:
    """Normalize to unit length and fix the sign so r0 > 0 (ties: first
    nonzero component positive).  Raises on zero-norm input."""
    q = np.asarray(q)
    if q.dtype.kind != "f":
        q = q.astype(np.float64)
    norm = np.sqrt((q * q).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateGeometryError("cannot canonicalize a zero quaternion")
    # inputs that are already unit length pass through untouched, which
    # keeps repeated canonicalization bit-stable
    q = np.where(np.abs(norm - 1.0) <= 4 * np.finfo(q.dtype).eps, q, q / norm)
    flat = q.reshape(-1, 4)
    first = np.argmax(flat != 0, axis=1)
    lead = flat[np.arange(flat.shape[0]), first]
    sign = np.where(lead < 0, -1.0, 1.0).astype(q.dtype)
    return (flat * sign[:, None]).reshape(q.shape)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b (broadcasts over leading axes)."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    return q * np.asarray([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    q = np.asarray(q)
    v = np.asarray(v)
    u = q[..., 1:4]
    w = q[..., 0:1]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix for a unit quaternion (broadcasts to (..., 3, 3))."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Canonical unit quaternion for a single 3x3 rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a single 3x3 matrix, got shape {m.shape}")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_canonicalize(q)


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise DegenerateGeometryError("axis must be nonzero")
    axis = axis / n
    half = 0.5 * angle_rad
    return quat_canonicalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def random_rotation(rng: np.random.Generator, shape: tuple = ()) -> np.ndarray:
    """Uniform random canonical unit quaternions of the given leading shape."""
    q = rng.normal(size=shape + (4,))
    return quat_canonicalize(q)


def rotation_error(r: np.ndarray, r_hat: np.ndarray) -> np.ndarray:
    """Normalized geodesic distance between rotations, in [0, 1].

    Antipodal quaternions compare equal; a 180-degree difference gives 1.
    Dots within a few ulps of 1 count as aligned, so identical (or
    antipodal) rotations report exactly zero.
    """
    r = np.asarray(r)
    r_hat = np.asarray(r_hat)
    dot = np.abs((r * r_hat).sum(axis=-1))
    dot = np.where(dot >= 1.0 - 4 * np.finfo(np.float64).eps, 1.0, np.clip(dot, 0.0, 1.0))
    return 2.0 * np.arccos(dot) / np.pi


# ---------------------------------------------------------------------------
# poses as 7-vectors [t, r]


def pose_identity(dtype=np.float64) -> np.ndarray:
    return np.array([0, 0, 0, 1, 0, 0, 0], dtype=dtype)


def pose_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a o b)(x) = a(b(x)); result quaternion is canonicalized."""
    a = np.asarray(a)
    b = np.asarray(b)
    r = quat_canonicalize(quat_mul(a[..., 3:7], b[..., 3:7]))
    t = a[..., 0:3] + quat_rotate(a[..., 3:7], b[..., 0:3])
    return np.concatenate([t, r], axis=-1)


def pose_inverse(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    r_inv = quat_canonicalize(quat_conj(p[..., 3:7]))
    t_inv = -quat_rotate(r_inv, p[..., 0:3])
    return np.concatenate([t_inv, r_inv], axis=-1)


def pose_apply(p: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply poses (..., 7) to points (..., N, 3): rotate, then translate."""
    p = np.asarray(p)
    x = np.asarray(x)
    return quat_rotate(p[..., None, 3:7], x) + p[..., None, 0:3]


def random_perturbations(
    rng: np.random.Generator,
    shape: tuple,
    max_angle_deg: float,
    max_translation: float = 0.0,
) -> np.ndarray:
    """Random poses with rotation angle uniform in +-max_angle_deg about a
    uniform axis and translation uniform in a cube of half-side
    ``max_translation``.  Returns (..., 7)."""
    axis = rng.normal(size=shape + (3,))
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    norm[norm == 0] = 1.0
    axis = axis / norm
    angle = rng.uniform(-max_angle_deg, max_angle_deg, size=shape + (1,)) * (np.pi / 180.0)
    q = np.concatenate([np.cos(angle / 2), np.sin(angle / 2) * axis], axis=-1)
    q = quat_canonicalize(q)
    if max_translation > 0:
        t = rng.uniform(-max_translation, max_translation, size=shape + (3,))
    else:
        t = np.zeros(shape + (3,))
    return np.concatenate([t, q], axis=-1)


@dataclass
class Pose:
    """Convenience wrapper over the 7-vector form for single poses."""

    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.r = quat_canonicalize(np.asarray(self.r, dtype=np.float64).reshape(4))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]))

    @classmethod
    def from_array(cls, p: np.ndarray) -> "Pose":
        p = np.asarray(p).reshape(7)
        return cls(p[0:3], p[3:7])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.t, self.r])

    def compose(self, other: "Pose") -> "Pose":
        return Pose.from_array(pose_compose(self.as_array(), other.as_array()))

    def inverse(self) -> "Pose":
        return Pose.from_array(pose_inverse(self.as_array()))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        single = x.ndim == 1
        pts = x.reshape(-1, 3)
        out = quat_rotate(self.r, pts) + self.t
        return out[0] if single else out.reshape(x.shape)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.r)


# ---------------------------------------------------------------------------
# point-cloud kernels


def _pairwise_sq(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact squared distances by direct differencing (N, M).

    Works per coordinate to keep temporaries at (N, M) instead of
    (N, M, 3); the summation order matches ((dx^2 + dy^2) + dz^2), which
    is what a last-axis sum of the stacked differences computes too.
    """
    dx = x[:, 0, None] - y[None, :, 0]
    dy = x[:, 1, None] - y[None, :, 1]
    dz = x[:, 2, None] - y[None, :, 2]
    np.multiply(dx, dx, out=dx)
    np.multiply(dy, dy, out=dy)
    np.multiply(dz, dz, out=dz)
    np.add(dx, dy, out=dx)
    np.add(dx, dz, out=dx)
    return dx


def chamfer_sq(x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> float | np.ndarray:
    """Symmetric squared Chamfer distance.

    Mean over x of the squared distance to its nearest neighbor in y, plus
    the same with the roles swapped.  Accepts single clouds (N, 3)/(M, 3)
    or batches (B, N, 3)/(B, M, 3); batched input returns a (B,) vector.
    Large clouds are processed in row chunks; the arithmetic is identical
    to the quadratic brute-force evaluation.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim == 3:
        if y.ndim != 3 or x.shape[0] != y.shape[0]:
            raise ValueError(f"batched chamfer needs matching batches, got {x.shape} vs {y.shape}")
        return np.array([chamfer_sq(x[i], y[i], chunk) for i in range(x.shape[0])])
    if x.ndim != 2 or x.shape[-1] != 3 or y.ndim != 2 or y.shape[-1] != 3:
        raise ValueError(f"chamfer_sq expects (N, 3) clouds, got {x.shape} and {y.shape}")
    if len(x) == 0 or len(y) == 0:
        raise ValueError("chamfer_sq needs non-empty clouds")

    def one_side(a, b):
        mins = np.empty(len(a), dtype=np.result_type(a, b))
        for lo in range(0, len(a), chunk):
            hi = min(lo + chunk, len(a))
            mins[lo:hi] = _pairwise_sq(a[lo:hi], b).min(axis=1)
        return mins.mean()

    return one_side(x, y) + one_side(y, x)


def farthest_point_sample(points: np.ndarray, count: int, rng: np.random.Generator | None = None, start: int | None = None) -> np.ndarray:
    """Greedy farthest-point subset of ``count`` indices.

    The first index is ``start`` if given, else drawn from ``rng``.  Each
    following pick maximizes the squared distance to the selected set
    (ties resolve to the lowest index).  count == len(points) returns a
    permutation; duplicate input points may be picked more than once only
    after all distinct locations are exhausted.
    """
    points = np.asarray(points)
    n = len(points)
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    if start is None:
        if rng is None:
            raise ValueError("farthest_point_sample needs a start index or an rng")
        start = int(rng.integers(n))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    d2 = ((points - points[start]) ** 2).sum(axis=-1)
    for k in range(1, count):
        nxt = int(np.argmax(d2))
        chosen[k] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=-1))
    return chosen


_PCA_REFERENCE = np.array([0.75298483, 0.53411534, 0.38423819])


def pca_align(points: np.ndarray) -> Pose:
    """Principal-axes pose of a cloud: translation at the centroid, rotation
    whose columns are the principal axes (descending variance).

    Axis signs are fixed by requiring a positive dot product with a fixed
    generic reference vector; the last axis may then be flipped once to
    keep the determinant +1.  Raises DegenerateGeometryError for collinear
    clouds (rank < 2) or numerically isotropic covariance.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise ValueError(f"pca_align expects at least 3 points of shape (N, 3), got {points.shape}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    scale = evals[0]
    if scale <= 0:
        raise DegenerateGeometryError("all points coincide")
    if evals[1] / scale < 1e-12:
        raise DegenerateGeometryError("collinear cloud: principal axes are not defined")
    if (evals[0] - evals[1]) / scale < 1e-12 or (evals[1] - evals[2]) / scale < 1e-12:
        raise DegenerateGeometryError(
            "near-equal covariance eigenvalues: principal axes are ambiguous"
        )
    for k in range(3):
        if evecs[:, k] @ _PCA_REFERENCE < 0:
            evecs[:, k] = -evecs[:, k]
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] = -evecs[:, 2]
    return Pose(centroid, quat_from_matrix(evecs))
