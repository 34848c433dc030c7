"""Differentiable pose algebra and Chamfer loss on autodiff tensors.

These mirror the plain-numpy functions in ``geometry`` (same conventions:
scalar-first quaternions, 7-vector poses, rotate-then-translate) but build
graph nodes so gradients flow through viewpoint updates and decoded
points.  Quaternion sign fixes are applied through detached multipliers,
which is the almost-everywhere-correct subgradient.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .geometry import _pairwise_sq
from .tensor import Tensor

__all__ = [
    "tquat_mul",
    "tquat_conj",
    "tquat_canonicalize",
    "tquat_rotate",
    "tpose_compose",
    "tpose_inverse",
    "tpose_apply",
    "chamfer_sq_graph",
]


def _cross(u: Tensor, v: Tensor) -> Tensor:
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    return T.stack([uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx], axis=-1)


def tquat_mul(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return T.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def tquat_conj(q: Tensor) -> Tensor:
    return T.mul(q, T.constant(np.array([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)))


def tquat_canonicalize(q: Tensor) -> Tensor:
    """Unit norm plus a detached sign flip enforcing a nonnegative leading
    component."""
    unit = T.normalize(q, axis=-1)
    flip = np.where(unit.data[..., 0:1] < 0, -1.0, 1.0).astype(unit.dtype)
    return T.mul(unit, T.constant(flip))


def tquat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4); broadcasts."""
    u = q[..., 1:4]
    w = q[..., 0:1]
    uv = _cross(u, v)
    return v + (w * uv + _cross(u, uv)) * 2.0


def tpose_compose(a: Tensor, b: Tensor) -> Tensor:
    r = tquat_canonicalize(tquat_mul(a[..., 3:7], b[..., 3:7]))
    t = a[..., 0:3] + tquat_rotate(a[..., 3:7], b[..., 0:3])
    return T.concat([t, r], axis=-1)


def tpose_inverse(p: Tensor) -> Tensor:
    r_inv = tquat_canonicalize(tquat_conj(p[..., 3:7]))
    t_inv = -tquat_rotate(r_inv, p[..., 0:3])
    return T.concat([t_inv, r_inv], axis=-1)


def tpose_apply(p: Tensor, x: Tensor) -> Tensor:
    """Apply poses (..., 7) to point sets (..., N, 3)."""
    q = T.expand_dims(p[..., 3:7], -2)
    t = T.expand_dims(p[..., 0:3], -2)
    return tquat_rotate(q, x) + t


def chamfer_sq_graph(x: np.ndarray, y: Tensor) -> Tensor:
    """Symmetric squared Chamfer distance with gradient through ``y`` only.

    ``x`` is the reference cloud (constant), ``y`` the decoded cloud.
    Accepts (N, 3) vs (M, 3) returning a scalar, or (B, N, 3) vs (B, M, 3)
    returning (B,).  Nearest-neighbor matches are found in the forward
    pass and treated as constants in the backward pass.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    xb = x[None] if single else x
    yb = y.data[None] if single else y.data
    if xb.shape[0] != yb.shape[0] or xb.shape[-1] != 3 or yb.shape[-1] != 3:
        raise T.ShapeError(f"chamfer: incompatible cloud shapes {x.shape} vs {y.data.shape}")
    B, N, _ = xb.shape
    M = yb.shape[1]

    vals = np.empty(B, dtype=yb.dtype)
    idx_xy = np.empty((B, N), dtype=np.int64)  # nearest y for each x
    idx_yx = np.empty((B, M), dtype=np.int64)  # nearest x for each y
    for b in range(B):
        d2 = _pairwise_sq(xb[b], yb[b])
        idx_xy[b] = d2.argmin(axis=1)
        idx_yx[b] = d2.argmin(axis=0)
        vals[b] = d2[np.arange(N), idx_xy[b]].mean() + d2[idx_yx[b], np.arange(M)].mean()

    out = vals[0].reshape(()) if single else vals

    def backward(g):
        gy = np.zeros_like(yb)
        gb = np.asarray(g).reshape(B) if not single else np.asarray(g).reshape(1)
        for b in range(B):
            scale = gb[b]
            # x-side term: every x_i pulls its matched y toward it
            matched = yb[b][idx_xy[b]]
            contrib = (2.0 / N) * (matched - xb[b]) * scale
            np.add.at(gy[b], idx_xy[b], contrib)
            # y-side term: every y_j is pulled toward its matched x
            gy[b] += (2.0 / M) * (yb[b] - xb[b][idx_yx[b]]) * scale
        return (gy[0] if single else gy,)

    return T._from_op(out, "chamfer_sq", (y,), backward)
