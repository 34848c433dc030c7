"""Network building blocks shared by both capsule layers.

Every network here is a plain MLP stack over the last axis: a linear map
into the working width, a relu, a run of residual blocks, and (for
projection heads) a final linear map to the output size.  A residual
block keeps its width and has no biases:

    res(x) = relu(x + relu(x @ W1) @ W2)

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names so
they can be optimized, frozen, and checkpointed uniformly.  All functions
broadcast over arbitrary leading axes; inputs are (..., in_dim).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffgeo import tquat_canonicalize
from .tensor import Tensor

__all__ = [
    "NetSpec",
    "res_block",
    "init_mlp",
    "pose_head_bias",
    "apply_mlp",
    "mlp_param_count",
    "split_pose_vote",
    "consensus_moments",
    "unit_square_samples",
    "fold_points",
]


@dataclass(frozen=True)
class NetSpec:
    """Shape of one MLP stack.  ``out_dim`` None means no projection head
    (the stack ends at ``width``, used for embeddings)."""

    in_dim: int
    width: int
    res_blocks: int
    out_dim: int | None = None


def res_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return T.relu(x + T.matmul(T.relu(T.matmul(x, w1)), w2))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_mlp(
    spec: NetSpec,
    rng: np.random.Generator,
    prefix: str,
    dtype=np.float32,
    out_bias: np.ndarray | None = None,
) -> dict[str, Tensor]:
    """Glorot weights, zero biases.  ``out_bias`` overrides the head bias;
    pose-vote heads use it to start at the identity quaternion, so a part
    that captures no points votes "stay put" instead of a zero quaternion
    that cannot be normalized."""
    params: dict[str, Tensor] = {}
    params[f"{prefix}.in.w"] = T.parameter(_glorot(rng, spec.in_dim, spec.width, dtype))
    params[f"{prefix}.in.b"] = T.parameter(np.zeros(spec.width, dtype=dtype))
    for i in range(spec.res_blocks):
        params[f"{prefix}.res{i}.w1"] = T.parameter(_glorot(rng, spec.width, spec.width, dtype))
        params[f"{prefix}.res{i}.w2"] = T.parameter(_glorot(rng, spec.width, spec.width, dtype))
    if spec.out_dim is not None:
        params[f"{prefix}.out.w"] = T.parameter(_glorot(rng, spec.width, spec.out_dim, dtype))
        if out_bias is None:
            bias = np.zeros(spec.out_dim, dtype=dtype)
        else:
            bias = np.asarray(out_bias, dtype=dtype).copy()
            if bias.shape != (spec.out_dim,):
                raise T.ShapeError(f"head bias shape {bias.shape} does not match out_dim {spec.out_dim}")
        params[f"{prefix}.out.b"] = T.parameter(bias)
    return params


def pose_head_bias(extra_dims: int = 0, dtype=np.float32) -> np.ndarray:
    """Head bias for nets voting a pose (+ optional trailing channels):
    zero translation, identity quaternion, zeros elsewhere."""
    b = np.zeros(7 + extra_dims, dtype=dtype)
    b[3] = 1.0
    return b


def apply_mlp(x: Tensor, params: dict[str, Tensor], spec: NetSpec, prefix: str) -> Tensor:
    y = T.relu(T.matmul(x, params[f"{prefix}.in.w"]) + params[f"{prefix}.in.b"])
    for i in range(spec.res_blocks):
        y = res_block(y, params[f"{prefix}.res{i}.w1"], params[f"{prefix}.res{i}.w2"])
    if spec.out_dim is not None:
        y = T.matmul(y, params[f"{prefix}.out.w"]) + params[f"{prefix}.out.b"]
    return y


def mlp_param_count(spec: NetSpec) -> int:
    """Parameter count implied by the stated layer widths."""
    n = spec.in_dim * spec.width + spec.width
    n += spec.res_blocks * 2 * spec.width * spec.width
    if spec.out_dim is not None:
        n += spec.width * spec.out_dim + spec.out_dim
    return n


def split_pose_vote(vote: Tensor) -> Tensor:
    """Interpret a raw 7-D vote as a pose: translation passes through, the
    last 4 components are normalized into a canonical quaternion."""
    if vote.shape[-1] != 7:
        raise T.ShapeError(f"pose votes need a trailing dim of 7, got {vote.shape}")
    return T.concat([vote[..., 0:3], tquat_canonicalize(vote[..., 3:7])], axis=-1)


def consensus_moments(votes: Tensor, axis: int) -> tuple[Tensor, Tensor]:
    """Mean and standard deviation of feature votes across the view axis.

    The variance is the biased (1/K) estimator.  A tiny floor inside the
    square root keeps the gradient finite when all views coincide; the
    reported sigma is then ~1e-6, far below any useful agreement signal.
    """
    mu = T.tmean(votes, axis=axis)
    var = T.tvar(votes, axis=axis)
    sigma = T.sqrt(var + 1e-12)
    return mu, sigma


def unit_square_samples(m: int, mode: str, rng: np.random.Generator | None = None, dtype=np.float32) -> np.ndarray:
    """M sample locations in [-0.5, 0.5]^2: a regular sqrt(M) x sqrt(M) grid
    of cell centers, or uniform random draws."""
    if mode == "grid":
        side = int(round(np.sqrt(m)))
        if side * side != m:
            raise ValueError(f"grid sampling needs a square count, got {m}")
        ticks = (np.arange(side) + 0.5) / side - 0.5
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1).astype(dtype)
    if mode == "random":
        if rng is None:
            raise ValueError("random sampling needs an rng")
        return rng.uniform(-0.5, 0.5, size=(m, 2)).astype(dtype)
    raise ValueError(f"unknown sampling mode {mode!r}")


def fold_points(feature: Tensor, grid, params: dict[str, Tensor], spec: NetSpec, prefix: str) -> Tensor:
    """Decode a capsule feature into M surface points by folding the unit
    square: each grid sample is concatenated to the feature and mapped to a
    3-D point.  feature (..., D) and grid (M, 2) give (..., M, 3)."""
    grid_arr = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    m = grid_arr.shape[0]
    feat = T.expand_dims(feature, -2)  # (..., 1, D)
    ones = T.constant(np.ones((m, 1), dtype=feat.dtype))
    tiled = feat * ones  # (..., M, D)
    lead = tiled.shape[:-2]
    grid_b = T.constant(np.broadcast_to(grid_arr.astype(feat.dtype), lead + grid_arr.shape).copy())
    folded = T.concat([tiled, grid_b], axis=-1)
    return apply_mlp(folded, params, spec, prefix)
