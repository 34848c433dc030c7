"""Points-to-parts capsule layer.

A part capsule is a 7-D pose (translation + canonical unit quaternion)
plus a D-dimensional feature.  Given a cloud X, capsules are inferred by
iterating: decode every capsule into a small folded surface, soft-route
each point to the part whose surface sits closest, then re-encode every
capsule from its weighted points under K randomly perturbed viewpoints.
The encoder votes a viewpoint correction from each view (pose-voting
network Q), re-observes the points from the corrected viewpoint (percept
network F), and takes the view consensus as the feature; the first view's
corrected viewpoint becomes the pose.

Training backpropagates through the final encode and decode only; the
routing warmup runs without gradients, matching the reference procedure
(R obtained from earlier iterations, gradients through the last encoder
and decoder applications).
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import PartConfig, RunConfig, arch_hash_parts, config_hash, config_to_text
from .container import read_container, write_container
from .diffgeo import chamfer_sq_graph, tpose_apply, tpose_compose, tpose_inverse
from .formats import MetricsLogger, sha256_array, sha256_file, write_manifest
from .geometry import (
    _pairwise_sq,
    chamfer_sq,
    farthest_point_sample,
    pose_apply,
    pose_compose,
    pose_inverse,
    quat_canonicalize,
    random_perturbations,
    random_rotation,
)
from .nets import (
    NetSpec,
    apply_mlp,
    consensus_moments,
    fold_points,
    init_mlp,
    mlp_param_count,
    pose_head_bias,
    split_pose_vote,
    unit_square_samples,
)
from .optim import Adam
from .tensor import Tensor

__all__ = [
    "PartModel",
    "init_parts",
    "routing_logits",
    "row_softmax",
    "routing_entropy",
    "points_to_parts",
    "train_part_layer",
]


class PartModel:
    """Parameter bundle for the part layer: pose-voting net Q, percept net
    F (separate embeddings), and the folding decoder G shared by all J
    part capsules."""

    def __init__(self, cfg: PartConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        w, r = cfg.net_width, cfg.net_res_blocks
        self.spec_q_embed = NetSpec(3, w, r, None)
        self.spec_q_project = NetSpec(w, w, r, 7)
        self.spec_f_embed = NetSpec(3, w, r, None)
        self.spec_f_project = NetSpec(w, w, r, cfg.feature_dim)
        self.spec_fold = NetSpec(cfg.feature_dim + 2, cfg.fold_width, cfg.fold_res_blocks, 3)
        self.params: dict[str, Tensor] = {}
        for spec, prefix in [
            (self.spec_q_embed, "q_embed"),
            (self.spec_q_project, "q_project"),
            (self.spec_f_embed, "f_embed"),
            (self.spec_f_project, "f_project"),
            (self.spec_fold, "fold"),
        ]:
            bias = pose_head_bias(dtype=dtype) if prefix == "q_project" else None
            self.params.update(init_mlp(spec, rng, prefix, dtype, out_bias=bias))

    def expected_param_count(self) -> int:
        return sum(
            mlp_param_count(s)
            for s in (self.spec_q_embed, self.spec_q_project, self.spec_f_embed, self.spec_f_project, self.spec_fold)
        )

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p._rg = False

    def decode(self, poses, features, grid: np.ndarray) -> Tensor:
        """Fold the unit-square samples through G and move them by each
        capsule's pose: (B, J, 7) x (B, J, D) -> (B, J, M, 3)."""
        poses_t = poses if isinstance(poses, Tensor) else T.constant(np.asarray(poses, dtype=self.dtype))
        feats_t = features if isinstance(features, Tensor) else T.constant(np.asarray(features, dtype=self.dtype))
        local = fold_points(feats_t, grid, self.params, self.spec_fold, "fold")
        return tpose_apply(poses_t, local)

    def encode(
        self,
        X: np.ndarray,
        R: np.ndarray,
        poses_prev: np.ndarray,
        feats_prev: np.ndarray,
        rng: np.random.Generator,
        mode: str = "train",
    ) -> tuple[Tensor, Tensor, Tensor]:
        """One encoder application over K viewpoints.

        ``poses_prev`` enters as a constant (stop-gradient is structural:
        previous capsules are plain arrays).  Returns (poses (B, J, 7),
        features (B, J, D), sigma (B, J, D)); gradients flow through the
        viewpoint votes and percepts.
        """
        cfg = self.cfg
        B, I, _ = X.shape
        J = poses_prev.shape[1]
        if R.shape != (B, I, J):
            raise T.ShapeError(f"routing matrix shape {R.shape} does not match points {X.shape} and {J} parts")
        if mode == "train":
            K = cfg.views
            perturb = random_perturbations(
                rng, (B, J, K), cfg.view_angle_deg, cfg.view_translation
            ).astype(self.dtype)
            z = pose_compose(poses_prev[:, :, None, :].astype(self.dtype), perturb)
        elif mode == "eval":
            K = 1
            z = poses_prev[:, :, None, :].astype(self.dtype)
        else:
            raise ValueError(f"unknown encode mode {mode!r}")

        # observe points from each viewpoint: x | z = z^-1 (.) x
        x_local = pose_apply(pose_inverse(z), X[:, None, None, :, :]).astype(self.dtype)
        x_const = T.constant(x_local)  # (B, J, K, I, 3)
        w_pts = T.constant(
            np.ascontiguousarray(R.transpose(0, 2, 1), dtype=self.dtype)[:, :, None, :, None]
        )  # (B, J, 1, I, 1)

        emb_q = apply_mlp(x_const, self.params, self.spec_q_embed, "q_embed")
        pooled_q = T.max_along(emb_q * w_pts, axis=-2)  # (B, J, K, W)
        dz = split_pose_vote(apply_mlp(pooled_q, self.params, self.spec_q_project, "q_project"))
        z_new = tpose_compose(T.constant(z), dz)  # (B, J, K, 7)

        x_corrected = tpose_apply(tpose_inverse(z_new), T.constant(X[:, None, None, :, :].astype(self.dtype)))
        emb_f = apply_mlp(x_corrected, self.params, self.spec_f_embed, "f_embed")
        pooled_f = T.max_along(emb_f * w_pts, axis=-2)
        votes_f = apply_mlp(pooled_f, self.params, self.spec_f_project, "f_project")  # (B, J, K, D)

        mu, sigma = consensus_moments(votes_f, axis=2)
        if mode == "train" and K > 1:
            eps = T.constant(rng.standard_normal(mu.shape).astype(self.dtype))
            feats = mu + sigma * eps
        else:
            feats = mu
        poses_new = z_new[:, :, 0, :]
        return poses_new, feats, sigma

    # -- persistence --------------------------------------------------------

    def save(self, path, cfg_run: RunConfig) -> None:
        write_container(
            path,
            {name: p.data for name, p in self.params.items()},
            meta="part-model " + arch_hash_parts(cfg_run),
        )

    @classmethod
    def load(cls, path, cfg_run: RunConfig) -> "PartModel":
        records, meta = read_container(path)
        kind, _, stored_hash = meta.partition(" ")
        if kind != "part-model":
            raise ValueError(f"{path}: not a part-layer checkpoint")
        expected = arch_hash_parts(cfg_run)
        if stored_hash != expected:
            raise ValueError(
                f"{path}: checkpoint architecture hash {stored_hash[:12]} does not match "
                f"configured architecture {expected[:12]}"
            )
        model = cls(cfg_run.parts, np.random.default_rng(0), dtype=records[next(iter(records))].dtype.type)
        for name, p in model.params.items():
            if name not in records:
                raise ValueError(f"{path}: missing parameter record {name!r}")
            if records[name].shape != p.data.shape:
                raise ValueError(
                    f"{path}: parameter {name!r} has shape {records[name].shape}, expected {p.data.shape}"
                )
            p.data = records[name].copy()
        return model


def init_parts(X: np.ndarray, cfg: PartConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Initial capsules: translations at farthest-point-sampled locations,
    uniform random rotations, zero features.  X is (B, I, 3)."""
    B, I, _ = X.shape
    J = cfg.n_parts
    if I < J:
        raise ValueError(f"need at least {J} points to place {J} parts, got {I}")
    poses = np.zeros((B, J, 7), dtype=np.float64)
    for b in range(B):
        idx = farthest_point_sample(X[b], J, rng=rng)
        poses[b, :, 0:3] = X[b][idx]
    poses[:, :, 3:7] = random_rotation(rng, (B, J))
    feats = np.zeros((B, J, cfg.feature_dim), dtype=np.float64)
    return poses, feats


def routing_logits(X: np.ndarray, Y: np.ndarray, sigma: float) -> np.ndarray:
    """Point-to-part affinities: b[.., i, j] = -(min_m |x_i - y_jm|^2 / s^2
    + log s).  X (B, I, 3), Y (B, J, M, 3) -> (B, I, J)."""
    X = np.asarray(X)
    Y = np.asarray(Y)
    if sigma <= 0:
        raise ValueError(f"routing sigma must be positive, got {sigma}")
    B, I, _ = X.shape
    J, M = Y.shape[1], Y.shape[2]
    out = np.empty((B, I, J), dtype=np.result_type(X, Y))
    s2 = sigma * sigma
    logs = np.log(sigma)
    for b in range(B):
        d2 = _pairwise_sq(X[b], Y[b].reshape(J * M, 3)).reshape(I, J, M)
        # distances stay in the input precision; the affine map runs at
        # 64-bit and rounds once on assignment
        out[b] = -(d2.min(axis=-1).astype(np.float64) / s2 + logs)
    return out


def row_softmax(b: np.ndarray) -> np.ndarray:
    """Softmax over the last axis (parts), max-shifted for stability."""
    shifted = b - b.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def routing_entropy(R: np.ndarray) -> float:
    """Mean per-point entropy of the routing distribution, in nats."""
    safe = np.clip(R, 1e-12, None)
    return float(-(safe * np.log(safe)).sum(axis=-1).mean())


def points_to_parts(
    model: PartModel,
    X: np.ndarray,
    rng: np.random.Generator,
    iters: int | None = None,
    mode: str = "eval",
    init: tuple[np.ndarray, np.ndarray] | None = None,
    grid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Run the full routing loop without gradients.

    Each iteration decodes current capsules, routes points against the
    decoded surfaces, and re-encodes.  Returns final (poses, features) and
    the per-iteration routing matrices.
    """
    cfg = model.cfg
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[-1] != 3:
        raise ValueError(f"points_to_parts expects (B, I, 3) clouds, got {X.shape}")
    iters = cfg.routing_iters if iters is None else iters
    if grid is None:
        grid = unit_square_samples(cfg.decoder_points, cfg.grid_mode, rng, dtype=model.dtype)
    poses, feats = init if init is not None else init_parts(X, cfg, rng)
    poses = np.asarray(poses, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    routings: list[np.ndarray] = []
    with T.no_grad():
        for _ in range(iters):
            Y = model.decode(poses.astype(model.dtype), feats.astype(model.dtype), grid).data
            R = row_softmax(routing_logits(X, Y, cfg.sigma_routing))
            routings.append(R)
            p_t, f_t, _ = model.encode(X, R, poses, feats, rng, mode=mode)
            poses, feats = p_t.data.astype(np.float64), f_t.data.astype(np.float64)
    # hand back exactly unit quaternions at 64-bit so downstream pose
    # algebra composes without renormalization drift
    poses = np.concatenate([poses[..., 0:3], quat_canonicalize(poses[..., 3:7])], axis=-1)
    return poses, feats, routings


def _train_forward(model: PartModel, X: np.ndarray, rng: np.random.Generator) -> tuple[Tensor, dict]:
    """One training forward: detached routing warmup, then a gradient-
    carrying encode + decode and the Chamfer reconstruction loss."""
    cfg = model.cfg
    grid = unit_square_samples(cfg.decoder_points, cfg.grid_mode, rng, dtype=model.dtype)
    poses, feats = init_parts(X, cfg, rng)
    with T.no_grad():
        for _ in range(cfg.train_routing_warmup):
            Y = model.decode(poses.astype(model.dtype), feats.astype(model.dtype), grid).data
            R = row_softmax(routing_logits(X, Y, cfg.sigma_routing))
            p_t, f_t, _ = model.encode(X, R, poses, feats, rng, mode="train")
            poses, feats = p_t.data.astype(np.float64), f_t.data.astype(np.float64)
        Y = model.decode(poses.astype(model.dtype), feats.astype(model.dtype), grid).data
        R = row_softmax(routing_logits(X, Y, cfg.sigma_routing))

    poses_t, feats_t, sigma_t = model.encode(X, R, poses, feats, rng, mode="train")
    decoded = model.decode(poses_t, feats_t, grid)  # (B, J, M, 3)
    B = X.shape[0]
    union = T.reshape(decoded, (B, cfg.n_parts * cfg.decoder_points, 3))
    loss = T.tmean(chamfer_sq_graph(X.astype(model.dtype), union))
    stats = {
        "routing_entropy": routing_entropy(R),
        "vote_sigma": float(sigma_t.data.mean()),
    }
    return loss, stats


def _augment_batch(X: np.ndarray, cfg: PartConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotation about a random axis plus random translation, one
    rigid transform per batch item."""
    B = X.shape[0]
    aug = random_perturbations(rng, (B,), cfg.aug_angle_deg, cfg.aug_translation)
    return pose_apply(aug, X)


def eval_part_chamfer(model: PartModel, X_val: np.ndarray, seed: int, batch: int = 32) -> float:
    """Mean eval-mode reconstruction Chamfer over a validation set."""
    cfg = model.cfg
    vals = []
    with T.no_grad():
        for lo in range(0, len(X_val), batch):
            chunk = X_val[lo : lo + batch]
            rng = np.random.default_rng([seed, lo])
            grid = unit_square_samples(cfg.decoder_points, cfg.grid_mode, rng, dtype=model.dtype)
            poses, feats, _ = points_to_parts(model, chunk, rng, mode="eval", grid=grid)
            Y = model.decode(poses.astype(model.dtype), feats.astype(model.dtype), grid).data
            union = Y.reshape(len(chunk), -1, 3)
            vals.append(chamfer_sq(chunk, union))
    return float(np.concatenate(vals).mean())


def train_part_layer(
    cfg_run: RunConfig,
    X_train: np.ndarray,
    X_val: np.ndarray,
    out_dir,
    seed: int | None = None,
    log_every: int = 50,
    val_every: int | None = None,
    progress=None,
) -> dict:
    """Train the part layer; writes checkpoint, metrics CSV, config, and a
    run manifest into ``out_dir``.  Returns a summary dict."""
    cfg = cfg_run.parts
    seed = cfg_run.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 101])
    model = PartModel(cfg, rng)
    opt = Adam(
        model.params,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        decay_steps=cfg.lr_decay_steps,
    )
    logger = MetricsLogger(
        out_dir / "metrics.csv",
        ["step", "loss", "routing_entropy", "vote_sigma", "val_chamfer", "lr", "wall_time"],
    )
    val_chamfer_init = eval_part_chamfer(model, X_val, seed)
    t0 = time.perf_counter()
    logger.log(step=0, loss=float("nan"), routing_entropy=float("nan"), vote_sigma=float("nan"),
               val_chamfer=val_chamfer_init, lr=cfg.lr, wall_time=0.0)

    n = len(X_train)
    loss_value = float("nan")
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = X_train[idx]
        if cfg.augment:
            batch = _augment_batch(batch, cfg, rng)
        loss, stats = _train_forward(model, batch, rng)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise T.NonFiniteError(f"part training diverged at step {step}: loss={loss_value}")
        loss.backward()
        opt.step()
        opt.zero_grad()
        if step % log_every == 0 or step == cfg.steps:
            val = eval_part_chamfer(model, X_val, seed) if val_every and step % val_every == 0 and step < cfg.steps else ""
            logger.log(step=step, loss=loss_value, lr=opt.lr, wall_time=time.perf_counter() - t0,
                       val_chamfer=val, **stats)
            if progress is not None:
                progress(step, loss_value)

    val_chamfer_final = eval_part_chamfer(model, X_val, seed)
    wall = time.perf_counter() - t0
    ckpt = out_dir / "parts.ckpt"
    model.save(ckpt, cfg_run)
    (out_dir / "config.txt").write_text(config_to_text(cfg_run))
    summary = {
        "val_chamfer_init": val_chamfer_init,
        "val_chamfer_final": val_chamfer_final,
        "loss_final": loss_value,
        "wall_time": wall,
        "checkpoint": str(ckpt),
    }
    write_manifest(out_dir / "manifest.txt", {
        "kind": "part-training",
        "seed": str(seed),
        "config_file": "config.txt",
        "config_hash": config_hash(cfg_run),
        "arch_hash": arch_hash_parts(cfg_run),
        "checkpoint": ckpt.name,
        "checkpoint_sha256": sha256_file(ckpt),
        "train_data_sha256": sha256_array(X_train),
        "val_data_sha256": sha256_array(X_val),
        "steps": str(cfg.steps),
        "val_chamfer_init": repr(val_chamfer_init),
        "val_chamfer_final": repr(val_chamfer_final),
        "wall_time_sec": f"{wall:.1f}",
    })
    return summary
