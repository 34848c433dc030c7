"""Parts-to-object capsule layer.

The object capsule summarizes J part capsules as one pose plus one
feature vector.  Encoding runs Multi-View Agreement over the set of
parts: starting from a random viewpoint, each of K perturbed views votes
a viewpoint correction from the part capsules observed in its frame
(optionally re-voting for several steps), then reads out a percept from
the corrected frame.  The feature is the consensus of the K percepts
(mean, plus sigma-scaled noise during training); the pose is the first
view's corrected viewpoint.

Decoding maps the object feature through J disjoint per-part networks,
each emitting a part capsule in the object's canonical frame; part poses
are then moved by the object pose.  The training loss matches decoded
part capsules against refined targets (the part layer re-run from the
decoded capsules, frozen, no gradient) plus a small Chamfer term tying
decoded part surfaces back to the points.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ObjectConfig, PartConfig, RunConfig, arch_hash_objects, config_hash, config_to_text
from .container import read_container, write_container
from .diffgeo import chamfer_sq_graph, tpose_apply, tpose_compose, tpose_inverse
from .formats import MetricsLogger, sha256_array, sha256_file, write_manifest
from .geometry import pose_compose, random_perturbations, random_rotation
from .nets import (
    NetSpec,
    apply_mlp,
    consensus_moments,
    init_mlp,
    mlp_param_count,
    pose_head_bias,
    split_pose_vote,
    unit_square_samples,
)
from .optim import Adam
from .parts import PartModel, _augment_batch, points_to_parts
from .tensor import Tensor

__all__ = [
    "ObjectModel",
    "d_caps_graph",
    "d_caps",
    "object_loss_graph",
    "refine_targets",
    "noise_at_step",
    "train_object_layer",
]


class ObjectModel:
    """Object-capsule encoder/decoder over J part capsules."""

    def __init__(self, cfg: ObjectConfig, part_cfg: PartConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.part_cfg = part_cfg
        self.dtype = dtype
        in_dim = part_cfg.feature_dim + 7
        w, r = cfg.net_width, cfg.net_res_blocks
        self.spec_q_embed = NetSpec(in_dim, w, r, None)
        self.spec_q_project = NetSpec(w, w, r, 7)
        self.spec_f_embed = NetSpec(in_dim, w, r, None)
        self.spec_f_project = NetSpec(w, w, r, cfg.feature_dim)
        self.spec_dec = NetSpec(cfg.feature_dim, cfg.decoder_width, cfg.decoder_res_blocks, in_dim)
        self.params: dict[str, Tensor] = {}
        for spec, prefix in [
            (self.spec_q_embed, "q_embed"),
            (self.spec_q_project, "q_project"),
            (self.spec_f_embed, "f_embed"),
            (self.spec_f_project, "f_project"),
        ]:
            bias = pose_head_bias(dtype=dtype) if prefix == "q_project" else None
            self.params.update(init_mlp(spec, rng, prefix, dtype, out_bias=bias))
        part_bias = pose_head_bias(extra_dims=part_cfg.feature_dim, dtype=dtype)
        for j in range(part_cfg.n_parts):
            self.params.update(init_mlp(self.spec_dec, rng, f"dec{j}", dtype, out_bias=part_bias))

    def expected_param_count(self) -> int:
        n = sum(mlp_param_count(s) for s in (self.spec_q_embed, self.spec_q_project, self.spec_f_embed, self.spec_f_project))
        return n + self.part_cfg.n_parts * mlp_param_count(self.spec_dec)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _observe(self, z: Tensor, poses_c: Tensor, feats_c: Tensor) -> Tensor:
        """Part capsules in the frame of viewpoints z: (B, K, 7) against
        (B, 1, J, 7)/(B, 1, J, D) -> concatenated (B, K, J, D+7)."""
        z_inv = tpose_inverse(z)
        local = tpose_compose(T.expand_dims(z_inv, 2), poses_c)  # (B, K, J, 7)
        k = z.shape[1]
        ones = T.constant(np.ones((k, 1, 1), dtype=self.dtype))
        feats_b = feats_c * ones  # (B, K, J, D)
        return T.concat([local, feats_b], axis=-1)

    def encode(
        self,
        poses: np.ndarray,
        feats: np.ndarray,
        rng: np.random.Generator | None = None,
        mode: str = "train",
        noise_deg: float | None = None,
        views: int | None = None,
        voting_steps: int | None = None,
        h_init: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Multi-view agreement over the part set.

        Returns (object pose (B, 7), object feature (B, F), sigma (B, F)).
        Eval mode uses a single unperturbed viewpoint and the consensus
        mean; it is deterministic given ``h_init`` (or the rng that draws
        it).
        """
        cfg = self.cfg
        poses = np.asarray(poses, dtype=np.float64)
        feats = np.asarray(feats, dtype=np.float64)
        B, J, _ = poses.shape
        steps = cfg.voting_steps if voting_steps is None else voting_steps
        if rng is None and (h_init is None or mode == "train"):
            raise ValueError("encode needs an rng unless called in eval mode with an explicit h_init")
        if h_init is None:
            h_init = np.zeros((B, 7))
            h_init[:, 3:7] = random_rotation(rng, (B,))
            h_init[:, 0:3] = poses[:, :, 0:3].mean(axis=1)
        if mode == "train":
            K = cfg.views if views is None else views
            theta = cfg.noise_start_deg if noise_deg is None else noise_deg
            perturb = random_perturbations(rng, (B, K), theta, cfg.view_translation)
            z0 = pose_compose(h_init[:, None, :], perturb)
        elif mode == "eval":
            K = 1 if views is None else views
            z0 = np.repeat(h_init[:, None, :], K, axis=1)
        else:
            raise ValueError(f"unknown encode mode {mode!r}")

        poses_c = T.constant(poses[:, None, :, :].astype(self.dtype))  # (B, 1, J, 7)
        feats_c = T.constant(feats[:, None, :, :].astype(self.dtype))
        z = T.constant(z0.astype(self.dtype))  # (B, K, 7)
        for _ in range(max(1, steps)):
            observed = self._observe(z, poses_c, feats_c)
            emb = apply_mlp(observed, self.params, self.spec_q_embed, "q_embed")
            pooled = T.max_along(emb, axis=-2)  # (B, K, W)
            dz = split_pose_vote(apply_mlp(pooled, self.params, self.spec_q_project, "q_project"))
            z = tpose_compose(z, dz)

        observed = self._observe(z, poses_c, feats_c)
        emb_f = apply_mlp(observed, self.params, self.spec_f_embed, "f_embed")
        pooled_f = T.max_along(emb_f, axis=-2)
        votes = apply_mlp(pooled_f, self.params, self.spec_f_project, "f_project")  # (B, K, F)
        mu, sigma = consensus_moments(votes, axis=1)
        if mode == "train" and K > 1:
            eps = T.constant(rng.standard_normal(mu.shape).astype(self.dtype))
            h_feat = mu + sigma * eps
        else:
            h_feat = mu
        h_pose = z[:, 0, :]
        return h_pose, h_feat, sigma

    def decode(self, h_pose, h_feat, params: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        """Object capsule -> J part capsules, poses already moved into the
        object's frame.  Returns (poses (B, J, 7), features (B, J, D))."""
        params = self.params if params is None else params
        h_pose_t = h_pose if isinstance(h_pose, Tensor) else T.constant(np.asarray(h_pose, dtype=self.dtype))
        h_feat_t = h_feat if isinstance(h_feat, Tensor) else T.constant(np.asarray(h_feat, dtype=self.dtype))
        pose_list, feat_list = [], []
        for j in range(self.part_cfg.n_parts):
            vec = apply_mlp(h_feat_t, params, self.spec_dec, f"dec{j}")  # (B, D+7)
            canonical = split_pose_vote(vec[..., 0:7])
            pose_list.append(tpose_compose(h_pose_t, canonical))
            feat_list.append(vec[..., 7:])
        return T.stack(pose_list, axis=1), T.stack(feat_list, axis=1)

    def freeze(self) -> None:
        for p in self.params.values():
            p._rg = False

    def save(self, path, cfg_run: RunConfig) -> None:
        write_container(
            path,
            {name: p.data for name, p in self.params.items()},
            meta="object-model " + arch_hash_objects(cfg_run),
        )

    @classmethod
    def load(cls, path, cfg_run: RunConfig) -> "ObjectModel":
        records, meta = read_container(path)
        kind, _, stored_hash = meta.partition(" ")
        if kind != "object-model":
            raise ValueError(f"{path}: not an object-layer checkpoint")
        expected = arch_hash_objects(cfg_run)
        if stored_hash != expected:
            raise ValueError(
                f"{path}: checkpoint architecture hash {stored_hash[:12]} does not match "
                f"configured architecture {expected[:12]}"
            )
        model = cls(cfg_run.objects, cfg_run.parts, np.random.default_rng(0),
                    dtype=records[next(iter(records))].dtype.type)
        for name, p in model.params.items():
            if name not in records:
                raise ValueError(f"{path}: missing parameter record {name!r}")
            if records[name].shape != p.data.shape:
                raise ValueError(f"{path}: parameter {name!r} has shape {records[name].shape}, expected {p.data.shape}")
            p.data = records[name].copy()
        return model


def d_caps_graph(u: Tensor, t) -> Tensor:
    """Capsule distance: squared translation gap, antipodal-invariant
    rotation gap (1 - <u_r, t_r>^2), and squared feature gap.  Inputs are
    (..., 7+D) capsules; returns (...)."""
    t_t = t if isinstance(t, Tensor) else T.constant(np.asarray(t, dtype=u.dtype))
    dt = u[..., 0:3] - t_t[..., 0:3]
    trans = T.tsum(T.square(dt), axis=-1)
    dot = T.tsum(u[..., 3:7] * t_t[..., 3:7], axis=-1)
    rot = 1.0 - T.square(dot)
    df = u[..., 7:] - t_t[..., 7:]
    feat = T.tsum(T.square(df), axis=-1)
    return trans + rot + feat


def d_caps(u: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Plain-array capsule distance (same formula as the graph version)."""
    u = np.asarray(u)
    t = np.asarray(t)
    dt = ((u[..., 0:3] - t[..., 0:3]) ** 2).sum(axis=-1)
    dot = (u[..., 3:7] * t[..., 3:7]).sum(axis=-1)
    df = ((u[..., 7:] - t[..., 7:]) ** 2).sum(axis=-1)
    return dt + (1.0 - dot * dot) + df


def refine_targets(
    part_model: PartModel,
    X: np.ndarray,
    u_poses: np.ndarray,
    u_feats: np.ndarray,
    rng: np.random.Generator,
    mode: str = "eval",
    iters: int = 3,
    grid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Targets for the object loss: re-run the frozen part layer from the
    decoded capsules.  Purely numpy; carries no gradient.  Part index
    correspondence with the decoded capsules is preserved because each
    capsule evolves in place from its initialization."""
    poses, feats, _ = points_to_parts(
        part_model, X, rng, iters=iters, mode=mode, init=(u_poses, u_feats), grid=grid
    )
    return poses, feats


def object_loss_graph(
    X: np.ndarray,
    capsules: tuple[Tensor, Tensor],
    targets,
    part_model: PartModel,
    lam: float,
    grid: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Total object-layer loss and its two logged components.

    Sum over parts of capsule distance to the (constant) targets, plus
    ``lam`` times the Chamfer distance between the input points and the
    decoded part surfaces.  Returns (total, capsule term, Chamfer term),
    each a scalar mean over the batch; total = capsule + lam * chamfer.
    """
    u_poses, u_feats = capsules
    if isinstance(targets, tuple):
        t_poses, t_feats = targets
        t_arr = np.concatenate([np.asarray(t_poses), np.asarray(t_feats)], axis=-1)
    else:
        t_arr = np.asarray(targets)
    u_all = T.concat([u_poses, u_feats], axis=-1)
    caps_term = T.tmean(T.tsum(d_caps_graph(u_all, t_arr.astype(u_all.dtype)), axis=-1))
    if grid is None:
        grid = unit_square_samples(part_model.cfg.decoder_points, "grid", dtype=part_model.dtype)
    decoded = part_model.decode(u_poses, u_feats, grid)  # (B, J, M, 3)
    B = decoded.shape[0]
    union = T.reshape(decoded, (B, decoded.shape[1] * decoded.shape[2], 3))
    chamfer_term = T.tmean(chamfer_sq_graph(np.asarray(X, dtype=union.dtype), union))
    total = caps_term + lam * chamfer_term
    return total, caps_term, chamfer_term


def noise_at_step(cfg: ObjectConfig, step: int) -> float:
    """Viewpoint perturbation angle: flat at the start value until the ramp
    begins, linear to the end value across the ramp, flat after."""
    start, end = cfg.noise_ramp if len(cfg.noise_ramp) == 2 else (0, 0)
    if end <= start or cfg.noise_end_deg == cfg.noise_start_deg:
        return cfg.noise_start_deg if step < end or end <= start else cfg.noise_end_deg
    if step <= start:
        return cfg.noise_start_deg
    if step >= end:
        return cfg.noise_end_deg
    frac = (step - start) / (end - start)
    return cfg.noise_start_deg + frac * (cfg.noise_end_deg - cfg.noise_start_deg)


def train_object_layer(
    cfg_run: RunConfig,
    X_train: np.ndarray,
    part_model: PartModel,
    out_dir,
    seed: int | None = None,
    log_every: int = 25,
    progress=None,
) -> dict:
    """Train the object layer against a frozen part layer; writes
    checkpoint, metrics CSV, config, and manifest into ``out_dir``."""
    cfg = cfg_run.objects
    seed = cfg_run.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 202])
    part_model.freeze()
    model = ObjectModel(cfg, cfg_run.parts, rng)
    opt = Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, decay_steps=cfg.lr_decay_steps)
    logger = MetricsLogger(
        out_dir / "metrics.csv",
        ["step", "loss", "loss_capsule", "loss_chamfer", "vote_sigma", "noise_deg", "lr", "wall_time"],
    )
    grid = unit_square_samples(cfg_run.parts.decoder_points, "grid", dtype=part_model.dtype)
    n = len(X_train)
    t0 = time.perf_counter()
    loss_value = float("nan")
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = X_train[idx]
        if cfg.augment:
            batch = _augment_batch(batch, cfg_run.parts, rng)
        v_poses, v_feats, _ = points_to_parts(part_model, batch, rng, mode=cfg.part_inference, grid=grid)
        theta = noise_at_step(cfg, step)
        h_pose, h_feat, sigma = model.encode(v_poses, v_feats, rng, mode="train", noise_deg=theta)
        u_poses, u_feats = model.decode(h_pose, h_feat)
        t_poses, t_feats = refine_targets(
            part_model, batch, u_poses.data.astype(np.float64), u_feats.data.astype(np.float64),
            rng, mode=cfg.part_inference, grid=grid,
        )
        loss, caps_term, chamfer_term = object_loss_graph(
            batch, (u_poses, u_feats), (t_poses, t_feats), part_model, cfg.lam_chamfer, grid
        )
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise T.NonFiniteError(f"object training diverged at step {step}: loss={loss_value}")
        loss.backward()
        opt.step()
        opt.zero_grad()
        if step % log_every == 0 or step == cfg.steps:
            logger.log(step=step, loss=loss_value, loss_capsule=caps_term.item(),
                       loss_chamfer=chamfer_term.item(), vote_sigma=float(sigma.data.mean()),
                       noise_deg=theta, lr=opt.lr, wall_time=time.perf_counter() - t0)
            if progress is not None:
                progress(step, loss_value)

    wall = time.perf_counter() - t0
    ckpt = out_dir / "object.ckpt"
    model.save(ckpt, cfg_run)
    (out_dir / "config.txt").write_text(config_to_text(cfg_run))
    summary = {"loss_final": loss_value, "wall_time": wall, "checkpoint": str(ckpt)}
    write_manifest(out_dir / "manifest.txt", {
        "kind": "object-training",
        "seed": str(seed),
        "config_file": "config.txt",
        "config_hash": config_hash(cfg_run),
        "arch_hash": arch_hash_objects(cfg_run),
        "checkpoint": ckpt.name,
        "checkpoint_sha256": sha256_file(ckpt),
        "train_data_sha256": sha256_array(X_train),
        "part_params_sha256": sha256_array(np.concatenate(
            [part_model.params[k].data.reshape(-1) for k in sorted(part_model.params)])),
        "steps": str(cfg.steps),
        "loss_final": repr(loss_value),
        "wall_time_sec": f"{wall:.1f}",
    })
    return summary
