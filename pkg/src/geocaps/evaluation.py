"""Evaluation protocols for trained capsule models.

Three questions, asked of held-out objects:

* equivariance: does the recovered object pose rotate along with the
  input, whether the rotation is applied to the part capsules directly
  or to the raw points;
* invariance: does the object feature ignore pose, measured by instance
  retrieval and nearest-neighbor classification among rotated objects;
* setting comparison: how the training variants (number of agreement
  views, perturbation schedule, voting steps) rank against each other.

All randomness comes from per-object seed streams, so every report is
reproducible bit for bit and any single row can be recomputed in
isolation.  Stream layout (second seed word; the third is the object
index):

    11/12/13  parts-pose equivariance: rotation, part extraction, h init
    21/22/23  points-pose equivariance: rotation, parts of X1, parts of X2
    24/25     points-pose per-trial h inits (fourth word = trial)
    31..36    retrieval: db rotation, db parts, db h init,
              query rotation, query h init, query parts
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .config import RunConfig, config_hash
from .data import ASYMMETRIC_FAMILIES
from .formats import sha256_array, write_manifest
from .geometry import (
    chamfer_sq,
    pca_align,
    pose_compose,
    pose_inverse,
    quat_canonicalize,
    quat_conj,
    quat_from_axis_angle,
    quat_mul,
    quat_rotate,
    random_rotation,
    rotation_error,
)
from .objects import ObjectModel, train_object_layer
from .parts import PartModel, points_to_parts

__all__ = [
    "ABLATION_SETTINGS",
    "REFERENCE_TABLE",
    "POINTS_POSE_REFERENCE",
    "EvalReport",
    "encode_eval",
    "eval_equivariance_parts",
    "eval_equivariance_points",
    "eval_retrieval",
    "l2_ranking",
    "likely_asymmetric_subset",
    "vote_sigma_trend",
    "run_ablation",
]


# Training variants compared in the ablation grid.  Setting A has a
# single view, so the perturbation entries are inert there; E adds
# repeated pose voting on top of the wide perturbation ramp.
ABLATION_SETTINGS = {
    "A": {"views": 1, "noise_start_deg": 45.0, "noise_end_deg": 45.0, "voting_steps": 1},
    "B": {"views": 2, "noise_start_deg": 45.0, "noise_end_deg": 45.0, "voting_steps": 1},
    "C": {"views": 4, "noise_start_deg": 45.0, "noise_end_deg": 45.0, "voting_steps": 1},
    "D": {"views": 4, "noise_start_deg": 45.0, "noise_end_deg": 180.0, "voting_steps": 1},
    "E": {"views": 4, "noise_start_deg": 45.0, "noise_end_deg": 180.0, "voting_steps": 3},
}

# Published full-scale results for the same settings (rotation error,
# top-1, top-10, 1-NN class accuracy).  They come from training on 52k
# real objects for orders of magnitude more updates; desk runs record
# them as context only and are not expected to reproduce them.
REFERENCE_TABLE = {
    "A": (0.259, 0.286, 0.386, 0.485),
    "B": (0.135, 0.598, 0.765, 0.743),
    "C": (0.134, 0.620, 0.787, 0.754),
    "D": (0.106, 0.701, 0.857, 0.803),
    "E": (0.023, 0.943, 0.959, 0.960),
}
REFERENCE_NOTE = "reference columns are full-scale published values, not reproduced at desk scale"

# Full-scale points-pose alignment errors for context (same caveat).
POINTS_POSE_REFERENCE = {
    "pca": 0.42,
    "model_1_trial": 0.42,
    "model_10_trials": 0.16,
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


@dataclasses.dataclass
class EvalReport:
    """One protocol's outcome: headline scalars plus per-object audit rows.

    Accuracies and rotation errors are normalized to [0, 1].  ``rows``
    align with ``columns``; ``notes`` are free-form context lines that
    end up as comments in the CSV.
    """

    protocol: str
    seed: int
    scalars: dict
    columns: tuple
    rows: list
    notes: tuple = ()

    def summary(self) -> str:
        lines = [f"protocol {self.protocol} (seed {self.seed}, {len(self.rows)} objects)"]
        for name, value in self.scalars.items():
            lines.append(f"  {name} = {_fmt(value)}")
        lines.extend(f"  note: {n}" for n in self.notes)
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        lines = [f"# protocol={self.protocol}", f"# seed={self.seed}"]
        lines += [f"# {n}" for n in self.notes]
        lines += [f"# {name}={_fmt(value)}" for name, value in self.scalars.items()]
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def _protocol_rotation(rng: np.random.Generator) -> np.ndarray:
    """Evaluation rotation: uniform axis, angle uniform in [-pi, pi]."""
    axis = rng.standard_normal(3)
    angle = rng.uniform(-np.pi, np.pi)
    return quat_from_axis_angle(axis, angle)


def _rotation_pose(r: np.ndarray) -> np.ndarray:
    pose = np.zeros(r.shape[:-1] + (7,))
    pose[..., 3:7] = r
    return pose


def encode_eval(object_model: ObjectModel, poses: np.ndarray, feats: np.ndarray, q_init: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic eval-mode encoding from an explicit initial rotation.

    The initial viewpoint sits at the centroid of the part translations
    with orientation ``q_init``; a single unperturbed view is used.
    """
    poses = np.asarray(poses, dtype=np.float64)
    h_init = np.zeros((len(poses), 7))
    h_init[:, 0:3] = poses[:, :, 0:3].mean(axis=1)
    h_init[:, 3:7] = q_init
    h_pose, h_feat, _ = object_model.encode(poses, feats, mode="eval", h_init=h_init)
    return h_pose.data.astype(np.float64), h_feat.data.astype(np.float64)


def _relative_rotation(h2: np.ndarray, h1: np.ndarray) -> np.ndarray:
    """Rotation part of h2 composed with the inverse of h1."""
    return pose_compose(h2, pose_inverse(h1))[..., 3:7]


def likely_asymmetric_subset(dataset: dict, splits=("val", "test")) -> tuple[np.ndarray, np.ndarray, list]:
    """Evaluation objects: those from families without rotational
    self-symmetry, pooled across the given splits.  Family is read from
    the object id prefix."""
    pts, labels, ids = [], [], []
    for split in splits:
        if split not in dataset:
            continue
        part = dataset[split]
        for x, label, oid in zip(part["points"], part["labels"], part["ids"]):
            if oid.rsplit("-", 1)[0] in ASYMMETRIC_FAMILIES:
                pts.append(x)
                labels.append(label)
                ids.append(oid)
    if not pts:
        raise ValueError(f"no likely-asymmetric objects found in splits {splits}")
    return np.stack(pts), np.asarray(labels, dtype=np.int64), ids


def eval_equivariance_parts(
    object_model: ObjectModel,
    part_model: PartModel,
    points: np.ndarray,
    seed: int,
    ids=None,
) -> EvalReport:
    """Pose equivariance of the object layer alone.

    Parts are extracted once per object; a random rotation applied to
    their poses should surface as the relative transform between the two
    encodings.  Both encodings share the same initial viewpoint rotation,
    so the identity rotation gives error 0 exactly.
    """
    points = np.asarray(points)
    n = len(points)
    ids = [f"obj-{i:04d}" for i in range(n)] if ids is None else list(ids)
    columns = ("index", "id", "rotation_error",
               "r_w", "r_x", "r_y", "r_z",
               "rhat_w", "rhat_x", "rhat_y", "rhat_z")
    rows = []
    errors = np.empty(n)
    for i in range(n):
        r = _protocol_rotation(np.random.default_rng([seed, 11, i]))
        v_poses, v_feats, _ = points_to_parts(
            part_model, points[i][None], np.random.default_rng([seed, 12, i]))
        v2_poses = pose_compose(_rotation_pose(r)[None, None, :], v_poses)
        q0 = random_rotation(np.random.default_rng([seed, 13, i]))
        h1, _ = encode_eval(object_model, v_poses, v_feats, q0)
        h2, _ = encode_eval(object_model, v2_poses, v_feats, q0)
        r_hat = _relative_rotation(h2[0], h1[0])
        errors[i] = rotation_error(r, r_hat)
        rows.append((i, ids[i], errors[i], *r, *r_hat))
    scalars = {"rotation_error": float(errors.mean()), "n_objects": n}
    return EvalReport("equivariance-parts-pose", seed, scalars, columns, rows)


def eval_equivariance_points(
    object_model: ObjectModel,
    part_model: PartModel,
    points: np.ndarray,
    seed: int,
    trials: int = 10,
    ids=None,
) -> EvalReport:
    """Pose equivariance of the full pipeline, phrased as cloud alignment.

    Each object is rotated as raw points and both copies are encoded
    independently (parts extracted per copy, then the object layer).
    Every trial restarts both encodings from fresh initial viewpoints;
    the kept transform is the one whose alignment has the smallest
    Chamfer distance.  Trial t draws from the same streams regardless of
    ``trials``, so a larger budget extends rather than reshuffles the
    candidate list, and ties keep the earliest trial.  A PCA alignment
    of the same pair is reported alongside.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    points = np.asarray(points)
    n = len(points)
    ids = [f"obj-{i:04d}" for i in range(n)] if ids is None else list(ids)
    columns = ("index", "id", "rotation_error", "rotation_error_trial1",
               "pca_error", "selected_trial", "chamfer_selected",
               "r_w", "r_x", "r_y", "r_z",
               "rhat_w", "rhat_x", "rhat_y", "rhat_z")
    rows = []
    err_sel = np.empty(n)
    err_one = np.empty(n)
    err_pca = np.empty(n)
    for i in range(n):
        r = _protocol_rotation(np.random.default_rng([seed, 21, i]))
        X1 = points[i].astype(np.float64)
        X2 = quat_rotate(r, X1)
        v1 = points_to_parts(part_model, X1[None], np.random.default_rng([seed, 22, i]))
        v2 = points_to_parts(part_model, X2[None], np.random.default_rng([seed, 23, i]))
        chams = np.empty(trials)
        r_hats = np.empty((trials, 4))
        for t in range(trials):
            q1 = random_rotation(np.random.default_rng([seed, 24, i, t]))
            q2 = random_rotation(np.random.default_rng([seed, 25, i, t]))
            h1, _ = encode_eval(object_model, v1[0], v1[1], q1)
            h2, _ = encode_eval(object_model, v2[0], v2[1], q2)
            r_hats[t] = _relative_rotation(h2[0], h1[0])
            chams[t] = chamfer_sq(quat_rotate(r_hats[t], X1), X2)
        sel = int(np.argmin(chams))
        err_sel[i] = rotation_error(r, r_hats[sel])
        err_one[i] = rotation_error(r, r_hats[0])
        r_pca = quat_canonicalize(quat_mul(pca_align(X2).r, quat_conj(pca_align(X1).r)))
        err_pca[i] = rotation_error(r, r_pca)
        rows.append((i, ids[i], err_sel[i], err_one[i], err_pca[i],
                     sel, chams[sel], *r, *r_hats[sel]))
    scalars = {
        "rotation_error": float(err_sel.mean()),
        "rotation_error_trial1": float(err_one.mean()),
        "pca_error": float(err_pca.mean()),
        "trials": trials,
        "n_objects": n,
    }
    notes = tuple(f"full-scale reference {k}={v}" for k, v in POINTS_POSE_REFERENCE.items())
    notes += ("reference values are from large-scale training, recorded for context only",)
    return EvalReport("equivariance-points-pose", seed, scalars, columns, rows, notes)


def l2_ranking(db_features: np.ndarray, query_features: np.ndarray) -> np.ndarray:
    """Exact L2 ranking of every query against the database.

    Returns (n_queries, n_db) database indices, best match first.  Ties
    resolve to the lower index, which is the earlier object id for the
    id-sorted databases built here.
    """
    db = np.asarray(db_features, dtype=np.float64)
    q = np.asarray(query_features, dtype=np.float64)
    diff = q[:, None, :] - db[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    return np.argsort(d2, axis=1, kind="stable")


def eval_retrieval(
    object_model: ObjectModel,
    part_model: PartModel,
    points: np.ndarray,
    labels: np.ndarray,
    ids,
    seed: int,
    mode: str = "parts-pose",
) -> EvalReport:
    """Instance retrieval among rotated objects, by object-feature L2.

    parts-pose: database features come from each object's part capsules
    with a random rotation applied to their poses; the query rotates
    those same capsules once more.  points-pose: database and query
    rotate the raw points independently and re-run part extraction, so
    the whole pipeline is inside the loop.  Scores are top-1 / top-10
    instance hits and whether the best match shares the query's class.
    """
    if mode not in ("parts-pose", "points-pose"):
        raise ValueError(f"unknown retrieval mode {mode!r}")
    points = np.asarray(points)
    labels = np.asarray(labels)
    ids = list(ids)
    n = len(points)
    if not (len(labels) == len(ids) == n):
        raise ValueError("points, labels and ids must have matching lengths")
    position = {oid: j for j, oid in enumerate(ids)}
    if len(position) != n:
        raise ValueError("object ids must be unique")

    feat_dim = object_model.cfg.feature_dim
    db = np.empty((n, feat_dim))
    queries = np.empty((n, feat_dim))
    for i in range(n):
        r_db = _protocol_rotation(np.random.default_rng([seed, 31, i]))
        r_q = _protocol_rotation(np.random.default_rng([seed, 34, i]))
        q_db = random_rotation(np.random.default_rng([seed, 33, i]))
        q_q = random_rotation(np.random.default_rng([seed, 35, i]))
        if mode == "parts-pose":
            v_poses, v_feats, _ = points_to_parts(
                part_model, points[i][None], np.random.default_rng([seed, 32, i]))
            db_poses = pose_compose(_rotation_pose(r_db)[None, None, :], v_poses)
            _, db[i] = encode_eval(object_model, db_poses, v_feats, q_db)
            query_poses = pose_compose(_rotation_pose(r_q)[None, None, :], db_poses)
            _, queries[i] = encode_eval(object_model, query_poses, v_feats, q_q)
        else:
            X = points[i].astype(np.float64)
            vdb = points_to_parts(
                part_model, quat_rotate(r_db, X)[None], np.random.default_rng([seed, 32, i]))
            _, db[i] = encode_eval(object_model, vdb[0], vdb[1], q_db)
            vq = points_to_parts(
                part_model, quat_rotate(r_q, X)[None], np.random.default_rng([seed, 36, i]))
            _, queries[i] = encode_eval(object_model, vq[0], vq[1], q_q)

    order = l2_ranking(db, queries)
    columns = ("index", "id", "label", "true_rank", "top1", "top10", "nn_id", "nn_class_match")
    rows = []
    top1 = np.empty(n)
    top10 = np.empty(n)
    nn_class = np.empty(n)
    for i in range(n):
        true_pos = position.get(ids[i])
        if true_pos is None:
            raise ValueError(f"query object {ids[i]!r} is missing from the database")
        rank = int(np.nonzero(order[i] == true_pos)[0][0]) + 1
        nn = int(order[i, 0])
        top1[i] = rank == 1
        top10[i] = rank <= 10
        nn_class[i] = labels[nn] == labels[i]
        rows.append((i, ids[i], int(labels[i]), rank, int(top1[i]), int(top10[i]),
                     ids[nn], int(nn_class[i])))
    scalars = {
        "top1": float(top1.mean()),
        "top10": float(top10.mean()),
        "nn_class": float(nn_class.mean()),
        "n_objects": n,
    }
    return EvalReport(f"retrieval-{mode}", seed, scalars, columns, rows)


def vote_sigma_trend(metrics_csv, frac: float = 0.1) -> tuple[float, float]:
    """Mean feature-vote sigma over the first and last ``frac`` of the
    logged training steps, read back from a metrics CSV."""
    lines = [ln for ln in Path(metrics_csv).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    col = header.index("vote_sigma")
    values = np.array([float(ln.split(",")[col]) for ln in lines[1:]])
    if len(values) == 0:
        raise ValueError(f"no metric rows in {metrics_csv}")
    m = max(1, int(round(frac * len(values))))
    return float(values[:m].mean()), float(values[-m:].mean())


def run_ablation(
    cfg_run: RunConfig,
    dataset: dict,
    part_model: PartModel,
    out_dir,
    seed: int,
    settings: str = "ABCDE",
    progress=None,
) -> list[dict]:
    """Train and score each requested setting on the same data and seed.

    Every setting gets its own subdirectory with checkpoint, metrics and
    per-protocol reports; the comparison lands in ``ablation.csv`` with
    the full-scale reference values attached as clearly labeled metadata
    columns.  Returns the table as a list of row dicts.
    """
    unknown = [s for s in settings if s not in ABLATION_SETTINGS]
    if unknown:
        raise ValueError(f"unknown ablation settings {unknown}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_points, eval_labels, eval_ids = likely_asymmetric_subset(dataset)
    train_points = dataset["train"]["points"]

    table = []
    for name in settings:
        cfg_obj = dataclasses.replace(cfg_run.objects, **ABLATION_SETTINGS[name])
        cfg_setting = dataclasses.replace(cfg_run, objects=cfg_obj)
        sub = out_dir / f"setting_{name}"
        if progress is not None:
            progress(f"setting {name}: training")
        train_object_layer(cfg_setting, train_points, part_model, sub, seed=seed,
                           progress=None if progress is None else
                           (lambda step, loss, _n=name: progress(f"setting {_n}: step {step} loss {loss:.4f}")))
        model = ObjectModel.load(sub / "object.ckpt", cfg_setting)
        if progress is not None:
            progress(f"setting {name}: evaluating")
        rep_eq = eval_equivariance_parts(model, part_model, eval_points, seed, ids=eval_ids)
        rep_ret = eval_retrieval(model, part_model, eval_points, eval_labels, eval_ids,
                                 seed, mode="parts-pose")
        rep_eq.write_csv(sub / "equivariance_parts.csv")
        rep_ret.write_csv(sub / "retrieval_parts_pose.csv")
        ref = REFERENCE_TABLE[name]
        table.append({
            "setting": name,
            **ABLATION_SETTINGS[name],
            "rotation_error": rep_eq.scalars["rotation_error"],
            "top1": rep_ret.scalars["top1"],
            "top10": rep_ret.scalars["top10"],
            "nn_class": rep_ret.scalars["nn_class"],
            "ref_rotation_error": ref[0],
            "ref_top1": ref[1],
            "ref_top10": ref[2],
            "ref_nn_class": ref[3],
        })

    columns = list(table[0].keys())
    lines = [f"# ablation over settings {','.join(settings)} (seed {seed}, "
             f"{len(eval_ids)} eval objects)",
             f"# {REFERENCE_NOTE}",
             ",".join(columns)]
    for row in table:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")

    summary = [f"ablation on {len(eval_ids)} likely-asymmetric eval objects, seed {seed}",
               REFERENCE_NOTE, ""]
    for row in table:
        summary.append(
            f"setting {row['setting']}: rotation_error {row['rotation_error']:.4f} "
            f"(ref {row['ref_rotation_error']}), top1 {row['top1']:.4f} (ref {row['ref_top1']}), "
            f"top10 {row['top10']:.4f} (ref {row['ref_top10']}), "
            f"nn_class {row['nn_class']:.4f} (ref {row['ref_nn_class']})")
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    write_manifest(out_dir / "manifest.txt", {
        "kind": "ablation",
        "seed": str(seed),
        "settings": ",".join(settings),
        "config_hash": config_hash(cfg_run),
        "train_data_sha256": sha256_array(train_points),
        "part_params_sha256": sha256_array(np.concatenate(
            [part_model.params[k].data.reshape(-1) for k in sorted(part_model.params)])),
        "n_eval_objects": str(len(eval_ids)),
        "table": "ablation.csv",
    })
    return table
