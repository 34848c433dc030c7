"""Synthetic shape families, dataset generation, and augmentation.

Six parametric families stand in for scanned-object datasets.  Each
instance draws its dimensions from a per-family range, samples points
uniformly over the shape surface (area-weighted across faces), and is
normalized to fit [-1, 1]^3 exactly.  Four of the families are built so
that no rotation short of identity maps the shape onto itself; those are
the ones pose-recovery metrics are scored on, and the generator checks
the property on every instance it emits.

Everything is deterministic: object k of a dataset draws from its own
``default_rng([seed, k])``, so regenerating with the same seed yields
byte-identical files.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .config import ALL_FAMILIES, DataConfig, RunConfig, config_hash, config_to_text
from .container import read_container, write_container
from .formats import write_manifest
from .geometry import chamfer_sq, pose_apply, quat_from_axis_angle, quat_from_matrix, quat_rotate

__all__ = [
    "FAMILIES",
    "ASYMMETRIC_FAMILIES",
    "DatasetError",
    "sample_family",
    "instance_geometry",
    "sample_geometry",
    "normalize_cloud",
    "octahedral_rotations",
    "symmetry_margin",
    "instance_asymmetry",
    "augment_cloud",
    "generate_dataset",
    "write_dataset",
    "load_dataset",
]

FAMILIES = ALL_FAMILIES
ASYMMETRIC_FAMILIES = ("wedge_chair", "l_bracket", "tee", "step_block")

# Asymmetry validation compares each rotated resample of an instance
# against an unrotated resample; subtracting the unrotated Chamfer cancels
# the finite-sampling floor, leaving only genuine shape asymmetry.
VALIDATION_POINTS = 512
SYMMETRY_EPS = 4e-3
MAX_DRAWS = 8


class DatasetError(ValueError):
    """Raised for unknown families or instances violating their contract."""


def _cuboid_faces(lo, hi):
    """The 6 axis-aligned faces of a box as (axis, fixed value, lo, hi)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        area = (hi[others[0]] - lo[others[0]]) * (hi[others[1]] - lo[others[1]])
        for value in (lo[axis], hi[axis]):
            faces.append((axis, value, lo, hi, area))
    return faces


def _sample_cuboids(rng: np.random.Generator, cuboids, n: int) -> np.ndarray:
    """Area-weighted uniform samples over the union of cuboid surfaces."""
    faces = []
    for lo, hi in cuboids:
        faces.extend(_cuboid_faces(lo, hi))
    areas = np.array([f[4] for f in faces])
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.uniform(0.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f_idx, (axis, value, lo, hi, _) in enumerate(faces):
        m = pick == f_idx
        if not m.any():
            continue
        a, b = [ax for ax in range(3) if ax != axis]
        pts[m, axis] = value
        pts[m, a] = lo[a] + u[m, 0] * (hi[a] - lo[a])
        pts[m, b] = lo[b] + u[m, 1] * (hi[b] - lo[b])
    return pts


def _sample_cylinder(rng: np.random.Generator, radius: float, height: float, n: int) -> np.ndarray:
    """Uniform samples on a solid cylinder's surface (lateral plus caps),
    axis along z, centered at the origin."""
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius * radius
    areas = np.array([lateral, cap, cap])
    region = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    pts = np.empty((n, 3))
    side = region == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = (u[side] - 0.5) * height
    for which, z in ((1, -height / 2), (2, height / 2)):
        m = region == which
        r = radius * np.sqrt(u[m])
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _box_params(rng):
    half = rng.uniform(0.25, 0.5, size=3)
    return [(-half, half)]


def _wedge_chair_params(rng):
    """Seat slab, tall back on one side, two legs under the front edge."""
    w = rng.uniform(0.35, 0.5)          # half width (x)
    d = rng.uniform(0.3, 0.45)          # half depth (y)
    seat_h = rng.uniform(0.08, 0.14)
    back_h = rng.uniform(0.5, 0.8)
    back_t = rng.uniform(0.06, 0.12)
    leg = rng.uniform(0.05, 0.09)
    leg_h = rng.uniform(0.25, 0.4)
    seat = (np.array([-w, -d, 0.0]), np.array([w, d, seat_h]))
    back = (np.array([-w, d - back_t, seat_h]), np.array([w, d, seat_h + back_h]))
    leg1 = (np.array([-w, -d, -leg_h]), np.array([-w + leg, -d + leg, 0.0]))
    leg2 = (np.array([w - leg, -d, -leg_h]), np.array([w, -d + leg, 0.0]))
    return [seat, back, leg1, leg2]


def _l_bracket_params(rng):
    """Two slabs joined at a corner, deliberately unequal arms."""
    t = rng.uniform(0.1, 0.16)
    a = rng.uniform(0.55, 0.8)          # long arm (x)
    b = rng.uniform(0.3, 0.45)          # short arm (z)
    depth = rng.uniform(0.2, 0.35)
    base = (np.array([0.0, -depth, 0.0]), np.array([a, depth, t]))
    wall = (np.array([0.0, -depth, t]), np.array([t, depth, t + b]))
    return [base, wall]


def _tee_params(rng):
    """Crossbar with a stem whose foot is offset along the bar, so the
    180-degree flip about the stem axis no longer closes."""
    bar_len = rng.uniform(0.6, 0.9)
    bar_t = rng.uniform(0.1, 0.16)
    stem_len = rng.uniform(0.4, 0.6)
    stem_t = rng.uniform(0.1, 0.16)
    offset = rng.uniform(0.12, 0.28) * bar_len
    depth = rng.uniform(0.08, 0.14)
    bar = (np.array([-bar_len, -depth, 0.0]), np.array([bar_len, depth, bar_t]))
    stem = (
        np.array([offset - stem_t, -depth, -stem_len]),
        np.array([offset + stem_t, depth, 0.0]),
    )
    return [bar, stem]


def _step_block_params(rng):
    """Three stacked slabs shrinking toward one corner: a small staircase."""
    w = rng.uniform(0.4, 0.55)
    d = rng.uniform(0.3, 0.45)
    h = rng.uniform(0.12, 0.2)
    shrink = rng.uniform(0.55, 0.75)
    blocks = []
    x_hi = w
    for level in range(3):
        width = w * shrink**level
        blocks.append(
            (
                np.array([x_hi - 2 * width, -d, level * h]),
                np.array([x_hi, d, (level + 1) * h]),
            )
        )
    return blocks


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center the bounding box and scale so the cloud fits [-1, 1]^3 with
    the largest extent touching the boundary."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    mid = (lo + hi) / 2
    half = (hi - lo).max() / 2
    if half <= 0:
        raise DatasetError("degenerate cloud: zero extent")
    return (points - mid) / half


def instance_geometry(name: str, rng: np.random.Generator):
    """Draw one instance's parametric geometry (separately from sampling, so
    an instance can be resampled at any density)."""
    if name == "box":
        return ("cuboids", _box_params(rng))
    if name == "tube":
        return ("cylinder", (rng.uniform(0.25, 0.45), rng.uniform(0.8, 1.6)))
    if name == "wedge_chair":
        return ("cuboids", _wedge_chair_params(rng))
    if name == "l_bracket":
        return ("cuboids", _l_bracket_params(rng))
    if name == "tee":
        return ("cuboids", _tee_params(rng))
    if name == "step_block":
        return ("cuboids", _step_block_params(rng))
    raise DatasetError(f"unknown shape family {name!r}")


def sample_geometry(geometry, rng: np.random.Generator, n_points: int) -> np.ndarray:
    kind, params = geometry
    if kind == "cuboids":
        pts = _sample_cuboids(rng, params, n_points)
    else:
        radius, height = params
        pts = _sample_cylinder(rng, radius, height, n_points)
    return normalize_cloud(pts)


def sample_family(name: str, rng: np.random.Generator, n_points: int) -> np.ndarray:
    """One normalized instance of a named family: (n_points, 3) float64."""
    return sample_geometry(instance_geometry(name, rng), rng, n_points)


def octahedral_rotations() -> np.ndarray:
    """The 24 proper rotations of the cube as canonical quaternions,
    identity first."""
    mats = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        for sx in (1, -1):
            for sy in (1, -1):
                for sz in (1, -1):
                    m = np.zeros((3, 3))
                    m[0, perm[0]] = sx
                    m[1, perm[1]] = sy
                    m[2, perm[2]] = sz
                    if np.linalg.det(m) > 0:
                        mats.append(m)
    quats = np.stack([quat_from_matrix(m) for m in mats])
    order = np.argsort(-quats[:, 0], kind="stable")  # identity (w=1) first
    return quats[order]


def symmetry_margin(points: np.ndarray, rotations: np.ndarray | None = None) -> float:
    """Smallest Chamfer distance between the cloud and any non-identity
    rotation of itself over the given grid (octahedral by default)."""
    if rotations is None:
        rotations = octahedral_rotations()
    keep = rotations[rotations[:, 0] <= 1.0 - 1e-12]  # drop identity
    rotated = quat_rotate(keep[:, None, :], points[None, :, :])
    tiled = np.broadcast_to(points, rotated.shape)
    return float(chamfer_sq(tiled, rotated).min())


def instance_asymmetry(geometry, rng: np.random.Generator, rotations: np.ndarray,
                       n_points: int = VALIDATION_POINTS) -> float:
    """Sampling-noise-corrected asymmetry of one parametric instance.

    Draws two independent clouds X, Y of the instance and returns
    min over non-identity grid rotations r of chamfer(X, rY) minus
    chamfer(X, Y).  For a truly r-symmetric surface rY is just another
    resample, so the difference sits at zero up to estimator noise; any
    genuine asymmetry pushes it up by the shape's self-distance."""
    X = sample_geometry(geometry, rng, n_points)
    Y = sample_geometry(geometry, rng, n_points)
    keep = rotations[rotations[:, 0] <= 1.0 - 1e-12]
    rotated = quat_rotate(keep[:, None, :], Y[None, :, :])
    tiled = np.broadcast_to(X, rotated.shape)
    base = float(chamfer_sq(X, Y))
    return float(chamfer_sq(tiled, rotated).min() - base)


def augment_cloud(
    X: np.ndarray,
    rng: np.random.Generator,
    translation: float = 1.0,
    angle_deg: float = 180.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Rigid augmentation: rotation about a random axis by a random angle in
    [-angle_deg, angle_deg], then translation by a vector uniform in
    [-translation, translation]^3.  Returns the moved cloud and the pose
    that maps the original onto it.  Zero ranges give the identity."""
    pose = np.zeros(7)
    pose[3] = 1.0
    if angle_deg > 0:
        axis = rng.standard_normal(3)
        angle = rng.uniform(-angle_deg, angle_deg)
        pose[3:7] = quat_from_axis_angle(axis, np.deg2rad(angle))
    pose[0:3] = rng.uniform(-translation, translation, size=3) if translation > 0 else 0.0
    return pose_apply(pose, X), pose


def generate_dataset(cfg: DataConfig, seed: int) -> dict:
    """All splits in memory.

    Returns {split: {"points": (n, N, 3) float32, "labels": (n,) int64,
    "ids": list[str]}}.  Object k (counted across the whole dataset) uses
    family k mod len(families) and rng ``default_rng([seed, k])``; every
    likely-asymmetric instance is checked against the octahedral grid.
    """
    for f in cfg.families:
        if f not in FAMILIES:
            raise DatasetError(f"unknown shape family {f!r}")
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    rotations = octahedral_rotations()
    out = {}
    k = 0
    for split, n in counts.items():
        pts = np.empty((n, cfg.n_points, 3), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        ids = []
        for i in range(n):
            family = cfg.families[k % len(cfg.families)]
            rng = np.random.default_rng([seed, k])
            for attempt in range(MAX_DRAWS):
                geometry = instance_geometry(family, rng)
                if family not in ASYMMETRIC_FAMILIES:
                    break
                margin = instance_asymmetry(geometry, rng, rotations)
                if margin >= SYMMETRY_EPS:
                    break
            else:
                raise DatasetError(
                    f"{family} instance {k} stayed nearly rotation-symmetric "
                    f"after {MAX_DRAWS} draws (last margin {margin:.2e} < {SYMMETRY_EPS})"
                )
            cloud = sample_geometry(geometry, rng, cfg.n_points)
            pts[i] = cloud.astype(np.float32)
            labels[i] = cfg.families.index(family)
            ids.append(f"{family}-{k:04d}")
            k += 1
        out[split] = {"points": pts, "labels": labels, "ids": ids}
    return out


def write_dataset(dataset: dict, out_dir, cfg_run: RunConfig, seed: int) -> None:
    """Write split containers, the human-readable index, and a manifest.
    Writes are atomic (temp file then rename)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_lines = ["# id class split file seed"]
    for split, block in dataset.items():
        path = out_dir / f"{split}.bin"
        _atomic_write_container(
            path,
            {"points": block["points"], "labels": block["labels"]},
            meta="clouds\n" + "\n".join(block["ids"]),
        )
        for oid, label in zip(block["ids"], block["labels"]):
            family = dataset_family(cfg_run.data, int(label))
            index_lines.append(f"{oid} {family} {split} {path.name} {seed}")
    (out_dir / "index.txt").write_text("\n".join(index_lines) + "\n")
    (out_dir / "config.txt").write_text(config_to_text(cfg_run))
    write_manifest(out_dir / "manifest.txt", {
        "kind": "dataset",
        "seed": str(seed),
        "config_file": "config.txt",
        "config_hash": config_hash(cfg_run),
        "families": ",".join(cfg_run.data.families),
        "splits": ",".join(f"{s}:{len(b['ids'])}" for s, b in dataset.items()),
        "n_points": str(cfg_run.data.n_points),
    })


def dataset_family(cfg: DataConfig, label: int) -> str:
    return cfg.families[label]


def _atomic_write_container(path: Path, records: dict, meta: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(fd)
    try:
        write_container(tmp, records, meta=meta)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(data_dir) -> dict:
    """Read back what ``write_dataset`` wrote."""
    data_dir = Path(data_dir)
    out = {}
    for split in ("train", "val", "test"):
        path = data_dir / f"{split}.bin"
        if not path.exists():
            raise DatasetError(f"missing dataset split file {path}")
        records, meta = read_container(path)
        kind, _, id_blob = meta.partition("\n")
        if kind != "clouds":
            raise DatasetError(f"{path}: not a point-cloud container")
        ids = id_blob.split("\n") if id_blob else []
        if len(ids) != len(records["points"]):
            raise DatasetError(f"{path}: id list does not match cloud count")
        out[split] = {"points": records["points"], "labels": records["labels"], "ids": ids}
    return out
