"""On-disk formats: point clouds, PLY exports, capsule dumps, object
feature databases, metrics CSV, and run manifests.

Text clouds are one ``x y z`` line per point with an optional integer
label column; floats are written with ``repr`` so reading back is exact
at float64.  The binary cloud variant reuses the named-array container.
All writers are deterministic: same data, same bytes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .container import read_container, write_container

__all__ = [
    "write_cloud_text",
    "read_cloud_text",
    "write_cloud_binary",
    "read_cloud_binary",
    "write_ply",
    "write_capsules_text",
    "read_capsules_text",
    "write_feature_db",
    "read_feature_db",
    "MetricsLogger",
    "write_manifest",
    "read_manifest",
    "sha256_file",
    "sha256_array",
]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_cloud_text(path, points: np.ndarray, labels: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {points.shape}")
    lines = []
    if labels is None:
        for p in points:
            lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    else:
        labels = np.asarray(labels)
        if labels.shape != (len(points),):
            raise ValueError(f"labels shape {labels.shape} does not match {len(points)} points")
        for p, l in zip(points, labels):
            lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(l)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud_text(path) -> tuple[np.ndarray, np.ndarray | None]:
    points, labels = [], []
    has_labels = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if has_labels is None:
            has_labels = len(parts) == 4
        if len(parts) != (4 if has_labels else 3):
            raise ValueError(f"{path}:{lineno}: expected {'4' if has_labels else '3'} columns, got {len(parts)}")
        points.append([float(parts[0]), float(parts[1]), float(parts[2])])
        if has_labels:
            labels.append(int(parts[3]))
    if not points:
        raise ValueError(f"{path}: empty point cloud")
    pts = np.array(points, dtype=np.float64)
    return pts, (np.array(labels, dtype=np.int64) if has_labels else None)


def write_cloud_binary(path, points: np.ndarray, labels: np.ndarray | None = None) -> None:
    records = {"points": np.asarray(points, dtype=np.float64)}
    if labels is not None:
        records["labels"] = np.asarray(labels, dtype=np.int64)
    write_container(path, records, meta="point-cloud")


def read_cloud_binary(path) -> tuple[np.ndarray, np.ndarray | None]:
    records, _ = read_container(path)
    if "points" not in records:
        raise ValueError(f"{path}: no 'points' record")
    return records["points"], records.get("labels")


_PALETTE = np.array(
    [
        [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
        [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
        [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
    ],
    dtype=np.uint8,
)


def write_ply(path, points: np.ndarray, part_ids: np.ndarray | None = None) -> None:
    """ASCII PLY 1.0 with per-vertex colors keyed by part id."""
    points = np.asarray(points, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {points.shape}")
    n = len(points)
    if part_ids is None:
        colors = np.full((n, 3), 200, dtype=np.uint8)
    else:
        part_ids = np.asarray(part_ids, dtype=np.int64)
        if part_ids.shape != (n,):
            raise ValueError(f"part_ids shape {part_ids.shape} does not match {n} points")
        colors = _PALETTE[part_ids % len(_PALETTE)]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, colors):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_capsules_text(path, poses: np.ndarray, features: np.ndarray) -> None:
    """One line per capsule: tx ty tz r0 r1 r2 r3 then the feature values."""
    poses = np.asarray(poses, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[1] != 7 or features.ndim != 2 or len(features) != len(poses):
        raise ValueError(f"capsule dump needs (J, 7) poses and (J, D) features, got {poses.shape} and {features.shape}")
    lines = []
    for p, f in zip(poses, features):
        lines.append(" ".join(_fmt(v) for v in np.concatenate([p, f])))
    Path(path).write_text("\n".join(lines) + "\n")


def read_capsules_text(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in line.split()])
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 8:
        raise ValueError(f"{path}: capsule lines need 7 pose values plus features")
    return arr[:, :7], arr[:, 7:]


def write_feature_db(path, ids: list[str], poses: np.ndarray, features: np.ndarray) -> None:
    """Object-capsule records: for each object its id, 7-float pose, D-float
    feature.  Stored through the named-array container with stable keys."""
    poses = np.asarray(poses, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if len(ids) != len(poses) or len(ids) != len(features):
        raise ValueError("ids, poses, and features must have equal lengths")
    id_blob = "\n".join(ids)
    write_container(
        path,
        {"poses": poses, "features": features},
        meta="feature-db\n" + id_blob,
    )


def read_feature_db(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    records, meta = read_container(path)
    header, _, id_blob = meta.partition("\n")
    if header != "feature-db":
        raise ValueError(f"{path}: not a feature database")
    ids = id_blob.split("\n") if id_blob else []
    return ids, records["poses"], records["features"]


class MetricsLogger:
    """Append-only CSV with a fixed column order."""

    def __init__(self, path, columns: list[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.write_text(",".join(self.columns) + "\n")

    def log(self, **values) -> None:
        row = []
        for c in self.columns:
            v = values.get(c, "")
            row.append(_fmt(v) if isinstance(v, float) else str(v))
        with open(self.path, "a") as f:
            f.write(",".join(row) + "\n")


def write_manifest(path, entries: dict[str, str]) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_array(a: np.ndarray) -> str:
    """Content hash of an array's raw little-endian bytes.

    Used by run manifests to pin down exactly which data went into a run,
    so a rerun can verify its inputs before comparing outputs.
    """
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return hashlib.sha256(a.tobytes()).hexdigest()
