"""Rigid-body math, least-squares alignment, pose metrics and point-cloud IO.

Everything here is pure numpy and side-effect free.  Poses map object
coordinates into camera coordinates: p_cam = R p_obj + t, units meters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROTATION_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Input configuration admits no unique solution."""


def _as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an Nx3 array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform with R in SO(3) and t in R^3 (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with optional per-point RGB in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray | None = None
    frame: str = "camera"

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.frame not in ("camera", "object"):
            raise ValueError(f"unknown frame {self.frame!r}")
        cols = self.colors
        if cols is not None:
            cols = np.asarray(cols, dtype=np.float64)
            if cols.shape != pts.shape:
                raise ValueError("colors must be Nx3 matching the points")
            if cols.min() < 0.0 or cols.max() > 1.0:
                raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", cols)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SymmetrySpec:
    """Discrete object symmetry as a list of rotations (identity included)."""

    kind: str = "none"
    transforms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("none", "discrete"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        mats = tuple(np.asarray(m, dtype=np.float64).reshape(3, 3) for m in self.transforms)
        for m in mats:
            if np.abs(m.T @ m - np.eye(3)).max() > ROTATION_TOL:
                raise ValueError("symmetry transform is not orthonormal")
            if abs(np.linalg.det(m) - 1.0) > ROTATION_TOL:
                raise ValueError("symmetry transform determinant is not +1")
        if self.kind == "discrete" and not mats:
            raise ValueError("discrete symmetry needs at least the identity")
        object.__setattr__(self, "transforms", mats)

    @staticmethod
    def none() -> "SymmetrySpec":
        return SymmetrySpec("none", ())

    @staticmethod
    def cyclic_z(order: int) -> "SymmetrySpec":
        mats = tuple(rotation_about_z(2.0 * np.pi * k / order) for k in range(order))
        return SymmetrySpec("discrete", mats)

    @property
    def is_symmetric(self) -> bool:
        return self.kind == "discrete" and len(self.transforms) > 1

    @property
    def order(self) -> int:
        return len(self.transforms) if self.kind == "discrete" else 1


# ---------------------------------------------------------------------------
# transforms

def transform(pose: Pose, pts) -> np.ndarray:
    """Row-wise R p + t."""
    return _as_points(pts) @ pose.rotation.T + pose.translation


def inverse_transform(pose: Pose, pts) -> np.ndarray:
    """Row-wise R^T (p - t); exact inverse of transform."""
    return (_as_points(pts) - pose.translation) @ pose.rotation


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot6d_to_matrix(v) -> np.ndarray:
    """Gram-Schmidt a 6-vector into a rotation matrix with columns b1 b2 b3."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    n1 = np.linalg.norm(v[:3])
    if n1 < 1e-8:
        raise DegenerateInputError("first 3-vector is numerically zero")
    b1 = v[:3] / n1
    r2 = v[3:] - (b1 @ v[3:]) * b1
    n2 = np.linalg.norm(r2)
    if n2 < 1e-8:
        raise DegenerateInputError("second 3-vector is parallel to the first")
    b2 = r2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Snap a near-rotation back onto SO(3) via Gram-Schmidt of its columns."""
    return rot6d_to_matrix(np.concatenate([r[:, 0], r[:, 1]]))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from two iid standard normal 3-vectors."""
    return rot6d_to_matrix(rng.standard_normal(6))


def random_pose(rng: np.random.Generator, translation_range: float = 0.5) -> Pose:
    return Pose(
        random_rotation(rng),
        rng.uniform(-translation_range, translation_range, size=3),
    )


# ---------------------------------------------------------------------------
# least-squares rigid alignment

def arun_solve(src, dst, weights=None) -> Pose:
    """Weighted least-squares pose with R src_i + t closest to dst_i.

    SVD of the weighted cross-covariance with determinant-sign correction,
    so the result is always a proper rotation.  Raises DegenerateInputError
    for fewer than 3 points or a collinear configuration.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if src.shape != dst.shape:
        raise ValueError(f"src/dst shapes differ: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(n)
        if w.min() < 0.0:
            raise ValueError("weights must be nonnegative")
        total = w.sum()
        if total <= 0.0:
            raise DegenerateInputError("all weights are zero")
        w = w / total
    c_src = w @ src
    c_dst = w @ dst
    h = (w[:, None] * (src - c_src)).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateInputError("correspondences are rank deficient (collinear)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, c_dst - r @ c_src)


# ---------------------------------------------------------------------------
# metrics

def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer needs nonempty sets")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def nearest_indices(queries, refs) -> np.ndarray:
    """Index of the nearest ref for each query; ties pick the first index."""
    q = _as_points(queries)
    r = _as_points(refs)
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def add_metric(pred: Pose, gt: Pose, model) -> float:
    """Mean index-aligned distance between predicted and gt model transforms."""
    model = _as_points(model)
    if model.shape[0] == 0:
        raise ValueError("empty model")
    diff = transform(pred, model) - transform(gt, model)
    return float(np.linalg.norm(diff, axis=1).mean())


def adds_metric(pred: Pose, gt: Pose, model) -> float:
    """Mean closest-point distance from predicted to gt model transforms."""
    model = _as_points(model)
    if model.shape[0] == 0:
        raise ValueError("empty model")
    p = transform(pred, model)
    g = transform(gt, model)
    d = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=2))
    return float(d.min(axis=1).mean())


def auc(errors, max_threshold: float = 0.1) -> float:
    """Area under accuracy-vs-threshold up to max_threshold, in percent.

    accuracy(tau) is the fraction of errors strictly below tau, integrated
    by trapezoid rule on a uniform 1000-point grid.
    """
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise ValueError("auc of an empty error list")
    taus = np.linspace(0.0, max_threshold, 1000)
    acc = (e[None, :] < taus[:, None]).mean(axis=1)
    return float(np.trapezoid(acc, taus) / max_threshold * 100.0)


def rate_below(errors, threshold: float = 0.02) -> float:
    """Percentage of errors strictly below threshold."""
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise ValueError("rate_below of an empty error list")
    return float((e < threshold).mean() * 100.0)


# ---------------------------------------------------------------------------
# file formats

def save_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with x,y,z and optional red,green,blue (uchar)."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property double {axis}" for axis in "xyz"]
    if cloud.colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    lines.append("end_header")
    rows = []
    for i, p in enumerate(cloud.points):
        row = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
        if cloud.colors is not None:
            c = np.rint(cloud.colors[i] * 255.0).astype(int)
            row += f" {c[0]} {c[1]} {c[2]}"
        rows.append(row)
    Path(path).write_text("\n".join(lines + rows) + "\n", encoding="ascii")


def load_ply(path, frame: str = "camera") -> PointCloud:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    body_at = None
    for i, line in enumerate(text[1:], start=1):
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise ValueError(f"{path}: unsupported element {parts[1]!r}")
            n_vertex = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[2])
        elif parts[0] == "end_header":
            body_at = i + 1
            break
    if n_vertex is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    if props[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected x,y,z leading properties")
    has_color = props[3:6] == ["red", "green", "blue"]
    pts = np.empty((n_vertex, 3))
    cols = np.empty((n_vertex, 3)) if has_color else None
    for j in range(n_vertex):
        fields = text[body_at + j].split()
        pts[j] = [float(fields[0]), float(fields[1]), float(fields[2])]
        if has_color:
            cols[j] = [int(fields[3]) / 255.0, int(fields[4]) / 255.0, int(fields[5]) / 255.0]
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: non-finite coordinates")
    return PointCloud(pts, cols, frame)


METRICS_CSV_HEADER = ["sample_id", "add", "adds", "auc_contrib", "below_2cm"]


def write_metrics_csv(path, rows) -> None:
    """Per-sample metric rows: (sample_id, add, adds, auc_contrib, below_2cm)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:4]] + [int(row[4])])


def metric_rows(sample_ids, adds_errors, add_errors, max_threshold: float = 0.1):
    """Assemble metrics CSV rows; auc_contrib is the exact per-sample share."""
    rows = []
    for sid, e_add, e_adds in zip(sample_ids, add_errors, adds_errors):
        contrib = 100.0 * (1.0 - min(e_adds, max_threshold) / max_threshold)
        rows.append((sid, e_add, e_adds, contrib, e_adds < 0.02))
    return rows
