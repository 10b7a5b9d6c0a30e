"""Synthetic CAD shapes, random poses and partial noisy observations.

Four shape families (box, cylinder, ell-shape, asymmetric-blob) are sampled
on their surfaces, posed uniformly over SO(3) with translations inside a
cube, then culled to a half-space visible region, occluded by a spherical
patch and corrupted with Gaussian noise.  Every sample is reproducible from
(dataset seed, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    PointCloud,
    Pose,
    SymmetrySpec,
    random_rotation,
    save_ply,
    load_ply,
    transform,
)


class GenerationError(RuntimeError):
    """Observation generation could not satisfy its constraints."""


@dataclass(frozen=True)
class ShapeSpec:
    shape_id: str
    kind: str  # box | cylinder | ell | blob
    dimensions: tuple
    symmetry: SymmetrySpec
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("box", "cylinder", "ell", "blob"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("shape dimensions must be positive")


@dataclass(frozen=True)
class Sample:
    model: PointCloud
    obs: PointCloud
    gt: Pose
    shape_id: str
    diameter: float
    symmetry: SymmetrySpec
    occlusion_fraction: float | None = None
    noise_sigma: float | None = None


# ---------------------------------------------------------------------------
# surface samplers

def _sample_rectangles(rects, n, rng):
    """Area-weighted uniform sampling over a list of (origin, u, v) rects."""
    origins = np.array([r[0] for r in rects])
    us = np.array([r[1] for r in rects])
    vs = np.array([r[2] for r in rects])
    areas = np.linalg.norm(np.cross(us, vs), axis=1)
    probs = areas / areas.sum()
    choice = rng.choice(len(rects), size=n, p=probs)
    s = rng.uniform(size=(n, 1))
    t = rng.uniform(size=(n, 1))
    return origins[choice] + s * us[choice] + t * vs[choice]


def _box_rects(w, d, h):
    hw, hd, hh = w / 2.0, d / 2.0, h / 2.0
    ex, ey, ez = np.array([w, 0, 0.0]), np.array([0, d, 0.0]), np.array([0, 0, h])
    return [
        ((-hw, -hd, -hh), ex, ey),  # bottom
        ((-hw, -hd, hh), ex, ey),   # top
        ((-hw, -hd, -hh), ex, ez),  # front
        ((-hw, hd, -hh), ex, ez),   # back
        ((-hw, -hd, -hh), ey, ez),  # left
        ((hw, -hd, -hh), ey, ez),   # right
    ]


def _sample_box(dims, n, rng):
    pts = _sample_rectangles(_box_rects(*dims), n, rng)
    # inversion-antithetic pairs keep the sample centroid at the origin
    half = n // 2
    pts[half:2 * half] = -pts[:half]
    return pts


def _sample_cylinder(dims, n, rng):
    radius, height = dims
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius**2
    total = side_area + 2.0 * cap_area
    u = rng.uniform(size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r_cap = radius * np.sqrt(rng.uniform(size=n))
    z_side = rng.uniform(-height / 2.0, height / 2.0, size=n)
    pts = np.empty((n, 3))
    on_side = u < side_area / total
    on_top = (~on_side) & (u < (side_area + cap_area) / total)
    pts[:, 0] = np.where(on_side, radius * np.cos(theta), r_cap * np.cos(theta))
    pts[:, 1] = np.where(on_side, radius * np.sin(theta), r_cap * np.sin(theta))
    pts[:, 2] = np.where(on_side, z_side, np.where(on_top, height / 2.0, -height / 2.0))
    half = n // 2
    pts[half:2 * half] = -pts[:half]
    return pts


def _ell_rects(w, d1, w1, d2, h):
    # L cross-section: full slab [0,w]x[0,d1] plus wing [0,w1]x[d1,d2]
    z0, ez = -h / 2.0, np.array([0, 0, h])
    col = lambda x, y: np.array([x, y, z0])
    vec = lambda x, y: np.array([x, y, 0.0])
    rects = [
        (col(0, 0), vec(w, 0), vec(0, d1)),        # bottom slab
        (col(0, d1), vec(w1, 0), vec(0, d2 - d1)),  # bottom wing
        (col(0, 0) + ez, vec(w, 0), vec(0, d1)),    # top slab
        (col(0, d1) + ez, vec(w1, 0), vec(0, d2 - d1)),  # top wing
        (col(0, 0), vec(w, 0), ez),                 # south wall
        (col(w, 0), vec(0, d1), ez),                # east wall
        (col(w, d1), vec(w1 - w, 0), ez),           # inner step
        (col(w1, d1), vec(0, d2 - d1), ez),         # inner wall
        (col(w1, d2), vec(-w1, 0), ez),             # north wall
        (col(0, d2), vec(0, -d2), ez),              # west wall
    ]
    # center on the area centroid of the L cross-section
    a_slab, a_wing = w * d1, w1 * (d2 - d1)
    cx = (a_slab * w / 2.0 + a_wing * w1 / 2.0) / (a_slab + a_wing)
    cy = (a_slab * d1 / 2.0 + a_wing * (d1 + d2) / 2.0) / (a_slab + a_wing)
    shift = np.array([cx, cy, 0.0])
    return [(np.asarray(o, dtype=float) - shift, u, v) for o, u, v in rects]


def _sample_ell(dims, n, rng):
    return _sample_rectangles(_ell_rects(*dims), n, rng)


def _sample_blob(dims, n, rng):
    (r0,) = dims
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    radius = r0 * (1.0 + 0.3 * x * y + 0.2 * y * z + 0.15 * z**3)
    return dirs * radius[:, None]


_SAMPLERS = {
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "ell": _sample_ell,
    "blob": _sample_blob,
}


def sample_model(spec: ShapeSpec, n: int, seed) -> PointCloud:
    """Surface sampling, approximately uniform by area.

    For shapes with discrete symmetry the sample is one replicated orbit,
    so applying any symmetry transform permutes the point set exactly.
    """
    rng = np.random.default_rng(seed)
    sampler = _SAMPLERS[spec.kind]
    group = spec.symmetry.transforms if spec.symmetry.is_symmetric else ()
    if group:
        g = len(group)
        if n % g != 0:
            raise ValueError(f"{spec.shape_id}: n={n} not divisible by symmetry order {g}")
        base = sampler(spec.dimensions, n // g, rng)
        pts = np.vstack([base @ m.T for m in group])
    else:
        pts = sampler(spec.dimensions, n, rng)
    colors = np.tile(np.asarray(spec.color, dtype=np.float64), (n, 1))
    return PointCloud(pts, colors, frame="object")


def shape_diameter(points: np.ndarray) -> float:
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.max()))


def default_shapes() -> list[ShapeSpec]:
    """The stock 4-shape benchmark: two symmetric, two asymmetric objects."""
    return [
        ShapeSpec("square_box", "box", (0.16, 0.16, 0.24),
                  SymmetrySpec.cyclic_z(4), color=(0.85, 0.25, 0.2)),
        ShapeSpec("cylinder", "cylinder", (0.07, 0.24),
                  SymmetrySpec.cyclic_z(8), color=(0.2, 0.45, 0.85)),
        ShapeSpec("ell_bracket", "ell", (0.2, 0.08, 0.08, 0.2, 0.1),
                  SymmetrySpec.none(), color=(0.25, 0.7, 0.3)),
        ShapeSpec("blob", "blob", (0.1,),
                  SymmetrySpec.none(), color=(0.8, 0.7, 0.2)),
    ]


# ---------------------------------------------------------------------------
# observations

def make_observation(
    model_dense: PointCloud,
    gt: Pose,
    view_dir,
    occlusion_fraction: float,
    noise_sigma: float,
    n: int,
    seed,
) -> PointCloud:
    """Partial, occluded, noisy view of a posed model, resampled to n points.

    Visibility keeps the half of the transformed cloud facing the viewer
    (nonnegative dot of centroid-relative position with -view_dir); a
    contiguous spherical patch around a seeded center is then removed to
    cover occlusion_fraction of what remains.
    """
    rng = np.random.default_rng(seed)
    view = np.asarray(view_dir, dtype=np.float64).reshape(3)
    view = view / np.linalg.norm(view)
    pts = transform(gt, model_dense.points)
    colors = model_dense.colors
    centroid = pts.mean(axis=0)
    keep = (pts - centroid) @ (-view) >= 0.0
    vis = pts[keep]
    vis_colors = colors[keep] if colors is not None else None

    if occlusion_fraction > 0.0 and len(vis) > 0:
        k = int(np.ceil(occlusion_fraction * len(vis)))
        center = vis[rng.integers(len(vis))]
        order = np.argsort(np.linalg.norm(vis - center, axis=1))
        removed = np.zeros(len(vis), dtype=bool)
        removed[order[:k]] = True
        vis = vis[~removed]
        if vis_colors is not None:
            vis_colors = vis_colors[~removed]

    if len(vis) < 8:
        raise GenerationError(
            f"occlusion {occlusion_fraction} leaves {len(vis)} points (< 8)"
        )

    if noise_sigma > 0.0:
        vis = vis + rng.normal(0.0, noise_sigma, size=vis.shape)

    if len(vis) >= n:
        idx = rng.choice(len(vis), size=n, replace=False)
    else:
        idx = rng.choice(len(vis), size=n, replace=True)
    return PointCloud(vis[idx], vis_colors[idx] if vis_colors is not None else None,
                      frame="camera")


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# dataset generation and manifests

def _symmetry_to_json(sym: SymmetrySpec) -> dict:
    return {
        "kind": sym.kind,
        "transforms": [m.reshape(-1).tolist() for m in sym.transforms],
    }


def _symmetry_from_json(obj: dict) -> SymmetrySpec:
    mats = tuple(np.array(m, dtype=np.float64).reshape(3, 3) for m in obj["transforms"])
    return SymmetrySpec(obj["kind"], mats)


def generate_dataset(
    specs: list[ShapeSpec],
    count: int,
    split_ratio: float,
    seed: int,
    out_dir,
    n_obs: int = 1024,
    n_model: int = 1024,
    n_dense: int = 4096,
    occlusion_max: float = 0.3,
    noise_sigma: float = 0.002,
    translation_range: float = 0.5,
) -> tuple[Path, Path]:
    """Write model/observation PLYs plus train/test JSONL manifests.

    Deterministic per seed: sample i derives its generator from (seed, i),
    so regeneration is byte-identical and samples are independent.
    """
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "obs").mkdir(parents=True, exist_ok=True)

    model_paths, dense_clouds, diameters = {}, {}, {}
    for si, spec in enumerate(specs):
        model = sample_model(spec, n_model, np.random.SeedSequence((seed, 10_000 + si)))
        dense = sample_model(spec, n_dense, np.random.SeedSequence((seed, 20_000 + si)))
        path = out / "models" / f"{spec.shape_id}.ply"
        save_ply(path, model)
        model_paths[spec.shape_id] = path
        dense_clouds[spec.shape_id] = dense
        diameters[spec.shape_id] = shape_diameter(model.points)

    lines = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        spec = specs[int(rng.integers(len(specs)))]
        gt = Pose(random_rotation(rng),
                  rng.uniform(-translation_range, translation_range, size=3))
        view_dir = random_unit_vector(rng)
        occ = float(rng.uniform(0.0, occlusion_max))
        obs = make_observation(
            dense_clouds[spec.shape_id], gt, view_dir, occ, noise_sigma,
            n_obs, np.random.SeedSequence((seed, i, 1)),
        )
        obs_path = out / "obs" / f"{i:06d}.ply"
        save_ply(obs_path, obs)
        lines.append(json.dumps({
            "model_ply": str(model_paths[spec.shape_id].relative_to(out)),
            "obs_ply": str(obs_path.relative_to(out)),
            "gt": {"R": gt.rotation.reshape(-1).tolist(),
                   "t": gt.translation.tolist()},
            "shape_id": spec.shape_id,
            "diameter": diameters[spec.shape_id],
            "symmetry": _symmetry_to_json(spec.symmetry),
        }, sort_keys=True))

    n_train = int(count * split_ratio)
    train_path = out / "train.jsonl"
    test_path = out / "test.jsonl"
    train_path.write_text("\n".join(lines[:n_train]) + ("\n" if n_train else ""))
    test_path.write_text("\n".join(lines[n_train:]) + ("\n" if count > n_train else ""))
    return train_path, test_path


def load_manifest(manifest_path) -> list[Sample]:
    """Load every sample of a manifest; model clouds are cached per shape."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    model_cache: dict[str, PointCloud] = {}
    samples = []
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        model_rel = rec["model_ply"]
        if model_rel not in model_cache:
            model_cache[model_rel] = load_ply(root / model_rel, frame="object")
        gt = Pose(np.array(rec["gt"]["R"]).reshape(3, 3), np.array(rec["gt"]["t"]))
        samples.append(Sample(
            model=model_cache[model_rel],
            obs=load_ply(root / rec["obs_ply"], frame="camera"),
            gt=gt,
            shape_id=rec["shape_id"],
            diameter=float(rec["diameter"]),
            symmetry=_symmetry_from_json(rec["symmetry"]),
        ))
    return samples
