import hashlib
import json

import numpy as np
import pytest

from corrpose import geometry as geo
from corrpose import synthdata as sd
from corrpose.geometry import Pose, SymmetrySpec


def box_spec(symmetric=False):
    if symmetric:
        return sd.ShapeSpec("sq", "box", (0.2, 0.2, 0.3), SymmetrySpec.cyclic_z(4))
    return sd.ShapeSpec("bx", "box", (0.15, 0.2, 0.3), SymmetrySpec.none())


class TestSampleModel:
    def test_returns_requested_count(self):
        for n in (16, 64, 1024):
            cloud = sd.sample_model(box_spec(), n, seed=0)
            assert len(cloud) == n
            assert cloud.frame == "object"

    def test_symmetric_sampling_closed_under_group(self):
        spec = box_spec(symmetric=True)
        cloud = sd.sample_model(spec, 64, seed=1)
        quarter = geo.rotation_about_z(np.pi / 2)
        rotated = cloud.points @ quarter.T
        d2 = ((rotated[:, None] - cloud.points[None]) ** 2).sum(-1)
        assert np.sqrt(d2.min(axis=1)).max() < 1e-12

    def test_cylinder_closed_under_c8(self):
        spec = sd.ShapeSpec("cyl", "cylinder", (0.07, 0.2), SymmetrySpec.cyclic_z(8))
        cloud = sd.sample_model(spec, 64, seed=3)
        eighth = geo.rotation_about_z(np.pi / 4)
        rotated = cloud.points @ eighth.T
        d2 = ((rotated[:, None] - cloud.points[None]) ** 2).sum(-1)
        assert np.sqrt(d2.min(axis=1)).max() < 1e-12

    def test_indivisible_count_rejected_for_symmetric(self):
        with pytest.raises(ValueError):
            sd.sample_model(box_spec(symmetric=True), 63, seed=0)

    def test_centered_box_centroid(self):
        cloud = sd.sample_model(box_spec(), 4096, seed=7)
        assert np.abs(cloud.points.mean(axis=0)).max() < 1e-3

    def test_all_kinds_sample(self):
        for spec in sd.default_shapes():
            cloud = sd.sample_model(spec, 64, seed=0)
            assert len(cloud) == 64
            assert cloud.colors is not None

    def test_points_on_box_surface(self):
        spec = box_spec()
        w, d, h = spec.dimensions
        pts = sd.sample_model(spec, 256, seed=2).points
        at_limit = (
            (np.abs(np.abs(pts[:, 0]) - w / 2) < 1e-12)
            | (np.abs(np.abs(pts[:, 1]) - d / 2) < 1e-12)
            | (np.abs(np.abs(pts[:, 2]) - h / 2) < 1e-12)
        )
        assert at_limit.all()
        assert (np.abs(pts) <= np.array([w, d, h]) / 2 + 1e-12).all()


class TestMakeObservation:
    def setup_method(self):
        self.spec = box_spec()
        self.dense = sd.sample_model(self.spec, 2048, seed=5)
        self.gt = geo.random_pose(np.random.default_rng(8))

    def test_no_corruption_membership(self):
        obs = sd.make_observation(self.dense, self.gt, (0.0, 0.0, 1.0),
                                  occlusion_fraction=0.0, noise_sigma=0.0,
                                  n=64, seed=0)
        assert len(obs) == 64
        posed = geo.transform(self.gt, self.dense.points)
        d2 = ((obs.points[:, None] - posed[None]) ** 2).sum(-1)
        assert np.sqrt(d2.min(axis=1)).max() < 1e-12

    def test_noise_free_points_land_on_surface(self):
        obs = sd.make_observation(self.dense, self.gt, (0.0, 1.0, 0.0),
                                  occlusion_fraction=0.2, noise_sigma=0.0,
                                  n=64, seed=1)
        back = geo.inverse_transform(self.gt, obs.points)
        d2 = ((back[:, None] - self.dense.points[None]) ** 2).sum(-1)
        assert np.sqrt(d2.min(axis=1)).max() < 1e-9

    def test_exact_count_under_heavy_occlusion(self):
        obs = sd.make_observation(self.dense, self.gt, (1.0, 0.0, 0.0),
                                  occlusion_fraction=0.7, noise_sigma=0.001,
                                  n=256, seed=2)
        assert len(obs) == 256

    def test_too_much_occlusion_raises(self):
        with pytest.raises(sd.GenerationError):
            sd.make_observation(self.dense, self.gt, (1.0, 0.0, 0.0),
                                occlusion_fraction=0.999, noise_sigma=0.0,
                                n=64, seed=3)

    def coverage(self, occ, seed=4):
        """Fraction of visible dense points that survive into the observation."""
        view = np.array([0.0, 0.0, 1.0])
        obs = sd.make_observation(self.dense, self.gt, view, occ, 0.0,
                                  n=400, seed=seed)
        posed = geo.transform(self.gt, self.dense.points)
        centroid = posed.mean(axis=0)
        vis = posed[(posed - centroid) @ (-view) >= 0.0]
        d2 = ((vis[:, None] - obs.points[None]) ** 2).sum(-1)
        return (np.sqrt(d2.min(axis=1)) < 1e-9).mean()

    def test_occlusion_halves_coverage(self):
        assert self.coverage(0.5) <= 0.5

    def test_coverage_monotone_in_occlusion(self):
        covs = [self.coverage(occ) for occ in (0.0, 0.2, 0.4, 0.6)]
        assert all(a >= b for a, b in zip(covs, covs[1:]))


class TestRotationSampling:
    def test_trace_statistics_match_quaternion_oracle(self):
        rng = np.random.default_rng(0)
        traces = [np.trace(geo.random_rotation(rng)) for _ in range(10_000)]

        # independent oracle: uniform quaternions -> rotation matrices
        q = np.random.default_rng(1).standard_normal((10_000, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        w, x, y, z = q.T
        oracle_traces = 3.0 - 4.0 * (x * x + y * y + z * z)
        assert abs(np.mean(traces) - np.mean(oracle_traces)) < 0.1
        assert abs(np.mean(traces)) < 0.1


class TestGenerateDataset:
    def test_split_counts(self, tmp_path):
        train, test = sd.generate_dataset(
            sd.default_shapes(), count=20, split_ratio=0.8, seed=0,
            out_dir=tmp_path, n_obs=32, n_model=32, n_dense=512)
        assert len(train.read_text().splitlines()) == 16
        assert len(test.read_text().splitlines()) == 4

    def test_regeneration_is_byte_identical(self, tmp_path):
        def digest(root):
            h = hashlib.sha256()
            for p in sorted(root.rglob("*")):
                if p.is_file():
                    h.update(p.name.encode())
                    h.update(p.read_bytes())
            return h.hexdigest()

        a, b = tmp_path / "a", tmp_path / "b"
        for root in (a, b):
            sd.generate_dataset(sd.default_shapes(), count=12, split_ratio=0.75,
                                seed=9, out_dir=root, n_obs=32, n_model=32,
                                n_dense=512)
        assert digest(a) == digest(b)

    def test_manifest_schema(self, tmp_path):
        train, _ = sd.generate_dataset(
            sd.default_shapes(), count=8, split_ratio=0.5, seed=2,
            out_dir=tmp_path, n_obs=32, n_model=32, n_dense=512)
        rec = json.loads(train.read_text().splitlines()[0])
        assert set(rec) == {"model_ply", "obs_ply", "gt", "shape_id",
                            "diameter", "symmetry"}
        assert len(rec["gt"]["R"]) == 9
        assert len(rec["gt"]["t"]) == 3

    def test_loaded_samples_consistent(self, tmp_path):
        train, _ = sd.generate_dataset(
            sd.default_shapes(), count=8, split_ratio=0.5, seed=4,
            out_dir=tmp_path, n_obs=32, n_model=32, n_dense=512,
            noise_sigma=0.0)
        samples = sd.load_manifest(train)
        assert len(samples) == 4
        for s in samples:
            assert len(s.obs) == 32
            assert len(s.model) == 32
            assert s.diameter > 0
            # noise-free observations land near the (sparsely sampled) surface
            self_d2 = ((s.model.points[:, None] - s.model.points[None]) ** 2).sum(-1)
            np.fill_diagonal(self_d2, np.inf)
            spacing = np.sqrt(self_d2.min(axis=1)).max()
            back = geo.inverse_transform(s.gt, s.obs.points)
            d2 = ((back[:, None] - s.model.points[None]) ** 2).sum(-1)
            assert np.sqrt(d2.min(axis=1)).max() < max(2.0 * spacing, 0.1 * s.diameter)

    def test_ground_truth_fixed_point_loss_is_zero(self, tmp_path):
        train, _ = sd.generate_dataset(
            [box_spec()], count=4, split_ratio=1.0, seed=6,
            out_dir=tmp_path, n_obs=32, n_model=32, n_dense=512,
            noise_sigma=0.0)
        for s in sd.load_manifest(train):
            target = geo.inverse_transform(s.gt, s.obs.points)
            residual = np.linalg.norm(target - target, axis=1).mean()
            assert residual == 0.0
