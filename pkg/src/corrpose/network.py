"""Full network assembly: encoders, dual correspondence modules, pose head.

The backbone is a point-wise shared MLP: per-point local features, a global
max-pooled context vector concatenated back onto every point, then a fusing
MLP.  Variants cover the ablation grid: both correspondence modules, either
one alone, or a bare encode/pool/regress baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fda import FdaModule, FdaOutput, FeatureMap
from .geometry import PointCloud, Pose, arun_solve
from .heads import ConfidenceVector, PairedFeatures, PoseHead, pair_features
from .nn import ParameterStore, init_mlp, mlp_forward
from .refine import Refiner

VARIANTS = ("dual", "p2p", "c2c", "none")


@dataclass
class NetworkConfig:
    n_points_obs: int = 1024
    n_points_model: int = 1024
    use_rgb: bool = True
    seed: int = 0
    c_local: int = 128
    c_raw: int = 256
    c_branch: int = 128
    c_f: int = 256
    disengage_depth: int = 2
    decoder_depth: int = 3
    confidence_depth: int = 2
    embed_depth: int = 2
    head_depth: int = 2
    variant: str = "dual"
    use_confidence: bool = True
    with_refiner: bool = True

    def __post_init__(self):
        if self.n_points_obs < 8 or self.n_points_model < 8:
            raise ValueError("point counts must be at least 8")
        for name in ("c_local", "c_raw", "c_branch", "c_f"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "none" and self.use_confidence:
            raise ValueError("the no-correspondence baseline has no confidence scores")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    pose: Pose
    rot: Tensor
    trans: Tensor
    scores: ConfidenceVector | None
    p2p: FdaOutput | None
    c2c: FdaOutput | None
    paired: PairedFeatures | None


class PoseNet:
    """End-to-end pose estimation network over one observation/model pair."""

    def __init__(self, cfg: NetworkConfig, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(cfg.seed)
        in_dim = 6 if cfg.use_rgb else 3
        for prefix in ("enc_obs", "enc_model"):
            init_mlp(self.store, f"{prefix}.local", [in_dim, cfg.c_local, cfg.c_local], rng)
            init_mlp(self.store, f"{prefix}.fuse",
                     [2 * cfg.c_local, cfg.c_raw, cfg.c_raw], rng)

        self.fda_p2p = self.fda_c2c = None
        if cfg.variant in ("dual", "p2p"):
            self.fda_p2p = FdaModule(self.store, "p2p", cfg.c_raw, cfg.c_branch,
                                     cfg.disengage_depth, cfg.decoder_depth, rng)
        if cfg.variant in ("dual", "c2c"):
            self.fda_c2c = FdaModule(self.store, "c2c", cfg.c_raw, cfg.c_branch,
                                     cfg.disengage_depth, cfg.decoder_depth, rng)

        pair_width = 2 * (cfg.c_branch if cfg.variant != "none" else cfg.c_raw)
        self.head = PoseHead(self.store, "head", pair_width, cfg.c_f,
                             cfg.confidence_depth, cfg.embed_depth, cfg.head_depth,
                             rng, use_confidence=cfg.use_confidence)

        self.refiner = None
        if cfg.with_refiner and cfg.variant in ("dual", "p2p"):
            self.refiner = Refiner(self.store, "refine", cfg.c_branch, cfg.c_f,
                                   cfg.embed_depth, cfg.head_depth, rng)

    # -- encoding -----------------------------------------------------------

    def _cloud_input(self, cloud: PointCloud) -> np.ndarray:
        if self.cfg.use_rgb:
            if cloud.colors is None:
                raise ValueError("network is configured for RGB but the cloud has no colors")
            return np.hstack([cloud.points, cloud.colors])
        return cloud.points

    def encode(self, cloud: PointCloud, which: str) -> FeatureMap:
        """Point-wise features with a max-pooled global context per point."""
        if which not in ("obs", "model"):
            raise ValueError("which must be 'obs' or 'model'")
        prefix = "enc_obs" if which == "obs" else "enc_model"
        x = Tensor(self._cloud_input(cloud))
        local = ad.relu(mlp_forward(self.store, f"{prefix}.local", x))
        pooled = ad.max_axis0(local)
        fused = ad.concat_cols([local, ad.tile_rows(pooled, local.data.shape[0])])
        raw = mlp_forward(self.store, f"{prefix}.fuse", fused)
        return FeatureMap(raw, cloud.frame, "raw")

    # -- forward ------------------------------------------------------------

    def forward(self, obs: PointCloud, model: PointCloud) -> ForwardResult:
        if obs.frame != "camera" or model.frame != "object":
            raise ValueError("expected obs in camera frame and model in object frame")
        f_obs = self.encode(obs, "obs")
        f_model = self.encode(model, "model")

        p2p = self.fda_p2p.forward(f_obs, f_model) if self.fda_p2p else None
        c2c = self.fda_c2c.forward(f_model, f_obs) if self.fda_c2c else None

        if self.cfg.variant == "dual":
            paired = pair_features(p2p, c2c)
            pose_pairs, match_pairs = paired.pose_pairs, paired.match_pairs
        elif self.cfg.variant == "p2p":
            pose_pairs = ad.concat_cols([p2p.own_pose, p2p.aligned_pose])
            match_pairs = ad.concat_cols([p2p.own_match, p2p.aligned_match])
            paired = PairedFeatures(pose_pairs, match_pairs, split_index=len(obs))
        elif self.cfg.variant == "c2c":
            pose_pairs = ad.concat_cols([c2c.aligned_pose, c2c.own_pose])
            match_pairs = ad.concat_cols([c2c.aligned_match, c2c.own_match])
            paired = PairedFeatures(pose_pairs, match_pairs, split_index=0)
        else:
            pooled = ad.concat_cols([ad.max_axis0(f_obs.features),
                                     ad.max_axis0(f_model.features)])
            pose_pairs, match_pairs, paired = pooled, None, None

        scores = None
        if self.cfg.use_confidence:
            scores = self.head.confidence(match_pairs)
            score_input = scores.s
        else:
            score_input = Tensor(np.full((pose_pairs.data.shape[0], 1), 0.5))

        pooled_f = self.head.pooled_feature(score_input, pose_pairs)
        pose, rot, trans = self.head.regress_pose(pooled_f)
        return ForwardResult(pose, rot, trans, scores, p2p, c2c, paired)

    # -- classical solver over decoded correspondences -----------------------

    def solve_from_correspondence(self, p2p: FdaOutput | None, c2c: FdaOutput | None,
                                  obs: PointCloud, model: PointCloud,
                                  scores: ConfidenceVector | None = None) -> Pose:
        """Least-squares pose from the decoded point correspondences.

        P2P pairs map decoded object-frame points onto the observation;
        C2C pairs map model points onto decoded camera-frame points.
        Optional weights reuse the confidence scores in stacked row order.
        """
        src_blocks, dst_blocks = [], []
        if p2p is not None:
            src_blocks.append(p2p.decoded_points.data)
            dst_blocks.append(obs.points)
        if c2c is not None:
            src_blocks.append(model.points)
            dst_blocks.append(c2c.decoded_points.data)
        if not src_blocks:
            raise ValueError("no decoded correspondences available")
        src = np.vstack(src_blocks)
        dst = np.vstack(dst_blocks)
        weights = None
        if scores is not None:
            weights = scores.s.data.reshape(-1)
            if p2p is None:
                weights = weights[-len(model):]
            elif c2c is None:
                weights = weights[:len(obs)]
        return arun_solve(src, dst, weights)

    def make_refine_state(self, result: ForwardResult):
        """Freeze the aligned features and scores for iterative refinement."""
        from .refine import RefineState

        if self.refiner is None or result.p2p is None:
            raise ValueError("refinement needs the partial-to-partial module")
        n_x = result.p2p.aligned_pose.data.shape[0]
        if result.scores is not None:
            scores = result.scores.s.data[:n_x].reshape(-1).copy()
        else:
            scores = np.full(n_x, 0.5)
        return RefineState(
            pose=result.pose,
            iteration=0,
            aligned_pose=result.p2p.aligned_pose.data.copy(),
            scores=scores,
        )
