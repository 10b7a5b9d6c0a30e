"""Confidence-weighted pose regression from paired pose/match features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fda import FdaOutput
from .geometry import DegenerateInputError, Pose
from .nn import ParameterStore, init_mlp, mlp_forward

IDENTITY_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class PairedFeatures:
    """Stacked camera/object feature pairs from both correspondence modules.

    The first split_index rows hold [own | aligned] features of the
    partial-to-partial module; the remaining rows hold [aligned | own]
    features of the complete-to-complete module, keeping the camera-frame
    member first in every row.
    """

    pose_pairs: Tensor
    match_pairs: Tensor
    split_index: int


@dataclass
class ConfidenceVector:
    """Per-pair correspondence quality scores, strictly inside (0, 1)."""

    s: Tensor  # (N_X + N_Y) x 1

    def __post_init__(self):
        v = self.s.data
        if v.ndim != 2 or v.shape[1] != 1:
            raise ValueError(f"scores must be a column vector, got {v.shape}")
        if v.min() <= 0.0 or v.max() >= 1.0:
            raise ValueError("confidence scores must lie strictly in (0, 1)")

    def __len__(self) -> int:
        return self.s.data.shape[0]


def pair_features(p2p: FdaOutput, c2c: FdaOutput) -> PairedFeatures:
    """Concatenate each module's streams row-wise, then stack P2P over C2C."""
    if p2p.own_pose.data.shape[1] != c2c.own_pose.data.shape[1]:
        raise ad.ShapeError("pose feature widths differ between modules")
    if p2p.own_match.data.shape[1] != c2c.own_match.data.shape[1]:
        raise ad.ShapeError("match feature widths differ between modules")
    pose = ad.concat_rows([
        ad.concat_cols([p2p.own_pose, p2p.aligned_pose]),
        ad.concat_cols([c2c.aligned_pose, c2c.own_pose]),
    ])
    match = ad.concat_rows([
        ad.concat_cols([p2p.own_match, p2p.aligned_match]),
        ad.concat_cols([c2c.aligned_match, c2c.own_match]),
    ])
    return PairedFeatures(pose, match, split_index=p2p.own_pose.data.shape[0])


def rot6d_tensor(v: Tensor) -> Tensor:
    """Differentiable Gram-Schmidt of a 1x6 tensor into a 3x3 rotation.

    Fused into one graph node with a hand-derived backward pass; the
    composite-op formulation costs two dozen tiny tensor ops per call.
    """
    u = v.data.reshape(6)[:3]
    w = v.data.reshape(6)[3:]
    nu = np.linalg.norm(u)
    if nu < 1e-8:
        raise DegenerateInputError("rotation head emitted a near-zero first vector")
    b1 = u / nu
    p = w - (b1 @ w) * b1
    np_norm = np.linalg.norm(p)
    if np_norm < 1e-8:
        raise DegenerateInputError("rotation head emitted parallel vectors")
    b2 = p / np_norm
    b3 = np.cross(b1, b2)
    out = np.stack([b1, b2, b3], axis=1)

    def grad_v(g):
        gb1 = g[:, 0] + np.cross(b2, g[:, 2])
        gb2 = g[:, 1] + np.cross(g[:, 2], b1)
        gp = (gb2 - (gb2 @ b2) * b2) / np_norm
        gw = gp - (gp @ b1) * b1
        gb1 = gb1 - (gp @ b1) * w - (b1 @ w) * gp
        gu = (gb1 - (gb1 @ b1) * b1) / nu
        return np.concatenate([gu, gw]).reshape(v.data.shape)

    return ad._result(out, [(v, grad_v)], "rot6d")


class PoseHead:
    """Confidence MLP plus pooled-feature rotation/translation regression."""

    def __init__(self, store: ParameterStore, prefix: str, pair_width: int,
                 c_f: int, confidence_depth: int = 2, embed_depth: int = 2,
                 head_depth: int = 2, rng: np.random.Generator | None = None,
                 use_confidence: bool = True):
        self.store = store
        self.prefix = prefix
        self.use_confidence = use_confidence
        rng = rng if rng is not None else np.random.default_rng(0)
        if use_confidence:
            conf_sizes = [pair_width] + [max(pair_width // 2, 8)] * (confidence_depth - 1) + [1]
            init_mlp(store, f"{prefix}.conf", conf_sizes, rng)
        init_mlp(store, f"{prefix}.embed", [pair_width] + [c_f] * embed_depth, rng)
        head_hidden = [c_f] * (head_depth - 1)
        init_mlp(store, f"{prefix}.rot", [c_f] + head_hidden + [6], rng,
                 final_bias=IDENTITY_ROT6D)
        init_mlp(store, f"{prefix}.trans", [c_f] + head_hidden + [3], rng)

    def confidence(self, match_pairs: Tensor) -> ConfidenceVector:
        """Row-wise MLP squashed through a logistic to (0, 1).

        The logistic rounds to exactly 0 or 1 in float64 once logits pass
        +-37, so the output is clamped a hair inside the open interval.
        """
        raw = mlp_forward(self.store, f"{self.prefix}.conf", match_pairs)
        return ConfidenceVector(ad.clip(ad.sigmoid(raw), 1e-12, 1.0 - 1e-12))

    def pooled_feature(self, s: Tensor, pose_pairs: Tensor) -> Tensor:
        """Softmax-weighted mean of embedded pose pairs; 1 x c_f."""
        if s.data.shape[0] != pose_pairs.data.shape[0]:
            raise ad.ShapeError("score and pair row counts differ")
        embedded = mlp_forward(self.store, f"{self.prefix}.embed", pose_pairs)
        weights = ad.softmax_rows(ad.transpose(s))
        return ad.matmul(weights, embedded)

    def regress_pose(self, f: Tensor) -> tuple[Pose, Tensor, Tensor]:
        """Map a pooled feature to a valid pose; returns graph tensors too."""
        rot6 = mlp_forward(self.store, f"{self.prefix}.rot", f)
        rot = rot6d_tensor(rot6)
        trans = mlp_forward(self.store, f"{self.prefix}.trans", f)
        pose = Pose(rot.data.copy(), trans.data.reshape(3).copy())
        return pose, rot, trans
