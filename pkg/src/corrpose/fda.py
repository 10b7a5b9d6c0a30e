"""Feature disengagement and alignment across two coordinate systems.

Each module splits a point-wise feature map into a pose stream and a match
stream, scores all query/key match pairs into a row-stochastic attention
map, and pulls the key's streams over to the query's point order by matrix
multiplication.  A small decoder turns the aligned pose stream back into
3D points, which is where the correspondence supervision attaches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, matmul, softmax_rows, transpose
from .nn import ParameterStore, init_mlp, mlp_forward


@dataclass
class FeatureMap:
    """N x C point-wise features tied to one cloud's point order."""

    features: Tensor
    frame: str   # camera | object
    role: str    # raw | pose | match | aligned_pose | aligned_match

    def __post_init__(self):
        if self.frame not in ("camera", "object"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.role not in ("raw", "pose", "match", "aligned_pose", "aligned_match"):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def n(self) -> int:
        return self.features.data.shape[0]


@dataclass
class AttentionMap:
    """Row-stochastic N x M weights linking query points to key points."""

    weights: Tensor

    def __post_init__(self):
        w = self.weights.data
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("attention rows must sum to 1")
        if w.min() < 0.0 or w.max() > 1.0 + 1e-12:
            raise ValueError("attention entries must lie in [0, 1]")


@dataclass
class FdaOutput:
    own_pose: Tensor
    own_match: Tensor
    aligned_pose: Tensor
    aligned_match: Tensor
    decoded_points: Tensor
    attention: AttentionMap


class FdaModule:
    """One feature disengagement and alignment block with its own weights."""

    def __init__(self, store: ParameterStore, prefix: str, c_raw: int,
                 c_branch: int, disengage_depth: int = 2, decoder_depth: int = 3,
                 rng: np.random.Generator | None = None):
        self.store = store
        self.prefix = prefix
        self.c_raw = c_raw
        self.c_branch = c_branch
        rng = rng if rng is not None else np.random.default_rng(0)
        branch_sizes = [c_raw] + [c_branch] * disengage_depth
        for name in ("pose_q", "match_q", "pose_k", "match_k"):
            init_mlp(store, f"{prefix}.{name}", branch_sizes, rng)
        decoder_sizes = [c_branch] * decoder_depth + [3]
        init_mlp(store, f"{prefix}.decode", decoder_sizes, rng)

    def disengage(self, f: FeatureMap, side: str) -> tuple[FeatureMap, FeatureMap]:
        """Split a raw feature map into independent pose and match streams."""
        if f.role != "raw":
            raise ValueError(f"disengage expects a raw feature map, got {f.role!r}")
        if side not in ("q", "k"):
            raise ValueError("side must be 'q' or 'k'")
        pose = mlp_forward(self.store, f"{self.prefix}.pose_{side}", f.features)
        match = mlp_forward(self.store, f"{self.prefix}.match_{side}", f.features)
        return (FeatureMap(pose, f.frame, "pose"),
                FeatureMap(match, f.frame, "match"))

    def compute_attention(self, match_q: Tensor, match_k: Tensor) -> AttentionMap:
        """Row softmax of the plain query-key feature product, no scaling."""
        if match_q.data.shape[1] != match_k.data.shape[1]:
            raise ShapeError("match feature widths differ")
        logits = matmul(match_q, transpose(match_k))
        return AttentionMap(softmax_rows(logits))

    def align(self, att: AttentionMap, f: Tensor) -> Tensor:
        """Convex recombination of key features into the query's row order."""
        return matmul(att.weights, f)

    def decode_points(self, aligned_pose: FeatureMap) -> Tensor:
        if aligned_pose.role != "aligned_pose":
            raise ValueError(f"decode expects aligned_pose, got {aligned_pose.role!r}")
        return mlp_forward(self.store, f"{self.prefix}.decode", aligned_pose.features)

    def forward(self, f_query: FeatureMap, f_key: FeatureMap) -> FdaOutput:
        if f_query.frame == f_key.frame:
            raise ValueError("query and key must come from different frames")
        pose_q, match_q = self.disengage(f_query, "q")
        pose_k, match_k = self.disengage(f_key, "k")
        att = self.compute_attention(match_q.features, match_k.features)
        aligned_pose = self.align(att, pose_k.features)
        aligned_match = self.align(att, match_k.features)
        decoded = self.decode_points(
            FeatureMap(aligned_pose, f_key.frame, "aligned_pose"))
        return FdaOutput(
            own_pose=pose_q.features,
            own_match=match_q.features,
            aligned_pose=aligned_pose,
            aligned_match=aligned_match,
            decoded_points=decoded,
            attention=att,
        )


def dump_attention_csv(path, att: AttentionMap) -> None:
    """Write attention weights as plain CSV for visual inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in att.weights.data:
            writer.writerow([repr(float(v)) for v in row])
