"""Iterative residual pose refinement driven by cached aligned features.

Each iteration back-transforms the observation with the current pose
estimate, concatenates those coordinates with the frozen aligned pose
features, pools with the frozen confidence weights and regresses a
residual rotation/translation which is composed onto the running pose:
R_k = dR R_{k-1}, t_k = R_{k-1} dt + t_{k-1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Pose, SymmetrySpec, inverse_transform, orthonormalize
from .heads import IDENTITY_ROT6D, rot6d_tensor
from .losses import loss_pose
from .nn import ParameterStore, init_mlp, mlp_forward


@dataclass
class RefineState:
    """Per-sample cache carried across refinement iterations."""

    pose: Pose
    iteration: int
    aligned_pose: np.ndarray  # N_X x C, frozen from the initial forward pass
    scores: np.ndarray        # first N_X confidence scores, frozen

    def __post_init__(self):
        if self.aligned_pose.shape[0] != self.scores.shape[0]:
            raise ValueError("cached features and scores disagree on N")


def back_transform(obs: np.ndarray, pose: Pose) -> np.ndarray:
    """Observation expressed in the current pose's object frame."""
    return inverse_transform(pose, obs)


def compose(prev: Pose, d_rot: np.ndarray, d_trans: np.ndarray) -> Pose:
    """Apply a residual on top of prev; re-orthonormalized against drift."""
    rot = orthonormalize(np.asarray(d_rot) @ prev.rotation)
    trans = prev.rotation @ np.asarray(d_trans).reshape(3) + prev.translation
    return Pose(rot, trans)


def compose_tensor(prev: Pose, d_rot: Tensor, d_trans: Tensor) -> tuple[Tensor, Tensor]:
    """Graph-side composition; prev is a frozen constant."""
    rot = ad.matmul(d_rot, Tensor(prev.rotation))
    trans = ad.add(ad.matmul(d_trans, Tensor(prev.rotation.T)),
                   Tensor(prev.translation.reshape(1, 3)))
    return rot, trans


class Refiner:
    """Residual pose network reusing the main network's correspondence."""

    def __init__(self, store: ParameterStore, prefix: str, c_branch: int,
                 c_f: int, embed_depth: int = 2, head_depth: int = 2,
                 rng: np.random.Generator | None = None):
        self.store = store
        self.prefix = prefix
        rng = rng if rng is not None else np.random.default_rng(0)
        init_mlp(store, f"{prefix}.embed", [3 + c_branch] + [c_f] * embed_depth, rng)
        head_hidden = [c_f] * (head_depth - 1)
        init_mlp(store, f"{prefix}.rot", [c_f] + head_hidden + [6], rng,
                 final_bias=IDENTITY_ROT6D)
        init_mlp(store, f"{prefix}.trans", [c_f] + head_hidden + [3], rng)

    def pooling_weights(self, scores: np.ndarray) -> np.ndarray:
        """Softmax over the cached score prefix."""
        e = np.exp(scores - scores.max())
        return e / e.sum()

    def residual_pose(self, state: RefineState, obs: np.ndarray) -> tuple[Tensor, Tensor]:
        """Residual (dR, dt) from back-transformed points and cached features."""
        if state.aligned_pose is None or state.scores is None:
            raise ValueError("refinement caches are missing")
        back = back_transform(obs, state.pose)
        rows = ad.concat_cols([Tensor(back), Tensor(state.aligned_pose)])
        embedded = mlp_forward(self.store, f"{self.prefix}.embed", rows)
        weights = self.pooling_weights(state.scores).reshape(1, -1)
        pooled = ad.matmul(Tensor(weights), embedded)
        d_rot = rot6d_tensor(mlp_forward(self.store, f"{self.prefix}.rot", pooled))
        d_trans = mlp_forward(self.store, f"{self.prefix}.trans", pooled)
        return d_rot, d_trans

    def refine_loop(self, initial: Pose, state: RefineState, obs: np.ndarray,
                    iterations: int) -> Pose:
        """Run K residual steps from initial; K = 0 returns initial."""
        state.pose = initial
        state.iteration = 0
        for _ in range(iterations):
            d_rot, d_trans = self.residual_pose(state, obs)
            state.pose = compose(state.pose, d_rot.data, d_trans.data)
            state.iteration += 1
        return state.pose

    def training_loss(self, initial: Pose, state: RefineState, obs: np.ndarray,
                      gt: Pose, model: np.ndarray, sym: SymmetrySpec,
                      iterations: int) -> Tensor:
        """Mean pose loss over composed poses of an unrolled refinement.

        Poses are detached between iterations, so each step trains on the
        previous step's frozen output rather than backpropagating through
        the whole chain.
        """
        state.pose = initial
        state.iteration = 0
        terms = []
        for _ in range(iterations):
            d_rot, d_trans = self.residual_pose(state, obs)
            rot_t, trans_t = compose_tensor(state.pose, d_rot, d_trans)
            terms.append(loss_pose(rot_t, trans_t, gt, model, sym))
            state.pose = compose(state.pose, d_rot.data, d_trans.data)
            state.iteration += 1
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, 1.0 / len(terms))
