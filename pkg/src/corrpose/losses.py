"""Training objectives: reconstruction, pose, and confidence penalties.

Distances are unsquared L2 norms.  For symmetric objects the index-aligned
distances are replaced by nearest-point ones: two-way Chamfer for the
reconstructions, closest-point means for the pose term, and per-point
nearest distances inside the confidence penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Pose, SymmetrySpec, inverse_transform, nearest_indices, transform


@dataclass(frozen=True)
class LossWeights:
    lambda_p2p: float = 5.0
    lambda_c2c: float = 1.0
    lambda_pose: float = 1.0
    lambda_conf: float = 1.0
    w: float = 0.01

    def __post_init__(self):
        for name in ("lambda_p2p", "lambda_c2c", "lambda_pose", "lambda_conf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.w <= 0:
            raise ValueError("w must be positive")


@dataclass
class LossParts:
    p2p: Tensor
    c2c: Tensor
    pose: Tensor
    conf: Tensor


def norm_rows(t: Tensor) -> Tensor:
    """Per-row L2 norm as an Nx1 column."""
    return ad.sqrt(ad.sum_axis(ad.square(t), 1))


def transform_rows(rot: Tensor, trans: Tensor, pts: np.ndarray) -> Tensor:
    """R p + t for constant points against graph pose tensors."""
    return ad.add(ad.matmul(Tensor(pts), ad.transpose(rot)), trans)


def inverse_transform_rows(rot: Tensor, trans: Tensor, pts: np.ndarray) -> Tensor:
    """R^T (p - t) for constant points against graph pose tensors."""
    return ad.matmul(ad.sub(Tensor(pts), trans), rot)


def _mean_norm(diff: Tensor) -> Tensor:
    return ad.mean_all(norm_rows(diff))


def _chamfer_graph(decoded: Tensor, target: np.ndarray) -> Tensor:
    """Two-way Chamfer between graph points and a constant set."""
    idx_fwd = nearest_indices(decoded.data, target)
    fwd = _mean_norm(ad.sub(decoded, target[idx_fwd]))
    idx_bwd = nearest_indices(target, decoded.data)
    bwd = _mean_norm(ad.sub(ad.gather_rows(decoded, idx_bwd), target))
    return ad.add(fwd, bwd)


def _reconstruction_loss(decoded: Tensor, target: np.ndarray,
                         sym: SymmetrySpec) -> Tensor:
    if sym.is_symmetric:
        return _chamfer_graph(decoded, target)
    if decoded.data.shape != target.shape:
        raise ad.ShapeError(
            f"decoded shape {decoded.data.shape} does not match target {target.shape}")
    return _mean_norm(ad.sub(decoded, target))


def loss_p2p(decoded: Tensor, obs: np.ndarray, gt: Pose, sym: SymmetrySpec) -> Tensor:
    """Reconstruction of the observation expressed in object coordinates."""
    return _reconstruction_loss(decoded, inverse_transform(gt, obs), sym)


def loss_c2c(decoded: Tensor, model: np.ndarray, gt: Pose, sym: SymmetrySpec) -> Tensor:
    """Reconstruction of the full model expressed in camera coordinates."""
    return _reconstruction_loss(decoded, transform(gt, model), sym)


def loss_pose(rot, trans, gt: Pose, model: np.ndarray, sym: SymmetrySpec) -> Tensor:
    """Mean distance between predicted and true model transforms.

    rot/trans may be graph tensors (training) or plain arrays (evaluation).
    Symmetric objects use the closest-point distance instead of the
    index-aligned one.
    """
    rot = ad.as_tensor(rot)
    if isinstance(trans, Tensor):
        if trans.data.shape != (1, 3):
            trans = ad.reshape(trans, (1, 3))
    else:
        trans = Tensor(np.asarray(trans, dtype=np.float64).reshape(1, 3))
    pred_pts = transform_rows(rot, trans, model)
    gt_pts = transform(gt, model)
    if sym.is_symmetric:
        idx = nearest_indices(pred_pts.data, gt_pts)
        return _mean_norm(ad.sub(pred_pts, gt_pts[idx]))
    return _mean_norm(ad.sub(pred_pts, gt_pts))


def sigma(d, s, w: float = 0.01):
    """Confidence penalty d*s - w*log(s); tensors in, tensor out."""
    if isinstance(d, Tensor) or isinstance(s, Tensor):
        d, s = ad.as_tensor(d), ad.as_tensor(s)
        return ad.sub(ad.mul(d, s), ad.mul(ad.log(s), w))
    if s <= 0:
        raise ValueError("sigma needs s > 0")
    return d * s - w * math.log(s)


def _per_point_distance(decoded: Tensor, target: Tensor, sym: SymmetrySpec) -> Tensor:
    if sym.is_symmetric:
        idx = nearest_indices(decoded.data, target.data)
        target = ad.gather_rows(target, idx)
    return norm_rows(ad.sub(decoded, target))


def loss_conf(decoded_p2p: Tensor, decoded_c2c: Tensor, obs: np.ndarray,
              model: np.ndarray, rot: Tensor, trans: Tensor,
              s: Tensor, sym: SymmetrySpec, w: float = 0.01) -> Tensor:
    """Score-weighted residuals against the predicted (not true) pose.

    The first block compares the object-frame reconstruction with the
    back-transformed observation; the second compares the camera-frame
    reconstruction with the forward-transformed model.  Scores line up with
    the stacked row order of the paired features.
    """
    if s.data.min() <= 0.0:
        raise ValueError("confidence scores must be strictly positive")
    n_x = decoded_p2p.data.shape[0]
    n_y = decoded_c2c.data.shape[0]
    if s.data.shape[0] != n_x + n_y:
        raise ad.ShapeError("score vector length must equal N_X + N_Y")
    d_x = _per_point_distance(decoded_p2p, inverse_transform_rows(rot, trans, obs), sym)
    d_y = _per_point_distance(decoded_c2c, transform_rows(rot, trans, model), sym)
    s_x = ad.slice_rows(s, 0, n_x)
    s_y = ad.slice_rows(s, n_x, n_x + n_y)
    return ad.add(ad.mean_all(sigma(d_x, s_x, w)), ad.mean_all(sigma(d_y, s_y, w)))


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """Weighted sum of the four objectives."""
    return ad.add(
        ad.add(ad.mul(ad.as_tensor(parts.p2p), weights.lambda_p2p),
               ad.mul(ad.as_tensor(parts.c2c), weights.lambda_c2c)),
        ad.add(ad.mul(ad.as_tensor(parts.pose), weights.lambda_pose),
               ad.mul(ad.as_tensor(parts.conf), weights.lambda_conf)),
    )
