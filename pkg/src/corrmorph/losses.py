"""Training objective: shape + density + relative-displacement terms.

All terms are differentiable along the tape; nearest-neighbor assignments are
recomputed from current values each call but treated as constants during the
backward pass (gradients flow through distances, not through the argmin).
Inputs live in one consistent coordinate frame (training uses the normalized
frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import PointSet, knn_indices, pairwise_sq_dists


@dataclass(frozen=True)
class LossWeights:
    """Scale of the density and relative-displacement terms added to shape."""

    density: float = 0.3
    relative: float = 5.0

    def __post_init__(self):
        if self.density < 0 or self.relative < 0:
            raise ValueError("loss weights must be non-negative")


def _coords(x) -> Tensor:
    if isinstance(x, PointSet):
        return Tensor(x.coords)
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_cloud(t: Tensor, name: str) -> None:
    if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty (N, 3) cloud, got {t.shape}")


def shape_loss(pred, target) -> Tensor:
    """Symmetric Chamfer distance: mean squared nearest-neighbor distance from
    pred to target plus the same from target to pred."""
    pred, target = _coords(pred), _coords(target)
    _check_cloud(pred, "pred")
    _check_cloud(target, "target")
    tv = target.values
    d2 = pairwise_sq_dists(pred.values, tv)
    nn_pt = np.argmin(d2, axis=1)
    nn_tp = np.argmin(d2, axis=0)

    diff_pt = ad.sub(pred, tv[nn_pt])
    term_pt = ad.mean_reduce(ad.sum_reduce(ad.mul(diff_pt, diff_pt), axis=1))
    diff_tp = ad.sub(ad.gather_rows(pred, nn_tp), tv)
    term_tp = ad.mean_reduce(ad.sum_reduce(ad.mul(diff_tp, diff_tp), axis=1))
    return ad.add(term_pt, term_tp)


def _knn_mean_distance(cloud: Tensor, idx: np.ndarray) -> Tensor:
    """Per-point mean distance to the rows selected by idx (N, k)."""
    n = cloud.shape[0]
    center = ad.reshape(cloud, (n, 1, 3))
    diff = ad.sub(center, ad.gather_rows(cloud, idx))
    dist = ad.sqrt(ad.sum_reduce(ad.mul(diff, diff), axis=2))
    return ad.mean_reduce(dist, axis=1)


def density_loss(pred, target, k: int = 8) -> Tensor:
    """Local-density mismatch: |mean k-NN distance at each pred point - the
    same statistic at its nearest target point|, averaged over pred."""
    pred, target = _coords(pred), _coords(target)
    _check_cloud(pred, "pred")
    _check_cloud(target, "target")
    if k >= pred.shape[0] or k >= target.shape[0]:
        raise ValueError(f"k={k} must be smaller than both cloud sizes")
    tv = target.values
    idx_p = knn_indices(pred.values, pred.values, k, exclude_self=True)
    stat_p = _knn_mean_distance(pred, idx_p)

    idx_t = knn_indices(tv, tv, k, exclude_self=True)
    t_nbr = tv[idx_t]
    stat_t = np.linalg.norm(tv[:, None, :] - t_nbr, axis=2).mean(axis=1)
    nearest_t = np.argmin(pairwise_sq_dists(pred.values, tv), axis=1)
    return ad.mean_reduce(ad.absolute(ad.sub(stat_p, stat_t[nearest_t])))


def neighbor_lists(coords: np.ndarray, k: int = 8) -> np.ndarray:
    """k-NN index lists (N, k) used by the relative-displacement term; built
    once on the pre-movement driven points and held fixed."""
    return knn_indices(coords, coords, k, exclude_self=True)


def relative_disp_loss(pred_disp, target_disp, neighbor_idx: np.ndarray) -> Tensor:
    """Mean squared error of relative displacements between each point and its
    fixed neighbors: ||(v_i - v_j) - (t_i - t_j)||^2 over all (i, j) pairs.
    Invariant to adding one constant vector to every predicted displacement."""
    pred_disp = _coords(pred_disp)
    target = np.asarray(
        target_disp.values if isinstance(target_disp, Tensor) else target_disp, dtype=np.float64
    )
    if pred_disp.shape != target.shape:
        raise ValueError(
            f"displacement fields misaligned: {pred_disp.shape} vs {target.shape}"
        )
    idx = np.asarray(neighbor_idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != pred_disp.shape[0]:
        raise ValueError(f"neighbor lists must be (N, k) with N={pred_disp.shape[0]}")
    n = pred_disp.shape[0]
    rel_pred = ad.sub(ad.reshape(pred_disp, (n, 1, 3)), ad.gather_rows(pred_disp, idx))
    rel_target = target[:, None, :] - target[idx]
    diff = ad.sub(rel_pred, rel_target)
    return ad.mean_reduce(ad.reshape(ad.sum_reduce(ad.mul(diff, diff), axis=2), (-1,)))


def hybrid_loss(
    pred,
    target,
    pred_disp,
    target_disp,
    neighbor_idx: np.ndarray,
    weights: LossWeights = LossWeights(),
    density_k: int = 8,
) -> tuple[Tensor, dict[str, float]]:
    """shape + density_weight * density + relative_weight * relative.

    Returns the scalar tensor plus the component values for logging.
    """
    l_shape = shape_loss(pred, target)
    l_density = density_loss(pred, target, k=density_k)
    l_relative = relative_disp_loss(pred_disp, target_disp, neighbor_idx)
    total = ad.add(l_shape, ad.scale_add(l_density, l_relative, weights.density, weights.relative))
    parts = {
        "shape": float(l_shape.values),
        "density": float(l_density.values),
        "relative": float(l_relative.values),
        "total": float(total.values),
    }
    return total, parts
