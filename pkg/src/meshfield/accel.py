"""Acceleration grid: a per-voxel scalar trained to upper-bound the
compositing weight of any sample falling in that voxel, used to skip
empty space during ray traversal.

Values start at zero and are projected back to >= 0 after every
optimizer step so the hinge bound keeps its meaning.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

DEFAULT_THRESHOLD = 0.1
SPARSITY_WEIGHT = 1e-5
SMOOTHNESS_WEIGHT = 1e-5


class AccelGrid:
    """P^3 scalar field addressed by flat voxel id; no interpolation."""

    def __init__(self, resolution: int, threshold: float = DEFAULT_THRESHOLD):
        self.resolution = resolution
        self.threshold = threshold
        self.values = ad.Tensor(np.zeros((resolution**3, 1)), name="accel_grid")
        self._neighbors = _forward_difference_pairs(resolution)

    def lookup(self, voxel_ids) -> np.ndarray:
        ids = np.asarray(voxel_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.resolution**3):
            raise IndexError("voxel id out of range")
        return self.values.values[ids, 0]

    def project_nonnegative(self):
        np.maximum(self.values.values, 0.0, out=self.values.values)


def _forward_difference_pairs(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat index pairs (a, b) for forward differences along all 3 axes."""
    idx = np.arange(p**3).reshape(p, p, p)
    pairs_a, pairs_b = [], []
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(1, None)
        sl_b[axis] = slice(0, -1)
        pairs_a.append(idx[tuple(sl_a)].ravel())
        pairs_b.append(idx[tuple(sl_b)].ravel())
    return np.concatenate(pairs_a), np.concatenate(pairs_b)


def grid_losses(
    grid: AccelGrid, voxel_ids: np.ndarray, t_alpha_detached: np.ndarray
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Bound, sparsity, and smoothness terms; gradients reach only the grid.

    ``t_alpha_detached`` must already be plain values (stop-gradiented by
    the caller), so the image loss can never be degraded through here.
    """
    g = grid.values
    if len(voxel_ids):
        looked_up = ad.gather_rows(g, np.asarray(voxel_ids, dtype=np.int64))
        target = np.asarray(t_alpha_detached, dtype=np.float64).reshape(-1, 1)
        bound = ad.tensor_sum(ad.relu(ad.sub(ad.Tensor(target), looked_up)))
    else:
        bound = ad.mul(ad.tensor_sum(g), 0.0)
    sparse = ad.tensor_sum(ad.absolute(g))
    na, nb = grid._neighbors
    diff = ad.sub(ad.gather_rows(g, na), ad.gather_rows(g, nb))
    smooth = ad.tensor_sum(ad.mul(diff, diff))
    return bound, sparse, smooth


def grid_objective(grid: AccelGrid, voxel_ids, t_alpha_detached) -> ad.Tensor:
    bound, sparse, smooth = grid_losses(grid, voxel_ids, t_alpha_detached)
    return ad.add(
        bound,
        ad.add(ad.mul(sparse, SPARSITY_WEIGHT), ad.mul(smooth, SMOOTHNESS_WEIGHT)),
    )


def prune(grid: AccelGrid, voxel_ids: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Stable filter keeping voxels whose grid value strictly exceeds the threshold."""
    tau = grid.threshold if threshold is None else threshold
    voxel_ids = np.asarray(voxel_ids, dtype=np.int64)
    return voxel_ids[grid.values.values[voxel_ids, 0] > tau]
