"""Ray sampling against the lattice mesh.

A ray is intersected with the warped grid planes to enumerate the voxels
it crosses (near to far), the acceleration grid optionally prunes empty
voxels, and the triangles incident to the surviving voxels' vertices are
tested exactly. Background-shell triangles, when present, are tested
directly and every hit is kept.

Everything here is pure geometry on plain arrays; gradient routing
happens downstream by re-expressing each hit point as a fixed-weight
barycentric mix of its triangle's vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accel
from . import lattice as lat

T_MIN = 1e-6
BARY_EPS = 1e-9
_DET_EPS = 1e-30


@dataclass
class Schedule:
    """Per-progress traversal budget and the matching batch growth."""

    use_pruning: bool
    limit: int
    batch_multiplier: int


def schedule_limits(progress: float, resolution: int) -> Schedule:
    """Sample budget over training: 3P voxels early, then 3P/2, then 3P/4.

    The batch doubles each time the budget halves, so per-step work stays
    roughly constant.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must be in [0, 1]")
    p = resolution
    if progress < 0.25:
        return Schedule(False, 3 * p, 1)
    if progress < 0.5:
        return Schedule(True, (3 * p) // 2, 2)
    return Schedule(True, (3 * p) // 4, 4)


@dataclass
class SampleBatch:
    """Ray/mesh intersections for a batch of rays, sorted by (ray, depth).

    ``rank`` is each sample's position within its ray; ``voxel_id`` is the
    lattice voxel containing the hit point (-1 for background-shell hits).
    """

    n_rays: int
    ray_index: np.ndarray
    tri_id: np.ndarray
    t: np.ndarray
    bary: np.ndarray
    points: np.ndarray
    voxel_id: np.ndarray
    rank: np.ndarray

    def __len__(self):
        return len(self.ray_index)

    @property
    def max_rank(self) -> int:
        return int(self.rank.max()) + 1 if len(self.rank) else 0


def _per_ray_rank(ray_index: np.ndarray) -> np.ndarray:
    """Position of each entry within its (already grouped) ray."""
    n = len(ray_index)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.r_[True, ray_index[1:] != ray_index[:-1]]
    starts = np.flatnonzero(change)
    lengths = np.diff(np.r_[starts, n])
    return np.arange(n) - np.repeat(starts, lengths)


def ray_voxels_batch(
    origins: np.ndarray, dirs: np.ndarray, cfg: lat.LatticeConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ordered voxel crossings for each ray.

    Returns flat (ray_index, voxel_id, entry_t) arrays sorted by
    (ray, entry depth). Rays that miss the lattice contribute nothing.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    p = cfg.resolution
    normals, offs = lat.lattice_planes(cfg)

    denom = dirs @ normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = (offs[None, :] - origins @ normals.T) / denom
    tt[~np.isfinite(tt)] = np.inf
    tt[tt <= 0.0] = np.inf

    r = len(origins)
    bounds = np.concatenate([np.zeros((r, 1)), tt], axis=1)
    bounds.sort(axis=1)
    t0, t1 = bounds[:, :-1], bounds[:, 1:]
    seg_ok = np.isfinite(t1) & (t1 > t0)

    mid_t = np.where(seg_ok, 0.5 * (t0 + t1), 0.0)
    mids = origins[:, None, :] + mid_t[..., None] * dirs[:, None, :]
    mnorm = lat.unwarp_points(cfg, mids.reshape(-1, 3)).reshape(mids.shape)
    cell = np.floor((mnorm + 0.5) * p)
    inside = np.all((cell >= 0) & (cell < p), axis=-1)
    ok = seg_ok & inside & np.all(np.isfinite(mnorm), axis=-1)

    ray_idx, seg_idx = np.nonzero(ok)
    c = cell[ray_idx, seg_idx].astype(np.int64)
    vox = lat.voxel_id(p, c[:, 0], c[:, 1], c[:, 2])
    entry = t0[ray_idx, seg_idx]

    # zero-length numerical slivers can revisit a voxel; drop repeats
    if len(vox):
        keep = np.r_[True, (ray_idx[1:] != ray_idx[:-1]) | (vox[1:] != vox[:-1])]
        ray_idx, vox, entry = ray_idx[keep], vox[keep], entry[keep]
    return ray_idx, vox, entry


def moller_trumbore(
    origins: np.ndarray, dirs: np.ndarray, v0, v1, v2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched ray/triangle solve; returns (hit_mask, t, bary)."""
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > _DET_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", dirs, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= -BARY_EPS) & (v >= -BARY_EPS) & (u + v <= 1.0 + BARY_EPS) & (t > T_MIN)
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    np.clip(bary, 0.0, 1.0, out=bary)
    return hit, t, bary


def ray_triangle(origin, direction, v0, v1, v2):
    """Single-ray convenience wrapper; returns (t, bary) or None."""
    hit, t, bary = moller_trumbore(
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        np.asarray(v0, dtype=np.float64)[None],
        np.asarray(v1, dtype=np.float64)[None],
        np.asarray(v2, dtype=np.float64)[None],
    )
    if not hit[0]:
        return None
    return float(t[0]), bary[0]


def _containing_voxels(cfg: lat.LatticeConfig, points: np.ndarray) -> np.ndarray:
    p = cfg.resolution
    norm = lat.unwarp_points(cfg, points)
    cell = np.floor((norm + 0.5) * p)
    cell = np.clip(cell, 0, p - 1).astype(np.int64)
    return lat.voxel_id(p, cell[:, 0], cell[:, 1], cell[:, 2])


def sample_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    cfg: lat.LatticeConfig,
    topo: lat.QuadTopology,
    world_verts: np.ndarray,
    limit: int,
    grid: accel.AccelGrid | None = None,
    use_pruning: bool = False,
) -> SampleBatch:
    """Full traversal + intersection for a ray batch.

    ``world_verts`` are current vertex positions (lattice then box).
    Lattice hits are deduplicated per triangle, depth sorted, and capped
    at ``limit`` nearest per ray; background-shell hits are all kept.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=1)
    if len(norms) and (np.abs(norms - 1.0).max() > 1e-6):
        raise ValueError("ray directions must be unit length")
    if limit < 1:
        raise ValueError("limit must be >= 1")
    n_rays = len(origins)

    ray_idx, vox, _ = ray_voxels_batch(origins, dirs, cfg)
    if use_pruning and grid is not None and len(vox):
        keep = grid.values.values[vox, 0] > grid.threshold
        ray_idx, vox = ray_idx[keep], vox[keep]
    if len(vox):
        keep = _per_ray_rank(ray_idx) < limit
        ray_idx, vox = ray_idx[keep], vox[keep]

    n_tris = len(topo.tris)
    if len(vox):
        cand = topo.incident_tris[vox]  # (V, 24)
        cray = np.repeat(ray_idx, cand.shape[1])
        ctri = cand.ravel().astype(np.int64)
        mask = ctri >= 0
        cray, ctri = cray[mask], ctri[mask]
        key = np.unique(cray * n_tris + ctri)
        cray, ctri = key // n_tris, key % n_tris
    else:
        cray = np.zeros(0, dtype=np.int64)
        ctri = np.zeros(0, dtype=np.int64)

    tri_verts = world_verts[topo.tris[ctri]]
    hit, t, bary = moller_trumbore(
        origins[cray], dirs[cray], tri_verts[:, 0], tri_verts[:, 1], tri_verts[:, 2]
    )
    cray, ctri, t, bary = cray[hit], ctri[hit], t[hit], bary[hit]

    order = np.lexsort((ctri, t, cray))
    cray, ctri, t, bary = cray[order], ctri[order], t[order], bary[order]
    keep = _per_ray_rank(cray) < limit
    cray, ctri, t, bary = cray[keep], ctri[keep], t[keep], bary[keep]
    points = origins[cray] + t[:, None] * dirs[cray]
    voxels = _containing_voxels(cfg, points) if len(cray) else np.zeros(0, dtype=np.int64)

    n_box_tris = n_tris - 2 * topo.n_lattice_quads
    if n_box_tris > 0 and n_rays > 0:
        box_ids = np.arange(2 * topo.n_lattice_quads, n_tris, dtype=np.int64)
        bray = np.repeat(np.arange(n_rays, dtype=np.int64), n_box_tris)
        btri = np.tile(box_ids, n_rays)
        bverts = world_verts[topo.tris[btri]]
        bhit, bt, bbary = moller_trumbore(
            origins[bray], dirs[bray], bverts[:, 0], bverts[:, 1], bverts[:, 2]
        )
        bray, btri, bt, bbary = bray[bhit], btri[bhit], bt[bhit], bbary[bhit]
        bpoints = origins[bray] + bt[:, None] * dirs[bray]
        bvox = np.full(len(bray), -1, dtype=np.int64)

        cray = np.concatenate([cray, bray])
        ctri = np.concatenate([ctri, btri])
        t = np.concatenate([t, bt])
        bary = np.concatenate([bary, bbary])
        points = np.concatenate([points, bpoints]) if len(points) else bpoints
        voxels = np.concatenate([voxels, bvox])
        order = np.lexsort((ctri, t, cray))
        cray, ctri, t, bary = cray[order], ctri[order], t[order], bary[order]
        points, voxels = points[order], voxels[order]

    return SampleBatch(
        n_rays=n_rays,
        ray_index=cray,
        tri_id=ctri,
        t=t,
        bary=bary,
        points=points.reshape(-1, 3),
        voxel_id=voxels,
        rank=_per_ray_rank(cray),
    )


def ray_lattice_voxels(origin, direction, cfg: lat.LatticeConfig) -> np.ndarray:
    """Ordered (near to far) lattice voxels crossed by one ray."""
    _, vox, _ = ray_voxels_batch(
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        cfg,
    )
    return vox


def ray_mesh_intersections(
    origin, direction, cfg, topo, world_verts, limit
) -> SampleBatch:
    """Single-ray wrapper over sample_rays with pruning disabled."""
    return sample_rays(
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        cfg,
        topo,
        world_verts,
        limit,
    )
