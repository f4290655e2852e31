"""Trainable polygon lattice: one vertex per voxel, one quad per interior
grid edge (dual-contouring style), plus the per-scene-kind coordinate
warps and the concentric background shells for unbounded captures.

Vertex offsets live in voxel-local units and are only softly constrained
to [-0.5, 0.5] by the regularizer; topology is fixed once built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

FORWARD_FACING_DEPTH_SCALE = math.log(25.0)  # exp(w * 1.0) = 25 at the far plane


@dataclass
class Synthetic:
    scale: float = 1.0
    tag = "synthetic"


@dataclass
class ForwardFacing:
    u: float = 1.75
    v: float = 1.75
    tag = "forward_facing"


@dataclass
class Unbounded:
    shells: int = 4
    box_subdiv: int = 8
    tag = "unbounded"


SceneKind = Synthetic | ForwardFacing | Unbounded


@dataclass
class LatticeConfig:
    resolution: int = 16
    kind: SceneKind = field(default_factory=Synthetic)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if isinstance(self.kind, Synthetic) and self.kind.scale <= 0:
            raise ValueError("synthetic scale must be positive")
        if isinstance(self.kind, Unbounded) and self.kind.shells < 1:
            raise ValueError("need at least one background shell")

    @property
    def n_voxels(self) -> int:
        return self.resolution**3


def kind_to_dict(kind: SceneKind) -> dict:
    d = {"tag": kind.tag}
    d.update({k: v for k, v in kind.__dict__.items()})
    return d


def kind_from_dict(d: dict) -> SceneKind:
    tag = d["tag"]
    params = {k: v for k, v in d.items() if k != "tag"}
    cls = {"synthetic": Synthetic, "forward_facing": ForwardFacing, "unbounded": Unbounded}[tag]
    return cls(**params)


def voxel_id(p: int, i, j, k):
    return (i * p + j) * p + k


def voxel_center(p: int, ijk: np.ndarray) -> np.ndarray:
    """Center of voxel (i,j,k) in normalized cube coordinates."""
    return (np.asarray(ijk, dtype=np.float64) + 0.5) / p - 0.5


@dataclass
class QuadTopology:
    """Fixed connectivity of the lattice plus optional background boxes.

    quads[q] holds four global vertex ids ordered so that the quad's
    bilinear parameterization is point(s,t) = mix over (v0, v1, v2, v3)
    with v1 one step along the s axis and v2 one step along t.
    Triangles split each quad along the v0-v3 diagonal.
    """

    resolution: int
    quads: np.ndarray  # (Q, 4) int32 global vertex ids
    tris: np.ndarray  # (2Q, 3) int32
    n_lattice_quads: int
    box_vertices: np.ndarray  # (B, 3) float64 world positions, possibly empty
    incident_tris: np.ndarray  # (P^3, 24) int32, -1 padded, lattice tris only

    @property
    def n_quads(self) -> int:
        return len(self.quads)

    @property
    def n_vertices(self) -> int:
        return self.resolution**3 + len(self.box_vertices)

    def tri_quad(self, tri_id) -> np.ndarray:
        return np.asarray(tri_id) // 2


def _lattice_quads(p: int) -> np.ndarray:
    quads = []
    for axis in range(3):
        b, c = (axis + 1) % 3, (axis + 2) % 3
        shape = [0, 0, 0]
        shape[axis] = p
        shape[b] = p - 1
        shape[c] = p - 1
        ia, ib, ic = np.meshgrid(
            np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]), indexing="ij"
        )
        base = np.stack([ia.ravel(), ib.ravel(), ic.ravel()], axis=1)
        eb = np.zeros(3, dtype=np.int64)
        eb[b] = 1
        ec = np.zeros(3, dtype=np.int64)
        ec[c] = 1
        v0 = base
        v1 = base + eb
        v2 = base + ec
        v3 = base + eb + ec
        ids = np.stack(
            [voxel_id(p, *v.T) for v in (v0, v1, v2, v3)], axis=1
        )
        quads.append(ids)
    return np.concatenate(quads, axis=0).astype(np.int32)


def _box_geometry(cfg: LatticeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and quads for the concentric background shells."""
    kind = cfg.kind
    assert isinstance(kind, Unbounded)
    n = kind.box_subdiv
    dists = concentric_distances(kind.shells)
    verts = []
    quads = []
    vert_base = 0
    for d in dists:
        for axis in range(3):
            for sign in (1.0, -1.0):
                pa, qa = (axis + 1) % 3, (axis + 2) % 3
                grid = np.linspace(-d, d, n + 1)
                a, b = np.meshgrid(grid, grid, indexing="ij")
                face = np.zeros((n + 1, n + 1, 3))
                face[..., axis] = sign * d
                face[..., pa] = a
                face[..., qa] = b
                verts.append(face.reshape(-1, 3))

                def vid(i, j):
                    return vert_base + i * (n + 1) + j

                ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
                ii, jj = ii.ravel(), jj.ravel()
                quads.append(
                    np.stack([vid(ii, jj), vid(ii + 1, jj), vid(ii, jj + 1), vid(ii + 1, jj + 1)], axis=1)
                )
                vert_base += (n + 1) ** 2
    return np.concatenate(verts, axis=0), np.concatenate(quads, axis=0).astype(np.int32)


def build_topology(cfg: LatticeConfig) -> QuadTopology:
    p = cfg.resolution
    quads = _lattice_quads(p)
    n_lattice = len(quads)
    box_vertices = np.zeros((0, 3))
    if isinstance(cfg.kind, Unbounded):
        box_vertices, box_quads = _box_geometry(cfg)
        quads = np.concatenate([quads, box_quads + p**3], axis=0)

    tris = np.empty((2 * len(quads), 3), dtype=np.int32)
    tris[0::2] = quads[:, [0, 1, 3]]
    tris[1::2] = quads[:, [0, 3, 2]]

    # per-voxel incidence: the <= 12 lattice quads referencing each voxel
    lattice_quads = quads[:n_lattice]
    vox = lattice_quads.ravel().astype(np.int64)
    tri_pairs = np.repeat(np.arange(n_lattice, dtype=np.int64) * 2, 4)
    vox2 = np.concatenate([vox, vox])
    tri2 = np.concatenate([tri_pairs, tri_pairs + 1])
    order = np.argsort(vox2, kind="stable")
    vox2, tri2 = vox2[order], tri2[order]
    counts = np.bincount(vox2, minlength=p**3)
    incident = np.full((p**3, 24), -1, dtype=np.int32)
    starts = np.concatenate([[0], np.cumsum(counts)])
    cols = np.arange(len(vox2)) - starts[vox2]
    incident[vox2, cols] = tri2

    return QuadTopology(
        resolution=p,
        quads=quads,
        tris=tris,
        n_lattice_quads=n_lattice,
        box_vertices=box_vertices,
        incident_tris=incident,
    )


# -- coordinate warps ---------------------------------------------------------


def warp_points(cfg: LatticeConfig, p_norm: np.ndarray) -> np.ndarray:
    """Normalized cube coordinates -> world coordinates."""
    p_norm = np.asarray(p_norm, dtype=np.float64)
    kind = cfg.kind
    if isinstance(kind, Synthetic):
        return p_norm * kind.scale
    if isinstance(kind, ForwardFacing):
        w = FORWARD_FACING_DEPTH_SCALE
        z = np.exp(w * (p_norm[..., 2] + 0.5))
        out = np.empty_like(p_norm)
        out[..., 0] = kind.u * p_norm[..., 0] * z
        out[..., 1] = kind.v * p_norm[..., 1] * z
        out[..., 2] = z
        return out
    return p_norm.copy()


def unwarp_points(cfg: LatticeConfig, p_world: np.ndarray) -> np.ndarray:
    """World coordinates -> normalized cube coordinates (inverse warp)."""
    p_world = np.asarray(p_world, dtype=np.float64)
    kind = cfg.kind
    if isinstance(kind, Synthetic):
        return p_world / kind.scale
    if isinstance(kind, ForwardFacing):
        w = FORWARD_FACING_DEPTH_SCALE
        z = p_world[..., 2]
        out = np.empty_like(p_world)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[..., 2] = np.log(np.maximum(z, 1e-300)) / w - 0.5
            out[..., 0] = p_world[..., 0] / (kind.u * z)
            out[..., 1] = p_world[..., 1] / (kind.v * z)
        return out
    return p_world.copy()


def warp_tensor(cfg: LatticeConfig, p_norm: ad.Tensor) -> ad.Tensor:
    """Differentiable version of warp_points for (N, 3) tensors."""
    kind = cfg.kind
    if isinstance(kind, Synthetic):
        return ad.mul(p_norm, kind.scale)
    if isinstance(kind, ForwardFacing):
        w = FORWARD_FACING_DEPTH_SCALE
        z = ad.exp(ad.mul(ad.add(p_norm[:, 2:3], 0.5), w))
        x = ad.mul(ad.mul(p_norm[:, 0:1], kind.u), z)
        y = ad.mul(ad.mul(p_norm[:, 1:2], kind.v), z)
        return ad.concat([x, y, z], axis=1)
    return ad.add(p_norm, 0.0)


def lattice_planes(cfg: LatticeConfig) -> tuple[np.ndarray, np.ndarray]:
    """World-space planes (normal . x = offset) of the 3(P+1) grid planes.

    The warps map every constant-coordinate lattice plane to a world
    plane, so ray traversal can run directly in world space.
    """
    p = cfg.resolution
    c = np.arange(p + 1) / p - 0.5
    kind = cfg.kind
    normals, offsets = [], []
    for axis in range(3):
        n = np.zeros((p + 1, 3))
        if isinstance(kind, ForwardFacing) and axis != 2:
            # plane p_axis = c maps to {x_axis - uv_c * z = 0}
            uv = kind.u if axis == 0 else kind.v
            n[:, axis] = 1.0
            n[:, 2] = -uv * c
            d = np.zeros(p + 1)
        elif isinstance(kind, ForwardFacing):
            n[:, 2] = 1.0
            d = np.exp(FORWARD_FACING_DEPTH_SCALE * (c + 0.5))
        else:
            scale = kind.scale if isinstance(kind, Synthetic) else 1.0
            n[:, axis] = 1.0
            d = scale * c
        normals.append(n)
        offsets.append(d)
    return np.concatenate(normals, axis=0), np.concatenate(offsets)


def concentric_distances(shells: int) -> np.ndarray:
    """Half-extents of the background shells, from 0.5 out to 8.

    d_i = (exp(w i / L) + w - 1) / (2 w) with w chosen so d_L = 8,
    i.e. the positive root of exp(w) = 15 w + 1, found by bisection.
    """
    if shells < 1:
        raise ValueError("shells must be >= 1")
    f = lambda w: math.exp(w) - 15.0 * w - 1.0
    lo, hi = 1.0, 10.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    w = 0.5 * (lo + hi)
    i = np.arange(shells + 1)
    return (np.exp(w * i / shells) + w - 1.0) / (2.0 * w)


# -- trainable vertex field ----------------------------------------------------


def lattice_centers(p: int) -> np.ndarray:
    idx = np.arange(p)
    ii, jj, kk = np.meshgrid(idx, idx, idx, indexing="ij")
    ijk = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    return voxel_center(p, ijk)


def vertex_positions_np(cfg: LatticeConfig, topo: QuadTopology, offsets: np.ndarray) -> np.ndarray:
    """World positions of all vertices (lattice then box) as plain arrays."""
    p = cfg.resolution
    norm = lattice_centers(p) + offsets / p
    world = warp_points(cfg, norm)
    if len(topo.box_vertices):
        world = np.concatenate([world, topo.box_vertices], axis=0)
    return world


def vertex_positions_tensor(cfg: LatticeConfig, topo: QuadTopology, offsets: ad.Tensor) -> ad.Tensor:
    """Differentiable vertex positions; box vertices are constants."""
    p = cfg.resolution
    norm = ad.add(ad.mul(offsets, 1.0 / p), ad.Tensor(lattice_centers(p)))
    world = warp_tensor(cfg, norm)
    if len(topo.box_vertices):
        world = ad.concat([world, ad.Tensor(topo.box_vertices)], axis=0)
    return world


def vertex_regularizer(offsets: ad.Tensor) -> ad.Tensor:
    """L1 pull toward voxel centers, with a steep penalty outside the voxel.

    loss = sum_v (1e3 * [any |component| > 0.5] + 1e-2) * |v|_1
    The indicator is evaluated on current values and treated as constant.
    """
    outside = np.any(np.abs(offsets.values) > 0.5, axis=1, keepdims=True)
    coef = np.where(outside, 1e3 + 1e-2, 1e-2)
    return ad.tensor_sum(ad.mul(ad.absolute(offsets), ad.Tensor(coef)))
