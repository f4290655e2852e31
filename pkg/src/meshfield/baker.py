"""Bake a trained hard-surface model into a portable textured-mesh asset.

Pipeline: cull quads never seen as a first opaque hit from the training
cameras, pack one patch per surviving quad into power-of-two texture
pages, sample opacity and features at every texel, quantize to 8 bits
with the alpha-squeeze rule (channel 0 is zero exactly on transparent
texels), and write OBJ + PNG pages + a JSON shader/manifest file.

import_asset(export_asset(x)) is bit-exact in the quantized domain.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import model
from . import sampling
from .dataset import Camera, camera_rays
from .trainer import TrainState

ASSET_FORMAT_VERSION = 1
DEFAULT_PATCH_SIZE = 17
MAX_PAGE_DIM = 4096


class AssetError(RuntimeError):
    pass


@dataclass
class AtlasLayout:
    patch_size: int
    page_dims: list  # [(w, h)] per page
    kept_quads: np.ndarray  # original quad ids, ascending
    quad_page: np.ndarray
    quad_origin: np.ndarray  # (n, 2) texel origin (x0, y0)

    @property
    def n_quads(self) -> int:
        return len(self.kept_quads)


@dataclass
class BakedAsset:
    positions: np.ndarray  # (V, 3) float32
    uvs: np.ndarray  # (VT, 2) float32
    tris: np.ndarray  # (F, 3) int32 position indices
    tri_uvs: np.ndarray  # (F, 3) int32 uv indices
    tri_page: np.ndarray  # (F,) int32
    pages: list  # [(h, w, 8) uint8]
    shader_layers: list  # [(w f32, b f32, activation)]
    manifest: dict = field(default_factory=dict)

    @property
    def n_tris(self) -> int:
        return len(self.tris)


# -- visibility -----------------------------------------------------------------


def visible_quads(
    state: TrainState, cameras: list[Camera], supersample: int = 2, chunk: int = 4096
) -> np.ndarray:
    """Quads whose triangles appear as some training ray's first opaque hit."""
    sched = state.final_schedule()
    world = state.world_vertices()
    seen = np.zeros(state.topo.n_quads, dtype=bool)
    for cam in cameras:
        origins, dirs = camera_rays(cam, supersample)
        for lo in range(0, len(origins), chunk):
            hi = min(lo + chunk, len(origins))
            quad = sampling.sample_rays(
                origins[lo:hi],
                dirs[lo:hi],
                state.lattice_cfg,
                state.topo,
                world,
                sched.limit,
                grid=state.grid,
                use_pruning=True,
            )
            if not len(quad):
                continue
            alpha = model.opacity_np(state.params, quad.points)[:, 0]
            opaque = alpha > 0.5
            rays = quad.ray_index[opaque]
            tris = quad.tri_id[opaque]
            # samples are (ray, depth) sorted, so the first entry per ray
            # is its nearest opaque hit
            _, first = np.unique(rays, return_index=True)
            seen[state.topo.tri_quad(tris[first])] = True
    return np.flatnonzero(seen)


# -- atlas allocation --------------------------------------------------------------


def _page_capacity(dims: tuple[int, int], k: int) -> int:
    return (dims[0] // k) * (dims[1] // k)


def _smallest_page(n: int, k: int, max_dim: int) -> tuple[int, int]:
    """Smallest power-of-two page holding n patches: min area, then extent."""
    sizes = []
    d = 1
    while d < k:
        d *= 2
    dims = []
    while d <= max_dim:
        dims.append(d)
        d *= 2
    best = None
    for w in dims:
        for h in dims:
            if _page_capacity((w, h), k) >= n:
                key = (w * h, max(w, h), w)
                if best is None or key < best[0]:
                    best = (key, (w, h))
    if best is None:
        raise AssetError(f"{n} patches exceed one {max_dim}x{max_dim} page")
    return best[1]


def allocate_atlas(
    kept_quads: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE, max_dim: int = MAX_PAGE_DIM
) -> AtlasLayout:
    """Row-major packing in ascending quad id, spilling onto extra pages."""
    kept_quads = np.sort(np.asarray(kept_quads, dtype=np.int64))
    n = len(kept_quads)
    k = patch_size
    if n == 0:
        return AtlasLayout(k, [], kept_quads, np.zeros(0, np.int64), np.zeros((0, 2), np.int64))

    full_cap = _page_capacity((max_dim, max_dim), k)
    page_dims = []
    quad_page = np.zeros(n, dtype=np.int64)
    quad_origin = np.zeros((n, 2), dtype=np.int64)
    start = 0
    page = 0
    while start < n:
        remaining = n - start
        dims = (max_dim, max_dim) if remaining > full_cap else _smallest_page(remaining, k, max_dim)
        cap = min(_page_capacity(dims, k), remaining)
        per_row = dims[0] // k
        idx = np.arange(cap)
        quad_page[start : start + cap] = page
        quad_origin[start : start + cap, 0] = (idx % per_row) * k
        quad_origin[start : start + cap, 1] = (idx // per_row) * k
        page_dims.append(dims)
        start += cap
        page += 1
    return AtlasLayout(k, page_dims, kept_quads, quad_page, quad_origin)


# -- baking ---------------------------------------------------------------------


def quantize_features(feats: np.ndarray, alpha_hat: np.ndarray) -> np.ndarray:
    """8-bit quantization with the alpha squeeze on channel 0.

    Transparent texels store exactly 0 in channel 0; opaque texels are
    bumped to 1 there if they would quantize to 0.
    """
    q = np.floor(np.asarray(feats, dtype=np.float64) * 255.0 + 0.5)
    q = np.clip(q, 0, 255).astype(np.uint8)
    opaque = np.asarray(alpha_hat, dtype=bool)
    q[~opaque, 0] = 0
    bump = opaque & (q[:, 0] == 0)
    q[bump, 0] = 1
    return q


def texel_points(state: TrainState, layout: AtlasLayout) -> np.ndarray:
    """World position of every texel of every kept quad, (n*k*k, 3)."""
    k = layout.patch_size
    world = state.world_vertices()
    quads = state.topo.quads[layout.kept_quads]  # (n, 4)
    corners = world[quads]  # (n, 4, 3)
    g = np.arange(k) / (k - 1)
    ss, tt = np.meshgrid(g, g, indexing="xy")  # texel (a,b): s along x, t along y
    s = ss.reshape(-1)
    t = tt.reshape(-1)
    w0 = ((1 - s) * (1 - t))[None, :, None]
    w1 = (s * (1 - t))[None, :, None]
    w2 = ((1 - s) * t)[None, :, None]
    w3 = (s * t)[None, :, None]
    pts = (
        corners[:, 0:1] * w0
        + corners[:, 1:2] * w1
        + corners[:, 2:3] * w2
        + corners[:, 3:4] * w3
    )
    return pts.reshape(-1, 3)


def bake_textures(state: TrainState, layout: AtlasLayout, chunk: int = 65536) -> list:
    """Fill texture pages with quantized opacity-squeezed features."""
    k = layout.patch_size
    pages = [np.zeros((h, w, 8), dtype=np.uint8) for (w, h) in layout.page_dims]
    if layout.n_quads == 0:
        return pages
    pts = texel_points(state, layout)
    q = np.zeros((len(pts), 8), dtype=np.uint8)
    for lo in range(0, len(pts), chunk):
        hi = min(lo + chunk, len(pts))
        alpha, feats = model.field_eval_np(state.params, pts[lo:hi].astype(np.float32))
        q[lo:hi] = quantize_features(feats, alpha[:, 0] > 0.5)

    texel = np.arange(k * k)
    ax = texel % k
    by = texel // k
    for i in range(layout.n_quads):
        page = pages[layout.quad_page[i]]
        x0, y0 = layout.quad_origin[i]
        block = q[i * k * k : (i + 1) * k * k]
        page[y0 + by, x0 + ax] = block
    return pages


def uv_for_patch(layout: AtlasLayout, i: int) -> np.ndarray:
    """UVs of the four quad corners, kept half a texel inside the patch."""
    k = layout.patch_size
    w, h = layout.page_dims[layout.quad_page[i]]
    x0, y0 = layout.quad_origin[i]
    out = np.zeros((4, 2), dtype=np.float64)
    for corner, (s, t) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        px = x0 + 0.5 + s * (k - 1)
        py = y0 + 0.5 + t * (k - 1)
        out[corner] = (px / w, 1.0 - py / h)
    return out


def bake(state: TrainState, cameras: list[Camera], supersample: int = 2) -> BakedAsset:
    """Full stage-3 conversion: cull, pack, sample, quantize, assemble."""
    run = state.run
    kept = visible_quads(state, cameras, supersample)
    layout = allocate_atlas(kept, run.patch_size, run.max_page_dim)
    pages = bake_textures(state, layout)

    # vertices are duplicated per quad corner so every position owns one uv;
    # keeps the OBJ trivially consumable (f i/ti with i == ti) and maps 1:1
    # onto GPU vertex buffers
    quads = state.topo.quads[layout.kept_quads]
    world = state.world_vertices()
    n = layout.n_quads
    positions = world[quads.reshape(-1)].astype(np.float32)
    uvs = np.zeros((4 * n, 2), dtype=np.float32)
    tris = np.zeros((2 * n, 3), dtype=np.int32)
    tri_page = np.zeros(2 * n, dtype=np.int32)
    for i in range(n):
        uvs[4 * i : 4 * i + 4] = uv_for_patch(layout, i)
        u = 4 * i + np.arange(4)
        tris[2 * i] = u[[0, 1, 3]]
        tris[2 * i + 1] = u[[0, 3, 2]]
        tri_page[2 * i : 2 * i + 2] = layout.quad_page[i]
    tri_uvs = tris.copy()

    manifest = {
        "format_version": ASSET_FORMAT_VERSION,
        "K": run.patch_size,
        "P": run.resolution,
        "scene_kind": run.scene,
        "background": list(run.background),
        "num_pages": len(pages),
        "opaque_texels": int(sum(int((p[..., 0] > 0).sum()) for p in pages)),
        "config_hash": run.hash(),
    }
    return BakedAsset(
        positions=positions,
        uvs=uvs,
        tris=tris,
        tri_uvs=tri_uvs,
        tri_page=tri_page,
        pages=pages,
        shader_layers=model.shader_layers_np(state.params, np.float32),
        manifest=manifest,
    )


# -- export / import ---------------------------------------------------------------


def export_asset(asset: BakedAsset, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    try:
        _write_obj(asset, os.path.join(out_dir, "scene.obj"))
        for p, page in enumerate(asset.pages):
            Image.fromarray(np.ascontiguousarray(page[..., :4]), mode="RGBA").save(
                os.path.join(out_dir, f"feat0_{p}.png")
            )
            Image.fromarray(np.ascontiguousarray(page[..., 4:]), mode="RGBA").save(
                os.path.join(out_dir, f"feat1_{p}.png")
            )
        blob = dict(asset.manifest)
        blob["layers"] = [
            {
                "weights": [[float(x) for x in row] for row in w],
                "bias": [float(x) for x in b],
                "activation": act,
            }
            for w, b, act in asset.shader_layers
        ]
        with open(os.path.join(out_dir, "mlp.json"), "w") as f:
            json.dump(blob, f)
    except OSError as e:
        raise AssetError(f"export failed at {out_dir}: {e}") from e


def _write_obj(asset: BakedAsset, path: str):
    with open(path, "w") as f:
        f.write("# textured lattice surface\n")
        for v in asset.positions:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for uv in asset.uvs:
            f.write(f"vt {float(uv[0])!r} {float(uv[1])!r}\n")
        current_page = None
        for i in range(asset.n_tris):
            if asset.tri_page[i] != current_page:
                current_page = int(asset.tri_page[i])
                f.write(f"usemtl page{current_page}\n")
            a, b, c = asset.tris[i] + 1
            ta, tb, tc = asset.tri_uvs[i] + 1
            f.write(f"f {a}/{ta} {b}/{tb} {c}/{tc}\n")


def import_asset(in_dir: str) -> BakedAsset:
    mlp_path = os.path.join(in_dir, "mlp.json")
    try:
        with open(mlp_path) as f:
            blob = json.load(f)
    except OSError as e:
        raise AssetError(f"cannot read {mlp_path}: {e}") from e
    if blob.get("format_version") != ASSET_FORMAT_VERSION:
        raise AssetError(
            f"asset format_version {blob.get('format_version')} unsupported "
            f"(want {ASSET_FORMAT_VERSION})"
        )
    layers = [
        (
            np.array(l["weights"], dtype=np.float32),
            np.array(l["bias"], dtype=np.float32),
            l["activation"],
        )
        for l in blob.pop("layers")
    ]
    pages = []
    for p in range(blob["num_pages"]):
        half0 = np.asarray(Image.open(os.path.join(in_dir, f"feat0_{p}.png")))
        half1 = np.asarray(Image.open(os.path.join(in_dir, f"feat1_{p}.png")))
        pages.append(np.concatenate([half0, half1], axis=2))

    positions, uvs, tris, tri_uvs, tri_page = _read_obj(os.path.join(in_dir, "scene.obj"))
    return BakedAsset(
        positions=positions,
        uvs=uvs,
        tris=tris,
        tri_uvs=tri_uvs,
        tri_page=tri_page,
        pages=pages,
        shader_layers=layers,
        manifest=blob,
    )


def _read_obj(path: str):
    positions, uvs, tris, tri_uvs, tri_page = [], [], [], [], []
    page = 0
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise AssetError(f"cannot read {path}: {e}") from e
    for line in lines:
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            positions.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "usemtl":
            page = int(parts[1].removeprefix("page"))
        elif parts[0] == "f":
            vi, ti = [], []
            for token in parts[1:4]:
                a, _, b = token.partition("/")
                vi.append(int(a) - 1)
                ti.append(int(b) - 1)
            tris.append(vi)
            tri_uvs.append(ti)
            tri_page.append(page)
    return (
        np.array(positions, dtype=np.float32).reshape(-1, 3),
        np.array(uvs, dtype=np.float32).reshape(-1, 2),
        np.array(tris, dtype=np.int32).reshape(-1, 3),
        np.array(tri_uvs, dtype=np.int32).reshape(-1, 3),
        np.array(tri_page, dtype=np.int32),
    )


# -- parity reference -----------------------------------------------------------------


def render_live_quantized(
    state: TrainState,
    cam: Camera,
    kept_quads: np.ndarray,
    supersample: int = 2,
    background=(0.0, 0.0, 0.0),
    chunk: int = 512,
) -> np.ndarray:
    """Render the in-memory hard-surface model over the baked quad subset.

    Ray-traces the kept triangles directly, takes the first opaque hit,
    and pushes its features through the exact bake quantization. This is
    the reference the rasterized asset is compared against; remaining
    differences are texel interpolation and pixel coverage.
    """
    s2 = supersample * supersample
    origins, dirs = camera_rays(cam, supersample)
    tri_ids = np.stack([2 * kept_quads, 2 * kept_quads + 1], axis=1).reshape(-1)
    tv = state.world_vertices()[state.topo.tris[tri_ids]]
    shader = model.shader_layers_np(state.params, np.float32)

    n_rays = len(origins)
    feats = np.zeros((n_rays, 8), dtype=np.float64)
    covered = np.zeros(n_rays, dtype=bool)
    n_tris = len(tri_ids)
    for lo in range(0, n_rays, chunk):
        hi = min(lo + chunk, n_rays)
        nr = hi - lo
        ray_rep = np.repeat(np.arange(nr), n_tris)
        hit, t, _ = sampling.moller_trumbore(
            origins[lo:hi][ray_rep],
            dirs[lo:hi][ray_rep],
            np.tile(tv[:, 0], (nr, 1)),
            np.tile(tv[:, 1], (nr, 1)),
            np.tile(tv[:, 2], (nr, 1)),
        )
        ray_h, t_h = ray_rep[hit], t[hit]
        order = np.lexsort((t_h, ray_h))
        ray_h, t_h = ray_h[order], t_h[order]
        if not len(ray_h):
            continue
        pts = origins[lo + ray_h] + t_h[:, None] * dirs[lo + ray_h]
        alpha = model.opacity_np(state.params, pts.astype(np.float32))[:, 0]
        opaque = alpha > 0.5
        rays_o, pts_o = ray_h[opaque], pts[opaque]
        uniq, first = np.unique(rays_o, return_index=True)
        if not len(uniq):
            continue
        p_first = pts_o[first]
        a, f = model.field_eval_np(state.params, p_first.astype(np.float32))
        q = quantize_features(f, a[:, 0] > 0.5)
        feats[lo + uniq] = q.astype(np.float64) / 255.0
        covered[lo + uniq] = True

    n_px = n_rays // s2
    feat_px = feats.reshape(n_px, s2, 8).mean(axis=1).astype(np.float32)
    dir_sum = (dirs * covered[:, None]).reshape(n_px, s2, 3).sum(axis=1)
    norm = np.linalg.norm(dir_sum, axis=1, keepdims=True)
    mean_d = (dir_sum / np.where(norm > 0, norm, 1.0)).astype(np.float32)
    any_cov = covered.reshape(n_px, s2).any(axis=1)
    img = np.tile(np.asarray(background, dtype=np.float32), (n_px, 1))
    if any_cov.any():
        img[any_cov] = model.shade_np(shader, feat_px[any_cov], mean_d[any_cov])
    return img.reshape(cam.height, cam.width, 3).astype(np.float64)


# -- validation ----------------------------------------------------------------------


def validate_asset(asset: BakedAsset) -> list[str]:
    """Invariant checks; returns human-readable violations (empty = clean)."""
    problems = []
    m = asset.manifest
    for key in ("format_version", "K", "P", "scene_kind", "background", "num_pages"):
        if key not in m:
            problems.append(f"manifest missing key {key!r}")
    if problems:
        return problems
    k = m["K"]
    if m["num_pages"] != len(asset.pages):
        problems.append(f"manifest num_pages {m['num_pages']} != {len(asset.pages)} pages")
    for p, page in enumerate(asset.pages):
        h, w = page.shape[:2]
        if w & (w - 1) or h & (h - 1) or w > MAX_PAGE_DIM or h > MAX_PAGE_DIM:
            problems.append(f"page {p} dims {w}x{h} not a power of two within {MAX_PAGE_DIM}")

    if len(asset.tris) % 2:
        problems.append("odd triangle count; expected two per quad")
    if np.any(asset.tris >= len(asset.positions)) or np.any(asset.tri_uvs >= len(asset.uvs)):
        problems.append("face index out of range")

    if "opaque_texels" in m:
        actual = int(sum(int((p[..., 0] > 0).sum()) for p in asset.pages))
        if actual != m["opaque_texels"]:
            problems.append(
                f"squeeze-rule integrity: {actual} non-zero channel-0 texels, "
                f"manifest recorded {m['opaque_texels']}"
            )

    # rebuild each quad's patch footprint from its UVs and check the packing
    coverage = [np.zeros(p.shape[:2], dtype=bool) for p in asset.pages]
    for q in range(len(asset.tris) // 2):
        uv_ids = np.unique(np.concatenate([asset.tri_uvs[2 * q], asset.tri_uvs[2 * q + 1]]))
        if len(uv_ids) != 4:
            problems.append(f"quad {q}: expected 4 distinct uvs, got {len(uv_ids)}")
            continue
        page = asset.tri_page[2 * q]
        h, w = asset.pages[page].shape[:2]
        u = asset.uvs[uv_ids]
        px = u[:, 0] * w - 0.5
        py = (1.0 - u[:, 1]) * h - 0.5
        x0, x1 = px.min(), px.max()
        y0, y1 = py.min(), py.max()
        if abs(x1 - x0 - (k - 1)) > 1e-2 or abs(y1 - y0 - (k - 1)) > 1e-2:
            problems.append(f"quad {q}: uv footprint is not a {k}x{k} patch interior")
            continue
        xi, yi = round(x0), round(y0)
        if xi < 0 or yi < 0 or xi + k > w or yi + k > h:
            problems.append(f"quad {q}: patch [{xi},{yi}] exceeds page {page} bounds")
            continue
        region = coverage[page][yi : yi + k, xi : xi + k]
        if region.any():
            problems.append(f"quad {q}: patch overlaps another patch on page {page}")
        region[:] = True
    return problems
