"""Deterministic CPU rasterizer for baked assets: two-pass deferred shading.

Pass 1 rasterizes every triangle with a z-buffer into a double-resolution
feature image (8 feature channels + binary alpha + the subpixel's ray
direction). Fragments whose bilinear-filtered channel 0 is exactly zero
are discarded, so with binary opacity the result is independent of
triangle submission order. Pass 2 box-averages 2x2 subpixels and runs
the small shader MLP once per covered pixel.

Everything is float32 and bit-reproducible across thread counts: threads
split the image into disjoint row bands and each band rasterizes all
triangles independently.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model
from .baker import BakedAsset
from .dataset import Camera, camera_rays

NEAR_PLANE = 1e-4


@dataclass
class FeatureImage:
    features: np.ndarray  # (2N, 2M, 8) float32, zero where alpha is zero
    alpha: np.ndarray  # (2N, 2M) float32 in {0, 1}
    direction: np.ndarray  # (2N, 2M, 3) float32, unit where alpha is one


def _pages_float(asset: BakedAsset) -> list:
    return [p.astype(np.float32) / 255.0 for p in asset.pages]


def _bilinear(page: np.ndarray, u: np.ndarray, v: np.ndarray, channels=slice(None)):
    """Sample at uv in [0,1]^2, v up; clamped texel-center convention."""
    if isinstance(channels, int):
        return _bilinear(page, u, v, slice(channels, channels + 1))[:, 0]
    h, w = page.shape[:2]
    x = u * w - 0.5
    y = (1.0 - v) * h - 0.5
    x0 = np.clip(np.floor(x), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0).astype(np.float32)[:, None]
    fy = np.clip(y - y0, 0.0, 1.0).astype(np.float32)[:, None]
    c00 = page[y0, x0, channels]
    c10 = page[y0, x1, channels]
    c01 = page[y1, x0, channels]
    c11 = page[y1, x1, channels]
    return (
        c00 * (1 - fx) * (1 - fy)
        + c10 * fx * (1 - fy)
        + c01 * (1 - fx) * fy
        + c11 * fx * fy
    )


def _clip_near(v_cam: np.ndarray, uv: np.ndarray) -> list:
    """Clip one camera-space triangle against z <= -near; 0..2 triangles out."""
    inside = v_cam[:, 2] <= -NEAR_PLANE
    if inside.all():
        return [(v_cam, uv)]
    if not inside.any():
        return []
    poly_v, poly_uv = [], []
    for i in range(3):
        j = (i + 1) % 3
        if inside[i]:
            poly_v.append(v_cam[i])
            poly_uv.append(uv[i])
        if inside[i] != inside[j]:
            t = (-NEAR_PLANE - v_cam[i, 2]) / (v_cam[j, 2] - v_cam[i, 2])
            poly_v.append(v_cam[i] + t * (v_cam[j] - v_cam[i]))
            poly_uv.append(uv[i] + t * (uv[j] - uv[i]))
    out = []
    for k in range(1, len(poly_v) - 1):
        out.append(
            (np.stack([poly_v[0], poly_v[k], poly_v[k + 1]]), np.stack([poly_uv[0], poly_uv[k], poly_uv[k + 1]]))
        )
    return out


def _raster_band(
    asset, pages_f, v_cam_all, cam, s, y_lo, y_hi
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize all triangles into one horizontal band of the 2x image."""
    w2 = cam.width * s
    band_h = y_hi - y_lo
    focal2 = cam.focal * s
    depth = np.full((band_h, w2), np.inf, dtype=np.float64)
    winner = np.full((band_h, w2), -1, dtype=np.int64)
    win_u = np.zeros((band_h, w2), dtype=np.float64)
    win_v = np.zeros((band_h, w2), dtype=np.float64)

    for t_id in range(asset.n_tris):
        tri = asset.tris[t_id]
        for v_cam, uv in _clip_near(v_cam_all[tri], asset.uvs[asset.tri_uvs[t_id]].astype(np.float64)):
            invw = -1.0 / v_cam[:, 2]
            sx = focal2 * v_cam[:, 0] * invw + 0.5 * w2
            sy = -focal2 * v_cam[:, 1] * invw + 0.5 * cam.height * s
            x_min = max(int(math.floor(sx.min())), 0)
            x_max = min(int(math.ceil(sx.max())), w2 - 1)
            y_min = max(int(math.floor(sy.min())), y_lo)
            y_max = min(int(math.ceil(sy.max())), y_hi - 1)
            if x_min > x_max or y_min > y_max:
                continue
            xs, ys = np.meshgrid(
                np.arange(x_min, x_max + 1) + 0.5, np.arange(y_min, y_max + 1) + 0.5
            )
            e01 = (sx[1] - sx[0]) * (ys - sy[0]) - (sy[1] - sy[0]) * (xs - sx[0])
            e12 = (sx[2] - sx[1]) * (ys - sy[1]) - (sy[2] - sy[1]) * (xs - sx[1])
            e20 = (sx[0] - sx[2]) * (ys - sy[2]) - (sy[0] - sy[2]) * (xs - sx[2])
            area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0])
            if area == 0.0:
                continue
            if area < 0.0:
                e01, e12, e20, area = -e01, -e12, -e20, -area
                flip = -1.0
            else:
                flip = 1.0

            cover = np.ones_like(e01, dtype=bool)
            # top-left ownership for shared edges (y grows downward on screen)
            for e, a, b in ((e12, 1, 2), (e20, 2, 0), (e01, 0, 1)):
                dx = flip * (sx[b] - sx[a])
                dy = flip * (sy[b] - sy[a])
                top_left = (dy < 0.0) | ((dy == 0.0) & (dx < 0.0))
                cover &= (e > 0.0) | ((e == 0.0) & top_left)
            if not cover.any():
                continue

            py, px = np.nonzero(cover)
            # perspective-correct interpolation via 1/w
            l0 = e12[py, px] / area
            l1 = e20[py, px] / area
            l2 = e01[py, px] / area
            iw = l0 * invw[0] + l1 * invw[1] + l2 * invw[2]
            frag_depth = 1.0 / iw
            tu = (l0 * uv[0, 0] * invw[0] + l1 * uv[1, 0] * invw[1] + l2 * uv[2, 0] * invw[2]) / iw
            tv = (l0 * uv[0, 1] * invw[0] + l1 * uv[1, 1] * invw[1] + l2 * uv[2, 1] * invw[2]) / iw

            page = pages_f[asset.tri_page[t_id]]
            a0 = _bilinear(page, tu, tv, channels=0)
            keep = a0 > 0.0  # squeeze rule: zero channel 0 means transparent
            if not keep.any():
                continue
            gy = py[keep] + y_min - y_lo
            gx = px[keep] + x_min
            fd = frag_depth[keep]
            better = (fd < depth[gy, gx]) | ((fd == depth[gy, gx]) & (t_id < winner[gy, gx]))
            gy, gx = gy[better], gx[better]
            depth[gy, gx] = fd[better]
            winner[gy, gx] = t_id
            win_u[gy, gx] = tu[keep][better]
            win_v[gy, gx] = tv[keep][better]
    return depth, winner, win_u, win_v


def rasterize(asset: BakedAsset, cam: Camera, supersample: int = 2, threads: int = 1) -> FeatureImage:
    """Z-buffered feature pass at ``supersample`` times the output resolution."""
    s = supersample
    w2, h2 = cam.width * s, cam.height * s
    pages_f = _pages_float(asset)

    rot = cam.pose[:3, :3]
    v_cam_all = (asset.positions.astype(np.float64) - cam.origin) @ rot

    bands = []
    n_bands = max(1, min(threads, h2))
    edges = np.linspace(0, h2, n_bands + 1).astype(int)
    if n_bands == 1:
        bands.append(_raster_band(asset, pages_f, v_cam_all, cam, s, 0, h2))
    else:
        with ThreadPoolExecutor(max_workers=n_bands) as pool:
            futs = [
                pool.submit(_raster_band, asset, pages_f, v_cam_all, cam, s, int(a), int(b))
                for a, b in zip(edges[:-1], edges[1:])
            ]
            bands = [f.result() for f in futs]

    if n_bands == 1:
        depth, winner, win_u, win_v = bands[0]
    else:
        depth = np.concatenate([b[0] for b in bands], axis=0)
        winner = np.concatenate([b[1] for b in bands], axis=0)
        win_u = np.concatenate([b[2] for b in bands], axis=0)
        win_v = np.concatenate([b[3] for b in bands], axis=0)

    features = np.zeros((h2, w2, 8), dtype=np.float32)
    alpha = np.zeros((h2, w2), dtype=np.float32)
    direction = np.zeros((h2, w2, 3), dtype=np.float32)
    covered = winner >= 0
    if covered.any():
        ys, xs = np.nonzero(covered)
        tri = winner[ys, xs]
        by_page = asset.tri_page[tri]
        for p in range(len(pages_f)):
            sel = by_page == p
            if not sel.any():
                continue
            feats = _bilinear(pages_f[p], win_u[ys[sel], xs[sel]], win_v[ys[sel], xs[sel]])
            features[ys[sel], xs[sel]] = feats
        alpha[ys, xs] = 1.0
        _, dirs = camera_rays(cam, s)
        dir_img = dirs.reshape(cam.height, cam.width, s, s, 3).transpose(0, 2, 1, 3, 4)
        dir_img = dir_img.reshape(h2, w2, 3).astype(np.float32)
        direction[ys, xs] = dir_img[ys, xs]
    return FeatureImage(features=features, alpha=alpha, direction=direction)


def deferred_shade(
    featimg: FeatureImage, shader_layers, background=(0.0, 0.0, 0.0), window: int = 2
) -> np.ndarray:
    """Box-average ``window``-sized subpixel blocks and shade covered pixels.

    window=1 shades the feature image as-is (the no-supersampling mode).
    """
    h2, w2 = featimg.alpha.shape
    if h2 % window or w2 % window:
        raise ValueError(f"feature image dimensions must be divisible by {window}")
    h, w = h2 // window, w2 // window
    f = featimg.features.reshape(h, window, w, window, 8).mean(axis=(1, 3))
    a = featimg.alpha.reshape(h, window, w, window).sum(axis=(1, 3))
    d = featimg.direction.reshape(h, window, w, window, 3).sum(axis=(1, 3))
    norm = np.linalg.norm(d, axis=2, keepdims=True)
    d = d / np.where(norm > 0, norm, 1.0)

    img = np.tile(np.asarray(background, dtype=np.float32), (h, w, 1))
    covered = a > 0
    if covered.any():
        rgb = model.shade_np(
            shader_layers, f[covered].astype(np.float32), d[covered].astype(np.float32)
        )
        img[covered] = rgb
    return img.astype(np.float64)


def render(
    asset: BakedAsset,
    cam: Camera,
    supersample: int = 2,
    threads: int = 1,
    background=None,
) -> np.ndarray:
    """Both passes; returns an (H, W, 3) image in [0, 1]."""
    bg = asset.manifest.get("background", [0.0, 0.0, 0.0]) if background is None else background
    featimg = rasterize(asset, cam, supersample, threads)
    return deferred_shade(featimg, asset.shader_layers, bg, window=supersample)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) over linear [0,1] channels; inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def bench(asset: BakedAsset, cameras: list[Camera], supersample: int = 2, threads: int = 1):
    """Per-frame wall-clock timings; machine-dependent, reported not asserted."""
    rows = []
    for i, cam in enumerate(cameras):
        t0 = time.perf_counter()
        featimg = rasterize(asset, cam, supersample, threads)
        t1 = time.perf_counter()
        deferred_shade(featimg, asset.shader_layers, asset.manifest.get("background", [0, 0, 0]))
        t2 = time.perf_counter()
        rows.append(
            {
                "frame": i,
                "raster_ms": (t1 - t0) * 1e3,
                "shade_ms": (t2 - t1) * 1e3,
                "total_ms": (t2 - t0) * 1e3,
            }
        )
    totals = np.array([r["total_ms"] for r in rows])
    summary = {
        "frames": len(rows),
        "mean_ms": float(totals.mean()),
        "median_ms": float(np.median(totals)),
    }
    return rows, summary
