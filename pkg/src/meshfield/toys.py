"""Analytic desk-scale scenes with exact ground truth.

A handful of Lambertian-plus-Phong spheres under one directional light,
traced deterministically with the same subpixel pattern the trainer
uses. These stand in for photographic captures so the whole pipeline can
be exercised and scored end to end in minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Camera, camera_rays, orbit_cameras, save_transforms


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple
    specular: float = 0.0
    shininess: float = 32.0


@dataclass
class ToyScene:
    spheres: list
    light_dir: tuple = (-0.45, -0.85, -0.28)  # direction light travels
    ambient: float = 0.18
    diffuse: float = 0.85


def trace(scene: ToyScene, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest-hit shading for a ray batch; misses are black."""
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1)
    for i, s in enumerate(scene.spheres):
        oc = origins - np.asarray(s.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius**2
        disc = b * b - c
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(-b - sq > 1e-6, -b - sq, -b + sq)
        hit = ok & (t > 1e-6) & (t < best_t)
        best_t[hit] = t[hit]
        best_idx[hit] = i

    colors = np.zeros((n, 3))
    l = -np.asarray(scene.light_dir, dtype=np.float64)
    l /= np.linalg.norm(l)
    for i, s in enumerate(scene.spheres):
        mask = best_idx == i
        if not mask.any():
            continue
        p = origins[mask] + best_t[mask, None] * dirs[mask]
        normal = p - np.asarray(s.center)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        ndl = np.maximum(normal @ l, 0.0)
        shade = scene.ambient + scene.diffuse * ndl
        rgb = shade[:, None] * np.asarray(s.albedo)
        if s.specular > 0:
            refl = 2.0 * ndl[:, None] * normal - l
            rdv = np.maximum(np.einsum("ij,ij->i", refl, -dirs[mask]), 0.0)
            rgb += s.specular * (rdv**s.shininess)[:, None]
        colors[mask] = np.clip(rgb, 0.0, 1.0)
    return colors


def render_ground_truth(scene: ToyScene, cam: Camera, supersample: int = 2) -> np.ndarray:
    """Anti-aliased reference image: mean of the traced subpixel colors."""
    origins, dirs = camera_rays(cam, supersample)
    colors = trace(scene, origins, dirs)
    s2 = supersample * supersample
    return colors.reshape(cam.height, cam.width, s2, 3).mean(axis=2)


SCENES = {
    # two larger diffuse-ish spheres plus a small strongly specular one
    "spheres": ToyScene(
        spheres=[
            Sphere((-0.13, -0.02, 0.02), 0.21, (0.85, 0.35, 0.25), specular=0.25),
            Sphere((0.17, 0.08, -0.1), 0.15, (0.25, 0.45, 0.85), specular=0.6, shininess=24.0),
            Sphere((0.08, -0.15, 0.18), 0.1, (0.35, 0.8, 0.4), specular=0.9, shininess=12.0),
        ]
    ),
    "single": ToyScene(
        spheres=[Sphere((0.0, 0.0, 0.0), 0.25, (0.8, 0.7, 0.3), specular=0.5)],
    ),
}


def toy_cameras(
    n_train: int = 20,
    n_test: int = 5,
    width: int = 64,
    height: int = 64,
    radius: float = 2.2,
    camera_angle_x: float = 0.55,
) -> tuple[list[Camera], list[Camera]]:
    train = orbit_cameras(n_train, radius, width, height, camera_angle_x)
    test = orbit_cameras(n_test, radius, width, height, camera_angle_x, phase=0.33)
    return train, test


def generate_toy_dataset(
    name: str,
    out_dir: str,
    n_train: int = 20,
    n_test: int = 5,
    width: int = 64,
    height: int = 64,
    supersample: int = 2,
    radius: float = 2.2,
):
    """Render and write a complete train/test dataset for a named scene."""
    scene = SCENES[name]
    train, test = toy_cameras(n_train, n_test, width, height, radius=radius)
    for split, cams in (("train", train), ("test", test)):
        imgs = np.stack([render_ground_truth(scene, c, supersample) for c in cams])
        save_transforms(out_dir, split, cams, imgs)
    return scene
