"""Posed-image datasets in the transforms.json convention.

Cameras look down -z with +x right and +y up; focal length is derived
from the horizontal field of view. Images are stored as 8-bit PNGs and
treated as linear RGB in [0, 1].
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


class IngestionError(RuntimeError):
    pass


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    pose: np.ndarray  # (4, 4) camera-to-world

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise IngestionError("camera rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class Dataset:
    cameras: list
    images: np.ndarray  # (N, H, W, 3) float64 in [0, 1]
    split: str


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def camera_rays(cam: Camera, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """World-space rays for every subpixel, row-major pixels then subpixels.

    Subpixel centers sit at fixed fractional offsets ((i + 0.5) / s), so a
    supersample factor of 2 gives the quarter-offset 2x2 pattern that the
    renderer reproduces exactly.
    """
    s = supersample
    w, h = cam.width, cam.height
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sub = (np.arange(s) + 0.5) / s
    oy, ox = np.meshgrid(sub, sub, indexing="ij")
    px = (xs[..., None, None] + ox[None, None]).reshape(-1)
    py = (ys[..., None, None] + oy[None, None]).reshape(-1)

    dirs_cam = np.stack(
        [
            (px - 0.5 * w) / cam.focal,
            -(py - 0.5 * h) / cam.focal,
            -np.ones_like(px),
        ],
        axis=1,
    )
    dirs = dirs_cam @ cam.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.origin, dirs.shape).copy()
    return origins, dirs


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def orbit_cameras(
    n: int,
    radius: float,
    width: int,
    height: int,
    camera_angle_x: float,
    elevation_range=(0.15, 0.75),
    phase: float = 0.0,
) -> list[Camera]:
    """Cameras on a ring around the origin with smoothly varying elevation."""
    focal = focal_from_angle(width, camera_angle_x)
    cams = []
    for i in range(n):
        theta = phase + 2.0 * math.pi * i / n
        lo, hi = elevation_range
        phi = lo + (hi - lo) * 0.5 * (1.0 + math.sin(3.0 * theta))
        eye = radius * np.array(
            [math.cos(theta) * math.cos(phi), math.sin(phi), math.sin(theta) * math.cos(phi)]
        )
        cams.append(Camera(width, height, focal, look_at_pose(eye)))
    return cams


def load_transforms(path: str, split: str = "train") -> Dataset:
    """Read transforms_<split>.json plus its PNG frames from ``path``."""
    meta_path = os.path.join(path, f"transforms_{split}.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise IngestionError(f"missing {meta_path}") from e
    except json.JSONDecodeError as e:
        raise IngestionError(f"unparseable {meta_path}: {e}") from e

    if "camera_angle_x" not in meta:
        raise IngestionError(f"{meta_path}: missing camera_angle_x")
    angle = float(meta["camera_angle_x"])

    cameras, images = [], []
    for i, frame in enumerate(meta.get("frames", [])):
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise IngestionError(f"{meta_path}: frame {i} missing required keys")
        file_path = frame["file_path"]
        if not os.path.splitext(file_path)[1]:
            file_path += ".png"
        img_path = os.path.join(path, file_path)
        try:
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as e:
            raise IngestionError(f"frame {i}: unreadable image {img_path}") from e
        h, w = arr.shape[:2]
        cam = Camera(w, h, focal_from_angle(w, angle), np.array(frame["transform_matrix"]))
        cameras.append(cam)
        images.append(arr)

    if not images:
        raise IngestionError(f"{meta_path}: no frames")
    return Dataset(cameras=cameras, images=np.stack(images), split=split)


def save_transforms(path: str, split: str, cameras: list[Camera], images: np.ndarray):
    """Write a dataset in the same layout load_transforms reads."""
    os.makedirs(os.path.join(path, split), exist_ok=True)
    frames = []
    angle = 2.0 * math.atan(0.5 * cameras[0].width / cameras[0].focal)
    for i, (cam, img) in enumerate(zip(cameras, images)):
        rel = f"{split}/r_{i}"
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(path, rel + ".png"))
        frames.append({"file_path": rel, "transform_matrix": cam.pose.tolist()})
    meta = {"camera_angle_x": angle, "frames": frames}
    with open(os.path.join(path, f"transforms_{split}.json"), "w") as f:
        json.dump(meta, f, indent=1)
