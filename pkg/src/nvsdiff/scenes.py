"""Procedural toy multi-view scenes with exact ground truth, plus dataset IO.

A toy scene is a handful of constant-density primitives inside the unit cube,
so density and color have closed analytic form and rendered images are exact
oracles. Scene directories follow

    <scene_id>/images/%03d.png
    <scene_id>/cameras.json     (height, width, focal, cx, cy, frames[])
    <scene_id>/scene.json       (optional ground-truth descriptor)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cameras import CameraPose, GeometryError, generate_rays
from . import renderer

# primitives stay inside this ball so rigid re-canonicalization during the
# swap augmentation cannot push content out of the unit cube
CONTENT_RADIUS = 0.75

ORBIT_RADIUS = (1.8, 2.6)
ORBIT_ELEVATION_DEG = (-20.0, 45.0)
LOOKAT_JITTER = 0.1
ORACLE_SAMPLES = 256

# world +y points down in images, so a camera on the -z axis looking at the
# origin has exactly the identity rotation
_WORLD_DOWN = np.array([0.0, 1.0, 0.0])


class SceneLoadError(RuntimeError):
    """Raised when a scene directory is malformed; the message names the file."""


@dataclass(frozen=True)
class Primitive:
    kind: str            # "sphere" or "box"
    center: np.ndarray   # (3,)
    size: object         # radius (sphere) or (3,) half-extents (box)
    rgb: np.ndarray      # (3,) in [0, 1]
    density: float

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=np.float64))
        if self.kind == "box":
            object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64))
        else:
            object.__setattr__(self, "size", float(self.size))
        if self.density <= 0:
            raise ValueError("primitive density must be positive")

    def contains(self, points: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return np.linalg.norm(points - self.center, axis=-1) <= self.size
        return np.all(np.abs(points - self.center) <= self.size, axis=-1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = self.size if self.kind == "box" else np.full(3, self.size)
        return self.center - half, self.center + half


@dataclass(frozen=True)
class ToyScene:
    primitives: tuple[Primitive, ...]
    seed: int

    def density_color(self, points: np.ndarray):
        """Analytic (sigma, rgb) at (N, 3) points; overlaps take the max density
        and the color of the nearest covering primitive."""
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        sigma = np.zeros(n)
        rgb = np.zeros((n, 3))
        best = np.full(n, np.inf)
        for prim in self.primitives:
            inside = prim.contains(points)
            if not inside.any():
                continue
            sigma[inside] = np.maximum(sigma[inside], prim.density)
            dist = np.linalg.norm(points[inside] - prim.center, axis=-1)
            closer = dist < best[inside]
            idx = np.flatnonzero(inside)[closer]
            rgb[idx] = prim.rgb
            best[idx] = dist[closer]
        return sigma, rgb

    def aabb_points(self) -> np.ndarray:
        """Corners of the union bounding box, used as normalization points."""
        if not self.primitives:
            lo, hi = -np.ones(3), np.ones(3)
        else:
            los, his = zip(*(p.bounds() for p in self.primitives))
            lo, hi = np.min(los, axis=0), np.max(his, axis=0)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        return corners


class AnalyticField:
    """Adapter exposing a ToyScene through the renderer's field interface."""

    def __init__(self, scene: ToyScene, dtype=torch.float32):
        self.scene = scene
        self.dtype = dtype

    def query(self, points: torch.Tensor):
        pts = points.detach().cpu().numpy()
        sigma, rgb = self.scene.density_color(pts)
        return (torch.as_tensor(sigma, dtype=self.dtype),
                torch.as_tensor(rgb, dtype=self.dtype))

    def color(self, features: torch.Tensor) -> torch.Tensor:
        return features


def generate_scene(seed: int) -> ToyScene:
    """1-4 random primitives, deterministic from the seed."""
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(int(rng.integers(1, 5))):
        kind = "sphere" if rng.random() < 0.5 else "box"
        if kind == "sphere":
            size = rng.uniform(0.15, 0.35)
            extent = size
        else:
            size = rng.uniform(0.12, 0.30, size=3)
            extent = float(np.linalg.norm(size))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(0.0, max(CONTENT_RADIUS - extent, 0.0))
        prims.append(Primitive(kind, center, size, rng.uniform(0.15, 1.0, size=3),
                               float(rng.uniform(4.0, 9.0))))
    return ToyScene(tuple(prims), seed)


def look_at_pose(center, target, image_size, focal,
                 principal_point=None) -> CameraPose:
    """World-to-camera pose for a camera at `center` looking at `target`."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(_WORLD_DOWN, forward)
    norm = np.linalg.norm(right)
    if norm < 1e-8:
        raise GeometryError("camera forward is parallel to the vertical axis")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ center
    if principal_point is None:
        h, w = image_size
        principal_point = np.array([w / 2.0, h / 2.0])
    return CameraPose(rotation, translation, focal, principal_point, image_size)


def orbit_pose(radius, azimuth, elevation, image_size, focal,
               target=(0.0, 0.0, 0.0)) -> CameraPose:
    """Camera on an orbit around the origin; elevation is toward world up (-y)."""
    center = np.array([
        radius * math.cos(elevation) * math.sin(azimuth),
        -radius * math.sin(elevation),
        -radius * math.cos(elevation) * math.cos(azimuth),
    ])
    return look_at_pose(center, target, image_size, focal)


def sample_orbit_pose(rng: np.random.Generator, image_size, focal) -> CameraPose:
    """Randomized orbit pose mimicking casual capture."""
    radius = rng.uniform(*ORBIT_RADIUS)
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    elevation = math.radians(rng.uniform(*ORBIT_ELEVATION_DEG))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    target = direction * LOOKAT_JITTER * rng.random() ** (1.0 / 3.0)
    pose = orbit_pose(radius, azimuth, elevation, image_size, focal, target=target)
    return pose


def render_view(scene: ToyScene, pose: CameraPose,
                num_samples: int = ORACLE_SAMPLES) -> np.ndarray:
    """Exact-oracle render of the analytic scene, (H, W, 3) in [0, 1]."""
    rays = generate_rays(pose)
    out = renderer.render(AnalyticField(scene), rays, num_samples=num_samples,
                          stratified=False)
    h, w = pose.image_size
    return out.color.reshape(h, w, 3).numpy().astype(np.float64)


def write_png(path, image01: np.ndarray):
    arr = np.round(255.0 * np.clip(image01, 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def standardize_image(image01: np.ndarray) -> np.ndarray:
    """[0, 1] display range to the [-1, 1] model range."""
    return 2.0 * image01 - 1.0


def unstandardize_image(image: np.ndarray) -> np.ndarray:
    """[-1, 1] model range back to clipped [0, 1]."""
    return np.clip((image + 1.0) / 2.0, 0.0, 1.0)


def _primitive_to_json(p: Primitive) -> dict:
    size = p.size.tolist() if isinstance(p.size, np.ndarray) else p.size
    return {"kind": p.kind, "center": p.center.tolist(), "size": size,
            "rgb": p.rgb.tolist(), "density": p.density}


def _primitive_from_json(d: dict) -> Primitive:
    return Primitive(d["kind"], d["center"], d["size"], d["rgb"], d["density"])


def render_dataset(scene: ToyScene, n_views: int, image_size, rng: np.random.Generator,
                   out_dir, focal: float | None = None,
                   num_samples: int = ORACLE_SAMPLES) -> Path:
    """Render an orbit capture of the scene into a scene directory."""
    if n_views < 3:
        raise ValueError("need at least 3 views per scene (input/reference/novel)")
    h, w = image_size
    if focal is None:
        focal = float(w)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    frames = []
    for i in range(n_views):
        pose = sample_orbit_pose(rng, (h, w), focal)
        image = render_view(scene, pose, num_samples=num_samples)
        name = f"images/{i:03d}.png"
        write_png(out_dir / name, image)
        frames.append({"file": name,
                       "rotation": pose.rotation.reshape(-1).tolist(),
                       "translation": pose.translation.tolist()})

    cameras = {"height": h, "width": w, "focal": focal,
               "cx": w / 2.0, "cy": h / 2.0, "frames": frames}
    (out_dir / "cameras.json").write_text(json.dumps(cameras, indent=1))
    descriptor = {"seed": scene.seed,
                  "primitives": [_primitive_to_json(p) for p in scene.primitives],
                  "points": scene.aabb_points().tolist()}
    (out_dir / "scene.json").write_text(json.dumps(descriptor, indent=1))
    return out_dir


@dataclass
class LoadedScene:
    scene_id: str
    images: np.ndarray             # (V, H, W, 3) float32 in [-1, 1]
    poses: list[CameraPose]
    points: np.ndarray             # (P, 3) normalization points
    scene: ToyScene | None         # analytic ground truth when available

    @property
    def num_views(self) -> int:
        return self.images.shape[0]


def load_scene_dir(path) -> LoadedScene:
    """Load and validate one scene directory."""
    path = Path(path)
    cam_path = path / "cameras.json"
    if not cam_path.exists():
        raise SceneLoadError(f"missing camera file: {cam_path}")
    try:
        cams = json.loads(cam_path.read_text())
        h, w = int(cams["height"]), int(cams["width"])
        focal = float(cams["focal"])
        pp = np.array([float(cams["cx"]), float(cams["cy"])])
        frames = cams["frames"]
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise SceneLoadError(f"malformed camera file {cam_path}: {e}") from e
    if len(frames) < 3:
        raise SceneLoadError(f"{cam_path}: need at least 3 views, got {len(frames)}")

    images, poses = [], []
    for frame in frames:
        img_path = path / frame["file"]
        if not img_path.exists():
            raise SceneLoadError(f"missing image: {img_path}")
        img = read_png(img_path)
        if img.shape[:2] != (h, w):
            raise SceneLoadError(
                f"{img_path}: size {img.shape[:2]} does not match cameras.json ({h}, {w})")
        try:
            pose = CameraPose(np.array(frame["rotation"], dtype=np.float64).reshape(3, 3),
                              frame["translation"], focal, pp, (h, w))
        except (GeometryError, ValueError) as e:
            raise SceneLoadError(f"{cam_path}: invalid pose for {frame['file']}: {e}") from e
        images.append(standardize_image(img))
        poses.append(pose)

    scene = None
    points = None
    desc_path = path / "scene.json"
    if desc_path.exists():
        try:
            desc = json.loads(desc_path.read_text())
            scene = ToyScene(tuple(_primitive_from_json(p) for p in desc["primitives"]),
                             int(desc.get("seed", 0)))
            points = np.array(desc["points"], dtype=np.float64)
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
            raise SceneLoadError(f"malformed scene descriptor {desc_path}: {e}") from e
    if points is None:
        # no ground truth available: assume content fills the unit cube
        points = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                          dtype=np.float64)
    return LoadedScene(path.name, np.stack(images).astype(np.float32), poses, points, scene)


@dataclass
class SceneDataset:
    scenes: list[LoadedScene]
    split: str = "train"

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i) -> LoadedScene:
        return self.scenes[i]


def is_test_scene(index: int, test_every: int = 50) -> bool:
    """Hold out every test_every-th scene by index."""
    return test_every > 0 and index % test_every == test_every - 1


def load_dataset(root, split: str = "train") -> SceneDataset:
    root = Path(root) / split
    if not root.is_dir():
        raise SceneLoadError(f"missing dataset split directory: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise SceneLoadError(f"no scenes found under {root}")
    return SceneDataset([load_scene_dir(p) for p in dirs], split=split)


def generate_dataset(root, n_scenes: int, n_views: int = 24, image_size=(32, 32),
                     seed: int = 0, test_every: int = 50,
                     num_samples: int = ORACLE_SAMPLES) -> dict:
    """Generate scenes into root/<split>/scene_%04d; returns per-split counts."""
    root = Path(root)
    counts = {"train": 0, "test": 0}
    for i in range(n_scenes):
        scene = generate_scene(seed + i)
        rng = np.random.default_rng((seed + i) * 7919 + 1)
        split = "test" if is_test_scene(i, test_every) else "train"
        render_dataset(scene, n_views, image_size, rng,
                       root / split / f"scene_{i:04d}", num_samples=num_samples)
        counts[split] += 1
    return counts
