"""Rigid pose algebra, canonical input-frame normalization, and pinhole ray generation.

Conventions (fixed globally):
  - rotations are world-to-camera, x_cam = R @ x_world + t
  - the camera looks along +z in its own frame
  - image origin top-left, pixel centers at half-integer coordinates
  - focal and principal point are in pixels
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-8
UNIT_TOL = 1e-6

# near/far margin that encloses the [-1,1]^3 cube from any camera center
CUBE_RADIUS = float(np.sqrt(3.0))
MIN_NEAR = 0.05


class GeometryError(ValueError):
    """Raised on invalid poses, degenerate scenes, or malformed ray inputs."""


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"{name} contains non-finite values")
    return a


def check_rotation(rotation: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate a proper rotation (orthonormal, det +1) within tol."""
    r = _as_array(rotation, (3, 3), "rotation")
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise GeometryError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise GeometryError("rotation must have determinant +1")
    return r


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid pose plus pinhole intrinsics."""

    rotation: np.ndarray        # (3, 3) world-to-camera
    translation: np.ndarray     # (3,)
    focal: float                # pixels
    principal_point: np.ndarray  # (2,) = (cx, cy), pixels
    image_size: tuple[int, int]  # (height, width)

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _as_array(self.translation, (3,), "translation"))
        object.__setattr__(self, "principal_point",
                           _as_array(self.principal_point, (2,), "principal_point"))
        object.__setattr__(self, "focal", float(self.focal))
        h, w = self.image_size
        object.__setattr__(self, "image_size", (int(h), int(w)))
        if self.focal <= 0:
            raise GeometryError("focal must be positive")
        if self.image_size[0] < 1 or self.image_size[1] < 1:
            raise GeometryError("image_size components must be >= 1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, C = -R^T t."""
        return -self.rotation.T @ self.translation

    def scaled_image(self, height: int, width: int) -> "CameraPose":
        """Resize the image plane; focal and principal point rescale proportionally."""
        h0, w0 = self.image_size
        sy, sx = height / h0, width / w0
        if not np.isclose(sy, sx, rtol=1e-6):
            raise GeometryError("image resize must preserve aspect ratio")
        return CameraPose(self.rotation, self.translation, self.focal * sx,
                          self.principal_point * np.array([sx, sy]), (height, width))


@dataclass(frozen=True)
class RelativePose:
    """Rigid transform between two camera frames: x_a = R @ x_b + T."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _as_array(self.translation, (3,), "translation"))

    def inverse(self) -> "RelativePose":
        return RelativePose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RelativePose") -> "RelativePose":
        """self after other: maps frame-c points via other (c->b) then self (b->a)."""
        return RelativePose(self.rotation @ other.rotation,
                            self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class RayBundle:
    """One ray per pixel (or any flat set): origins, unit directions, depth bounds."""

    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64)
        d = np.asarray(self.directions, dtype=np.float64)
        if o.ndim != 2 or o.shape[1] != 3 or o.shape != d.shape:
            raise GeometryError("origins/directions must both be (N, 3)")
        norms = np.linalg.norm(d, axis=-1)
        if np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise GeometryError("ray directions must be unit vectors")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "near", float(self.near))
        object.__setattr__(self, "far", float(self.far))
        if self.near < 0:
            raise GeometryError("near must be >= 0")
        if not self.near < self.far:
            raise GeometryError("near must be < far")

    def __len__(self):
        return self.origins.shape[0]

    def take(self, indices) -> "RayBundle":
        return RayBundle(self.origins[indices], self.directions[indices], self.near, self.far)


@dataclass(frozen=True)
class NormalizedScene:
    """A scene expressed in the canonical input frame.

    The similarity applied to world points is x' = scale * (rotation @ x) + offset.
    The input camera ends up with identity rotation and center (0, 0, -r_d),
    and the scene points fit inside [-1, 1]^3.
    """

    poses: tuple[CameraPose, ...]  # input view first, then the others in input order
    r_d: float                     # post-scale distance of the input camera from the origin
    scale: float
    points: np.ndarray = field(repr=False)  # (P, 3) transformed scene points
    rotation: np.ndarray = field(repr=False)  # (3, 3) similarity rotation
    offset: np.ndarray = field(repr=False)    # (3,) similarity offset


def relative_pose(pose_a: CameraPose, pose_b: CameraPose) -> RelativePose:
    """Relative pose from frame b to frame a: x_a = R @ x_b + T."""
    r = pose_a.rotation @ pose_b.rotation.T
    t = pose_a.translation - r @ pose_b.translation
    return RelativePose(r, t)


def _apply_similarity_to_pose(pose: CameraPose, rotation, offset, scale) -> CameraPose:
    # world transforms as x' = scale * rotation @ x + offset; camera coords scale
    # uniformly by `scale`, so the pinhole projection is unchanged
    r_new = pose.rotation @ rotation.T
    t_new = scale * pose.translation - r_new @ offset
    return CameraPose(r_new, t_new, pose.focal, pose.principal_point, pose.image_size)


def _canonicalize(input_pose: CameraPose, other_poses, scene_points, rescale: bool):
    pts = np.asarray(scene_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise GeometryError("scene_points must be a non-empty (P, 3) array")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("scene_points contain non-finite values")

    # New origin: the point on the input camera's optical axis at the depth of the
    # scene centroid. Depends only on the camera and the content, so the whole
    # construction is equivariant under global similarity transforms of the data.
    centroid_cam = input_pose.rotation @ pts.mean(axis=0) + input_pose.translation
    depth = centroid_cam[2]
    if depth <= 0:
        raise GeometryError("scene centroid must lie in front of the input camera")

    rotation = input_pose.rotation
    rigid_offset = input_pose.translation - np.array([0.0, 0.0, depth])
    pts_canon = pts @ rotation.T + rigid_offset

    if rescale:
        extent = np.max(np.abs(pts_canon))
        if extent <= 0:
            raise GeometryError("scene points are degenerate (zero extent)")
        scale = 1.0 / extent
    else:
        scale = 1.0
    offset = scale * rigid_offset
    pts_canon = scale * pts_canon
    r_d = scale * depth

    poses = [_apply_similarity_to_pose(p, rotation, offset, scale)
             for p in (input_pose, *other_poses)]
    # The input pose is (I, (0, 0, r_d)) by construction; snap away float residue
    # so canonical frames are exactly reproducible.
    poses[0] = CameraPose(np.eye(3), np.array([0.0, 0.0, r_d]), input_pose.focal,
                          input_pose.principal_point, input_pose.image_size)
    return NormalizedScene(tuple(poses), r_d, scale, pts_canon, rotation, offset)


def normalize_to_input_frame(input_pose: CameraPose, other_poses: list[CameraPose],
                             scene_points) -> NormalizedScene:
    """Re-express all poses and points so the input camera is canonical.

    One similarity transform (rotation + translation + uniform scale) is applied
    to everything: the input camera gets identity rotation with center at
    (0, 0, -r_d), and the scene points are scaled into the unit cube.
    """
    return _canonicalize(input_pose, other_poses, scene_points, rescale=True)


def rigid_recanonicalize(input_pose: CameraPose, other_poses: list[CameraPose],
                         scene_points) -> NormalizedScene:
    """Same canonical construction but rigid only (scale fixed at 1).

    Used when swapping which view is canonical inside an already-normalized
    scene: relative poses are preserved exactly, no rescaling.
    """
    return _canonicalize(input_pose, other_poses, scene_points, rescale=False)


def default_ray_bounds(pose: CameraPose) -> tuple[float, float]:
    """Near/far that enclose the unit cube from this camera's center."""
    d = float(np.linalg.norm(pose.center))
    return max(MIN_NEAR, d - CUBE_RADIUS), d + CUBE_RADIUS


def generate_rays(pose: CameraPose, near: float | None = None,
                  far: float | None = None) -> RayBundle:
    """One ray per pixel through the pixel center under the pinhole model.

    Rays are returned row-major over the image, origins at the camera center,
    directions unit-normalized in world coordinates.
    """
    h, w = pose.image_size
    cx, cy = pose.principal_point
    u = np.arange(w, dtype=np.float64) + 0.5
    v = np.arange(h, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)  # (h, w)
    dirs_cam = np.stack([(uu - cx) / pose.focal,
                         (vv - cy) / pose.focal,
                         np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.rotation  # == (R^T @ d^T)^T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs_world.shape).copy()
    if near is None or far is None:
        d_near, d_far = default_ray_bounds(pose)
        near = d_near if near is None else near
        far = d_far if far is None else far
    return RayBundle(origins, dirs_world, near, far)
