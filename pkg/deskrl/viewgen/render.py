"""Flat-shaded ray caster for the toy table scene.

Every pixel casts one ray from a pinhole camera looking at the table center.
The scene is made of axis-aligned boxes (table, cube, box gripper) and
vertical cylinders (finger, arm link); no shadows, one directional light.
Depth is the z-distance along the optical axis, in meters.
"""

from __future__ import annotations
from typing import NamedTuple, Optional, Tuple

from dataclasses import dataclass
import math

import numpy as np

from .errors import DegeneratePoseError


BACKGROUND, TABLE, OBJECT, EFFECTOR, ARM = range(5)

FAR_DEPTH = 10.0
TABLE_HALF_EXTENT = 0.6
TABLE_THICKNESS = 0.04
ARM_LENGTH = 0.6
AMBIENT = 0.35
LIGHT_DIR = np.array([0.3, -0.5, 1.0]) / np.linalg.norm([0.3, -0.5, 1.0])
LOOK_AT = np.zeros(3)


@dataclass(frozen=True)
class CameraPose:
    pitch: float
    yaw: float
    fov: float
    distance: float
    height_offset: float = 0.0

    def validate(self):
        if not self.distance > 0:
            raise DegeneratePoseError(
                f"Camera distance must be positive, got {self.distance}"
            )
        if not 0 < self.fov < 180:
            raise DegeneratePoseError(f"Camera fov must be in (0, 180), got {self.fov}")
        if abs(math.cos(math.radians(self.pitch))) < 1e-6:
            raise DegeneratePoseError("Camera looks straight down the up axis")


@dataclass(frozen=True)
class Palette:
    table: Tuple[int, int, int] = (150, 110, 70)
    background: Tuple[int, int, int] = (90, 100, 120)
    object: Tuple[int, int, int] = (220, 40, 40)
    effector: Tuple[int, int, int] = (200, 200, 200)

    @classmethod
    def from_config(cls, config) -> "Palette":
        return cls(
            table=tuple(int(c) for c in config.table),
            background=tuple(int(c) for c in config.background),
            object=tuple(int(c) for c in config.object),
            effector=tuple(int(c) for c in config.effector),
        )

    def recolors_target(self, reference: "Palette") -> bool:
        return tuple(self.object) != tuple(reference.object)

    def perturbed(self, rng: np.random.Generator, magnitude: float, scale=40.0):
        """Jitter table, background and effector colors; the target keeps its color."""
        jitter = rng.uniform(-1.0, 1.0, size=(3, 3)) * magnitude * scale

        def shift(color, row):
            return tuple(int(c) for c in np.clip(np.rint(np.add(color, row)), 0, 255))

        return Palette(
            table=shift(self.table, jitter[0]),
            background=shift(self.background, jitter[1]),
            object=self.object,
            effector=shift(self.effector, jitter[2]),
        )


@dataclass(frozen=True)
class Embodiment:
    name: str
    shape: str
    radius: float
    height: float
    arm_radius: float


EMBODIMENTS = {
    "default": Embodiment("default", "cylinder", 0.02, 0.08, 0.012),
    # Wide box gripper, the toy stand-in for a second robot model.
    "alt": Embodiment("alt", "box", 0.035, 0.05, 0.018),
}


class Raycast(NamedTuple):
    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray


def camera_frame(pose: CameraPose):
    """Eye position and (forward, right, up) unit vectors for `pose`."""
    pitch = math.radians(pose.pitch)
    yaw = math.radians(pose.yaw)
    offset = pose.distance * np.array(
        [
            math.sin(yaw) * math.cos(pitch),
            -math.cos(yaw) * math.cos(pitch),
            math.sin(pitch),
        ]
    )
    eye = LOOK_AT + offset + np.array([0.0, 0.0, pose.height_offset])
    forward = LOOK_AT - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, forward, right, up


def camera_rays(pose: CameraPose, size: int):
    """Ray directions scaled so that their forward component is 1."""
    eye, forward, right, up = camera_frame(pose)
    half = math.tan(math.radians(pose.fov) / 2.0)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xs, ys = np.meshgrid(coords, -coords)
    dirs = (
        forward[None, None, :]
        + (xs * half)[:, :, None] * right[None, None, :]
        + (ys * half)[:, :, None] * up[None, None, :]
    )
    return eye, dirs


def project(pose: CameraPose, size: int, points) -> np.ndarray:
    """Pixel (row, col) coordinates of world `points`, N×3."""
    eye, forward, right, up = camera_frame(pose)
    rel = np.atleast_2d(points) - eye
    z = rel @ forward
    half = math.tan(math.radians(pose.fov) / 2.0)
    x = (rel @ right) / (z * half)
    y = (rel @ up) / (z * half)
    col = (x + 1.0) / 2.0 * size - 0.5
    row = (1.0 - y) / 2.0 * size - 0.5
    return np.stack([row, col], axis=-1)


def intersect_box(origin, dirs, lo, hi):
    """Slab test. Returns hit distance (inf on miss) and outward normals."""
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    t1 = (np.asarray(lo) - origin) * inv
    t2 = (np.asarray(hi) - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = tmin.argmax(axis=-1)
    normals = np.zeros(dirs.shape)
    component = np.take_along_axis(safe, axis[..., None], axis=-1)[..., 0]
    np.put_along_axis(normals, axis[..., None], -np.sign(component)[..., None], axis=-1)
    return np.where(hit, t_near, np.inf), normals


def intersect_cylinder(origin, dirs, center_xy, radius, z0, z1):
    """Finite vertical cylinder with caps."""
    px = origin[0] - center_xy[0]
    py = origin[1] - center_xy[1]
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = 2.0 * (px * dx + py * dy)
    c = px * px + py * py - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    z_side = origin[2] + t_side * dz
    side = (disc >= 0) & (a > 1e-12) & (t_side > 0) & (z_side >= z0) & (z_side <= z1)
    t_hit = np.where(side, t_side, 0.0)
    normals = np.zeros(dirs.shape)
    normals[..., 0] = (px + t_hit * dx) / radius
    normals[..., 1] = (py + t_hit * dy) / radius

    safe_dz = np.where(np.abs(dz) < 1e-12, 1e-12, dz)
    best = np.where(side, t_side, np.inf)
    for z_cap, nz in ((z1, 1.0), (z0, -1.0)):
        t_cap = (z_cap - origin[2]) / safe_dz
        cx = px + t_cap * dx
        cy = py + t_cap * dy
        cap = (t_cap > 0) & (cx * cx + cy * cy <= radius * radius) & (t_cap < best)
        best = np.where(cap, t_cap, best)
        normals[cap] = (0.0, 0.0, nz)
    return best, normals


class Renderer:
    """Render EnvState-like objects from CameraPoses at a fixed resolution."""

    def __init__(self, image_size: int = 128, embodiment: str = "default"):
        self.image_size = int(image_size)
        self.embodiment = EMBODIMENTS[embodiment]

    def primitives(self, state):
        th = float(state.table_height)
        yield TABLE, "box", (
            (-TABLE_HALF_EXTENT, -TABLE_HALF_EXTENT, th - TABLE_THICKNESS),
            (TABLE_HALF_EXTENT, TABLE_HALF_EXTENT, th),
        )
        if state.object_present:
            half = state.object_size / 2.0
            center = np.asarray(state.object_pos, dtype=float)
            yield OBJECT, "box", (center - half, center + half)
        body = self.embodiment
        tip = np.asarray(state.effector_pos, dtype=float)
        top = tip[2] + body.height
        if body.shape == "box":
            lo = (tip[0] - body.radius, tip[1] - body.radius / 2.0, tip[2])
            hi = (tip[0] + body.radius, tip[1] + body.radius / 2.0, top)
            yield EFFECTOR, "box", (lo, hi)
        else:
            yield EFFECTOR, "cylinder", (tip[:2], body.radius, tip[2], top)
        yield ARM, "cylinder", (tip[:2], body.arm_radius, top, top + ARM_LENGTH)

    def raycast(self, state, pose: CameraPose, palette: Optional[Palette] = None,
                light_intensity: float = 1.0) -> Raycast:
        pose.validate()
        palette = palette or Palette()
        eye, dirs = camera_rays(pose, self.image_size)
        shape = dirs.shape[:2]
        depth = np.full(shape, np.inf)
        labels = np.full(shape, BACKGROUND, dtype=np.int8)
        normals = np.zeros(dirs.shape)
        for label, kind, args in self.primitives(state):
            if kind == "box":
                t, n = intersect_box(eye, dirs, *args)
            else:
                t, n = intersect_cylinder(eye, dirs, *args)
            closer = t < depth
            depth = np.where(closer, t, depth)
            labels[closer] = label
            normals[closer] = n[closer]

        colors = np.zeros(dirs.shape)
        colors[labels == BACKGROUND] = palette.background
        colors[labels == TABLE] = palette.table
        colors[labels == OBJECT] = palette.object
        colors[(labels == EFFECTOR) | (labels == ARM)] = palette.effector
        lambert = np.clip(normals @ LIGHT_DIR, 0.0, None)
        shade = (AMBIENT + (1.0 - AMBIENT) * lambert) * light_intensity
        shade = np.where(labels == BACKGROUND, 1.0, shade)
        rgb = np.clip(np.rint(colors * shade[..., None]), 0, 255).astype(np.uint8)
        depth = np.where(np.isfinite(depth), depth, FAR_DEPTH).astype(np.float32)
        return Raycast(rgb, depth, labels)

    def render(self, state, pose: CameraPose, palette: Optional[Palette] = None,
               light_intensity: float = 1.0) -> np.ndarray:
        """H×W×4 float32: RGB codes in [0, 255] and raw depth in meters."""
        cast = self.raycast(state, pose, palette, light_intensity)
        return np.dstack([cast.rgb.astype(np.float32), cast.depth])
