"""Toy multi-view manipulation environment.

A kinematic effector moves above a table holding one cube. Two cameras look
at the scene: a fixed one at the canonical pose and a moving one whose pose
is drawn from the randomization spec at every reset. Both observations are
RGB-D frame stacks rendered from the same state.

Two tasks are available:

    reach   bring the effector tip within `success_radius` of the cube
    lift    grasp the cube and raise it by at least `lift_height`
"""

from __future__ import annotations
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

from dataclasses import dataclass, field, replace
import enum
import logging

import cv2
import numpy as np

from .errors import (
    EpisodeDoneError,
    InvalidSpecError,
    ShapeMismatchError,
)
from .render import CameraPose, Palette, Renderer
from .util import array_digest, derive_seed


FRAME_STACK = 3
ACTION_DIM = 4

WORKSPACE_LOW = np.array([-0.3, -0.3])
WORKSPACE_HIGH = np.array([0.3, 0.3])
EFFECTOR_CEILING = 0.45
EFFECTOR_FLOOR = 0.005

CAMERA_ENTRIES = (
    "camera_pitch",
    "camera_yaw",
    "camera_fov",
    "camera_distance",
    "camera_height",
)
REQUIRED_ENTRIES = CAMERA_ENTRIES + (
    "joint_damping",
    "joint_armature",
    "object_size",
    "table_height",
    "action_delay",
    "control_timestep",
)

__all__ = [
    "CameraPose",
    "EnvState",
    "FrameStack",
    "MultiViewObservation",
    "RandomizationEntry",
    "RandomizationSpec",
    "ToyManipulationEnv",
    "View",
    "canonical_state",
    "preprocess_depth",
    "render",
]


class View(enum.Enum):
    FIXED = "fixed"
    MOVING = "moving"


@dataclass(frozen=True)
class RandomizationEntry:
    center: float
    half_range: float
    kind: str = "additive"

    def validate(self, name: str):
        if self.kind not in ("additive", "multiplicative"):
            raise InvalidSpecError(f"{name}: unknown kind {self.kind!r}")
        if not self.half_range >= 0:
            raise InvalidSpecError(
                f"{name}: half_range must be non-negative, got {self.half_range}"
            )
        if self.kind == "multiplicative" and not self.center > 0:
            raise InvalidSpecError(
                f"{name}: multiplicative center must be positive, got {self.center}"
            )

    def value(self, u: float) -> float:
        """Map u in [-1, 1] into the range."""
        if self.kind == "multiplicative":
            return self.center * (1.0 + u * self.half_range)
        return self.center + u * self.half_range

    def bounds(self) -> Tuple[float, float]:
        return self.value(-1.0), self.value(1.0)


class RandomizationSpec(Mapping[str, RandomizationEntry]):
    """Named randomization ranges.

    Sampling always draws one uniform number per entry, in sorted name
    order, so the random stream does not depend on the magnitude.
    """

    def __init__(self, entries: Mapping[str, RandomizationEntry]):
        self._entries = dict(entries)

    @classmethod
    def from_config(cls, ranges) -> "RandomizationSpec":
        return cls(
            {
                name: RandomizationEntry(float(r.center), float(r.half_range), r.kind)
                for name, r in ranges.items()
            }
        )

    def __getitem__(self, name: str) -> RandomizationEntry:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"RandomizationSpec({self._entries!r})"

    def validate(self):
        missing = [name for name in REQUIRED_ENTRIES if name not in self._entries]
        if missing:
            raise InvalidSpecError(f"Missing randomization entries: {missing}")
        for name, entry in self._entries.items():
            entry.validate(name)

    def scaled(self, magnitude: float) -> "RandomizationSpec":
        return RandomizationSpec(
            {
                name: replace(entry, half_range=entry.half_range * magnitude)
                for name, entry in self._entries.items()
            }
        )

    def midpoints(self) -> Dict[str, float]:
        return {name: entry.value(0.0) for name, entry in self._entries.items()}

    def sample(self, rng: np.random.Generator) -> Dict[str, float]:
        draws = rng.uniform(-1.0, 1.0, size=len(self._entries))
        return {name: self[name].value(u) for name, u in zip(self, draws)}


def pose_from(values: Mapping[str, float]) -> CameraPose:
    return CameraPose(
        pitch=values["camera_pitch"],
        yaw=values["camera_yaw"],
        fov=values["camera_fov"],
        distance=values["camera_distance"],
        height_offset=values["camera_height"],
    )


@dataclass
class PhysicsParams:
    velocity_gain: float = 1.0
    control_timestep: float = 0.02
    action_delay: int = 0
    light_intensity: float = 1.0


@dataclass
class EnvState:
    effector_pos: np.ndarray
    object_pos: np.ndarray
    object_size: float = 0.05
    grasped: bool = False
    step: int = 0
    pending_actions: List[np.ndarray] = field(default_factory=list)
    table_height: float = 0.0
    object_present: bool = True

    def copy(self) -> "EnvState":
        return replace(
            self,
            effector_pos=np.array(self.effector_pos, dtype=float),
            object_pos=np.array(self.object_pos, dtype=float),
            pending_actions=[np.array(a) for a in self.pending_actions],
        )

    @property
    def rest_height(self) -> float:
        return self.table_height + self.object_size / 2.0

    def digest(self) -> str:
        return array_digest(
            np.asarray(self.effector_pos, dtype=float),
            np.asarray(self.object_pos, dtype=float),
            np.array(
                [
                    self.object_size,
                    float(self.grasped),
                    float(self.step),
                    self.table_height,
                    float(self.object_present),
                ]
            ),
        )


@dataclass(frozen=True)
class FrameStack:
    """The three most recent H×W×4 uint8 RGB-D frames, oldest first."""

    frames: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.frames) != FRAME_STACK:
            raise ShapeMismatchError(
                f"A frame stack holds exactly {FRAME_STACK} frames, got {len(self.frames)}"
            )
        shape = self.frames[0].shape
        for frame in self.frames:
            if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 4:
                raise ShapeMismatchError("Frames must be H×W×4 uint8 RGB-D images")
            if frame.shape != shape:
                raise ShapeMismatchError("All frames of a stack must share one shape")

    @classmethod
    def initial(cls, frame: np.ndarray) -> "FrameStack":
        return cls(tuple(frame.copy() for _ in range(FRAME_STACK)))

    def push(self, frame: np.ndarray) -> "FrameStack":
        return FrameStack(self.frames[1:] + (frame,))

    @property
    def image_size(self) -> int:
        return self.frames[0].shape[0]

    def array(self) -> np.ndarray:
        """Channels-first stack, 12×H×W, frame-major RGBD order."""
        return np.concatenate([f.transpose(2, 0, 1) for f in self.frames], axis=0)

    def map_frames(self, fn) -> "FrameStack":
        return FrameStack(tuple(fn(f) for f in self.frames))

    def equals(self, other: "FrameStack") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))


@dataclass(frozen=True)
class MultiViewObservation:
    fixed: FrameStack
    moving: FrameStack
    moving_pose: CameraPose
    state_digest: str = ""

    def view(self, view: View) -> FrameStack:
        return self.fixed if view is View.FIXED else self.moving


def render(state: EnvState, pose: CameraPose, image_size: int = 128,
           palette: Optional[Palette] = None, embodiment: str = "default",
           light_intensity: float = 1.0) -> np.ndarray:
    """RGB-D image of `state` seen from `pose`; depth channel in meters."""
    return Renderer(image_size, embodiment).render(state, pose, palette, light_intensity)


def preprocess_depth(
    raw_depth: np.ndarray,
    seed: int,
    noise: bool = True,
    blur: bool = True,
    noise_std: float = 0.01,
    scale_noise: float = 0.05,
    max_depth: float = 2.0,
    kernel: int = 5,
) -> np.ndarray:
    """Noisy, blurred, clipped 8-bit depth as a real sensor would deliver it.

    Adds N(0, noise_std) plus N(0, scale_noise * |depth|), blurs, clips to
    [0, max_depth] meters and maps linearly onto [0, 255].
    """
    depth = np.maximum(np.asarray(raw_depth, dtype=np.float64), 0.0)
    if noise:
        rng = np.random.default_rng(seed)
        depth = (
            depth
            + rng.normal(0.0, noise_std, size=depth.shape)
            + rng.normal(0.0, 1.0, size=depth.shape) * np.abs(depth) * scale_noise
        )
    if blur:
        depth = cv2.GaussianBlur(depth.astype(np.float32), (kernel, kernel), 0)
    depth = np.clip(depth, 0.0, max_depth)
    return np.rint(depth / max_depth * 255.0).astype(np.uint8)


def physics_from(values: Mapping[str, float]) -> PhysicsParams:
    # Heavier damping and armature slow the effector down.
    resistance = 0.5 * (values["joint_damping"] + values["joint_armature"])
    return PhysicsParams(
        velocity_gain=1.0 / resistance,
        control_timestep=values["control_timestep"],
        action_delay=int(np.clip(np.rint(values["action_delay"]), 0, None)),
        light_intensity=values.get("light_intensity", 1.0),
    )


class ToyManipulationEnv:
    """Kinematic reach/lift environment with a fixed and a moving camera."""

    def __init__(self, config, task: str = "reach"):
        if task not in ("reach", "lift"):
            raise InvalidSpecError(f"Unknown task {task!r}")
        self.config = config
        self.task = task
        self.renderer = Renderer(config.image_size, config.embodiment)
        self.base_palette = Palette.from_config(config.palette)
        self.palette = self.base_palette
        self.physics = PhysicsParams()
        self.state: Optional[EnvState] = None
        self.fixed_pose: Optional[CameraPose] = None
        self.moving_pose: Optional[CameraPose] = None
        self.done = True
        self.success = False
        self.info: dict = {}
        self._seed = 0
        self._stacks: Dict[View, FrameStack] = {}

    def reset(
        self,
        spec: RandomizationSpec,
        magnitude: float,
        seed: int,
        moving_pose: Optional[CameraPose] = None,
        palette: Optional[Palette] = None,
    ) -> MultiViewObservation:
        if not 0.0 <= magnitude <= 1.0:
            raise InvalidSpecError(f"magnitude must be in [0, 1], got {magnitude}")
        spec.validate()
        rng = np.random.default_rng(seed)
        self._seed = int(seed)

        values = spec.scaled(magnitude).sample(rng)
        self.physics = physics_from(values)
        if self.physics.action_delay > self.config.max_action_delay:
            self.physics.action_delay = self.config.max_action_delay
        self.moving_pose = moving_pose or pose_from(values)
        self.fixed_pose = self._canonical_pose(spec)

        perturbed = self.base_palette.perturbed(rng, magnitude)
        if palette is not None:
            self.palette = palette
        elif self.config.randomize_appearance:
            self.palette = perturbed
        else:
            self.palette = self.base_palette

        table_height = values["table_height"]
        size = values["object_size"]
        object_xy = rng.uniform(-0.2, 0.2, size=2)
        effector = np.array(
            [*rng.uniform(-0.15, 0.15, size=2), rng.uniform(0.2, 0.3)]
        )
        self.state = EnvState(
            effector_pos=effector + np.array([0.0, 0.0, table_height]),
            object_pos=np.array([*object_xy, table_height + size / 2.0]),
            object_size=size,
            table_height=table_height,
            pending_actions=[
                np.zeros(ACTION_DIM) for _ in range(self.physics.action_delay)
            ],
        )
        self.done = False
        self.success = False
        self.info = self._evaluate()
        fixed, moving = self._render_views()
        self._stacks = {
            View.FIXED: FrameStack.initial(fixed),
            View.MOVING: FrameStack.initial(moving),
        }
        return self._observation()

    def step(self, action) -> Tuple[MultiViewObservation, float, bool]:
        if self.done or self.state is None:
            raise EpisodeDoneError("step() called on a finished episode; call reset()")
        action = np.asarray(action, dtype=float)
        if action.shape != (ACTION_DIM,):
            raise ShapeMismatchError(
                f"Actions have shape ({ACTION_DIM},), got {action.shape}"
            )
        action = np.clip(action, -1.0, 1.0)

        state = self.state
        state.pending_actions.append(action)
        applied = state.pending_actions.pop(0)
        self._apply(state, applied)
        state.step += 1

        self.info = self._evaluate()
        self.success = self.success or self.info["success"]
        self.done = state.step >= self.config.episode_length or (
            self.config.terminate_on_success and self.info["success"]
        )
        fixed, moving = self._render_views()
        self._stacks = {
            View.FIXED: self._stacks[View.FIXED].push(fixed),
            View.MOVING: self._stacks[View.MOVING].push(moving),
        }
        reward = self.info["shaping"] + self.config.success_bonus * float(
            self.info["success"]
        )
        return self._observation(), float(reward), self.done

    def shaping(self) -> float:
        return self._evaluate()["shaping"]

    def render_view(self, state: EnvState, pose: CameraPose, step: int = 0) -> np.ndarray:
        """One preprocessed H×W×4 uint8 frame of `state` from `pose`."""
        rgbd = self.renderer.render(
            state, pose, self.palette, self.physics.light_intensity
        )
        rgb = rgbd[..., :3].astype(np.uint8)
        if self.config.use_depth:
            depth = preprocess_depth(
                rgbd[..., 3],
                seed=derive_seed(self._seed, f"depth-{pose}", step),
                noise=self.config.depth_noise,
                blur=self.config.depth_blur,
                noise_std=self.config.depth_noise_std,
                scale_noise=self.config.depth_scale_noise,
                max_depth=self.config.max_depth,
                kernel=self.config.blur_kernel,
            )
        else:
            depth = np.zeros(rgb.shape[:2], dtype=np.uint8)
        return np.dstack([rgb, depth])

    def _canonical_pose(self, spec: RandomizationSpec) -> CameraPose:
        fixed = self.config.fixed_camera
        if fixed is None:
            return pose_from(spec.midpoints())
        return CameraPose(
            fixed.pitch, fixed.yaw, fixed.fov, fixed.distance, fixed.height_offset
        )

    def _apply(self, state: EnvState, action: np.ndarray):
        delta = (
            action[:3]
            * self.config.max_speed
            * self.physics.velocity_gain
            * self.physics.control_timestep
        )
        position = state.effector_pos + delta
        position[:2] = np.clip(position[:2], WORKSPACE_LOW, WORKSPACE_HIGH)
        position[2] = np.clip(
            position[2],
            state.table_height + EFFECTOR_FLOOR,
            state.table_height + EFFECTOR_CEILING,
        )
        state.effector_pos = position

        if self.task != "lift":
            return
        grip = action[3] > 0
        if state.grasped and not grip:
            state.grasped = False
            state.object_pos = np.array([*state.object_pos[:2], state.rest_height])
        elif not state.grasped and grip:
            distance = np.linalg.norm(state.effector_pos - state.object_pos)
            state.grasped = bool(distance <= self.config.grasp_radius)
        if state.grasped:
            state.object_pos = state.effector_pos.copy()

    def _evaluate(self) -> dict:
        state = self.state
        distance = float(np.linalg.norm(state.effector_pos - state.object_pos))
        reach = 1.0 - float(np.tanh(10.0 * distance))
        if self.task == "reach":
            success = distance < self.config.success_radius
            shaping = reach
        else:
            lifted = float(state.object_pos[2] - state.rest_height)
            success = state.grasped and lifted >= self.config.lift_height
            progress = np.clip(lifted / self.config.lift_height, 0.0, 1.0)
            shaping = 0.5 * reach + 0.5 * float(state.grasped)
            shaping += float(progress) if state.grasped else 0.0
        return {
            "success": bool(success and state.object_present),
            "shaping": float(shaping),
            "distance": distance,
        }

    def _render_views(self):
        step = self.state.step
        return (
            self.render_view(self.state, self.fixed_pose, step),
            self.render_view(self.state, self.moving_pose, step),
        )

    def _observation(self) -> MultiViewObservation:
        return MultiViewObservation(
            fixed=self._stacks[View.FIXED],
            moving=self._stacks[View.MOVING],
            moving_pose=self.moving_pose,
            state_digest=self.state.digest(),
        )


def episode_log(env: ToyManipulationEnv, episode: int, total_reward: float) -> dict:
    logging.getLogger("viewgen").debug(
        f"Episode {episode} finished after {env.state.step} steps"
    )
    return {
        "episode": episode,
        "task": env.task,
        "steps": env.state.step,
        "return": total_reward,
        "success": env.success,
        "moving_pose": vars(env.moving_pose),
    }


def canonical_state(object_size: float = 0.05) -> EnvState:
    """Fixed scene used for golden renders and analysis commands."""
    return EnvState(
        effector_pos=np.array([-0.1, -0.05, 0.2]),
        object_pos=np.array([0.1, 0.05, object_size / 2.0]),
        object_size=object_size,
    )
