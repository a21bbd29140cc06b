"""Generalization sweeps and representation analysis.

Sweeps run a policy on the moving camera only, the way a deployed policy
sees a single unfamiliar camera, and count successes per condition. The
analysis helpers work on a trained agent directly: embedding exports,
cosine correspondence between two images and gradient-weighted attention
maps of the critic value.
"""

from __future__ import annotations
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    TypedDict,
)

from dataclasses import dataclass, field, replace
import csv
import itertools
import logging
import os

import numpy as np
import torch
import torch.nn.functional as F

from .agent import ActionSmoother, Agent
from .augment import DistractorBank, random_overlay
from .config import ExperimentConfig, PaletteConfig
from .encoder import stack_views
from .errors import InvalidSpecError, MissingStateError, ShapeMismatchError, SkipEpisode
from .render import CameraPose, Palette
from .simenv import (
    ACTION_DIM,
    EnvState,
    FrameStack,
    MultiViewObservation,
    RandomizationSpec,
    ToyManipulationEnv,
    View,
    pose_from,
)
from .util import derive_seed, to_record


ObsTransform = Callable[[FrameStack], FrameStack]


class Policy:
    """Maps the observation of one evaluation episode to actions."""

    def reset(self, seed: int):
        pass

    def act(self, obs: MultiViewObservation, env: ToyManipulationEnv) -> np.ndarray:
        raise NotImplementedError


class AgentPolicy(Policy):
    def __init__(
        self,
        agent: Agent,
        view: View = View.MOVING,
        smoothing_beta: float = 0.0,
        obs_transform: Optional[ObsTransform] = None,
    ):
        self.agent = agent
        self.view = view
        self.smoother = ActionSmoother(smoothing_beta)
        self.obs_transform = obs_transform

    def reset(self, seed: int):
        self.smoother.reset()

    def act(self, obs, env):
        stack = obs.view(self.view)
        if self.obs_transform is not None:
            stack = self.obs_transform(stack)
        return self.smoother(self.agent.act(stack, explore=False))


class RandomPolicy(Policy):
    def __init__(self):
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int):
        self.rng = np.random.default_rng(derive_seed(seed, "random-policy"))

    def act(self, obs, env):
        return self.rng.uniform(-1.0, 1.0, size=ACTION_DIM)


class ScriptedOraclePolicy(Policy):
    """Proportional controller on the ground-truth state.

    The gain is a fraction of the one-step deadbeat gain, low enough to
    stay stable under the largest action delay.
    """

    def __init__(self, gain: float = 0.3, lift_margin: float = 0.05):
        self.gain = gain
        self.lift_margin = lift_margin

    def act(self, obs, env):
        state = env.state
        config = env.config
        step_size = (
            config.max_speed * env.physics.velocity_gain * env.physics.control_timestep
        )
        grip = -1.0
        target = np.asarray(state.object_pos, dtype=float)
        if env.task == "lift":
            if state.grasped:
                target = np.array(
                    [*target[:2], state.rest_height + config.lift_height + self.lift_margin]
                )
                grip = 1.0
            elif np.linalg.norm(target - state.effector_pos) < 0.6 * config.grasp_radius:
                grip = 1.0
        delta = target - state.effector_pos
        velocity = np.clip(self.gain * delta / step_size, -1.0, 1.0)
        return np.array([*velocity, grip])


class EpisodeResult(NamedTuple):
    success: bool
    steps: int
    total_reward: float


def run_episode(
    env: ToyManipulationEnv,
    policy: Policy,
    spec: RandomizationSpec,
    seed: int,
    moving_pose: Optional[CameraPose] = None,
    palette: Optional[Palette] = None,
) -> EpisodeResult:
    obs = env.reset(spec, 1.0, seed, moving_pose=moving_pose, palette=palette)
    policy.reset(seed)
    total = 0.0
    done = False
    while not done:
        obs, reward, done = env.step(policy.act(obs, env))
        total += reward
    return EpisodeResult(env.success, env.state.step, total)


class ConditionResult(TypedDict):
    condition: str
    seed: int
    successes: int
    episodes: int
    skipped: int
    rate: float
    flags: List[str]


class ConditionSummary(TypedDict):
    condition: str
    successes: int
    episodes: int
    rate: float
    mean: float
    std: float
    seeds: List[int]
    flags: List[str]


@dataclass
class EvalReport:
    name: str
    fingerprint: str
    conditions: List[ConditionResult] = field(default_factory=list)

    @property
    def seeds(self) -> List[int]:
        return sorted({row["seed"] for row in self.conditions})

    def condition_names(self) -> List[str]:
        return list(dict.fromkeys(row["condition"] for row in self.conditions))

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.name, self.fingerprint, self.conditions + other.conditions)

    def summary(self) -> List[ConditionSummary]:
        """Per-condition totals with mean and std of the per-seed rates."""
        rows = []
        for name in self.condition_names():
            group = [row for row in self.conditions if row["condition"] == name]
            rates = np.array([row["rate"] for row in group])
            successes = sum(row["successes"] for row in group)
            episodes = sum(row["episodes"] for row in group)
            rows.append(
                ConditionSummary(
                    condition=name,
                    successes=successes,
                    episodes=episodes,
                    rate=successes / episodes if episodes else 0.0,
                    mean=float(rates.mean()),
                    std=float(rates.std()),
                    seeds=[row["seed"] for row in group],
                    flags=sorted({flag for row in group for flag in row["flags"]}),
                )
            )
        return rows

    def rate(self, condition: str) -> float:
        for row in self.summary():
            if row["condition"] == condition:
                return row["rate"]
        raise KeyError(condition)

    def records(self) -> Iterable[dict]:
        for row in self.conditions:
            yield {"kind": "condition", "report": self.name,
                   "fingerprint": self.fingerprint, **row}
        for row in self.summary():
            yield {"kind": "summary", "report": self.name,
                   "fingerprint": self.fingerprint, **row}

    def text(self) -> str:
        lines = [f"{self.name} (config {self.fingerprint[:12]}, seeds {self.seeds})"]
        for row in self.summary():
            flags = f"  [{', '.join(row['flags'])}]" if row["flags"] else ""
            lines.append(
                f"  {row['condition']:<24} {row['successes']:>4}/{row['episodes']:<4} "
                f"{100 * row['mean']:5.1f} ± {100 * row['std']:4.1f} %{flags}"
            )
        return "\n".join(lines) + "\n"

    def write(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "report.jsonl"), "w") as fh:
            for record in self.records():
                fh.write(to_record(record) + "\n")
        with open(os.path.join(directory, "report.txt"), "w") as fh:
            fh.write(self.text())


def bin_label(lo: float, hi: float) -> str:
    return f"yaw[{lo:g},{hi:g}]"


def eval_env(config: ExperimentConfig, embodiment: Optional[str] = None):
    env_config = replace(
        config.env,
        terminate_on_success=True,
        embodiment=embodiment or config.env.embodiment,
    )
    return ToyManipulationEnv(env_config, config.task)


def _count(
    env: ToyManipulationEnv,
    policy: Policy,
    spec: RandomizationSpec,
    episodes: Iterable[Tuple[int, Optional[CameraPose], Optional[Palette]]],
) -> Tuple[int, int, int]:
    successes = total = skipped = 0
    for seed, pose, palette in episodes:
        try:
            result = run_episode(env, policy, spec, seed, pose, palette)
        except SkipEpisode as err:
            logging.getLogger("viewgen").info(f"Skipping episode {seed}: {err}")
            skipped += 1
            continue
        successes += int(result.success)
        total += 1
    return successes, total, skipped


def viewpoint_sweep(
    policy: Policy,
    config: ExperimentConfig,
    yaw_bins: Sequence[Sequence[float]],
    episodes_per_bin: int,
    seed: int,
    fingerprint: str = "",
    embodiment: Optional[str] = None,
) -> EvalReport:
    """Success rate per |yaw| bin of the evaluation camera.

    Each episode draws the yaw uniformly inside the bin with a random sign;
    the other camera parameters cover their full randomization range.
    """
    spec = RandomizationSpec.from_config(config.env.randomization)
    spec.validate()
    yaw = spec["camera_yaw"]
    limit = yaw.half_range
    env = eval_env(config, embodiment)
    report = EvalReport("viewpoint", fingerprint)
    logger = logging.getLogger("viewgen")
    for lo, hi in yaw_bins:
        if not 0 <= lo <= hi <= limit + 1e-9:
            raise InvalidSpecError(
                f"Yaw bin [{lo}, {hi}] lies outside the trained range [0, {limit}]"
            )
        name = bin_label(lo, hi)

        def episodes():
            for e in range(episodes_per_bin):
                episode_seed = derive_seed(seed, name, e)
                rng = np.random.default_rng(episode_seed)
                values = spec.sample(rng)
                sign = 1.0 if rng.uniform() < 0.5 else -1.0
                values["camera_yaw"] = yaw.center + sign * rng.uniform(lo, hi)
                yield episode_seed, pose_from(values), None

        successes, total, skipped = _count(env, policy, spec, episodes())
        report.conditions.append(
            ConditionResult(
                condition=name,
                seed=seed,
                successes=successes,
                episodes=total,
                skipped=skipped,
                rate=successes / total if total else 0.0,
                flags=[],
            )
        )
        logger.info(f"{name}: {successes}/{total} successes (seed {seed})")
    return report


def overlay_transform(bank: DistractorBank, seed: int, alpha: float) -> ObsTransform:
    """Blend one distractor over the RGB channels of every frame."""
    distractor = {}

    def transform(stack: FrameStack) -> FrameStack:
        size = stack.image_size
        if "image" not in distractor:
            rng = np.random.default_rng(seed)
            distractor["image"] = bank.draw(rng, (size, size, 3))

        def one(frame):
            rgb = random_overlay(frame[..., :3], distractor["image"], alpha)
            return np.dstack([rgb, frame[..., 3]])

        return stack.map_frames(one)

    return transform


def appearance_sweep(
    policy_factory: Callable[[Optional[ObsTransform]], Policy],
    config: ExperimentConfig,
    palettes: Mapping[str, PaletteConfig],
    episodes: int,
    seed: int,
    fingerprint: str = "",
    bank: Optional[DistractorBank] = None,
) -> EvalReport:
    """Success rate per scene palette.

    Palettes that change the target object's color are flagged
    `target_recolor`; palettes with `overlay` set also blend a distractor
    over every observation the policy sees.
    """
    spec = RandomizationSpec.from_config(config.env.randomization)
    spec.validate()
    reference = Palette.from_config(config.env.palette)
    bank = bank or DistractorBank(config.augment.distractor_source)
    env = eval_env(config)
    report = EvalReport("appearance", fingerprint)
    for name, palette_config in palettes.items():
        palette = Palette.from_config(palette_config)
        flags = []
        if palette.recolors_target(reference):
            flags.append("target_recolor")
        transform = None
        if palette_config.overlay:
            flags.append("overlay")
            transform = overlay_transform(
                bank, derive_seed(seed, f"overlay-{name}"), config.eval.overlay_alpha
            )
        policy = policy_factory(transform)

        def runs():
            for e in range(episodes):
                yield derive_seed(seed, f"palette-{name}", e), None, palette

        successes, total, skipped = _count(env, policy, spec, runs())
        report.conditions.append(
            ConditionResult(
                condition=name,
                seed=seed,
                successes=successes,
                episodes=total,
                skipped=skipped,
                rate=successes / total if total else 0.0,
                flags=flags,
            )
        )
        logging.getLogger("viewgen").info(
            f"palette {name}: {successes}/{total} successes (seed {seed})"
        )
    return report


class TrajectoryStep(NamedTuple):
    timestep: int
    state: Optional[EnvState]
    digest: str


def record_trajectory(
    env: ToyManipulationEnv,
    policy: Policy,
    spec: RandomizationSpec,
    seed: int,
    magnitude: float = 0.0,
) -> List[TrajectoryStep]:
    obs = env.reset(spec, magnitude, seed)
    policy.reset(seed)
    steps = [TrajectoryStep(0, env.state.copy(), obs.state_digest)]
    done = False
    while not done:
        obs, _, done = env.step(policy.act(obs, env))
        steps.append(TrajectoryStep(env.state.step, env.state.copy(), obs.state_digest))
    return steps


class EmbeddingRow(TypedDict):
    timestep: int
    pose_id: str
    embedding: List[float]
    critic: List[float]


def _checked_state(step: TrajectoryStep) -> EnvState:
    if step.state is None:
        raise MissingStateError(f"No state recorded for timestep {step.timestep}")
    if step.state.digest() != step.digest:
        raise MissingStateError(
            f"State at timestep {step.timestep} does not match its recorded digest"
        )
    return step.state


def export_embeddings(
    agent: Agent,
    env: ToyManipulationEnv,
    trajectory: Sequence[TrajectoryStep],
    poses: Mapping[str, CameraPose],
) -> List[EmbeddingRow]:
    """Encode every recorded state from every pose.

    The frame stack at timestep t holds the renders of t-2, t-1 and t,
    repeating the first state at the start of the trajectory.
    """
    states = [_checked_state(step) for step in trajectory]
    rows = []
    for pose_id, pose in poses.items():
        frames = [env.render_view(state, pose, step.timestep)
                  for state, step in zip(states, trajectory)]
        for i, step in enumerate(trajectory):
            window = [frames[max(j, 0)] for j in range(i - 2, i + 1)]
            stack = FrameStack(tuple(window))
            with torch.no_grad():
                obs = stack_views([stack]).to(agent.device)
                embedding = agent.nets.encoder(obs).embedding
                action = agent.nets.actor(embedding)
                hidden = agent.nets.critic.penultimate(embedding, action)
            rows.append(
                EmbeddingRow(
                    timestep=step.timestep,
                    pose_id=pose_id,
                    embedding=embedding[0].cpu().tolist(),
                    critic=hidden[0].cpu().tolist(),
                )
            )
    rows.sort(key=lambda row: (row["timestep"], list(poses).index(row["pose_id"])))
    return rows


def write_embeddings(rows: Sequence[EmbeddingRow], path: str):
    if not rows:
        raise MissingStateError("Nothing to export")
    dim = len(rows[0]["embedding"])
    hidden = len(rows[0]["critic"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["timestep", "pose_id"]
            + [f"e{i}" for i in range(dim)]
            + [f"c{i}" for i in range(hidden)]
        )
        for row in rows:
            writer.writerow(
                [row["timestep"], row["pose_id"]] + row["embedding"] + row["critic"]
            )


def view_invariance_stats(rows: Sequence[EmbeddingRow], key: str = "embedding") -> dict:
    """Compare cross-view and cross-timestep embedding distances.

    For every timestep, the mean distance between the poses at that
    timestep is compared with the mean distance, per pose, to every other
    timestep.
    """
    table: Dict[int, Dict[str, np.ndarray]] = {}
    for row in rows:
        table.setdefault(row["timestep"], {})[row["pose_id"]] = np.asarray(row[key])
    timesteps = sorted(table)
    if len(timesteps) < 2:
        raise MissingStateError("Need at least two timesteps")
    cross_view, cross_time = [], []
    for t in timesteps:
        views = table[t]
        pairs = list(itertools.combinations(views.values(), 2))
        if not pairs:
            raise MissingStateError("Need at least two poses per timestep")
        cross_view.append(np.mean([np.linalg.norm(a - b) for a, b in pairs]))
        cross_time.append(
            np.mean(
                [
                    np.linalg.norm(emb - table[u][pose])
                    for pose, emb in views.items()
                    for u in timesteps
                    if u != t and pose in table[u]
                ]
            )
        )
    cross_view = np.array(cross_view)
    cross_time = np.array(cross_time)
    return {
        "timesteps": len(timesteps),
        "fraction": float(np.mean(cross_view < cross_time)),
        "cross_view_mean": float(cross_view.mean()),
        "cross_time_mean": float(cross_time.mean()),
    }


class Correspondence(NamedTuple):
    similarity: np.ndarray
    argmax: Tuple[int, int]
    query_cell: Tuple[int, int]
    match_cell: Tuple[int, int]


def _cell_index(size: int, cells: int) -> np.ndarray:
    return np.arange(size) * cells // size


def correspondence_map(
    agent: Agent,
    image_a: FrameStack,
    query: Tuple[int, int],
    image_b: FrameStack,
    layer: str = "stage1",
) -> Correspondence:
    """Cosine similarity of the query pixel's feature cell in A with every
    cell of B, upsampled to image resolution.

    Ties go to the cell nearest the query cell.
    """
    size = image_a.image_size
    row, col = query
    if not (0 <= row < size and 0 <= col < size):
        raise ShapeMismatchError(f"Query pixel {query} lies outside a {size}×{size} image")
    if image_b.image_size != size:
        raise ShapeMismatchError("Both images must share one resolution")
    encoder = agent.nets.encoder
    with torch.no_grad():
        obs = stack_views([image_a, image_b]).to(agent.device)
        maps = encoder(obs).maps[layer].double()
    fh, fw = maps.shape[-2:]
    qr = int(_cell_index(size, fh)[row])
    qc = int(_cell_index(size, fw)[col])
    descriptor = maps[0, :, qr, qc]
    sim = F.cosine_similarity(maps[1], descriptor[:, None, None], dim=0, eps=1e-12)
    sim = sim.clamp(-1.0, 1.0).cpu().numpy()

    candidates = np.argwhere(sim >= sim.max() - 1e-9)
    nearest = candidates[np.argmin(np.hypot(candidates[:, 0] - qr, candidates[:, 1] - qc))]
    match = (int(nearest[0]), int(nearest[1]))
    rows = _cell_index(size, fh)
    cols = _cell_index(size, fw)
    full = sim[rows[:, None], cols[None, :]]
    pixel_rows = np.flatnonzero(rows == match[0])
    pixel_cols = np.flatnonzero(cols == match[1])
    argmax = (int(pixel_rows[len(pixel_rows) // 2]), int(pixel_cols[len(pixel_cols) // 2]))
    return Correspondence(full.astype(np.float32), argmax, (qr, qc), match)


def attention_map(agent: Agent, obs: FrameStack, layer: str = "stage2") -> np.ndarray:
    """Grad-CAM of the critic value with respect to one feature map.

    Channels are weighted by their spatially averaged gradient; the
    rectified sum is min-max normalized and upsampled to the image.
    """
    nets = agent.nets
    x = stack_views([obs]).to(agent.device)
    pyramid = nets.encoder(x)
    fmap = pyramid.maps[layer]
    embedding = pyramid.embedding
    action = nets.actor(embedding).detach()
    q1, q2 = nets.critic(embedding, action)
    value = torch.min(q1, q2).sum()
    (grads,) = torch.autograd.grad(value, fmap)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * fmap).sum(dim=1, keepdim=True)).detach()
    lo, hi = cam.min(), cam.max()
    if float(hi - lo) < 1e-12:
        cam = torch.zeros_like(cam)
    else:
        cam = (cam - lo) / (hi - lo)
    size = obs.image_size
    cam = F.interpolate(cam, size=(size, size), mode="bilinear", align_corners=False)
    return cam[0, 0].clamp(0.0, 1.0).cpu().numpy()


def mask_mass_ratio(heat: np.ndarray, mask: np.ndarray) -> float:
    """Share of heat inside `mask` relative to a uniform map's share."""
    mask = np.asarray(mask, dtype=bool)
    total = float(heat.sum())
    if total <= 0 or not mask.any():
        return 0.0
    return float(heat[mask].sum()) / total / float(mask.mean())
