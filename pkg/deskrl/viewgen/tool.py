from __future__ import annotations
from typing import Dict, List, Optional, Sequence

import argparse
import logging
import os

import numpy as np
import torch

from .agent import Agent
from .config import (
    ExperimentConfig,
    ablation_overrides,
    config_fingerprint,
    default_config_path,
    load_config,
    to_container,
)
from .context import RunContext, load_checkpoint
from .curriculum import CurriculumState
from .errors import ConfigError, MissingStateError, ViewgenError
from .evalkit import (
    AgentPolicy,
    EvalReport,
    appearance_sweep,
    attention_map,
    correspondence_map,
    export_embeddings,
    mask_mass_ratio,
    record_trajectory,
    view_invariance_stats,
    viewpoint_sweep,
    write_embeddings,
)
from .plots import curve_plot, heat_overlay, save_png, similarity_image, success_plot
from .render import OBJECT, Renderer
from .replay import ReplayBuffer, Transition, sample_batch
from .simenv import (
    ACTION_DIM,
    FrameStack,
    RandomizationSpec,
    ToyManipulationEnv,
    View,
    canonical_state,
    episode_log,
    pose_from,
)
from ._context import load_object
from .util import derive_seed
from .validator import ConfigValidator, errors_of, print_issues


def configure_determinism(config: ExperimentConfig):
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


class Trainer:
    """Environment loop, replay and updates for one run directory.

    Every random draw is seeded from (seed, stream, step or episode), so a
    resumed run continues exactly where the interrupted one stopped.
    """

    def __init__(self, config: ExperimentConfig, run_dir: Optional[str] = None,
                 device: str = "cpu"):
        self.config = config
        self.ctx = RunContext(config, run_dir)
        configure_determinism(config)
        self.spec = RandomizationSpec.from_config(config.env.randomization)
        self.spec.validate()
        self.agent = Agent(config, device)
        self.replay = ReplayBuffer(config.replay.capacity)
        self.env = ToyManipulationEnv(config.env, config.task)
        self.curriculum = CurriculumState.from_config(config.curriculum)
        self.step = 0
        self.episode = 0
        self.episode_reward = 0.0
        self.obs = None

    def start_episode(self):
        magnitude = self.curriculum.at(self.step).magnitude
        seed = derive_seed(self.config.seed, "episode", self.episode)
        self.obs = self.env.reset(self.spec, magnitude, seed)
        self.episode_reward = 0.0

    def state_dict(self) -> dict:
        return {
            "agent": self.agent.state_dict(),
            "env": self.env,
            "obs": self.obs,
            "episode": self.episode,
            "episode_reward": self.episode_reward,
            "curriculum": self.curriculum.at(self.step).as_record(),
            "config": to_container(self.config),
        }

    def load_state(self, checkpoint: dict):
        self.agent.load_state_dict(checkpoint["agent"])
        self.env = checkpoint["env"]
        self.obs = checkpoint["obs"]
        self.episode = checkpoint["episode"]
        self.episode_reward = checkpoint["episode_reward"]
        self.step = checkpoint["step"]
        replay = self.ctx.load_replay()
        if replay is not None:
            self.replay = ReplayBuffer.from_state_dict(replay, self.config.replay.capacity)
        else:
            logging.getLogger("viewgen").warning(
                "No replay snapshot found, resuming with an empty buffer"
            )

    def act(self, curriculum: CurriculumState) -> np.ndarray:
        seed = derive_seed(self.config.seed, "act", self.step)
        if self.step <= self.config.agent.seed_steps:
            return np.random.default_rng(seed).uniform(-1.0, 1.0, size=ACTION_DIM)
        return self.agent.act(
            self.obs.view(curriculum.view), explore=True, seed=seed, step=self.step
        )

    def run(self, resume: bool = False) -> str:
        config = self.config
        checkpoint = self.ctx.prepare(resume)
        if checkpoint is not None:
            self.load_state(checkpoint)
        else:
            self.start_episode()
        try:
            while self.step < config.total_steps:
                self.train_step()
        finally:
            self.ctx.close()
        return self.ctx.run_dir

    def train_step(self):
        config = self.config
        self.step += 1
        curriculum = self.curriculum.at(self.step)
        action = self.act(curriculum)
        next_obs, reward, done = self.env.step(action)
        terminal = done and config.env.terminate_on_success and self.env.info["success"]
        self.replay.add(
            Transition(
                obs=self.obs,
                action=np.asarray(action, dtype=np.float32),
                reward=reward,
                discount=0.0 if terminal else config.agent.gamma,
                done=done,
                episode_id=self.episode,
                step_index=self.env.state.step - 1,
                next_obs=next_obs,
            )
        )
        self.obs = next_obs
        self.episode_reward += reward
        if done:
            record = episode_log(self.env, self.episode, self.episode_reward)
            record.update(step=self.step, magnitude=curriculum.magnitude)
            self.ctx.log_episode(record)
            self.episode += 1
            self.start_episode()

        agent = config.agent
        if (
            self.step > agent.seed_steps
            and self.step % agent.update_every == 0
            and len(self.replay.valid_starts(agent.n_step))
        ):
            batch = sample_batch(
                self.replay,
                agent.batch_size,
                agent.n_step,
                derive_seed(config.seed, "sample", self.step),
            )
            bundle = self.agent.update(
                batch, curriculum, derive_seed(config.seed, "update", self.step)
            )
            record = {"step": self.step, **bundle.as_record(), **curriculum.as_record()}
            self.ctx.log_metrics(record)

        if self.step % config.checkpoint.every == 0 or self.step == config.total_steps:
            self.ctx.save_checkpoint(
                self.step,
                self.state_dict(),
                self.replay if config.checkpoint.save_replay else None,
            )


def train(config_path: Optional[str], overrides: Sequence[str] = (),
          ablate: Optional[str] = None, resume: bool = False, device: str = "cpu") -> str:
    overrides = list(overrides) + ablation_overrides(ablate)
    issues = ConfigValidator.validate(config_path, overrides=overrides)["issues"]
    print_issues(issues)
    errors = errors_of(issues)
    if errors:
        raise ConfigError(f"{len(errors)} config errors in {config_path}", errors)
    config = load_config(config_path, overrides)
    return Trainer(config, device=device).run(resume)


def restore_agent(checkpoint_path: str, overrides: Sequence[str] = (),
                  device: str = "cpu"):
    """Agent and config of a checkpoint. Overrides may only touch settings
    that do not change what the run computes (eval, checkpoint, output_dir)."""
    checkpoint = load_object(checkpoint_path, device)
    if "config" not in checkpoint:
        raise MissingStateError(f"{checkpoint_path} holds no config")
    config = load_config(overrides=overrides, data=checkpoint["config"])
    load_checkpoint(checkpoint_path, config, device)
    agent = Agent(config, device)
    agent.load_state_dict(checkpoint["agent"], weights_only=True)
    return agent, config


def run_dir_of(checkpoint_path: str) -> str:
    directory = os.path.dirname(os.path.abspath(checkpoint_path))
    if os.path.basename(directory) == "checkpoints":
        directory = os.path.dirname(directory)
    return directory


def evaluate(agent: Agent, config: ExperimentConfig, fingerprint: str,
             embodiment: Optional[str] = None) -> Dict[str, EvalReport]:
    """Viewpoint and appearance sweeps over every evaluation seed."""
    beta = config.eval.smoothing_beta
    policy = AgentPolicy(agent, View.MOVING, beta)
    reports: Dict[str, EvalReport] = {}
    for seed in config.eval.seeds:
        for name, report in (
            ("viewpoint", viewpoint_sweep(
                policy, config, config.eval.yaw_bins, config.eval.episodes_per_bin,
                seed, fingerprint, embodiment)),
            ("appearance", appearance_sweep(
                lambda transform: AgentPolicy(agent, View.MOVING, beta, transform),
                config, config.eval.palettes, config.eval.appearance_episodes,
                seed, fingerprint)),
        ):
            reports[name] = reports[name].merged(report) if name in reports else report
    return reports


def eval_checkpoint(checkpoint: str, overrides: Sequence[str] = (),
                    ablate: Optional[str] = None, ablation_checkpoint: Optional[str] = None,
                    embodiment: Optional[str] = None, output: Optional[str] = None,
                    device: str = "cpu") -> Dict[str, EvalReport]:
    agent, config = restore_agent(checkpoint, overrides, device)
    run = RunContext(config, run_dir_of(checkpoint))

    def report_dir(name):
        return os.path.join(output, name) if output else run.eval_dir(name)

    reports = evaluate(agent, config, run.fingerprint, embodiment)
    variants = {"full": reports}
    if ablate:
        if ablation_checkpoint is None:
            raise MissingStateError(f"--ablate {ablate} needs --ablation-checkpoint")
        other, other_config = restore_agent(ablation_checkpoint, overrides, device)
        if other_config.ablation != ablate:
            raise ViewgenError(
                f"{ablation_checkpoint} was trained with ablation "
                f"{other_config.ablation!r}, not {ablate!r}"
            )
        variants[ablate] = evaluate(
            other, other_config, config_fingerprint(other_config), embodiment
        )
    for sweep in reports:
        for label, variant in variants.items():
            name = sweep if label == "full" else f"{sweep}-{label}"
            variant[sweep].write(report_dir(name))
            print(variant[sweep].text(), end="")
        success_plot(
            {label: variant[sweep] for label, variant in variants.items()},
            os.path.join(report_dir(sweep), "success.png"),
            title=f"{config.task}: {sweep}",
        )
    return reports


def analysis_poses(config: ExperimentConfig, count: int, seed: int):
    spec = RandomizationSpec.from_config(config.env.randomization)
    poses = {"canonical": pose_from(spec.midpoints())}
    for i in range(count):
        rng = np.random.default_rng(derive_seed(seed, "analysis-pose", i))
        poses[f"pose{i + 1}"] = pose_from(spec.sample(rng))
    return spec, poses


def export(checkpoint: str, output: str, poses: int = 2, seed: int = 0,
           device: str = "cpu") -> dict:
    agent, config = restore_agent(checkpoint, device=device)
    env = ToyManipulationEnv(config.env, config.task)
    spec, pose_table = analysis_poses(config, poses, seed)
    trajectory = record_trajectory(env, AgentPolicy(agent, View.FIXED), spec, seed)
    rows = export_embeddings(agent, env, trajectory, pose_table)
    write_embeddings(rows, output)
    stats = view_invariance_stats(rows)
    print(f"{len(rows)} rows written to {output}")
    print(
        f"cross-view < cross-time on {100 * stats['fraction']:.1f}% of "
        f"{stats['timesteps']} timesteps"
    )
    return stats


def _analysis_frames(config: ExperimentConfig, yaws: Sequence[float]) -> List[FrameStack]:
    env = ToyManipulationEnv(config.env, config.task)
    spec = RandomizationSpec.from_config(config.env.randomization)
    env.reset(spec, 0.0, seed=0)
    state = canonical_state()
    stacks = []
    for yaw in yaws:
        values = spec.midpoints()
        values["camera_yaw"] = yaw
        frame = env.render_view(state, pose_from(values))
        stacks.append(FrameStack.initial(frame))
    return stacks


def correspondence(checkpoint: str, query, yaw_a: float, yaw_b: float, output: str,
                   layer: str = "stage1", device: str = "cpu"):
    agent, config = restore_agent(checkpoint, device=device)
    image_a, image_b = _analysis_frames(config, [yaw_a, yaw_b])
    result = correspondence_map(agent, image_a, tuple(query), image_b, layer)
    rgb = image_b.frames[-1][..., :3]
    save_png(heat_overlay(rgb, similarity_image(result.similarity)), output)
    print(f"query {tuple(query)} -> best match at pixel {result.argmax}")
    return result


def attention(checkpoint: str, yaw: float, output: str, layer: str = "stage2",
              device: str = "cpu"):
    agent, config = restore_agent(checkpoint, device=device)
    (stack,) = _analysis_frames(config, [yaw])
    heat = attention_map(agent, stack, layer)
    spec = RandomizationSpec.from_config(config.env.randomization)
    values = spec.midpoints()
    values["camera_yaw"] = yaw
    labels = Renderer(config.env.image_size, config.env.embodiment).raycast(
        canonical_state(), pose_from(values)
    ).labels
    save_png(heat_overlay(stack.frames[-1][..., :3], heat), output)
    ratio = mask_mass_ratio(heat, labels == OBJECT)
    print(f"attention on object: {ratio:.2f}x uniform")
    return heat


CURVES = ("j_con", "j_feat", "q_loss", "actor_loss")


def plot_metrics(run_dir: str, output: Optional[str] = None) -> str:
    """Training curves of the loss terms logged in `run_dir`."""
    config = load_config(os.path.join(run_dir, "config.yaml"))
    records = RunContext(config, run_dir).metrics()
    if not records:
        raise MissingStateError(f"{run_dir} holds no metrics yet")
    output = output or os.path.join(run_dir, "curves.png")
    steps = [record["step"] for record in records]
    series = {name: [record[name] for record in records] for name in CURVES
              if all(name in record for record in records)}
    curve_plot(steps, series, output, ylabel="loss")
    print(f"Curves of {len(steps)} updates written to {output}")
    return output


def render_golden(path: str, image_size: int = 128):
    config = load_config(default_config_path("reach"))
    spec = RandomizationSpec.from_config(config.env.randomization)
    rgbd = Renderer(image_size).render(canonical_state(), pose_from(spec.midpoints()))
    save_png(rgbd[..., :3].astype(np.uint8), path)
    print(f"Golden render written to {path}")


def main(args) -> int:
    try:
        if args.command == "train":
            run_dir = train(args.config or default_config_path(args.task), args.overrides,
                            args.ablate, args.resume, args.device)
            print(f"Run finished in {run_dir}")
        elif args.command == "eval":
            eval_checkpoint(args.checkpoint, args.overrides, args.ablate,
                            args.ablation_checkpoint, args.embodiment, args.output,
                            args.device)
        elif args.command == "validate":
            issues = ConfigValidator.validate(args.config, overrides=args.overrides)["issues"]
            print_issues(issues)
            if errors_of(issues):
                return 1
            print("ok")
        elif args.command == "export-embeddings":
            export(args.checkpoint, args.output, args.poses, args.seed, args.device)
        elif args.command == "correspondence":
            correspondence(args.checkpoint, args.query, args.yaw_a, args.yaw_b,
                           args.output, args.layer, args.device)
        elif args.command == "attention":
            attention(args.checkpoint, args.yaw, args.output, args.layer, args.device)
        elif args.command == "render-golden":
            render_golden(args.path, args.image_size)
        elif args.command == "plot-metrics":
            plot_metrics(args.run_dir, args.output)
    except ViewgenError as e:
        print("  Aborting {}:\n    {}".format(args.command, e))
        return 1
    return 0


def parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train and evaluate view-generalizing visuomotor policies."
    )
    parser.add_argument("--verbose", action="store_true", help="log debug messages")
    parser.add_argument("--quiet", action="store_true", help="log warnings only")
    parser.add_argument("--device", type=str, default="cpu", help="torch device")
    commands = parser.add_subparsers(dest="command", required=True)

    def overrides(sub):
        sub.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="dotted config override, may be repeated",
        )

    sub = commands.add_parser("train", help="train a policy")
    sub.add_argument("--config", type=str, help="experiment config (YAML)")
    sub.add_argument("--task", type=str, default="reach",
                     help="shipped config to use when --config is missing")
    sub.add_argument("--ablate", type=str, help="train an ablated variant")
    sub.add_argument("--resume", action="store_true", help="continue from latest.pt")
    overrides(sub)

    sub = commands.add_parser("eval", help="evaluate a checkpoint")
    sub.add_argument("--checkpoint", type=str, required=True)
    sub.add_argument("--ablate", type=str, help="ablation to compare against")
    sub.add_argument("--ablation-checkpoint", type=str)
    sub.add_argument("--embodiment", type=str, help="swap the effector at test time")
    sub.add_argument("--output", type=str, help="report directory")
    overrides(sub)

    sub = commands.add_parser("validate", help="check a config")
    sub.add_argument("config", type=str)
    overrides(sub)

    sub = commands.add_parser("export-embeddings", help="dump embeddings as CSV")
    sub.add_argument("--checkpoint", type=str, required=True)
    sub.add_argument("--output", type=str, required=True)
    sub.add_argument("--poses", type=int, default=2, help="random poses besides the canonical one")
    sub.add_argument("--seed", type=int, default=0)

    sub = commands.add_parser("correspondence", help="feature similarity map")
    sub.add_argument("--checkpoint", type=str, required=True)
    sub.add_argument("--query", type=int, nargs=2, required=True, metavar=("ROW", "COL"))
    sub.add_argument("--yaw-a", type=float, default=0.0)
    sub.add_argument("--yaw-b", type=float, default=30.0)
    sub.add_argument("--layer", type=str, default="stage1")
    sub.add_argument("--output", type=str, required=True)

    sub = commands.add_parser("attention", help="critic attention map")
    sub.add_argument("--checkpoint", type=str, required=True)
    sub.add_argument("--yaw", type=float, default=0.0)
    sub.add_argument("--layer", type=str, default="stage2")
    sub.add_argument("--output", type=str, required=True)

    sub = commands.add_parser("render-golden", help="freeze the reference render")
    sub.add_argument("path", type=str)
    sub.add_argument("--image-size", type=int, default=128)

    sub = commands.add_parser("plot-metrics", help="plot training loss curves")
    sub.add_argument("run_dir", type=str)
    sub.add_argument("--output", type=str)
    return parser


def cli(argv=None):
    args = parser().parse_args(argv)

    logging.basicConfig()
    logger = logging.getLogger("viewgen")
    logger.setLevel(
        logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    )
    return main(args)


if __name__ == "__main__":
    cli()
