from __future__ import annotations
from typing import List, Optional

import argparse
import logging

from .config import TASKS, ExperimentConfig, lenient_config, load_config
from .errors import ConfigError
from .render import EMBODIMENTS
from .simenv import FRAME_STACK, REQUIRED_ENTRIES


# Widest range allowed for every randomization entry.
RANGE_LIMITS = {
    "joint_damping": (0.9, 1.1),
    "joint_armature": (0.9, 1.1),
    "object_size": (0.045, 0.055),
    "table_height": (-0.01, 0.01),
    "camera_pitch": (10.5, 30.5),
    "camera_yaw": (-60.0, 60.0),
    "camera_fov": (38.0, 46.0),
    "camera_distance": (1.12, 1.54),
    "camera_height": (-0.03, 0.03),
    "light_intensity": (0.8, 1.2),
    "action_delay": (0.0, 2.0),
    "control_timestep": (0.016, 0.024),
}

FEAT_REDUCTIONS = ("sum", "mean")


def issue(msg: str, path: str, level: str = "error") -> dict:
    return {"msg": msg, "path": path, "level": level}


class ConfigValidator:
    """Validate an experiment configuration.

    Reports every problem found instead of stopping at the first one:
    schema errors from loading, value ranges and cross-field constraints.
    """

    @classmethod
    def validate(cls, path: Optional[str] = None, data: Optional[str] = None,
                 overrides=()):
        try:
            config = load_config(path, overrides, data)
        except ConfigError as err:
            # Report every rejected setting, then check what was accepted.
            config, issues = lenient_config(path, overrides, data)
            issues = issues or err.issues
            if config is None:
                return {"issues": issues}
            return {"issues": issues + cls(config).inspect()}
        return {"issues": cls(config).inspect()}

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.issues: List[dict] = []

    def error(self, msg, path):
        self.issues.append(issue(msg, path))

    def warning(self, msg, path):
        self.issues.append(issue(msg, path, "warning"))

    def inspect(self) -> List[dict]:
        self.check_experiment()
        self.check_env()
        self.check_randomization()
        self.check_objectives()
        self.check_agent()
        self.check_augment()
        self.check_curriculum()
        self.check_eval()
        return self.issues

    def check_experiment(self):
        config = self.config
        if config.task not in TASKS:
            self.error(f"unknown task {config.task!r}, expected one of {TASKS}", "task")
        if config.total_steps < 1:
            self.error("total_steps must be positive", "total_steps")
        if config.replay.capacity < 1:
            self.error("replay capacity must be positive", "replay.capacity")
        if config.checkpoint.every < 1:
            self.error("checkpoint interval must be positive", "checkpoint.every")

    def check_env(self):
        env = self.config.env
        if env.frame_stack != FRAME_STACK:
            self.error(f"frame_stack must be {FRAME_STACK}", "env.frame_stack")
        if env.image_size < 16:
            self.error("image_size must be at least 16", "env.image_size")
        if env.episode_length < 1:
            self.error("episode_length must be positive", "env.episode_length")
        if env.embodiment not in EMBODIMENTS:
            self.error(
                f"unknown embodiment {env.embodiment!r}, expected one of {sorted(EMBODIMENTS)}",
                "env.embodiment",
            )
        if env.blur_kernel < 1 or env.blur_kernel % 2 == 0:
            self.error("blur_kernel must be a positive odd number", "env.blur_kernel")
        if not env.max_depth > 0:
            self.error("max_depth must be positive", "env.max_depth")
        for name in ("table", "background", "object", "effector"):
            color = getattr(env.palette, name)
            if len(color) != 3 or any(not 0 <= c <= 255 for c in color):
                self.error("colors are three values in [0, 255]", f"env.palette.{name}")

    def check_randomization(self):
        ranges = self.config.env.randomization
        for name in REQUIRED_ENTRIES:
            if name not in ranges:
                self.error(f"missing randomization entry {name}", "env.randomization")
        for name, entry in ranges.items():
            path = f"env.randomization.{name}"
            if entry.kind not in ("additive", "multiplicative"):
                self.error(f"unknown kind {entry.kind!r}", f"{path}.kind")
                continue
            if entry.half_range < 0:
                self.error("half_range must be non-negative", f"{path}.half_range")
                continue
            if entry.kind == "multiplicative" and not entry.center > 0:
                self.error("multiplicative center must be positive", f"{path}.center")
                continue
            if entry.kind == "multiplicative":
                lo = entry.center * (1 - entry.half_range)
                hi = entry.center * (1 + entry.half_range)
            else:
                lo, hi = entry.center - entry.half_range, entry.center + entry.half_range
            limits = RANGE_LIMITS.get(name)
            if limits is None:
                self.warning(f"no reference bounds for {name}", path)
            elif lo < limits[0] - 1e-9 or hi > limits[1] + 1e-9:
                self.error(
                    f"range [{lo:g}, {hi:g}] exceeds the allowed [{limits[0]:g}, {limits[1]:g}]",
                    path,
                )

    def check_objectives(self):
        objectives = self.config.objectives
        if not objectives.temperature > 0:
            self.error("temperature must be positive", "objectives.temperature")
        if objectives.lam < 0:
            self.error("lam must be non-negative", "objectives.lam")
        if objectives.feat_reduction not in FEAT_REDUCTIONS:
            self.error(
                f"feat_reduction must be one of {FEAT_REDUCTIONS}", "objectives.feat_reduction"
            )
        for name in ("clean_weight", "aug_weight"):
            if getattr(objectives, name) < 0:
                self.error(f"{name} must be non-negative", f"objectives.{name}")
        known = ["stn"] + [
            f"stage{i + 1}" for i in range(len(self.config.encoder.stage_channels))
        ]
        for tag in self.config.encoder.align_layers:
            if tag not in known:
                self.error(f"unknown feature layer {tag!r}", "encoder.align_layers")

    def check_agent(self):
        agent = self.config.agent
        if not 0 <= agent.gamma <= 1:
            self.error("gamma must be in [0, 1]", "agent.gamma")
        if agent.n_step < 1:
            self.error("n_step must be at least 1", "agent.n_step")
        if agent.batch_size < 2:
            self.error("batch_size must be at least 2", "agent.batch_size")
        if not 0 <= agent.ema <= 1:
            self.error("ema must be in [0, 1]", "agent.ema")
        for name in ("encoder_lr", "critic_lr", "actor_lr"):
            if not getattr(agent, name) > 0:
                self.error(f"{name} must be positive", f"agent.{name}")

    def check_augment(self):
        self.check_unit(
            self.config.augment, "augment",
            ("overlay_alpha", "spectrum_mask_fraction", "min_strength"),
        )

    def check_unit(self, section, prefix, names):
        for name in names:
            if not 0 <= getattr(section, name) <= 1:
                self.error(f"{name} must be in [0, 1]", f"{prefix}.{name}")

    def check_curriculum(self):
        curriculum = self.config.curriculum
        if curriculum.threshold < 0:
            self.error("threshold must be non-negative", "curriculum.threshold")
        if curriculum.rate is not None and not curriculum.rate > 0:
            self.error("rate must be positive", "curriculum.rate")
        if curriculum.enabled and curriculum.threshold >= self.config.total_steps:
            self.warning("curriculum never activates", "curriculum.threshold")

    def check_eval(self):
        config = self.config
        yaw = config.env.randomization.get("camera_yaw")
        limit = yaw.half_range if yaw is not None else 0.0
        for i, (lo, hi) in enumerate(config.eval.yaw_bins):
            if not 0 <= lo <= hi <= limit:
                self.error(
                    f"yaw bin [{lo:g}, {hi:g}] outside the trained range [0, {limit:g}]",
                    f"eval.yaw_bins[{i}]",
                )
        self.check_unit(config.eval, "eval", ("smoothing_beta", "overlay_alpha"))


def errors_of(issues) -> list:
    return [i for i in issues if i["level"] == "error"]


def print_issues(issues):
    logger = logging.getLogger("viewgen")
    for i in issues:
        if i["level"] == "warning":
            logger.warning(f"{i['msg']} at {i['path']}")
        print(f"{i['level']}: {i['msg']} at {i['path']}")


def cli():
    parser = argparse.ArgumentParser(description="Validate an experiment config.")
    parser.add_argument("config")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE")
    args = parser.parse_args()
    issues = ConfigValidator.validate(args.config, overrides=args.overrides)["issues"]
    print_issues(issues)
    return 1 if errors_of(issues) else 0
