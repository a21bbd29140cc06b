"""Experiment configuration.

The schema is a tree of dataclasses. A run's configuration is built by
merging, in order, the dataclass defaults, a YAML file and dotted
``key.path=value`` overrides, all through OmegaConf. Defaults are the
full-scale hyper-parameters; toy-scale values live in the
YAML files shipped in ``deskrl/viewgen/configs``.
"""

from __future__ import annotations
from typing import Dict, Iterable, List, Optional, Tuple

from dataclasses import dataclass, field
import math
import os

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .errors import ConfigError
from .util import fingerprint


CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")

TASKS = ("reach", "lift")

# Ablation name -> dotted overrides applied on top of the loaded config.
ABLATIONS = {
    "no_multiview": ["objectives.multiview=false"],
    "no_stn": ["encoder.use_stn=false"],
    "no_curriculum": ["curriculum.enabled=false"],
    "no_depth": ["env.use_depth=false"],
}


@dataclass
class RangeConfig:
    center: float = 0.0
    half_range: float = 0.0
    # "additive": center + u * half_range
    # "multiplicative": center * (1 + u * half_range)
    kind: str = "additive"


def _default_randomization() -> Dict[str, RangeConfig]:
    return {
        "joint_damping": RangeConfig(1.0, 0.1, "multiplicative"),
        "joint_armature": RangeConfig(1.0, 0.1, "multiplicative"),
        "object_size": RangeConfig(0.05, 0.1, "multiplicative"),
        "table_height": RangeConfig(0.0, 0.01, "additive"),
        "camera_pitch": RangeConfig(20.5, 10.0, "additive"),
        "camera_yaw": RangeConfig(0.0, 60.0, "additive"),
        "camera_fov": RangeConfig(42.0, 4.0, "additive"),
        "camera_distance": RangeConfig(1.33, 0.21, "additive"),
        "camera_height": RangeConfig(0.0, 0.03, "additive"),
        "light_intensity": RangeConfig(1.0, 0.2, "multiplicative"),
        "action_delay": RangeConfig(1.0, 1.0, "additive"),
        "control_timestep": RangeConfig(0.02, 0.004, "additive"),
    }


@dataclass
class CameraConfig:
    pitch: float = 20.5
    yaw: float = 0.0
    fov: float = 42.0
    distance: float = 1.33
    height_offset: float = 0.0


@dataclass
class PaletteConfig:
    table: List[int] = field(default_factory=lambda: [150, 110, 70])
    background: List[int] = field(default_factory=lambda: [90, 100, 120])
    object: List[int] = field(default_factory=lambda: [220, 40, 40])
    effector: List[int] = field(default_factory=lambda: [200, 200, 200])
    # Blend a distractor texture over the rendered RGB at evaluation time.
    overlay: bool = False


def _default_palettes() -> Dict[str, PaletteConfig]:
    return {
        "identity": PaletteConfig(),
        "dark_table": PaletteConfig(table=[60, 45, 35]),
        "green_background": PaletteConfig(background=[40, 140, 60]),
        "bright_scene": PaletteConfig(table=[230, 220, 200], background=[240, 240, 250]),
        "target_recolor": PaletteConfig(object=[40, 80, 220]),
    }


@dataclass
class EnvConfig:
    image_size: int = 128
    frame_stack: int = 3
    episode_length: int = 100
    success_radius: float = 0.03
    lift_height: float = 0.1
    grasp_radius: float = 0.04
    # Effector speed at |action| = 1, in m/s.
    max_speed: float = 1.0
    success_bonus: float = 1.0
    terminate_on_success: bool = False
    max_action_delay: int = 2
    use_depth: bool = True
    depth_noise: bool = True
    depth_blur: bool = True
    depth_noise_std: float = 0.01
    depth_scale_noise: float = 0.05
    blur_kernel: int = 5
    max_depth: float = 2.0
    randomize_appearance: bool = True
    embodiment: str = "default"
    # None means the midpoint of every camera range.
    fixed_camera: Optional[CameraConfig] = None
    palette: PaletteConfig = field(default_factory=PaletteConfig)
    randomization: Dict[str, RangeConfig] = field(default_factory=_default_randomization)


@dataclass
class AugmentConfig:
    enabled: bool = True
    overlay_alpha: float = 0.5
    spectrum_mask_fraction: float = 0.5
    distractor_source: Optional[str] = None
    min_strength: float = 0.0
    augment_fixed_view: bool = True
    augment_moving_view: bool = True


@dataclass
class EncoderConfig:
    feature_dim: int = 256
    stem_channels: int = 32
    stage_channels: List[int] = field(default_factory=lambda: [32, 64])
    use_stn: bool = True
    stn_lr: float = 1e-4
    align_layers: List[str] = field(default_factory=lambda: ["stn", "stage1", "stage2"])


@dataclass
class ObjectivesConfig:
    temperature: float = 0.1
    lam: float = 200.0
    normalize: bool = True
    multiview: bool = True
    # "sum" over flattened feature elements, or their "mean".
    feat_reduction: str = "sum"
    detach_fixed: bool = False
    clean_weight: float = 0.5
    aug_weight: float = 0.5


@dataclass
class AgentConfig:
    gamma: float = 0.99
    n_step: int = 3
    batch_size: int = 256
    hidden_dim: int = 256
    encoder_lr: float = 1e-4
    critic_lr: float = 1e-4
    actor_lr: float = 1e-4
    ema: float = 0.01
    std_start: float = 1.0
    std_end: float = 0.1
    std_schedule_steps: int = 100000
    std_clip: float = 0.3
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    seed_steps: int = 4000
    update_every: int = 1


@dataclass
class ReplayConfig:
    capacity: int = 10000000


@dataclass
class CurriculumConfig:
    enabled: bool = True
    threshold: int = 50000
    # None picks the rate reaching magnitude 0.95 at three times the threshold.
    rate: Optional[float] = None


@dataclass
class EvalConfig:
    yaw_bins: List[List[float]] = field(
        default_factory=lambda: [[0.0, 20.0], [20.0, 40.0], [40.0, 60.0]]
    )
    episodes_per_bin: int = 20
    appearance_episodes: int = 20
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    smoothing_beta: float = 0.0
    overlay_alpha: float = 0.5
    palettes: Dict[str, PaletteConfig] = field(default_factory=_default_palettes)


@dataclass
class CheckpointConfig:
    every: int = 10000
    save_replay: bool = True


@dataclass
class ExperimentConfig:
    task: str = "reach"
    seed: int = 1
    output_dir: str = "runs"
    total_steps: int = 300000
    deterministic: bool = True
    ablation: Optional[str] = None
    env: EnvConfig = field(default_factory=EnvConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    objectives: ObjectivesConfig = field(default_factory=ObjectivesConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    checkpoint: CheckpointConfig = field(default_factory=CheckpointConfig)


def default_rate(threshold: int) -> float:
    """Rate reaching magnitude 0.95 at three times the threshold."""
    return math.log(20.0) / (2.0 * max(int(threshold), 1))


def default_config_path(task: str) -> str:
    return os.path.join(CONFIG_DIR, f"{task}.yaml")


def ablation_overrides(name: Optional[str]) -> List[str]:
    if name is None:
        return []
    try:
        return ABLATIONS[name] + [f"ablation={name}"]
    except KeyError:
        raise ConfigError(
            f"Unknown ablation {name!r}, expected one of {sorted(ABLATIONS)}"
        )


def merge_config(path: Optional[str] = None, overrides: Iterable[str] = (), data=None):
    """Merge defaults, the YAML file at `path` (or inline `data`) and dotted
    `overrides`.

    Returns the OmegaConf node; schema violations surface as ConfigError
    carrying one issue per failure.
    """
    try:
        node = OmegaConf.structured(ExperimentConfig)
        if path is not None:
            node = OmegaConf.merge(node, OmegaConf.load(path))
        if data is not None:
            node = OmegaConf.merge(node, OmegaConf.create(data))
        overrides = list(overrides)
        if overrides:
            node = OmegaConf.merge(node, OmegaConf.from_dotlist(overrides))
    except OSError as err:
        raise ConfigError(
            f"Unable to read config {path}: {err}",
            [{"msg": str(err), "path": str(path), "level": "error"}],
        )
    except OmegaConfBaseException as err:
        raise _config_error(err)
    return node


def _config_error(err: OmegaConfBaseException) -> ConfigError:
    key = getattr(err, "full_key", None) or ""
    msg = str(err).splitlines()[0]
    return ConfigError(f"Invalid config: {msg}", [{"msg": msg, "path": key, "level": "error"}])


def load_config(
    path: Optional[str] = None, overrides: Iterable[str] = (), data=None
) -> ExperimentConfig:
    node = merge_config(path, overrides, data)
    try:
        return OmegaConf.to_object(node)
    except OmegaConfBaseException as err:
        raise _config_error(err)


def _leaves(data, prefix=()):
    if isinstance(data, dict) and data:
        for key, value in data.items():
            yield from _leaves(value, prefix + (str(key),))
    elif prefix:
        yield prefix, data


def lenient_config(
    path: Optional[str] = None, overrides: Iterable[str] = (), data=None
) -> Tuple[Optional[ExperimentConfig], List[dict]]:
    """Merge like `load_config`, one setting at a time, skipping the ones the
    schema rejects.

    Returns the config built from the accepted settings (None if even that
    fails) and one issue per rejected setting.
    """
    issues: List[dict] = []
    sources = []
    try:
        if path is not None:
            sources.append(OmegaConf.load(path))
        if data is not None:
            sources.append(OmegaConf.create(data))
        for override in overrides:
            try:
                sources.append(OmegaConf.from_dotlist([override]))
            except OmegaConfBaseException as err:
                issues.extend(_config_error(err).issues)
    except OSError as err:
        return None, [{"msg": str(err), "path": str(path), "level": "error"}]
    except OmegaConfBaseException as err:
        return None, _config_error(err).issues

    node = OmegaConf.structured(ExperimentConfig)
    for source in sources:
        for keys, value in _leaves(OmegaConf.to_container(source)):
            patch = value
            for key in reversed(keys):
                patch = {key: patch}
            try:
                node = OmegaConf.merge(node, OmegaConf.create(patch))
            except OmegaConfBaseException as err:
                found = _config_error(err).issues[0]
                found["path"] = found["path"] or ".".join(keys)
                issues.append(found)
    try:
        return OmegaConf.to_object(node), issues
    except OmegaConfBaseException as err:
        return None, issues + _config_error(err).issues


def to_container(config: ExperimentConfig) -> dict:
    return OmegaConf.to_container(OmegaConf.structured(config), resolve=True)


def to_yaml(config: ExperimentConfig) -> str:
    return OmegaConf.to_yaml(OmegaConf.structured(config))


def config_fingerprint(config: ExperimentConfig) -> str:
    """Fingerprint of everything that changes what a run computes."""
    data = to_container(config)
    for key in ("output_dir", "eval", "checkpoint"):
        data.pop(key, None)
    return fingerprint(data)
