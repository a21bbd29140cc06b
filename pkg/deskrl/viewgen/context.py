from __future__ import annotations
from typing import Any, Dict, Optional

import json
import logging
import os

from .config import ExperimentConfig, config_fingerprint, to_yaml
from .errors import CheckpointMismatchError, ConfigError, MissingStateError
from .repo_client import RepoClient
from ._context import InternalContext, load_object


__all__ = [
    "CheckpointMismatchError",
    "MissingStateError",
    "RunContext",
    "run_name",
]

LATEST = "checkpoints/latest.pt"
REPLAY = "replay.pt"
METRICS = "metrics.jsonl"
EPISODES = "episodes.jsonl"


def run_name(config: ExperimentConfig) -> str:
    name = f"{config.task}-seed{config.seed}"
    if config.ablation:
        name += f"-{config.ablation}"
    return name


def check_fingerprint(checkpoint: Dict[str, Any], fingerprint: str, source: str):
    if checkpoint.get("fingerprint") != fingerprint:
        error_message = (
            f"{source} was written by a different configuration "
            f"({checkpoint.get('fingerprint', '?')[:12]} != {fingerprint[:12]})"
        )
        logging.getLogger("viewgen").error(error_message)
        raise CheckpointMismatchError(error_message)


class RunContext(InternalContext):
    """A self-describing run directory.

    The directory holds the resolved config, a meta record with the config
    fingerprint and code version, JSON-lines metrics and episode logs,
    checkpoints and evaluation reports. Nothing is written outside it.

    Layout::

        <output_dir>/<task>-seed<seed>[-<ablation>]/
            config.yaml  meta.json  metrics.jsonl  episodes.jsonl
            checkpoints/step_<N>.pt  checkpoints/latest.pt  replay.pt
            eval/<name>/...
    """

    def __init__(self, config: ExperimentConfig, run_dir: Optional[str] = None):
        super().__init__()
        self.config = config
        self.run_dir = run_dir or os.path.join(config.output_dir, run_name(config))
        self.fingerprint = config_fingerprint(config)

    @property
    def latest(self) -> str:
        return self.path(LATEST)

    def has_checkpoint(self) -> bool:
        return os.path.exists(self.latest)

    def prepare(self, resume: bool = False) -> Optional[Dict[str, Any]]:
        """Set up the directory; returns the checkpoint to resume from, if any."""
        checkpoint = None
        if self.has_checkpoint():
            if not resume:
                raise ConfigError(
                    f"{self.run_dir} already holds a run; pass --resume to continue it"
                )
            checkpoint = self.load_object(LATEST)
            check_fingerprint(checkpoint, self.fingerprint, self.latest)
            step = checkpoint["step"]
            self.truncate_records(METRICS, step)
            self.truncate_records(EPISODES, step)
            logging.getLogger("viewgen").info(
                f"Resuming {self.run_dir} after step {step}"
            )
        else:
            for name in (METRICS, EPISODES):
                if os.path.exists(self.path(name)):
                    os.remove(self.path(name))
            logging.getLogger("viewgen").info(f"Starting run in {self.run_dir}")
        os.makedirs(self.run_dir, exist_ok=True)
        self.write_text("config.yaml", to_yaml(self.config))
        self.write_text("meta.json", json.dumps(self.meta(), indent=2, sort_keys=True))
        return checkpoint

    def meta(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "code_version": RepoClient().version(),
            "seed": self.config.seed,
            "task": self.config.task,
            "ablation": self.config.ablation,
        }

    def log_metrics(self, record: dict):
        self.append_record(METRICS, record)

    def log_episode(self, record: dict):
        self.append_record(EPISODES, record)

    def metrics(self):
        return list(self.read_records(METRICS))

    def save_checkpoint(self, step: int, state: Dict[str, Any], replay=None):
        checkpoint = dict(state, step=step, fingerprint=self.fingerprint)
        self.save_object(f"checkpoints/step_{step}.pt", checkpoint)
        self.save_object(LATEST, checkpoint)
        if replay is not None:
            self.save_object(REPLAY, replay.state_dict())
        logging.getLogger("viewgen").info(f"Checkpoint written at step {step}")

    def load_replay(self) -> Optional[dict]:
        if not os.path.exists(self.path(REPLAY)):
            return None
        return self.load_object(REPLAY)

    def eval_dir(self, name: str) -> str:
        return self.path("eval", name)

    def close(self):
        self.close_streams()


def load_checkpoint(path: str, config: ExperimentConfig, map_location="cpu"):
    """Read a checkpoint and make sure it belongs to `config`."""
    checkpoint = load_object(path, map_location)
    check_fingerprint(checkpoint, config_fingerprint(config), path)
    return checkpoint
