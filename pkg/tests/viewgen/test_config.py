import os
import shutil
import tempfile
import unittest

import numpy as np

from deskrl.viewgen.config import (
    ABLATIONS,
    ExperimentConfig,
    ablation_overrides,
    config_fingerprint,
    default_config_path,
    load_config,
    to_container,
    to_yaml,
)
from deskrl.viewgen.errors import ConfigError
from deskrl.viewgen.util import cfg, derive_seed, fingerprint, to_record


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self.root = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.root)

    def write(self, content):
        path = os.path.join(self.root, "experiment.yaml")
        with open(path, "w") as fh:
            fh.write(cfg(content))
        return path

    def test_defaults(self):
        config = load_config()
        self.assertIsInstance(config, ExperimentConfig)
        self.assertEqual(config.objectives.temperature, 0.1)
        self.assertEqual(config.objectives.lam, 200.0)
        self.assertEqual(config.encoder.feature_dim, 256)
        self.assertEqual(config.env.randomization["camera_yaw"].half_range, 60.0)

    def test_shipped(self):
        for task in ("reach", "lift"):
            config = load_config(default_config_path(task))
            self.assertEqual(config.task, task)
            self.assertEqual(config.env.image_size, 84)

    def test_merge_order(self):
        path = self.write(
            """
            seed: 4
            agent:
              batch_size: 32
            """
        )
        config = load_config(path, ["agent.batch_size=8"])
        self.assertEqual(config.seed, 4)
        self.assertEqual(config.agent.batch_size, 8)
        self.assertEqual(config.agent.gamma, 0.99)

    def test_inline_data(self):
        config = load_config(data={"task": "lift", "env": {"episode_length": 7}})
        self.assertEqual(config.task, "lift")
        self.assertEqual(config.env.episode_length, 7)

    def test_randomization_entry(self):
        path = self.write(
            """
            env:
              randomization:
                camera_yaw:
                  center: 5.0
                  half_range: 30.0
            """
        )
        yaw = load_config(path).env.randomization["camera_yaw"]
        self.assertEqual((yaw.center, yaw.half_range, yaw.kind), (5.0, 30.0, "additive"))

    def test_type_error(self):
        with self.assertRaises(ConfigError) as caught:
            load_config(overrides=["agent.batch_size=many"])
        (issue,) = caught.exception.issues
        self.assertEqual(issue["level"], "error")
        self.assertIn("batch_size", issue["path"])

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            load_config(overrides=["agent.momentum=0.9"])

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.root, "missing.yaml"))

    def test_yaml_round_trip(self):
        config = load_config(overrides=["seed=9", "encoder.use_stn=false"])
        path = self.write(to_yaml(config))
        self.assertEqual(to_container(load_config(path)), to_container(config))


class TestFingerprint(unittest.TestCase):
    def test_ignores_bookkeeping(self):
        base = config_fingerprint(load_config())
        for override in ("output_dir=elsewhere", "eval.episodes_per_bin=3",
                         "checkpoint.every=5"):
            self.assertEqual(config_fingerprint(load_config(overrides=[override])), base)

    def test_tracks_computation(self):
        base = config_fingerprint(load_config())
        for override in ("seed=2", "objectives.lam=1.0", "curriculum.threshold=10"):
            self.assertNotEqual(config_fingerprint(load_config(overrides=[override])), base)

    def test_canonical(self):
        self.assertEqual(fingerprint({"a": 1, "b": [1, 2]}), fingerprint({"b": [1, 2], "a": 1}))


class TestAblations(unittest.TestCase):
    def test_known(self):
        for name in ABLATIONS:
            config = load_config(overrides=ablation_overrides(name))
            self.assertEqual(config.ablation, name)
        self.assertFalse(load_config(overrides=ablation_overrides("no_stn")).encoder.use_stn)
        self.assertEqual(ablation_overrides(None), [])

    def test_unknown(self):
        with self.assertRaises(ConfigError):
            ablation_overrides("no_critic")


class TestUtil(unittest.TestCase):
    def test_derive_seed(self):
        self.assertEqual(derive_seed(1, "episode", 3), derive_seed(1, "episode", 3))
        seeds = {derive_seed(1, "episode", i) for i in range(100)}
        self.assertEqual(len(seeds), 100)
        self.assertNotEqual(derive_seed(1, "episode", 0), derive_seed(1, "act", 0))
        self.assertNotEqual(derive_seed(1, "episode", 0), derive_seed(2, "episode", 0))

    def test_record(self):
        line = to_record({"b": np.float32(0.5), "a": np.arange(2)})
        self.assertEqual(line, '{"a": [0, 1], "b": 0.5}')
