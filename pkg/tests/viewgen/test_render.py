import os
import unittest

import numpy as np
from PIL import Image

from deskrl.viewgen.config import default_config_path, load_config
from deskrl.viewgen.errors import DegeneratePoseError
from deskrl.viewgen.render import (
    ARM,
    EFFECTOR,
    OBJECT,
    TABLE,
    CameraPose,
    Palette,
    Renderer,
    project,
)
from deskrl.viewgen.simenv import (
    RandomizationSpec,
    canonical_state,
    pose_from,
    preprocess_depth,
)


def here(*parts):
    dirname = os.path.dirname(os.path.realpath(__file__))
    return os.path.join(dirname, *parts)


def midpoint_pose():
    config = load_config(default_config_path("reach"))
    spec = RandomizationSpec.from_config(config.env.randomization)
    return pose_from(spec.midpoints())


class TestRenderer(unittest.TestCase):
    def setUp(self):
        self.renderer = Renderer(64)
        self.state = canonical_state()

    def pose(self, yaw):
        return CameraPose(pitch=20.5, yaw=yaw, fov=42.0, distance=1.33)

    def test_deterministic(self):
        a = self.renderer.render(self.state, self.pose(10.0))
        b = self.renderer.render(self.state, self.pose(10.0))
        self.assertTrue(np.array_equal(a, b))
        self.assertEqual(a.shape, (64, 64, 4))
        self.assertEqual(a.dtype, np.float32)

    def test_views_differ(self):
        left = self.renderer.raycast(self.state, self.pose(-30.0))
        right = self.renderer.raycast(self.state, self.pose(30.0))
        self.assertFalse(np.array_equal(left.rgb, right.rgb))
        left_count = int((left.labels == OBJECT).sum())
        right_count = int((right.labels == OBJECT).sum())
        self.assertGreater(left_count, 0)
        self.assertGreater(right_count, 0)
        self.assertLessEqual(max(left_count, right_count), 2 * min(left_count, right_count))

    def test_scene_content(self):
        cast = self.renderer.raycast(self.state, self.pose(0.0))
        for label in (TABLE, OBJECT, EFFECTOR, ARM):
            self.assertTrue((cast.labels == label).any(), label)

    def test_empty_scene(self):
        self.state.object_present = False
        palette = Palette()
        cast = self.renderer.raycast(self.state, self.pose(0.0), palette)
        self.assertFalse((cast.labels == OBJECT).any())
        object_colored = np.all(cast.rgb == np.array(palette.object, dtype=np.uint8), axis=-1)
        self.assertFalse(object_colored.any())

    def test_depth_in_meters(self):
        pose = self.pose(0.0)
        cast = self.renderer.raycast(self.state, pose)
        table = cast.depth[cast.labels == TABLE]
        self.assertTrue(np.all(table > 0.5))
        self.assertTrue(np.all(table < 3.0))

    def test_projection_hits_object(self):
        pose = self.pose(0.0)
        cast = self.renderer.raycast(self.state, pose)
        row, col = np.rint(project(pose, 64, self.state.object_pos)[0]).astype(int)
        self.assertEqual(cast.labels[row, col], OBJECT)

    def test_degenerate_pose(self):
        with self.assertRaises(DegeneratePoseError):
            self.renderer.render(self.state, CameraPose(20.0, 0.0, 42.0, 0.0))
        with self.assertRaises(DegeneratePoseError):
            self.renderer.render(self.state, CameraPose(90.0, 0.0, 42.0, 1.0))

    def test_embodiment(self):
        default = Renderer(64).raycast(self.state, self.pose(0.0))
        alt = Renderer(64, "alt").raycast(self.state, self.pose(0.0))
        self.assertNotEqual(
            int((default.labels == EFFECTOR).sum()), int((alt.labels == EFFECTOR).sum())
        )


class TestGolden(unittest.TestCase):
    path = here("fixtures", "golden_canonical.png")

    def test_golden(self):
        self.assertTrue(
            os.path.exists(self.path),
            "golden render missing; create it with `viewgen render-golden`",
        )
        with Image.open(self.path) as image:
            golden = np.asarray(image.convert("RGB"))
        rgbd = Renderer(golden.shape[0]).render(canonical_state(), midpoint_pose())
        self.assertTrue(np.array_equal(rgbd[..., :3].astype(np.uint8), golden))


class TestPreprocessDepth(unittest.TestCase):
    def test_far_plane(self):
        out = preprocess_depth(np.full((32, 32), 3.0), seed=0, noise=False)
        self.assertTrue(np.all(out == 255))
        self.assertEqual(out.dtype, np.uint8)

    def test_near_plane(self):
        out = preprocess_depth(np.zeros((32, 32)), seed=0, noise=False)
        self.assertTrue(np.all(out == 0))

    def test_linear_codes(self):
        out = preprocess_depth(np.full((8, 8), 1.0), seed=0, noise=False, blur=False)
        self.assertTrue(np.all(out == 128))

    def test_noise_level(self):
        out = preprocess_depth(np.full((1000, 1000), 1.0), seed=5, blur=False)
        meters = out.astype(np.float64) * 2.0 / 255.0
        expected = np.sqrt(0.01**2 + 0.05**2)
        self.assertLess(abs(meters.std() - expected), 0.05 * expected)

    def test_seeded(self):
        raw = np.full((16, 16), 1.0)
        self.assertTrue(np.array_equal(preprocess_depth(raw, 3), preprocess_depth(raw, 3)))
        self.assertFalse(np.array_equal(preprocess_depth(raw, 3), preprocess_depth(raw, 4)))

    def test_monotone_without_noise(self):
        meters = np.linspace(0.0, 2.5, 2001)
        ramp = preprocess_depth(meters[None, :], seed=0, noise=False, blur=False)[0]
        self.assertTrue(np.all(np.diff(ramp.astype(int)) >= 0))
        self.assertEqual((ramp[0], ramp[-1]), (0, 255))
        codes = [
            int(preprocess_depth(np.full((16, 16), d), seed=0, noise=False)[8, 8])
            for d in meters[::50]
        ]
        self.assertEqual(codes, sorted(codes))
