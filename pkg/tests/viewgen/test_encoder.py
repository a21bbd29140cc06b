import math
import unittest

import numpy as np
import torch

from deskrl.viewgen.config import EncoderConfig
from deskrl.viewgen.encoder import (
    Encoder,
    PerspectiveSTN,
    identity_homography,
    stack_views,
    translation_homography,
    warp,
)
from deskrl.viewgen.errors import (
    NonInvertibleHomographyError,
    ShapeMismatchError,
    ViewError,
)
from deskrl.viewgen.render import CameraPose
from deskrl.viewgen.simenv import FrameStack, MultiViewObservation


def small_encoder(**kwargs):
    torch.manual_seed(0)
    config = EncoderConfig(feature_dim=32, stem_channels=8, stage_channels=[8, 16], **kwargs)
    return Encoder(config, image_size=32)


def constant_stack(value, size=32):
    return FrameStack.initial(np.full((size, size, 4), value, dtype=np.uint8))


class TestSTN(unittest.TestCase):
    def test_identity_at_init(self):
        stn = PerspectiveSTN(8)
        x = torch.randn(3, 8, 16, 16)
        h = stn.localize(x)
        self.assertTrue(torch.allclose(h, identity_homography(3)))
        self.assertTrue(torch.allclose(torch.linalg.det(h), torch.ones(3)))

    def test_empty_input(self):
        with self.assertRaises(ShapeMismatchError):
            PerspectiveSTN(8).localize(torch.zeros(0, 8, 16, 16))


class TestWarp(unittest.TestCase):
    def setUp(self):
        self.features = torch.randn(2, 3, 12, 12, generator=torch.Generator().manual_seed(1),
                                    dtype=torch.float64)

    def test_identity(self):
        out = warp(self.features, identity_homography(2, torch.float64))
        self.assertLess((out - self.features).abs().max().item(), 1e-6)

    def test_translation(self):
        shift = 3
        dx = shift * 2.0 / (self.features.shape[-1] - 1)
        out = warp(self.features, translation_homography(dx))
        expected = self.features[..., shift:]
        self.assertLess((out[..., : 12 - shift] - expected).abs().max().item(), 1e-6)
        self.assertLess(out[..., 12 - shift:].abs().max().item(), 1e-6)

    def test_round_trip(self):
        ys, xs = torch.meshgrid(
            torch.linspace(-1, 1, 24, dtype=torch.float64),
            torch.linspace(-1, 1, 24, dtype=torch.float64),
            indexing="ij",
        )
        features = torch.stack([xs + 2 * ys, 3 * xs - ys])[None]
        angle = math.radians(5.0)
        h = torch.tensor(
            [
                [0.9 * math.cos(angle), -0.9 * math.sin(angle), 0.05],
                [0.9 * math.sin(angle), 0.9 * math.cos(angle), -0.03],
                [0.0, 0.0, 1.0],
            ],
            dtype=torch.float64,
        )
        back = warp(warp(features, h), torch.linalg.inv(h))
        interior = (slice(None), slice(None), slice(6, 18), slice(6, 18))
        self.assertLess((back[interior] - features[interior]).abs().max().item(), 1e-3)

    def test_singular(self):
        with self.assertRaises(NonInvertibleHomographyError):
            warp(self.features, torch.zeros(3, 3, dtype=torch.float64))

    def test_rank(self):
        with self.assertRaises(ShapeMismatchError):
            warp(torch.zeros(3, 4, 4), identity_homography(1))


class TestEncoder(unittest.TestCase):
    def setUp(self):
        self.encoder = small_encoder()

    def test_pyramid(self):
        pyramid = self.encoder.encode(constant_stack(10))
        self.assertEqual(pyramid.tags, ["stn", "stage1", "stage2"])
        self.assertEqual(tuple(pyramid.maps["stn"].shape), (1, 8, 16, 16))
        self.assertEqual(tuple(pyramid.maps["stage1"].shape), (1, 8, 8, 8))
        self.assertEqual(tuple(pyramid.maps["stage2"].shape), (1, 16, 4, 4))
        self.assertEqual(tuple(pyramid.embedding.shape), (1, 32))
        self.assertEqual(self.encoder.scale_factors(), {"stn": 2, "stage1": 4, "stage2": 8})

    def test_deterministic(self):
        a = self.encoder.encode(constant_stack(10))
        b = self.encoder.encode(constant_stack(10))
        self.assertTrue(torch.equal(a.embedding, b.embedding))
        for tag in a.tags:
            self.assertTrue(torch.equal(a.maps[tag], b.maps[tag]))

    def test_no_collapse(self):
        zeros = self.encoder.encode(constant_stack(0)).embedding
        ones = self.encoder.encode(constant_stack(255)).embedding
        self.assertFalse(torch.allclose(zeros, ones))

    def test_fresh_stn_is_identity(self):
        encoder = small_encoder().double()
        obs = stack_views([constant_stack(10)])
        pyramid = encoder(obs)
        self.assertTrue(torch.equal(pyramid.homography, identity_homography(1, torch.float64)))
        plain = encoder(obs, use_stn=False)
        gap = (pyramid.maps["stn"] - plain.maps["stn"]).abs().max().item()
        self.assertLess(gap, 1e-9)

    def test_without_stn(self):
        encoder = small_encoder(use_stn=False)
        pyramid = encoder.encode(constant_stack(10))
        self.assertTrue(torch.equal(pyramid.homography, identity_homography(1)))

    def test_parameter_groups(self):
        backbone = {id(p) for p in self.encoder.backbone_parameters()}
        stn = {id(p) for p in self.encoder.stn_parameters()}
        self.assertFalse(backbone & stn)
        self.assertEqual(backbone | stn, {id(p) for p in self.encoder.parameters()})

    def test_input_shape(self):
        with self.assertRaises(ShapeMismatchError):
            self.encoder.encode(constant_stack(10, size=16))

    def test_multiview_rejected(self):
        stack = constant_stack(10)
        obs = MultiViewObservation(stack, stack, CameraPose(20.0, 0.0, 42.0, 1.3))
        with self.assertRaises(ViewError):
            stack_views([obs])


def generic_homography(dtype=torch.float64):
    # Off-grid sample positions keep the bilinear kernel differentiable.
    return torch.tensor(
        [[0.93, 0.04, 0.031], [-0.05, 0.97, -0.017], [0.012, -0.021, 1.0]], dtype=dtype
    )


class TestGradients(unittest.TestCase):
    """Analytic gradients against central differences, in float64."""

    def check(self, fn, *inputs):
        self.assertTrue(
            torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)
        )

    def test_warp_features(self):
        gen = torch.Generator().manual_seed(2)
        features = torch.randn(2, 2, 6, 6, generator=gen, dtype=torch.float64,
                               requires_grad=True)
        h = generic_homography().expand(2, 3, 3)
        self.check(lambda f: warp(f, h), features)

    def test_warp_homography(self):
        gen = torch.Generator().manual_seed(3)
        features = torch.randn(2, 2, 6, 6, generator=gen, dtype=torch.float64)
        h = generic_homography().expand(2, 3, 3).clone().requires_grad_(True)
        self.check(lambda m: warp(features, m), h)

    def test_embedding_wrt_stn_parameters(self):
        encoder = small_encoder().double()
        gen = torch.Generator().manual_seed(4)
        obs = torch.randint(0, 256, (2, 12, 32, 32), generator=gen, dtype=torch.uint8)
        theta = torch.tensor([0.03, -0.02, 0.011, 0.015, 0.04, -0.013, 0.002, -0.003],
                             dtype=torch.float64, requires_grad=True)
        weight = torch.zeros(8, 64, dtype=torch.float64)

        def embed(offsets):
            params = {"stn.regressor.2.weight": weight, "stn.regressor.2.bias": offsets}
            return torch.func.functional_call(encoder, params, (obs,)).embedding

        self.check(embed, theta)

    def test_localize_output(self):
        stn = PerspectiveSTN(4).double()
        gen = torch.Generator().manual_seed(5)
        x = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        with torch.no_grad():
            stn.regressor[-1].weight.normal_(0.0, 0.01, generator=gen)
        self.check(stn.localize, x)
