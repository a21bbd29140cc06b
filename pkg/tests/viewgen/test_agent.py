import unittest

from unittest import mock

import numpy as np
import torch

from deskrl.viewgen.agent import (
    ActionSmoother,
    Agent,
    ema_update,
    exploration_std,
    smooth_action,
)
from deskrl.viewgen.config import CurriculumConfig, load_config
from deskrl.viewgen.curriculum import CurriculumState
from deskrl.viewgen.errors import InvalidSpecError, NonFiniteLossError, ViewError
from deskrl.viewgen.render import CameraPose
from deskrl.viewgen.replay import Batch
from deskrl.viewgen.simenv import FrameStack, MultiViewObservation, View

SMALL = [
    "env.image_size=32",
    "encoder.feature_dim=32",
    "encoder.stem_channels=8",
    "encoder.stage_channels=[8,16]",
    "agent.hidden_dim=32",
    "agent.batch_size=4",
]


def small_agent(*overrides):
    torch.manual_seed(0)
    return Agent(load_config(overrides=SMALL + list(overrides)))


def random_stack(seed, size=32):
    rng = np.random.default_rng(seed)
    return FrameStack(
        tuple(rng.integers(0, 256, size=(size, size, 4), dtype=np.uint8) for _ in range(3))
    )


def random_batch(seed, size=4, n=3, image=32):
    gen = torch.Generator().manual_seed(seed)

    def pixels():
        return torch.randint(0, 256, (size, 12, image, image), generator=gen, dtype=torch.uint8)

    return Batch(
        fixed=pixels(),
        moving=pixels(),
        next_fixed=pixels(),
        next_moving=pixels(),
        action=torch.rand(size, 4, generator=gen) * 2 - 1,
        rewards=torch.rand(size, n, generator=gen),
        discounts=torch.full((size, n), 0.99),
        indices=np.arange(size),
    )


def curriculum(step, threshold=10):
    return CurriculumState.from_config(CurriculumConfig(threshold=threshold, rate=0.1), step)


class TestSmoothing(unittest.TestCase):
    def test_no_smoothing(self):
        raw = np.array([0.5, -0.5, 0.1, 1.0])
        self.assertTrue(np.array_equal(smooth_action(raw, np.zeros(4), 0.0), raw))

    def test_full_smoothing(self):
        prev = np.array([0.2, 0.2, 0.2, 0.2])
        self.assertTrue(np.array_equal(smooth_action(np.ones(4), prev, 1.0), prev))

    def test_geometric_convergence(self):
        beta = 0.6
        smoother = ActionSmoother(beta)
        smoother(np.zeros(4))
        raw = np.ones(4)
        for k in range(1, 10):
            out = smoother(raw)
            np.testing.assert_allclose(1.0 - out, beta**k)

    def test_reset(self):
        smoother = ActionSmoother(0.9)
        smoother(np.zeros(4))
        smoother.reset()
        self.assertTrue(np.array_equal(smoother(np.ones(4)), np.ones(4)))

    def test_range(self):
        with self.assertRaises(InvalidSpecError):
            smooth_action(np.zeros(4), np.zeros(4), 1.5)


class TestExploration(unittest.TestCase):
    def test_schedule(self):
        self.assertEqual(exploration_std(0, 1.0, 0.1, 100), 1.0)
        self.assertAlmostEqual(exploration_std(50, 1.0, 0.1, 100), 0.55)
        self.assertAlmostEqual(exploration_std(500, 1.0, 0.1, 100), 0.1)


class TestAct(unittest.TestCase):
    def setUp(self):
        self.agent = small_agent()
        self.obs = random_stack(0)

    def test_deterministic(self):
        a = self.agent.act(self.obs)
        b = self.agent.act(self.obs)
        self.assertTrue(np.array_equal(a, b))
        self.assertEqual(a.shape, (4,))
        self.assertTrue(np.all(np.abs(a) <= 1.0))

    def test_exploration_noise(self):
        greedy = self.agent.act(self.obs)
        differs = sum(
            not np.array_equal(self.agent.act(self.obs, explore=True, seed=seed), greedy)
            for seed in range(100)
        )
        self.assertGreaterEqual(differs, 99)

    def test_exploration_seeded(self):
        a = self.agent.act(self.obs, explore=True, seed=5, step=10)
        b = self.agent.act(self.obs, explore=True, seed=5, step=10)
        self.assertTrue(np.array_equal(a, b))
        greedy = self.agent.act(self.obs)
        self.assertLessEqual(np.abs(a - greedy).max(), self.agent.config.agent.std_clip + 1e-9)

    def test_single_view(self):
        obs = MultiViewObservation(self.obs, self.obs, CameraPose(20.0, 0.0, 42.0, 1.3))
        with self.assertRaises(ViewError):
            self.agent.act(obs)


class TestUpdate(unittest.TestCase):
    def parameters(self, module):
        return [p.detach().clone() for p in module.parameters()]

    def changed(self, before, module):
        return any(not torch.equal(a, b) for a, b in zip(before, module.parameters()))

    def test_update(self):
        agent = small_agent()
        nets = agent.nets
        encoder = self.parameters(nets.encoder)
        critic = self.parameters(nets.critic)
        actor = self.parameters(nets.actor)
        critic_target = self.parameters(nets.critic_target)
        bundle = agent.update(random_batch(0), curriculum(50), seed=3)
        record = bundle.as_record()
        for key in ("j_con", "j_feat", "total_rep", "q_loss", "actor_loss",
                    "q_clean", "q_aug", "aug_strength", "target_mean"):
            self.assertIn(key, record)
            self.assertTrue(np.isfinite(record[key]), key)
        self.assertGreater(record["j_feat"], 0.0)
        self.assertTrue(self.changed(encoder, nets.encoder))
        self.assertTrue(self.changed(critic, nets.critic))
        self.assertTrue(self.changed(actor, nets.actor))
        self.assertTrue(self.changed(critic_target, nets.critic_target))
        for p in nets.critic.parameters():
            self.assertIsNone(p.grad)

    def test_reproducible(self):
        a = small_agent().update(random_batch(1), curriculum(50), seed=9).as_record()
        b = small_agent().update(random_batch(1), curriculum(50), seed=9).as_record()
        self.assertEqual(a, b)

    def test_single_view(self):
        agent = small_agent("objectives.multiview=false")
        bundle = agent.update(random_batch(2), curriculum(0), seed=1)
        self.assertEqual(bundle.j_con.item(), 0.0)
        self.assertEqual(bundle.total_rep.item(), 0.0)
        self.assertTrue(np.isfinite(bundle.q_loss.item()))

    def test_clean_only(self):
        agent = small_agent("objectives.lam=0.0", "augment.enabled=false")
        bundle = agent.update(random_batch(2), curriculum(0), seed=1)
        record = bundle.as_record()
        self.assertAlmostEqual(record["q_clean"], record["q_aug"], places=5)
        self.assertEqual(record["aug_strength"], 0.0)

    def test_non_finite(self):
        agent = small_agent()
        nan = torch.full((4,), float("nan"))
        with mock.patch.object(Agent, "_target", return_value=nan):
            with self.assertLogs("viewgen", "ERROR"):
                with self.assertRaises(NonFiniteLossError) as caught:
                    agent.update(random_batch(0), curriculum(50), seed=3)
        self.assertIn("q_loss", caught.exception.diagnostics)
        self.assertEqual(caught.exception.diagnostics["step"], 50)

    def test_aug_strength(self):
        agent = small_agent("augment.min_strength=0.25")
        self.assertEqual(agent.aug_strength(curriculum(0), View.FIXED), 0.25)
        late = curriculum(10**6)
        self.assertAlmostEqual(agent.aug_strength(late, View.MOVING), 1.0)
        agent = small_agent("augment.augment_fixed_view=false")
        self.assertEqual(agent.aug_strength(late, View.FIXED), 0.0)

    def test_ema(self):
        target = torch.nn.Linear(2, 1)
        online = torch.nn.Linear(2, 1)
        torch.nn.init.zeros_(target.weight)
        torch.nn.init.ones_(online.weight)
        ema_update(target, online, 0.25)
        self.assertTrue(torch.allclose(target.weight, torch.full((1, 2), 0.25)))


class TestAgentState(unittest.TestCase):
    def test_round_trip(self):
        agent = small_agent()
        agent.update(random_batch(0), curriculum(50), seed=3)
        other = small_agent()
        torch.manual_seed(123)
        other.load_state_dict(agent.state_dict())
        obs = random_stack(4)
        self.assertTrue(np.array_equal(agent.act(obs), other.act(obs)))
        a = agent.update(random_batch(5), curriculum(60), seed=4).as_record()
        b = other.update(random_batch(5), curriculum(60), seed=4).as_record()
        self.assertEqual(a, b)


class TestInvariants(unittest.TestCase):
    def test_zero_ema_freezes_targets(self):
        agent = small_agent("agent.ema=0.0")
        before = [
            [p.detach().clone() for p in target.parameters()]
            for target, _ in agent.nets.target_pairs()
        ]
        for seed in range(3):
            agent.update(random_batch(seed), curriculum(50), seed=seed)
        for saved, (target, _) in zip(before, agent.nets.target_pairs()):
            for a, b in zip(saved, target.parameters()):
                self.assertTrue(torch.equal(a, b))

    def test_actions_bounded(self):
        agent = small_agent()
        stacks = [random_stack(seed) for seed in range(200)]
        for value in (0, 255):
            stacks.append(FrameStack.initial(np.full((32, 32, 4), value, dtype=np.uint8)))
        for i, stack in enumerate(stacks):
            for action in (agent.act(stack), agent.act(stack, explore=True, seed=i)):
                self.assertTrue(np.all(np.isfinite(action)))
                self.assertTrue(np.all(np.abs(action) <= 1.0), action)

    def test_long_training_stays_finite(self):
        torch.manual_seed(0)
        agent = Agent(load_config(overrides=SMALL + ["env.image_size=16"]))
        for step in range(1000):
            bundle = agent.update(random_batch(step, image=16), curriculum(step), seed=step)
            self.assertTrue(bundle.is_finite(), step)
        for module in (agent.nets.encoder, agent.nets.critic, agent.nets.actor):
            for p in module.parameters():
                self.assertTrue(bool(torch.isfinite(p).all()))
