import threading
import unittest

from unittest import mock

import numpy as np

from deskrl.viewgen.errors import EmptyBufferError, InvalidSpecError
from deskrl.viewgen.objectives import n_step_target
from deskrl.viewgen.render import CameraPose
from deskrl.viewgen.replay import ReplayBuffer, Transition, sample_batch
from deskrl.viewgen.simenv import FrameStack, MultiViewObservation, View

POSE = CameraPose(20.0, 0.0, 42.0, 1.3)
GAMMA = 0.9


def observation(value):
    fixed = FrameStack.initial(np.full((8, 8, 4), value % 256, dtype=np.uint8))
    moving = FrameStack.initial(np.full((8, 8, 4), (value + 100) % 256, dtype=np.uint8))
    return MultiViewObservation(fixed, moving, POSE)


def fill(buffer, episode_lengths, rewards=None, terminal_last=False):
    """Add episodes whose observation value counts transitions globally."""
    counter = 0
    for episode, length in enumerate(episode_lengths):
        for step in range(length):
            last = step == length - 1
            reward = rewards[counter] if rewards is not None else float(counter)
            buffer.add(
                Transition(
                    obs=observation(counter),
                    action=np.full(4, step / 10.0, dtype=np.float32),
                    reward=reward,
                    discount=0.0 if (terminal_last and last) else GAMMA,
                    done=last,
                    episode_id=episode,
                    step_index=step,
                    next_obs=observation(counter + 1),
                )
            )
            counter += 1
    return buffer


class TestValidStarts(unittest.TestCase):
    def test_single_episode(self):
        buffer = fill(ReplayBuffer(100), [5])
        self.assertEqual(buffer.valid_starts(3).tolist(), [0, 1, 2])

    def test_episode_boundary(self):
        buffer = fill(ReplayBuffer(100), [3, 4])
        self.assertEqual(buffer.valid_starts(3).tolist(), [0, 3, 4])

    def test_short_buffer(self):
        buffer = fill(ReplayBuffer(100), [2])
        self.assertEqual(len(buffer.valid_starts(3)), 0)
        with self.assertRaises(EmptyBufferError):
            sample_batch(buffer, 4, 3, seed=0)

    def test_eviction(self):
        buffer = fill(ReplayBuffer(4), [6])
        self.assertEqual(len(buffer), 4)
        self.assertEqual([t.step_index for t in buffer.transitions()], [2, 3, 4, 5])
        self.assertEqual(buffer.valid_starts(3).tolist(), [0, 1])

    def test_eviction_gap(self):
        # Windows never cross from one episode into the next.
        buffer = fill(ReplayBuffer(5), [4, 3])
        self.assertEqual([t.episode_id for t in buffer.transitions()], [0, 0, 1, 1, 1])
        self.assertEqual(buffer.valid_starts(2).tolist(), [0, 2, 3])

    def test_matches_window_scan(self):
        rng = np.random.default_rng(7)
        buffer = fill(ReplayBuffer(997), rng.integers(1, 40, size=120).tolist())
        items = buffer.transitions()
        for n in (1, 3, 5):
            expected = [
                i for i in range(len(items) - n + 1)
                if all(items[i + k].episode_id == items[i].episode_id
                       and items[i + k].step_index == items[i].step_index + k
                       for k in range(n))
            ]
            self.assertEqual(buffer.valid_starts(n).tolist(), expected)

    def test_no_per_transition_scan(self):
        buffer = fill(ReplayBuffer(500), [300, 300])
        with mock.patch.object(ReplayBuffer, "__getitem__", side_effect=AssertionError):
            starts = buffer.valid_starts(3)
        self.assertEqual(len(starts), 200 - 2 + 298)

    def test_cache_follows_adds(self):
        buffer = fill(ReplayBuffer(100), [3])
        self.assertEqual(buffer.valid_starts(2).tolist(), [0, 1])
        fill(buffer, [2])
        self.assertEqual(buffer.valid_starts(2).tolist(), [0, 1, 3])

    def test_invalid_n(self):
        with self.assertRaises(InvalidSpecError):
            ReplayBuffer(10).valid_starts(0)
        with self.assertRaises(InvalidSpecError):
            ReplayBuffer(0)


class TestSampleBatch(unittest.TestCase):
    def setUp(self):
        self.buffer = fill(ReplayBuffer(100), [5, 6, 4], terminal_last=True)

    def test_seeded(self):
        a = sample_batch(self.buffer, 16, 3, seed=42)
        b = sample_batch(self.buffer, 16, 3, seed=42)
        self.assertTrue(np.array_equal(a.indices, b.indices))
        c = sample_batch(self.buffer, 16, 3, seed=43)
        self.assertFalse(np.array_equal(a.indices, c.indices))

    def test_windows(self):
        batch = sample_batch(self.buffer, 32, 3, seed=1)
        valid = set(self.buffer.valid_starts(3).tolist())
        self.assertTrue(set(batch.indices.tolist()) <= valid)
        self.assertEqual(tuple(batch.fixed.shape), (32, 12, 8, 8))
        self.assertEqual(tuple(batch.rewards.shape), (32, 3))
        for row, start in enumerate(batch.indices):
            self.assertEqual(int(batch.fixed[row, 0, 0, 0]), start)
            self.assertEqual(int(batch.moving[row, 0, 0, 0]), start + 100)
            # next observation follows the last transition of the window
            self.assertEqual(int(batch.next_fixed[row, 0, 0, 0]), start + 3)
            self.assertEqual(batch.rewards[row].tolist(), [start, start + 1, start + 2])
        self.assertIs(batch.obs(View.MOVING), batch.moving)
        self.assertIs(batch.next_obs(View.FIXED), batch.next_fixed)

    def test_targets_match_per_step_oracle(self):
        rng = np.random.default_rng(5)
        lengths = [7, 3, 9, 5]
        rewards = rng.normal(size=sum(lengths)).tolist()
        buffer = fill(ReplayBuffer(100), lengths, rewards, terminal_last=True)
        transitions = buffer.transitions()
        batch = sample_batch(buffer, 64, 3, seed=8)
        weights = np.cumprod(
            np.concatenate([np.ones((64, 1)), batch.discounts.numpy()], axis=1), axis=1
        )
        targets = (weights[:, :-1] * batch.rewards.numpy()).sum(axis=1)
        for row, start in enumerate(batch.indices):
            window = transitions[start:start + 3]
            steps = []
            for t in window:
                steps.append(t.reward)
                if t.discount == 0.0:
                    break
            expected = n_step_target(steps, GAMMA, 0.0, terminal=True)
            self.assertAlmostEqual(targets[row], expected, places=5)

    def test_concurrent_add(self):
        buffer = fill(ReplayBuffer(50), [20])

        def writer():
            fill(buffer, [40])

        thread = threading.Thread(target=writer)
        thread.start()
        for seed in range(20):
            batch = sample_batch(buffer, 8, 3, seed=seed)
            self.assertEqual(batch.size, 8)
        thread.join()
        self.assertEqual(len(buffer), 50)


class TestReplayState(unittest.TestCase):
    def test_round_trip(self):
        buffer = fill(ReplayBuffer(6), [4, 4])
        restored = ReplayBuffer.from_state_dict(buffer.state_dict())
        self.assertEqual(restored.added, 8)
        self.assertEqual(
            [t.step_index for t in restored.transitions()],
            [t.step_index for t in buffer.transitions()],
        )
        a = sample_batch(buffer, 8, 2, seed=3)
        b = sample_batch(restored, 8, 2, seed=3)
        self.assertTrue(np.array_equal(a.indices, b.indices))
