"""Deterministic actor with twin critics on top of the shared encoder.

One `Agent.update` does, in order:

    1. n-step targets from the clean next observation of the curriculum's
       view, the target actor (plus clipped noise) and the smaller of the
       two target critics;
    2. the representation loss over both views when multi-view learning is
       enabled;
    3. clean and augmented TD regression on the curriculum's view;
    4. one optimizer step on encoder and critics for the sum of 2 and 3;
    5. one actor step maximizing Q on the detached embedding;
    6. exponential moving average of the target networks.
"""

from __future__ import annotations
from typing import Dict, Optional, Tuple

import copy
import logging

import numpy as np
import torch
from torch import nn

from .augment import DistractorBank, augment_batch
from .config import ExperimentConfig
from .curriculum import CurriculumState
from .encoder import Encoder, stack_views
from .errors import InvalidSpecError, NonFiniteLossError, ViewError
from .objectives import (
    LossBundle,
    multiview_loss,
    n_step_targets,
    stabilized_q_loss,
)
from .replay import Batch
from .simenv import ACTION_DIM, FrameStack, MultiViewObservation, View
from .util import derive_seed


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim),
    )


class Actor(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int, action_dim: int = ACTION_DIM):
        super().__init__()
        self.policy = _mlp(feature_dim, hidden_dim, action_dim)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.policy(embedding))


class Critic(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int, action_dim: int = ACTION_DIM):
        super().__init__()
        self.q1 = _mlp(feature_dim + action_dim, hidden_dim, 1)
        self.q2 = _mlp(feature_dim + action_dim, hidden_dim, 1)

    def forward(self, embedding, action) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([embedding, action], dim=-1)
        return self.q1(x), self.q2(x)

    def penultimate(self, embedding, action) -> torch.Tensor:
        """Hidden activation feeding the first head's output layer."""
        x = torch.cat([embedding, action], dim=-1)
        return self.q1[:-1](x)


class AgentNets(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        dim = config.encoder.feature_dim
        hidden = config.agent.hidden_dim
        self.encoder = Encoder(config.encoder, config.env.image_size)
        self.actor = Actor(dim, hidden)
        self.critic = Critic(dim, hidden)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)
        for p in list(self.actor_target.parameters()) + list(
            self.critic_target.parameters()
        ):
            p.requires_grad_(False)

    def target_pairs(self):
        yield self.actor_target, self.actor
        yield self.critic_target, self.critic


def ema_update(target: nn.Module, online: nn.Module, rate: float):
    with torch.no_grad():
        for t, p in zip(target.parameters(), online.parameters()):
            t.mul_(1.0 - rate).add_(p, alpha=rate)


def smooth_action(raw, prev_smoothed, beta: float) -> np.ndarray:
    """beta * prev_smoothed + (1 - beta) * raw."""
    if not 0.0 <= beta <= 1.0:
        raise InvalidSpecError(f"smoothing factor must be in [0, 1], got {beta}")
    return beta * np.asarray(prev_smoothed, dtype=float) + (1.0 - beta) * np.asarray(
        raw, dtype=float
    )


class ActionSmoother:
    """Moving average over a stream of actions, restarted every episode."""

    def __init__(self, beta: float = 0.0):
        self.beta = beta
        self.prev: Optional[np.ndarray] = None

    def reset(self):
        self.prev = None

    def __call__(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        self.prev = raw if self.prev is None else smooth_action(raw, self.prev, self.beta)
        return self.prev


def exploration_std(step: int, start: float, end: float, duration: int) -> float:
    fraction = min(max(step / max(duration, 1), 0.0), 1.0)
    return start + fraction * (end - start)


class Agent:
    def __init__(
        self,
        config: ExperimentConfig,
        device: str = "cpu",
        bank: Optional[DistractorBank] = None,
    ):
        self.config = config
        self.device = torch.device(device)
        self.nets = AgentNets(config).to(self.device)
        self.bank = bank or DistractorBank(config.augment.distractor_source)
        agent = config.agent
        encoder = self.nets.encoder
        self.critic_opt = torch.optim.Adam(
            [
                {"params": encoder.backbone_parameters(), "lr": agent.encoder_lr},
                {"params": list(encoder.stn_parameters()), "lr": config.encoder.stn_lr},
                {"params": self.nets.critic.parameters(), "lr": agent.critic_lr},
            ]
        )
        self.actor_opt = torch.optim.Adam(self.nets.actor.parameters(), lr=agent.actor_lr)

    def act(self, obs: FrameStack, explore: bool = False, seed: int = 0,
            step: int = 0) -> np.ndarray:
        if isinstance(obs, MultiViewObservation):
            raise ViewError("The policy acts from a single camera; pick one view")
        with torch.no_grad():
            embedding = self.nets.encoder(stack_views([obs]).to(self.device)).embedding
            action = self.nets.actor(embedding)[0].cpu().numpy().astype(float)
        if explore:
            agent = self.config.agent
            std = exploration_std(
                step, agent.std_start, agent.std_end, agent.std_schedule_steps
            )
            rng = np.random.default_rng(seed)
            noise = np.clip(
                rng.normal(0.0, std, size=action.shape), -agent.std_clip, agent.std_clip
            )
            action = np.clip(action + noise, -1.0, 1.0)
        return action

    def q_value(self, obs: torch.Tensor, action: Optional[torch.Tensor] = None):
        """Smaller twin Q at the policy action unless one is given."""
        embedding = self.nets.encoder(obs.to(self.device)).embedding
        if action is None:
            action = self.nets.actor(embedding)
        q1, q2 = self.nets.critic(embedding, action)
        return torch.min(q1, q2)

    def aug_strength(self, curriculum: CurriculumState, view: View) -> float:
        augment = self.config.augment
        if not augment.enabled:
            return 0.0
        enabled = (
            augment.augment_fixed_view if view is View.FIXED else augment.augment_moving_view
        )
        if not enabled:
            return 0.0
        return augment.min_strength + (1.0 - augment.min_strength) * curriculum.magnitude

    def _target(self, batch: Batch, view: View, seed: int) -> torch.Tensor:
        agent = self.config.agent
        with torch.no_grad():
            embedding = self.nets.encoder(batch.next_obs(view)).embedding
            action = self.nets.actor_target(embedding)
            generator = torch.Generator().manual_seed(derive_seed(seed, "target-noise"))
            noise = torch.randn(action.shape, generator=generator) * agent.target_noise
            noise = noise.clamp(-agent.target_noise_clip, agent.target_noise_clip)
            action = (action + noise.to(action.device)).clamp(-1.0, 1.0)
            q1, q2 = self.nets.critic_target(embedding, action)
            bootstrap = torch.min(q1, q2).reshape(-1)
            return n_step_targets(batch.rewards, batch.discounts, bootstrap)

    def update(self, batch: Batch, curriculum: CurriculumState, seed: int) -> LossBundle:
        config = self.config
        objectives = config.objectives
        encoder, critic = self.nets.encoder, self.nets.critic
        batch = batch.to(self.device)
        view = curriculum.view
        strength = self.aug_strength(curriculum, view)

        target = self._target(batch, view, seed)

        if objectives.multiview:
            pyramids = {View.FIXED: encoder(batch.fixed), View.MOVING: encoder(batch.moving)}
            bundle = multiview_loss(
                pyramids[View.FIXED],
                pyramids[View.MOVING],
                tau=objectives.temperature,
                lam=objectives.lam,
                layers=config.encoder.align_layers,
                normalize=objectives.normalize,
                reduction=objectives.feat_reduction,
                detach_fixed=objectives.detach_fixed,
            )
            clean_embedding = pyramids[view].embedding
        else:
            zero = torch.zeros((), device=self.device)
            bundle = LossBundle(zero, zero, zero)
            clean_embedding = encoder(batch.obs(view)).embedding

        clean_obs = batch.obs(view)

        def q_heads(obs, action):
            embedding = clean_embedding if obs is clean_obs else encoder(obs).embedding
            return critic(embedding, action)

        seeds = [derive_seed(seed, "augment", i) for i in range(batch.size)]
        q_clean = stabilized_q_loss(q_heads, clean_obs, batch.action, target)
        q_aug = stabilized_q_loss(
            q_heads,
            clean_obs,
            batch.action,
            target,
            aug_strength=strength,
            augment_fn=lambda obs, s: augment_batch(obs, s, seeds, config.augment, self.bank),
        )
        bundle.q_loss = objectives.clean_weight * q_clean + objectives.aug_weight * q_aug
        total = bundle.q_loss + (bundle.total_rep if objectives.multiview else 0.0)

        if not bool(torch.isfinite(total.detach())):
            self._abort(bundle, curriculum)
        self.critic_opt.zero_grad(set_to_none=True)
        total.backward()
        self.critic_opt.step()

        embedding = clean_embedding.detach()
        q1, q2 = critic(embedding, self.nets.actor(embedding))
        bundle.actor_loss = -torch.min(q1, q2).mean()
        if not bool(torch.isfinite(bundle.actor_loss.detach())):
            self._abort(bundle, curriculum)
        self.actor_opt.zero_grad(set_to_none=True)
        bundle.actor_loss.backward()
        self.actor_opt.step()
        # Critic gradients from the actor step are discarded.
        critic.zero_grad(set_to_none=True)

        for target_net, online in self.nets.target_pairs():
            ema_update(target_net, online, config.agent.ema)

        bundle.diagnostics.update(
            {
                "q_clean": float(q_clean.detach()),
                "q_aug": float(q_aug.detach()),
                "aug_strength": strength,
                "target_mean": float(target.mean()),
            }
        )
        return bundle

    def _abort(self, bundle: LossBundle, curriculum: CurriculumState):
        diagnostics = {
            name: float(value.detach()) for name, value in bundle.terms().items()
        }
        diagnostics.update(bundle.diagnostics)
        diagnostics.update(curriculum.as_record())
        logging.getLogger("viewgen").error(
            f"Non-finite loss at step {curriculum.step}: {diagnostics}"
        )
        raise NonFiniteLossError(
            f"Non-finite loss at step {curriculum.step}", diagnostics
        )

    def state_dict(self) -> Dict[str, dict]:
        return {
            "nets": self.nets.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
        }

    def load_state_dict(self, state: Dict[str, dict], weights_only: bool = False):
        self.nets.load_state_dict(state["nets"])
        if not weights_only:
            self.critic_opt.load_state_dict(state["critic_opt"])
            self.actor_opt.load_state_dict(state["actor_opt"])
