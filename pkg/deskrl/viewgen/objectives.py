"""Training objectives.

    info_nce_symmetric   multi-view contrastive loss, averaged over both
                         anchor directions
    feature_align        squared L2 distance between paired feature maps
    multiview_loss       info_nce_symmetric + lam * feature_align
    n_step_target        discounted n-step return with bootstrap
    stabilized_q_loss    TD regression from an augmented observation
"""

from __future__ import annotations
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

from dataclasses import dataclass, field
import math

import torch
import torch.nn.functional as F

from .errors import ObjectiveError, ShapeMismatchError
from .encoder import FeaturePyramid


@dataclass
class LossBundle:
    j_con: torch.Tensor
    j_feat: torch.Tensor
    total_rep: torch.Tensor
    q_loss: Optional[torch.Tensor] = None
    actor_loss: Optional[torch.Tensor] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def terms(self) -> Dict[str, torch.Tensor]:
        terms = {"j_con": self.j_con, "j_feat": self.j_feat, "total_rep": self.total_rep}
        if self.q_loss is not None:
            terms["q_loss"] = self.q_loss
        if self.actor_loss is not None:
            terms["actor_loss"] = self.actor_loss
        return terms

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.terms().values())

    def as_record(self) -> Dict[str, float]:
        record = {name: float(value.detach()) for name, value in self.terms().items()}
        record.update(self.diagnostics)
        return record


def _check_embeddings(fixed_embs: torch.Tensor, move_embs: torch.Tensor):
    if fixed_embs.shape != move_embs.shape or fixed_embs.dim() != 2:
        raise ShapeMismatchError(
            f"Embedding batches must both be B×D, got {tuple(fixed_embs.shape)} "
            f"and {tuple(move_embs.shape)}"
        )
    if fixed_embs.shape[0] < 2:
        raise ObjectiveError("InfoNCE needs a batch of at least 2 to have negatives")


def similarity_logits(fixed_embs, move_embs, tau, normalize=True):
    if normalize:
        norms = torch.cat([fixed_embs.norm(dim=1), move_embs.norm(dim=1)])
        if bool((norms.detach() < 1e-12).any()):
            raise ObjectiveError("Cannot normalize a zero-norm embedding")
        fixed_embs = F.normalize(fixed_embs, dim=1)
        move_embs = F.normalize(move_embs, dim=1)
    return fixed_embs @ move_embs.t() / tau


def info_nce_symmetric(
    fixed_embs: torch.Tensor,
    move_embs: torch.Tensor,
    tau: float = 0.1,
    normalize: bool = True,
) -> torch.Tensor:
    """Row i of the moving batch is the positive of anchor i; the other rows
    are its negatives. The loss is the mean of both anchor directions."""
    if not tau > 0:
        raise ObjectiveError("temperature must be positive")
    _check_embeddings(fixed_embs, move_embs)
    logits = similarity_logits(fixed_embs, move_embs, tau, normalize)
    labels = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.t(), labels))


PyramidLike = Union[FeaturePyramid, Mapping[str, torch.Tensor]]


def _maps(pyramid: PyramidLike) -> Mapping[str, torch.Tensor]:
    return pyramid.maps if isinstance(pyramid, FeaturePyramid) else pyramid


def feature_align_terms(
    fixed_pyr: PyramidLike,
    move_pyr: PyramidLike,
    layers: Sequence[str],
    reduction: str = "sum",
    detach_fixed: bool = False,
) -> Dict[str, torch.Tensor]:
    fixed_maps, move_maps = _maps(fixed_pyr), _maps(move_pyr)
    terms = {}
    for tag in layers:
        if tag not in fixed_maps or tag not in move_maps:
            raise ObjectiveError(f"Layer {tag!r} missing from a feature pyramid")
        a, b = fixed_maps[tag], move_maps[tag]
        if a.shape != b.shape:
            raise ShapeMismatchError(
                f"Layer {tag!r} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        if detach_fixed:
            a = a.detach()
        sq = (a.flatten(1) - b.flatten(1)).pow(2)
        per_sample = sq.sum(dim=1) if reduction == "sum" else sq.mean(dim=1)
        terms[tag] = per_sample.mean()
    return terms


def feature_align(
    fixed_pyr: PyramidLike,
    move_pyr: PyramidLike,
    layers: Sequence[str],
    reduction: str = "sum",
    detach_fixed: bool = False,
) -> torch.Tensor:
    terms = feature_align_terms(fixed_pyr, move_pyr, layers, reduction, detach_fixed)
    if not terms:
        raise ObjectiveError("feature_align needs at least one layer")
    return sum(terms.values())


def multiview_loss(
    fixed_pyr: FeaturePyramid,
    move_pyr: FeaturePyramid,
    tau: float = 0.1,
    lam: float = 200.0,
    layers: Sequence[str] = ("stn", "stage1", "stage2"),
    normalize: bool = True,
    reduction: str = "sum",
    detach_fixed: bool = False,
) -> LossBundle:
    if not lam >= 0:
        raise ObjectiveError(f"lambda must be non-negative, got {lam}")
    j_con = info_nce_symmetric(fixed_pyr.embedding, move_pyr.embedding, tau, normalize)
    terms = feature_align_terms(fixed_pyr, move_pyr, layers, reduction, detach_fixed)
    j_feat = sum(terms.values())
    total_rep = j_con + lam * j_feat

    with torch.no_grad():
        logits = similarity_logits(
            fixed_pyr.embedding, move_pyr.embedding, 1.0, normalize
        )
        batch = logits.shape[0]
        off_diagonal = ~torch.eye(batch, dtype=torch.bool, device=logits.device)
        diagnostics = {
            "positive_similarity": float(logits.diagonal().mean()),
            "negative_similarity": float(logits[off_diagonal].mean()),
        }
        diagnostics.update({f"align_{tag}": float(v) for tag, v in terms.items()})
    return LossBundle(j_con, j_feat, total_rep, diagnostics=diagnostics)


def n_step_target(rewards: Sequence[float], gamma: float, bootstrap_q: float,
                  terminal: bool = False) -> float:
    """sum_k gamma^k r_{t+k} + gamma^n * bootstrap_q; no bootstrap after a terminal."""
    rewards = list(rewards)
    if not rewards:
        raise ObjectiveError("n-step target needs at least one reward")
    if not 0.0 <= gamma <= 1.0:
        raise ObjectiveError(f"gamma must be in [0, 1], got {gamma}")
    target = 0.0
    for k, reward in enumerate(rewards):
        target += gamma**k * reward
    if not terminal:
        target += gamma ** len(rewards) * bootstrap_q
    return target


def n_step_targets(rewards: torch.Tensor, discounts: torch.Tensor,
                   bootstrap_q: torch.Tensor) -> torch.Tensor:
    """Batched n-step targets from B×n reward and discount windows.

    discounts[:, k] is gamma, or 0 when step k ended the episode. The
    k-th reward is weighted by the product of the discounts before it and the
    bootstrap by the product of all of them.
    """
    if rewards.shape[-1] == 0:
        raise ObjectiveError("n-step target needs at least one reward")
    ones = torch.ones_like(discounts[:, :1])
    weights = torch.cumprod(torch.cat([ones, discounts], dim=1), dim=1)
    target = (weights[:, :-1] * rewards).sum(dim=1)
    return target + weights[:, -1] * bootstrap_q.reshape(-1)


def stabilized_q_loss(
    critic: Callable[[torch.Tensor, torch.Tensor], Sequence[torch.Tensor]],
    obs: torch.Tensor,
    action: torch.Tensor,
    target: torch.Tensor,
    aug_strength: float = 0.0,
    augment_fn: Optional[Callable[[torch.Tensor, float], torch.Tensor]] = None,
) -> torch.Tensor:
    """Squared error between Q(f(aug(o_t)), a_t) and the frozen target.

    `critic` maps an observation batch and actions to one Q estimate per
    critic head; the errors of all heads are summed. The caller picks which
    view's observations to pass in.
    """
    if augment_fn is not None and aug_strength > 0:
        obs = augment_fn(obs, aug_strength)
    target = target.detach().reshape(-1)
    return sum(F.mse_loss(q.reshape(-1), target) for q in critic(obs, action))


def info_nce_upper_bound(batch: int, tau: float) -> float:
    """Largest value the loss takes for normalized embeddings."""
    return 2.0 / tau + math.log(batch)
