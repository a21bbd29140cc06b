"""Visual encoder: a small residual backbone with a perspective STN.

Layout::

    12×H×W  --stem conv/2-->  C0×H/2  --STN warp-->  "stn"
            --residual stage/2-->  "stage1"  --residual stage/2-->  "stage2"
            --flatten, linear, layer norm-->  embedding (feature_dim)

The STN predicts a homography from the stem output and resamples that same
map with it. Its last layer starts at zero, so a fresh encoder warps with
the identity.
"""

from __future__ import annotations
from typing import Dict, List, Optional, Sequence

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import NonInvertibleHomographyError, ShapeMismatchError, ViewError
from .simenv import FRAME_STACK, FrameStack, MultiViewObservation

IN_CHANNELS = 4 * FRAME_STACK


@dataclass
class FeaturePyramid:
    maps: Dict[str, torch.Tensor]
    embedding: torch.Tensor
    homography: torch.Tensor

    @property
    def tags(self) -> List[str]:
        return list(self.maps)

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid(
            {tag: fmap.detach() for tag, fmap in self.maps.items()},
            self.embedding.detach(),
            self.homography.detach(),
        )


def identity_homography(batch: int, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.eye(3, dtype=dtype, device=device).expand(batch, 3, 3).clone()


def translation_homography(dx: float, dy: float = 0.0, dtype=torch.float64):
    """Homography shifting sample positions by (dx, dy) normalized grid units."""
    h = torch.eye(3, dtype=dtype)
    h[0, 2] = dx
    h[1, 2] = dy
    return h


def normalize_homography(h: torch.Tensor) -> torch.Tensor:
    return h / h[..., 2:3, 2:3]


def check_invertible(h: torch.Tensor, eps: float = 1e-8):
    det = torch.linalg.det(h.detach())
    if not torch.all(torch.abs(det) > eps):
        raise NonInvertibleHomographyError(
            f"Homography is not invertible (det={det.min().item():.3g})"
        )


def homography_grid(h: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Source sampling positions, B×H×W×2, for the regular target grid.

    Coordinates are normalized to [-1, 1] with corners on pixel centers.
    """
    ys, xs = torch.meshgrid(
        torch.linspace(-1.0, 1.0, height, dtype=h.dtype, device=h.device),
        torch.linspace(-1.0, 1.0, width, dtype=h.dtype, device=h.device),
        indexing="ij",
    )
    target = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1).reshape(1, -1, 3)
    source = target @ h.transpose(1, 2)
    w = source[..., 2:3]
    w = torch.where(w.abs() < 1e-8, torch.full_like(w, 1e-8), w)
    return (source[..., :2] / w).reshape(h.shape[0], height, width, 2)


def warp(features: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Bilinear perspective resampling with zero padding outside the source."""
    if features.dim() != 4:
        raise ShapeMismatchError(f"Expected B×C×H×W features, got {tuple(features.shape)}")
    if h.dim() == 2:
        h = h.expand(features.shape[0], 3, 3)
    h = h.to(features.dtype)
    check_invertible(h)
    grid = homography_grid(h, features.shape[-2], features.shape[-1])
    return F.grid_sample(
        features, grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )


class PerspectiveSTN(nn.Module):
    """Localization head regressing 8 homography offsets from a feature map."""

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(channels, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
        )
        self.regressor = nn.Sequential(
            nn.Linear(16 * 4 * 4, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 8),
        )
        nn.init.zeros_(self.regressor[-1].weight)
        nn.init.zeros_(self.regressor[-1].bias)

    def localize(self, x: torch.Tensor) -> torch.Tensor:
        if x.numel() == 0:
            raise ShapeMismatchError("Cannot localize an empty feature map")
        offsets = self.regressor(self.features(x))
        offsets = torch.cat([offsets, offsets.new_zeros(offsets.shape[0], 1)], dim=1)
        h = torch.eye(3, dtype=x.dtype, device=x.device) + offsets.view(-1, 3, 3)
        return normalize_homography(h)

    def forward(self, x: torch.Tensor):
        h = self.localize(x)
        return warp(x, h), h


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class ResidualStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.norm2 = _norm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                _norm(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def downsampled(size: int, times: int) -> int:
    for _ in range(times):
        size = (size + 1) // 2
    return size


def stack_views(stacks: Sequence[FrameStack]) -> torch.Tensor:
    """uint8 B×12×H×W tensor from single-view frame stacks."""
    for stack in stacks:
        if isinstance(stack, MultiViewObservation):
            raise ViewError("Expected single-view frame stacks, got a multi-view observation")
    return torch.from_numpy(np.stack([stack.array() for stack in stacks]))


class Encoder(nn.Module):
    def __init__(self, config: Optional[EncoderConfig] = None, image_size: int = 128):
        super().__init__()
        config = config or EncoderConfig()
        self.config = config
        self.image_size = int(image_size)
        self.use_stn = config.use_stn
        self.stem = nn.Sequential(
            nn.Conv2d(IN_CHANNELS, config.stem_channels, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.stn = PerspectiveSTN(config.stem_channels)
        widths = [config.stem_channels] + list(config.stage_channels)
        self.stages = nn.ModuleList(
            ResidualStage(widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        )
        self.layer_tags = ["stn"] + [f"stage{i + 1}" for i in range(len(self.stages))]
        final = downsampled(self.image_size, 1 + len(self.stages))
        self.projection = nn.Sequential(
            nn.Flatten(),
            nn.Linear(widths[-1] * final * final, config.feature_dim),
            nn.LayerNorm(config.feature_dim),
        )

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def scale_factors(self) -> Dict[str, int]:
        return {tag: 2 ** (i + 1) for i, tag in enumerate(self.layer_tags)}

    def stn_parameters(self):
        return self.stn.parameters()

    def backbone_parameters(self):
        stn = {id(p) for p in self.stn.parameters()}
        return [p for p in self.parameters() if id(p) not in stn]

    def forward(self, obs: torch.Tensor, homography: Optional[torch.Tensor] = None,
                use_stn: Optional[bool] = None) -> FeaturePyramid:
        if obs.dim() != 4 or obs.shape[1] != IN_CHANNELS or obs.shape[2:] != (
            self.image_size,
            self.image_size,
        ):
            raise ShapeMismatchError(
                f"Expected B×{IN_CHANNELS}×{self.image_size}×{self.image_size} input, "
                f"got {tuple(obs.shape)}"
            )
        dtype = self.stem[0].weight.dtype
        x = obs.to(dtype) / 255.0 - 0.5
        x = self.stem(x)
        use_stn = self.use_stn if use_stn is None else use_stn
        if use_stn:
            h = self.stn.localize(x) if homography is None else homography
            x = warp(x, h)
            if h.dim() == 2:
                h = h.expand(x.shape[0], 3, 3)
        else:
            h = identity_homography(x.shape[0], dtype, x.device)
        maps = {"stn": x}
        for tag, stage in zip(self.layer_tags[1:], self.stages):
            x = stage(x)
            maps[tag] = x
        return FeaturePyramid(maps, self.projection(x), h)

    def encode(self, obs: FrameStack) -> FeaturePyramid:
        device = self.stem[0].weight.device
        return self(stack_views([obs]).to(device))
