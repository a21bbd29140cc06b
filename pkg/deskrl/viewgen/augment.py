"""Appearance augmentation.

An observation is perturbed in two stages that share one random draw per
call: a band of Fourier coefficients is swapped with those of a reference
image, then a distractor image is blended over the result. Both stages
scale with `strength` and are the identity at strength 0. Depth channels
always pass through untouched.
"""

from __future__ import annotations
from typing import List, NamedTuple, Optional, Sequence, Tuple

import logging
import os

import numpy as np
from PIL import Image
import torch

from .config import AugmentConfig
from .errors import ShapeMismatchError
from .simenv import FrameStack

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def procedural_distractor(shape: Tuple[int, int, int], rng: np.random.Generator):
    """Noise, a color gradient or a checkerboard, chosen at random."""
    h, w, c = shape
    kind = rng.integers(3)
    if kind == 0:
        return rng.integers(0, 256, size=shape, dtype=np.uint8)
    if kind == 1:
        start, end = rng.uniform(0, 255, size=(2, c))
        angle = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        ramp = np.cos(angle) * xs / max(w - 1, 1) + np.sin(angle) * ys / max(h - 1, 1)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        image = start + ramp[..., None] * (end - start)
        return np.rint(image).astype(np.uint8)
    cell = int(rng.integers(4, 17))
    colors = rng.integers(0, 256, size=(2, c))
    ys, xs = np.mgrid[0:h, 0:w]
    parity = ((ys // cell) + (xs // cell)) % 2
    return colors[parity].astype(np.uint8)


class DistractorBank:
    """Overlay images loaded from a directory, or procedural ones."""

    def __init__(self, source: Optional[str] = None):
        self.images: List[np.ndarray] = []
        if source is None:
            return
        if not os.path.isdir(source):
            logging.getLogger("viewgen").warning(
                f"Distractor directory {source} does not exist, "
                "using procedural distractors"
            )
            return
        for name in sorted(os.listdir(source)):
            if not name.lower().endswith(IMAGE_EXTENSIONS):
                continue
            path = os.path.join(source, name)
            try:
                with Image.open(path) as image:
                    self.images.append(np.asarray(image.convert("RGB")))
            except OSError as err:
                logging.getLogger("viewgen").warning(
                    f"Unable to read distractor {path}: {err}"
                )

    def draw(self, rng: np.random.Generator, shape: Tuple[int, int, int]) -> np.ndarray:
        if not self.images:
            return procedural_distractor(shape, rng)
        image = self.images[int(rng.integers(len(self.images)))]
        if image.shape[:2] != shape[:2]:
            resized = Image.fromarray(image).resize((shape[1], shape[0]), Image.BILINEAR)
            image = np.asarray(resized)
        return image


def band_mask(shape: Tuple[int, int], fraction: float, rng: np.random.Generator):
    """Boolean mask over an unshifted 2D spectrum covering ~`fraction` of it.

    The mask is a radial band whose position is random. Membership depends
    on the radial frequency only, so the mask is conjugate-symmetric.
    """
    h, w = shape
    fraction = float(np.clip(fraction, 0.0, 1.0))
    start = rng.uniform(0.0, 1.0 - fraction)
    if fraction == 0.0:
        return np.zeros(shape, dtype=bool)
    radius = np.hypot(np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :])
    lo, hi = np.quantile(radius, [start, start + fraction])
    return (radius >= lo) & (radius <= hi)


def swap_spectrum(img: np.ndarray, reference: np.ndarray, mask: np.ndarray):
    spectrum = np.fft.fft2(img.astype(np.float64), axes=(0, 1))
    donor = np.fft.fft2(reference.astype(np.float64), axes=(0, 1))
    spectrum[mask] = donor[mask]
    out = np.real(np.fft.ifft2(spectrum, axes=(0, 1)))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def spectrum_augment(
    img: np.ndarray,
    strength: float,
    seed: int,
    reference: Optional[np.ndarray] = None,
    mask_fraction: float = 0.5,
) -> np.ndarray:
    img = np.asarray(img)
    if strength <= 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    if reference is None:
        reference = procedural_distractor(img.shape, rng)
    if reference.shape != img.shape:
        raise ShapeMismatchError(
            f"Reference shape {reference.shape} does not match image {img.shape}"
        )
    mask = band_mask(img.shape[:2], min(strength, 1.0) * mask_fraction, rng)
    return swap_spectrum(img, reference, mask)


def random_overlay(img: np.ndarray, distractor: np.ndarray, alpha: float) -> np.ndarray:
    img = np.asarray(img)
    distractor = np.asarray(distractor)
    if img.shape != distractor.shape:
        raise ShapeMismatchError(
            f"Distractor shape {distractor.shape} does not match image {img.shape}"
        )
    out = alpha * img.astype(np.float64) + (1.0 - alpha) * distractor.astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def overlay_alpha_at(strength: float, full_strength_alpha: float) -> float:
    """1 at strength 0, `full_strength_alpha` at strength 1, linear between."""
    return 1.0 - float(np.clip(strength, 0.0, 1.0)) * (1.0 - full_strength_alpha)


class _Draw(NamedTuple):
    reference: np.ndarray
    distractor: np.ndarray
    mask: np.ndarray
    alpha: float


def _draw(rng, size, strength, config: AugmentConfig, bank: DistractorBank) -> _Draw:
    shape = (size, size, 3)
    reference = bank.draw(rng, shape)
    distractor = bank.draw(rng, shape)
    mask = band_mask((size, size), strength * config.spectrum_mask_fraction, rng)
    return _Draw(reference, distractor, mask, overlay_alpha_at(strength, config.overlay_alpha))


def augment(
    obs: FrameStack,
    strength: float,
    seed: int,
    config: Optional[AugmentConfig] = None,
    bank: Optional[DistractorBank] = None,
) -> FrameStack:
    config = config or AugmentConfig()
    strength = float(np.clip(strength, 0.0, 1.0))
    if not config.enabled or strength == 0.0:
        return obs.map_frames(np.copy)
    rng = np.random.default_rng(seed)
    draw = _draw(rng, obs.image_size, strength, config, bank or DistractorBank())

    def one(frame):
        rgb = swap_spectrum(frame[..., :3], draw.reference, draw.mask)
        rgb = random_overlay(rgb, draw.distractor, draw.alpha)
        return np.dstack([rgb, frame[..., 3]])

    return obs.map_frames(one)


def augment_batch(
    obs: torch.Tensor,
    strength: float,
    seeds: Sequence[int],
    config: Optional[AugmentConfig] = None,
    bank: Optional[DistractorBank] = None,
) -> torch.Tensor:
    """Batched `augment` over B×12×H×W pixel-code tensors, one seed per sample."""
    config = config or AugmentConfig()
    strength = float(np.clip(strength, 0.0, 1.0))
    if not config.enabled or strength == 0.0:
        return obs
    bank = bank or DistractorBank()
    b, channels, h, w = obs.shape
    frames = channels // 4
    draws = [_draw(np.random.default_rng(s), h, strength, config, bank) for s in seeds]
    if len(draws) != b:
        raise ShapeMismatchError(f"Expected {b} seeds, got {len(draws)}")

    def stacked(name, dtype):
        data = np.stack([getattr(d, name) for d in draws])
        return torch.as_tensor(data, dtype=dtype, device=obs.device)

    references = stacked("reference", torch.float64).permute(0, 3, 1, 2)
    distractors = stacked("distractor", torch.float64).permute(0, 3, 1, 2)
    masks = stacked("mask", torch.bool)[:, None, None]

    with torch.no_grad():
        x = obs.reshape(b, frames, 4, h, w).to(torch.float64)
        rgb, depth = x[:, :, :3], x[:, :, 3:]
        spectrum = torch.fft.fft2(rgb)
        donor = torch.fft.fft2(references)[:, None]
        spectrum = torch.where(masks, donor, spectrum)
        rgb = torch.fft.ifft2(spectrum).real.round().clamp(0, 255)
        alpha = draws[0].alpha
        rgb = (alpha * rgb + (1.0 - alpha) * distractors[:, None]).round().clamp(0, 255)
        out = torch.cat([rgb, depth], dim=2).reshape(b, channels, h, w)
    return out.to(obs.dtype)
