"""Image-level strong perturbations: flip, color jitter, random grayscale.

Images are H x W x 3 float arrays in [0, 1]; every op preserves shape and
range and is deterministic given the rng stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng

# ITU-R 601 luma weights; fixed so grayscale conversion is bit-exact testable.
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentConfig:
    flip_probability: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_probability: float = 0.1

    def __post_init__(self):
        for name in ("flip_probability", "grayscale_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation"):
            s = getattr(self, name)
            if s < 0:
                raise ValueError(f"{name} strength must be >= 0, got {s}")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    return img


def horizontal_flip(img: np.ndarray, rng: Rng, p: float) -> np.ndarray:
    img = _check_image(img)
    if rng.bernoulli(p):
        return np.ascontiguousarray(img[:, ::-1, :])
    return img


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA.astype(img.dtype)


def color_jitter(img: np.ndarray, rng: Rng,
                 brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Brightness scale, contrast blend toward the image mean, saturation blend
    toward per-pixel luma, applied in a random order; result clamped to [0, 1].

    Draw order: one 3-permutation for the op order, then one factor per op as
    it is applied (skipped for ops whose strength is zero).
    """
    img = _check_image(img).astype(np.float32, copy=True)
    order = rng.permutation(3)
    # zero-strength ops are skipped outright so they stay bit-exact identities
    for op in order:
        if op == 0 and brightness > 0:
            u = rng.uniform(1.0 - brightness, 1.0 + brightness)
            img = img * np.float32(u)
        elif op == 1 and contrast > 0:
            u = rng.uniform(1.0 - contrast, 1.0 + contrast)
            mean = np.float32(img.mean())
            img = mean + np.float32(u) * (img - mean)
        elif op == 2 and saturation > 0:
            u = rng.uniform(1.0 - saturation, 1.0 + saturation)
            gray = _luma(img)[:, :, None]
            img = gray + np.float32(u) * (img - gray)
    return np.clip(img, 0.0, 1.0)


def random_grayscale(img: np.ndarray, rng: Rng, p: float) -> np.ndarray:
    img = _check_image(img)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"grayscale probability must be in [0, 1], got {p}")
    if rng.bernoulli(p):
        gray = _luma(img.astype(np.float32))
        return np.repeat(gray[:, :, None], 3, axis=2)
    return img


def strong_augment(img: np.ndarray, rng: Rng, cfg: AugmentConfig) -> np.ndarray:
    """Flip -> jitter -> grayscale with independent sub-draws from ``rng``."""
    img = horizontal_flip(img, rng, cfg.flip_probability)
    img = color_jitter(img, rng, cfg.brightness, cfg.contrast, cfg.saturation)
    return random_grayscale(img, rng, cfg.grayscale_probability)


def augment_batch(x: np.ndarray, rng: Rng, cfg: AugmentConfig) -> np.ndarray:
    """Apply ``strong_augment`` to every image of an N x 3 x H x W batch."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an Nx3xHxW batch, got shape {x.shape}")
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = strong_augment(x[i].transpose(1, 2, 0), rng, cfg).transpose(2, 0, 1)
    return out
