"""Per-sample image augmentations on float (H, W, C) arrays in [0, 1].

Every op draws the same random numbers whether or not it fires, so a pipeline
applied with a given generator state always consumes it identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if img.shape[:2] == (h, w):
        return img.astype(np.float32, copy=True)
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(img[:, :, c], dtype=np.float32), mode="F")
                        .resize((w, h), Image.BILINEAR)) for c in range(img.shape[2])]
    return np.stack(chans, axis=2).astype(np.float32)


@dataclass(frozen=True)
class HorizontalFlip:
    prob: float = 0.5

    def __call__(self, img, rng):
        return img[:, ::-1] if rng.random() < self.prob else img


@dataclass(frozen=True)
class SmallRotation:
    max_deg: float = 10.0
    prob: float = 1.0

    def __call__(self, img, rng):
        fire, angle = rng.random() < self.prob, rng.uniform(-self.max_deg, self.max_deg)
        if not fire or angle == 0:
            return img
        # bilinear, borders filled by edge replication
        return ndimage.rotate(img, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


@dataclass(frozen=True)
class Sharpness:
    prob: float = 0.5
    factor_range: tuple[float, float] = (0.5, 2.0)

    def __call__(self, img, rng):
        fire, factor = rng.random() < self.prob, rng.uniform(*self.factor_range)
        if not fire:
            return img
        smooth = np.stack([ndimage.convolve(img[:, :, c], _SMOOTH, mode="nearest")
                           for c in range(img.shape[2])], axis=2)
        return smooth + factor * (img - smooth)


@dataclass(frozen=True)
class Equalize:
    prob: float = 0.5

    def __call__(self, img, rng):
        if rng.random() >= self.prob:
            return img
        out = np.empty_like(img)
        for c in range(img.shape[2]):
            q = np.clip(np.round(img[:, :, c] * 255), 0, 255).astype(np.int64)
            hist = np.bincount(q.ravel(), minlength=256)
            cdf = np.cumsum(hist)
            lo = cdf[hist > 0][0]
            if cdf[-1] == lo:
                out[:, :, c] = img[:, :, c]
                continue
            lut = (cdf - lo) / (cdf[-1] - lo)
            out[:, :, c] = np.clip(lut[q], 0, 1)
        return out


@dataclass(frozen=True)
class AutoContrast:
    prob: float = 0.5

    def __call__(self, img, rng):
        if rng.random() >= self.prob:
            return img
        lo = img.min(axis=(0, 1), keepdims=True)
        hi = img.max(axis=(0, 1), keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.where(hi > lo, (img - lo) / span, img)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_RGB = np.linalg.inv(_YIQ)


@dataclass(frozen=True)
class ColorJitter:
    strength: float = 0.5
    prob: float = 0.8

    def __call__(self, img, rng):
        s = self.strength
        fire = rng.random() < self.prob
        b, c, sat = rng.uniform(1 - 0.8 * s, 1 + 0.8 * s, size=3)
        hue = rng.uniform(-0.2 * s, 0.2 * s)
        order = rng.permutation(4)
        if not fire:
            return img
        for op in order:
            if op == 0:
                img = img * b
            elif op == 1:
                img = (img - img.mean()) * c + img.mean()
            elif img.shape[2] == 3 and op == 2:
                gray = img @ _YIQ[0]
                img = gray[..., None] + sat * (img - gray[..., None])
            elif img.shape[2] == 3 and op == 3:
                yiq = img @ _YIQ.T
                cos, sin = np.cos(2 * np.pi * hue), np.sin(2 * np.pi * hue)
                i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
                yiq[..., 1], yiq[..., 2] = cos * i - sin * q, sin * i + cos * q
                img = yiq @ _RGB.T
            img = np.clip(img, 0, 1)
        return img


@dataclass(frozen=True)
class GaussianBlur:
    kernel: int = 3
    sigma_range: tuple[float, float] = (0.1, 2.0)
    prob: float = 0.5

    def __call__(self, img, rng):
        fire, sigma = rng.random() < self.prob, rng.uniform(*self.sigma_range)
        if not fire:
            return img
        radius = self.kernel // 2
        return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect",
                                       truncate=radius / sigma)


@dataclass(frozen=True)
class Resize:
    height: int
    width: int

    def __call__(self, img, rng):
        return resize_image(img, (self.height, self.width))


@dataclass(frozen=True)
class Standardize:
    mean: tuple[float, ...] = (0.5,)
    std: tuple[float, ...] = (0.25,)

    def __call__(self, img, rng):
        return (img - np.asarray(self.mean, dtype=np.float32)) / np.asarray(self.std, dtype=np.float32)


@dataclass(frozen=True)
class AugmentationPipeline:
    ops: tuple = field(default_factory=tuple)

    def apply(self, img: np.ndarray, rng: np.random.Generator | int) -> np.ndarray:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        out = np.asarray(img, dtype=np.float32)
        if out.ndim == 2:
            out = out[:, :, None]
        for op in self.ops:
            out = op(out, rng)
            if not isinstance(op, Standardize):
                out = np.clip(out, 0.0, 1.0)
        return np.ascontiguousarray(out, dtype=np.float32)

    __call__ = apply


def strong_pipeline(size: tuple[int, int] | None = None, max_deg: float = 10.0) -> AugmentationPipeline:
    """Flip, small rotation, sharpness, equalization and auto-contrast."""
    ops = [Resize(*size)] if size else []
    ops += [HorizontalFlip(0.5), SmallRotation(max_deg), Sharpness(0.5), Equalize(0.5), AutoContrast(0.5)]
    return AugmentationPipeline(tuple(ops))


def contrastive_pipeline(size: tuple[int, int] | None = None, strength: float = 0.5,
                         blur_kernel: int = 3) -> AugmentationPipeline:
    """Flip, colour jitter and Gaussian blur."""
    ops = [Resize(*size)] if size else []
    ops += [HorizontalFlip(0.5), ColorJitter(strength, 0.8), GaussianBlur(blur_kernel, (0.1, 2.0), 0.5)]
    return AugmentationPipeline(tuple(ops))


def identity_pipeline(size: tuple[int, int] | None = None) -> AugmentationPipeline:
    return AugmentationPipeline((Resize(*size),) if size else ())
