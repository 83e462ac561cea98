"""Building blocks of the noisy-label methods: schedules, selection, label mixing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class CoteachingConfig:
    warmup_epochs: int = 10
    forget_rate: float = 0.5
    exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.forget_rate <= 1.0:
            raise ValueError("forget_rate must lie in [0, 1]")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")


@dataclass(frozen=True)
class DivideMixConfig:
    warmup_epochs: int = 10
    augmentations: int = 2
    temperature: float = 0.2
    alpha: float = 4.0
    clean_threshold: float = 0.2
    lambda_u: float = 0.0
    batch_size: int = 128
    # weight of the uniform-prior term on the mean batch prediction (keeps classes from vanishing)
    prior_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0 or self.alpha <= 0:
            raise ValueError("temperature and alpha must be positive")
        if not 0.0 <= self.clean_threshold <= 1.0:
            raise ValueError("clean_threshold must lie in [0, 1]")
        if self.lambda_u < 0 or self.augmentations < 1:
            raise ValueError("lambda_u must be >= 0 and augmentations >= 1")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")

    @classmethod
    def for_noise_rate(cls, p: float, **overrides) -> "DivideMixConfig":
        overrides.setdefault("lambda_u", 0.25 if p >= 0.8 else 0.0)
        return cls(**overrides)


def forget_rate(epoch: float, cfg: CoteachingConfig) -> float:
    """Keep fraction ``1 - tau * min((T / T_k) ** c, 1)`` for epoch ``T``."""
    ramp = min((max(epoch, 0) / cfg.warmup_epochs) ** cfg.exponent, 1.0)
    return 1.0 - cfg.forget_rate * ramp


def keep_count(n: int, keep_fraction: float) -> int:
    # ceil with slack so 0.75 * 4 does not become 4 through rounding error
    return min(n, max(0, math.ceil(keep_fraction * n - 1e-9)))


def small_loss_select(losses, keep_fraction: float) -> np.ndarray:
    """Indices of the ``ceil(R n)`` smallest losses, ties going to the lower index."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise ValueError("cannot select from an empty loss array")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep fraction must lie in (0, 1], got {keep_fraction}")
    order = np.argsort(losses, kind="stable")
    return np.sort(order[:keep_count(losses.size, keep_fraction)])


def sharpen(dist, temperature: float) -> torch.Tensor:
    dist = torch.as_tensor(dist)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    powered = dist ** (1.0 / temperature)
    total = powered.sum(dim=-1, keepdim=True)
    if torch.any(total == 0):
        raise ValueError("cannot sharpen an all-zero distribution")
    return powered / total


def sample_mix_weight(alpha: float, rng: np.random.Generator | None = None) -> float:
    rng = rng if rng is not None else np.random.default_rng()
    return float(rng.beta(alpha, alpha))


def mixup(x1, p1, x2, p2, alpha: float = 4.0, lam: float | None = None,
          rng: np.random.Generator | None = None):
    """Convex blend dominated by the first argument.

    Returns ``(x_mix, p_mix, weight)`` with ``weight = max(lam, 1 - lam) >= 0.5``.
    ``lam`` is drawn from Beta(alpha, alpha) unless given.
    """
    x1, x2, p1, p2 = (torch.as_tensor(t) for t in (x1, x2, p1, p2))
    if x1.shape != x2.shape or p1.shape != p2.shape:
        raise ValueError("mixup operands must have matching shapes")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if lam is None:
        lam = sample_mix_weight(alpha, rng)
    weight = max(lam, 1.0 - lam)
    return weight * x1 + (1 - weight) * x2, weight * p1 + (1 - weight) * p2, weight


def co_refine(observed_onehot, clean_prob, mean_prediction, temperature: float) -> torch.Tensor:
    """Blend observed labels with the model's own prediction by the clean posterior, then sharpen."""
    y = torch.as_tensor(observed_onehot)
    w = torch.as_tensor(clean_prob, dtype=y.dtype)
    if w.ndim == y.ndim - 1:
        w = w.unsqueeze(-1)
    if torch.any((w < 0) | (w > 1)):
        raise ValueError("clean posterior must lie in [0, 1]")
    return sharpen(w * y + (1 - w) * torch.as_tensor(mean_prediction, dtype=y.dtype), temperature)


def co_guess(predictions_a, predictions_b, temperature: float) -> torch.Tensor:
    """Average the M predictions of each network (2M in total) and sharpen.

    Inputs are sequences of (B, K) or (K,) probability tensors.
    """
    stack = torch.stack([torch.as_tensor(p) for p in [*predictions_a, *predictions_b]])
    return sharpen(stack.mean(dim=0), temperature)


def uniform_prior_penalty(logits: torch.Tensor) -> torch.Tensor:
    """KL(uniform || mean softmax over the batch); zero when every class gets equal mass."""
    k = logits.shape[1]
    mean_pred = torch.softmax(logits, dim=1).mean(0)
    return (torch.log(torch.tensor(1.0 / k)) - torch.log(mean_pred)).sum() / k
