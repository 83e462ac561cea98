"""Training loops for the four self-supervised tasks."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationPipeline, contrastive_pipeline, strong_pipeline
from .model import Head, Network
from .pretext import (JIGMAG_FACTORS, PATCH_SIZE, PermutationSet, generate_permutation_set,
                      make_contrastive_pair, make_jigmag_sample, make_jigsaw_sample,
                      make_rotation_sample, nt_xent_loss)
from .trainers import TrainConfig, epoch_batches, make_optimizer

log = logging.getLogger(__name__)

PRETEXTS = ("none", "rotation", "jigsaw", "jigmag", "contrastive")


@dataclass(frozen=True)
class PretextConfig:
    name: str = "rotation"
    num_permutations: int = 1000
    permutation_seed: int = 0
    patch_size: int = PATCH_SIZE
    jigmag_factors: tuple[float, ...] = JIGMAG_FACTORS
    temperature: float = 0.07
    projection_dim: int = 64
    jitter_strength: float = 0.5

    def __post_init__(self):
        if self.name not in PRETEXTS:
            raise ValueError(f"unknown pretext {self.name!r}; expected one of {PRETEXTS}")

    def head(self) -> Head | None:
        return {
            "none": None,
            "rotation": Head.rotation(),
            "jigsaw": Head.permutation(self.num_permutations, 9),
            "jigmag": Head.permutation(self.num_permutations, 9),
            "contrastive": Head.projection(self.projection_dim),
        }[self.name]

    def pipeline(self) -> AugmentationPipeline:
        if self.name == "contrastive":
            return contrastive_pipeline(strength=self.jitter_strength)
        return strong_pipeline()


def _stack_nchw(arrays: list[np.ndarray]) -> torch.Tensor:
    batch = np.stack(arrays)
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(batch, -1, -3)))


def pretrain(net: Network, pixels: np.ndarray, pcfg: PretextConfig, cfg: TrainConfig,
             perms: PermutationSet | None = None,
             pipeline: AugmentationPipeline | None = None) -> list[dict]:
    """Train ``net`` (whose head must match the task) on unlabeled images in place.

    Per-sample randomness is keyed by (seed, epoch, sample index).  Returns one
    ``{epoch, loss, acc}`` row per epoch (acc is None for the contrastive task).
    """
    if pcfg.name == "none":
        return []
    if net.head_spec != pcfg.head():
        raise ValueError(f"network head {net.head_spec} does not fit pretext {pcfg.name!r}")
    pipeline = pipeline or pcfg.pipeline()
    if pcfg.name in ("jigsaw", "jigmag") and perms is None:
        perms = generate_permutation_set(9, pcfg.num_permutations, pcfg.permutation_seed)

    gen = torch.Generator().manual_seed(cfg.seed)
    opt, sched = make_optimizer(net, cfg)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        total, correct, seen = 0.0, 0, 0
        for idx in epoch_batches(len(pixels), cfg.batch_size, gen):
            seeds = [(cfg.seed, epoch, int(i)) for i in idx]
            if pcfg.name == "contrastive":
                if len(idx) < 2:
                    continue
                pairs = [make_contrastive_pair(pixels[i], pipeline, s).inputs for i, s in zip(idx, seeds)]
                x = _stack_nchw([a for a, _ in pairs] + [b for _, b in pairs])
                loss = nt_xent_loss(net(x), pcfg.temperature)
                hits = 0
            else:
                if pcfg.name == "rotation":
                    samples = [make_rotation_sample(pixels[i], pipeline, s) for i, s in zip(idx, seeds)]
                elif pcfg.name == "jigsaw":
                    samples = [make_jigsaw_sample(pixels[i], pipeline, perms, s, pcfg.patch_size)
                               for i, s in zip(idx, seeds)]
                else:
                    samples = [make_jigmag_sample(pixels[i], pipeline, perms, s, pcfg.jigmag_factors,
                                                  pcfg.patch_size) for i, s in zip(idx, seeds)]
                x = _stack_nchw([s.inputs for s in samples])
                y = torch.tensor([s.target for s in samples])
                logits = net(x)
                loss = F.cross_entropy(logits, y)
                hits = int((logits.argmax(1) == y).sum())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += hits
            seen += len(idx)
        if sched is not None:
            sched.step()
        row = {"epoch": epoch, "loss": total / max(seen, 1),
               "acc": None if pcfg.name == "contrastive" else correct / max(seen, 1)}
        log.info("pretrain %s epoch %d loss %.4f", pcfg.name, epoch, row["loss"])
        history.append(row)
    return history
