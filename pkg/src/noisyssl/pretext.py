"""Self-supervised task generators (rotation, jigsaw, jigmag, contrastive pairs),
the shared permutation sets, and the NT-Xent contrastive loss."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationPipeline, resize_image

log = logging.getLogger(__name__)

JIGMAG_FACTORS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
PATCH_SIZE = 64
STD_EPS = 1e-6


class PretextError(ValueError):
    pass


# --------------------------------------------------------------------------- permutation sets


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, None, :] != b[None, :, :]).sum(-1)


def min_pairwise_hamming(perms: np.ndarray) -> int:
    if len(perms) < 2:
        return perms.shape[1] if len(perms) else 0
    d = hamming_matrix(perms, perms)
    np.fill_diagonal(d, perms.shape[1] + 1)
    return int(d.min())


@dataclass(frozen=True, eq=False)
class PermutationSet:
    grid_cells: int
    perms: np.ndarray
    seed: int = 0

    def __post_init__(self):
        perms = np.asarray(self.perms, dtype=np.int64)
        if perms.ndim != 2 or perms.shape[1] != self.grid_cells:
            raise PretextError(f"permutations must have {self.grid_cells} entries each")
        ref = np.arange(self.grid_cells)
        if not all(np.array_equal(np.sort(p), ref) for p in perms):
            raise PretextError("every entry must be a bijection on 0..g-1")
        if len(np.unique(perms, axis=0)) != len(perms):
            raise PretextError("permutation set contains duplicates")
        perms.setflags(write=False)
        object.__setattr__(self, "perms", perms)
        object.__setattr__(self, "_min_hamming", None)

    def __len__(self) -> int:
        return len(self.perms)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.perms[i]

    @property
    def min_hamming(self) -> int:
        if self._min_hamming is None:
            object.__setattr__(self, "_min_hamming", min_pairwise_hamming(self.perms))
        return self._min_hamming

    def save(self, path: str | Path) -> Path:
        """Text format: ``g P seed`` header, then one space-separated permutation per line."""
        lines = [f"{self.grid_cells} {len(self)} {self.seed}"]
        lines += [" ".join(str(int(v)) for v in p) for p in self.perms]
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> "PermutationSet":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        g, p, seed = (int(v) for v in lines[0].split())
        perms = np.array([[int(v) for v in ln.split()] for ln in lines[1:]], dtype=np.int64)
        if len(perms) != p:
            raise PretextError(f"{path}: header announces {p} permutations, found {len(perms)}")
        return cls(g, perms.reshape(p, g), seed)


def random_permutations(g: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct uniformly random permutations (first occurrences kept in draw order)."""
    if count > math.factorial(g):
        raise PretextError(f"cannot draw {count} distinct permutations of {g} elements")
    out: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    while len(out) < count:
        batch = rng.permuted(np.tile(np.arange(g), (2 * (count - len(out)), 1)), axis=1)
        for row in map(tuple, batch):
            if row not in seen:
                seen.add(row)
                out.append(row)
                if len(out) == count:
                    break
    return np.array(out, dtype=np.int64)


def generate_permutation_set(g: int, count: int, seed: int = 0, pool_factor: int = 10,
                             min_pool: int = 2000) -> PermutationSet:
    """Greedy max-min Hamming selection.

    Starts from a seeded random permutation, then repeatedly adds the candidate
    whose distance to its nearest already-chosen permutation is largest (first
    candidate wins ties).  Candidates form a seeded pool of ``pool_factor * count``
    distinct random permutations, or all of S_g when that is smaller.
    """
    total = math.factorial(g)
    if count > total:
        raise PretextError(f"P={count} exceeds {g}! = {total}")
    if count < 1:
        raise PretextError("need at least one permutation")
    rng = np.random.default_rng(seed)
    pool_size = max(pool_factor * count, min_pool)
    if pool_size >= total:
        pool = np.array(list(itertools.permutations(range(g))), dtype=np.int64)
        pool = pool[rng.permutation(len(pool))]
    else:
        pool = random_permutations(g, pool_size, rng)

    chosen = [0]
    nearest = (pool != pool[0]).sum(1)
    nearest[0] = -1
    for _ in range(count - 1):
        best = int(np.argmax(nearest))
        chosen.append(best)
        nearest = np.minimum(nearest, (pool != pool[best]).sum(1))
        nearest[chosen] = -1
    return PermutationSet(g, pool[chosen], seed)


# --------------------------------------------------------------------------- samples


@dataclass(frozen=True, eq=False)
class PretextSample:
    """``inputs`` is an (H, W, C) image, a (g, h, w, C) patch stack, or a pair of views."""

    inputs: np.ndarray | tuple[np.ndarray, np.ndarray]
    target: int | None


def pretext_rngs(seed) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for augmentation and for the task target."""
    aug, task = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(aug), np.random.default_rng(task)


def draw_target(seed, count: int) -> int:
    return int(pretext_rngs(seed)[1].integers(count))


def _pixels(img) -> np.ndarray:
    pixels = getattr(img, "pixels", img)
    pixels = np.asarray(pixels, dtype=np.float32)
    return pixels[:, :, None] if pixels.ndim == 2 else pixels


def standardize_patch(patch: np.ndarray) -> np.ndarray:
    mean, std = patch.mean(), patch.std()
    if std < STD_EPS:
        log.debug("constant patch: standardized to zeros")
        return np.zeros_like(patch)
    return ((patch - mean) / std).astype(np.float32)


def make_rotation_sample(img, pipeline: AugmentationPipeline, seed,
                         target: int | None = None) -> PretextSample:
    aug_rng, task_rng = pretext_rngs(seed)
    out = pipeline.apply(_pixels(img), aug_rng)
    if out.shape[0] != out.shape[1]:
        raise PretextError(f"rotation needs a square image, got {out.shape[:2]}")
    k = int(task_rng.integers(4)) if target is None else int(target)
    return PretextSample(np.ascontiguousarray(np.rot90(out, k, axes=(0, 1))), k)


def grid_cells(img: np.ndarray, grid: int = 3) -> list[np.ndarray]:
    h, w = img.shape[:2]
    ch, cw = h // grid, w // grid
    if ch < 1 or cw < 1:
        raise PretextError(f"image {img.shape[:2]} too small for a {grid}x{grid} grid")
    return [img[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw] for r in range(grid) for c in range(grid)]


def _shuffle(patches: list[np.ndarray], perm: np.ndarray) -> np.ndarray:
    # output slot i holds source patch perm[i]
    return np.stack([patches[j] for j in perm])


def make_jigsaw_sample(img, pipeline: AugmentationPipeline, perms: PermutationSet, seed,
                       patch_size: int = PATCH_SIZE, target: int | None = None) -> PretextSample:
    if perms.grid_cells != 9:
        raise PretextError("jigsaw uses a 3x3 grid; permutation set must have 9 cells")
    aug_rng, task_rng = pretext_rngs(seed)
    out = pipeline.apply(_pixels(img), aug_rng)
    patches = [standardize_patch(resize_image(c, (patch_size, patch_size))) for c in grid_cells(out)]
    t = int(task_rng.integers(len(perms))) if target is None else int(target)
    return PretextSample(_shuffle(patches, perms[t]), t)


def magnified_crop(img: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    side = int(math.floor(min(h, w) / factor))
    if side < 2:
        raise PretextError(f"magnification {factor} leaves a crop smaller than 2 pixels")
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    return img[y:y + side, x:x + side]


def make_jigmag_sample(img, pipeline: AugmentationPipeline, perms: PermutationSet, seed,
                       factors=JIGMAG_FACTORS, patch_size: int = PATCH_SIZE,
                       target: int | None = None) -> PretextSample:
    """Nine crops at increasing magnification (crops may overlap), shuffled by a permutation."""
    if len(factors) != 9 or perms.grid_cells != 9:
        raise PretextError("jigmag needs nine magnification factors and a 9-cell permutation set")
    if min(factors) < 1:
        raise PretextError("magnification factors must be >= 1")
    aug_rng, task_rng = pretext_rngs(seed)
    out = pipeline.apply(_pixels(img), aug_rng)
    patches = [standardize_patch(resize_image(magnified_crop(out, f, aug_rng), (patch_size, patch_size)))
               for f in factors]
    t = int(task_rng.integers(len(perms))) if target is None else int(target)
    return PretextSample(_shuffle(patches, perms[t]), t)


def make_contrastive_pair(img, pipeline: AugmentationPipeline, seed) -> PretextSample:
    rng_a, rng_b = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    pixels = _pixels(img)
    return PretextSample((pipeline.apply(pixels, rng_a), pipeline.apply(pixels, rng_b)), None)


# --------------------------------------------------------------------------- NT-Xent


def nt_xent_loss(embeddings, temperature: float = 0.07) -> torch.Tensor:
    """Normalized-temperature cross-entropy over a [a_1..a_N, b_1..b_N] batch.

    Each row's positive is its partner view; the other 2N-2 rows are negatives.
    Averaged over all 2N anchors.
    """
    z = torch.as_tensor(embeddings)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if z.ndim != 2 or z.shape[0] % 2:
        raise ValueError("embeddings must be a (2N, D) matrix")
    n = z.shape[0] // 2
    if n < 2:
        raise ValueError("NT-Xent needs N >= 2 pairs so that negatives exist")
    z = F.normalize(z, dim=1)
    logits = (z @ z.T) / temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = (torch.arange(2 * n, device=z.device) + n) % (2 * n)
    return F.cross_entropy(logits, targets)
