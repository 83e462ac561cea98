"""Noisy-label training loops: plain cross-entropy, Co-teaching and DivideMix.

Trainers receive data through :class:`~noisyssl.data.TrainView` (observed
labels only).  Per-epoch metrics come from an :class:`~noisyssl.metrics.EpochMonitor`
whose output is logged but never fed back into training.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetError, DatasetSplit, TrainView, as_trainer_view
from .gmm import DegenerateLossesError, fit_gmm_1d
from .lnl import (CoteachingConfig, DivideMixConfig, co_guess, co_refine, forget_rate,
                  mixup, small_loss_select, uniform_prior_penalty)
from .metrics import EpochMonitor, RunRecord, SelectionMask
from .model import Network, predict_logits, to_nchw

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    augment: str = "flip"  # "flip", "flip_shift" or "none"
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch size and learning rate positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine_annealing"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def make_optimizer(net: Network, cfg: TrainConfig):
    params = [p for name, p in net.named_parameters()
              if not (cfg.freeze_encoder and name.startswith("encoder."))]
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.lr_schedule == "cosine_annealing":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    else:
        sched = None
    return opt, sched


def epoch_batches(n: int, batch_size: int, gen: torch.Generator) -> list[np.ndarray]:
    perm = torch.randperm(n, generator=gen).numpy()
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def augment_batch(x: torch.Tensor, mode: str, gen: torch.Generator, shift: int = 2) -> torch.Tensor:
    """Random horizontal flip (and optional reflect-padded translation) of an NCHW batch."""
    if mode == "none":
        return x
    flip = torch.rand(len(x), generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    if mode == "flip_shift":
        h, w = x.shape[-2:]
        padded = F.pad(x, (shift, shift, shift, shift), mode="reflect")
        offs = torch.randint(0, 2 * shift + 1, (len(x), 2), generator=gen)
        x = torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs.tolist())])
    return x


def _default_monitor(data, eval_split, monitor):
    if monitor is not None:
        return monitor
    return EpochMonitor(data if isinstance(data, DatasetSplit) else None, eval_split)


def _check_nonempty(view: TrainView):
    if len(view) == 0:
        raise DatasetError("cannot train on an empty split")


def _run_meta(method: str, cfg: TrainConfig, **extra) -> dict:
    return {"method": method, "seed": cfg.seed, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, **extra}


# --------------------------------------------------------------------------- cross-entropy


def train_cross_entropy(model: Network, noisy_split: DatasetSplit | TrainView, cfg: TrainConfig,
                        eval_split: DatasetSplit, monitor: EpochMonitor | None = None) -> RunRecord:
    """Standard cross-entropy on observed labels. ``model`` is trained in place."""
    view = as_trainer_view(noisy_split)
    _check_nonempty(view)
    monitor = _default_monitor(noisy_split, eval_split, monitor)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    x_all = to_nchw(view.pixels)
    y_all = torch.tensor(view.labels)
    record = RunRecord(meta=_run_meta("ce", cfg))

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for idx in epoch_batches(len(view), cfg.batch_size, gen):
            x = augment_batch(x_all[idx], cfg.augment, gen)
            loss = F.cross_entropy(model(x), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if sched is not None:
            sched.step()
        record.append(monitor(epoch, model))
    return record


# --------------------------------------------------------------------------- co-teaching


def _same_parameters(a: Network, b: Network) -> bool:
    return all(torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


def train_coteaching(model_a: Network, model_b: Network, noisy_split: DatasetSplit | TrainView,
                     cfg: TrainConfig, ct_cfg: CoteachingConfig, eval_split: DatasetSplit,
                     monitor: EpochMonitor | None = None,
                     on_batch: Callable[[dict], None] | None = None) -> RunRecord:
    """Co-teaching: each network keeps its small-loss fraction of every batch and hands
    it to its peer, which updates only on those samples.

    Epochs are numbered from 1, so the keep fraction reaches ``1 - forget_rate`` at
    epoch ``warmup_epochs``.  Test accuracy is reported for ``model_a``; the peer's
    goes into ``test_acc_peer``.  ``on_batch`` receives the per-batch selections.
    """
    view = as_trainer_view(noisy_split)
    _check_nonempty(view)
    if _same_parameters(model_a, model_b):
        warnings.warn("co-teaching networks start from identical parameters; "
                      "expect confirmation bias", RuntimeWarning, stacklevel=2)
    monitor = _default_monitor(noisy_split, eval_split, monitor)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt_a, sched_a = make_optimizer(model_a, cfg)
    opt_b, sched_b = make_optimizer(model_b, cfg)
    x_all = to_nchw(view.pixels)
    y_all = torch.tensor(view.labels)
    n = len(view)
    record = RunRecord(meta=_run_meta("coteaching", cfg, forget_rate=ct_cfg.forget_rate,
                                      warmup_epochs=ct_cfg.warmup_epochs))

    for epoch in range(1, cfg.epochs + 1):
        keep = max(forget_rate(epoch, ct_cfg), 1e-12)
        model_a.train()
        model_b.train()
        chosen_by_a = np.zeros(n, dtype=bool)
        losses_a = np.zeros(n)
        for idx in epoch_batches(n, cfg.batch_size, gen):
            x = augment_batch(x_all[idx], cfg.augment, gen)
            y = y_all[idx]
            loss_a = F.cross_entropy(model_a(x), y, reduction="none")
            loss_b = F.cross_entropy(model_b(x), y, reduction="none")
            sel_a = small_loss_select(loss_a.detach().numpy(), keep)
            sel_b = small_loss_select(loss_b.detach().numpy(), keep)
            update_a, update_b = sel_b, sel_a
            if on_batch is not None:
                on_batch({"epoch": epoch, "batch": idx, "keep": keep, "selected_a": sel_a,
                          "selected_b": sel_b, "update_a": update_a, "update_b": update_b})
            opt_a.zero_grad()
            opt_b.zero_grad()
            (loss_a[torch.from_numpy(update_a)].mean() + loss_b[torch.from_numpy(update_b)].mean()).backward()
            opt_a.step()
            opt_b.step()
            chosen_by_a[idx[sel_a]] = True
            losses_a[idx] = loss_a.detach().numpy()
        for s in (sched_a, sched_b):
            if s is not None:
                s.step()
        mask = SelectionMask(chosen_by_a, losses_a)
        record.selections.append(mask)
        record.append(monitor(epoch, model_a, mask=mask, peer=model_b))
    return record


# --------------------------------------------------------------------------- DivideMix


def per_sample_losses(net: Network, view: TrainView, batch_size: int = 500) -> np.ndarray:
    logits = predict_logits(net, view.pixels, batch_size)
    return F.cross_entropy(logits, torch.tensor(view.labels), reduction="none").numpy()


def divide_by_loss(net: Network, view: TrainView, dm_cfg: DivideMixConfig, seed: int):
    """Fit the loss mixture for ``net``; returns (clean posterior, fit or None if degenerate)."""
    losses = per_sample_losses(net, view)
    try:
        fit = fit_gmm_1d(losses, seed=seed)
    except DegenerateLossesError:
        log.warning("degenerate per-sample losses; treating every sample as labeled")
        return np.ones(len(view)), None
    return fit.clean_posterior, fit


def dividemix_loss(logits: torch.Tensor, targets: torch.Tensor, n_labeled: int,
                   lambda_u: float) -> torch.Tensor:
    """Soft cross-entropy on the labeled rows plus ``lambda_u`` times squared error on the rest."""
    lx = -(F.log_softmax(logits[:n_labeled], dim=1) * targets[:n_labeled]).sum(1).mean()
    if n_labeled == len(logits) or lambda_u == 0:
        return lx
    probs_u = torch.softmax(logits[n_labeled:], dim=1)
    lu = ((probs_u - targets[n_labeled:]) ** 2).mean()
    return lx + lambda_u * lu


def _dividemix_epoch(net: Network, peer: Network, opt, view: TrainView, x_all: torch.Tensor,
                     clean_prob: np.ndarray, dm_cfg: DivideMixConfig, cfg: TrainConfig,
                     gen: torch.Generator, rng: np.random.Generator,
                     loss_fn=dividemix_loss) -> None:
    labeled = np.flatnonzero(clean_prob >= dm_cfg.clean_threshold)
    unlabeled = np.flatnonzero(clean_prob < dm_cfg.clean_threshold)
    if len(labeled) == 0:
        log.warning("no sample passed the clean threshold; skipping this network's epoch")
        return
    k = view.num_classes
    onehot = F.one_hot(torch.tensor(view.labels), k).float()
    w_all = torch.from_numpy(clean_prob).float()
    bs = dm_cfg.batch_size
    lab_order = labeled[torch.randperm(len(labeled), generator=gen).numpy()]
    unl_order = unlabeled[torch.randperm(len(unlabeled), generator=gen).numpy()] if len(unlabeled) else unlabeled
    n_iter = math.ceil(len(labeled) / bs)
    aug = cfg.augment if cfg.augment != "flip" else "flip_shift"

    net.train()
    peer.eval()
    for it in range(n_iter):
        li = lab_order[it * bs:(it + 1) * bs]
        xb = x_all[li]
        xs = [augment_batch(xb, aug, gen) for _ in range(dm_cfg.augmentations)]
        ui = np.take(unl_order, np.arange(it * bs, it * bs + len(li)), mode="wrap") if len(unl_order) else li[:0]
        us = [augment_batch(x_all[ui], aug, gen) for _ in range(dm_cfg.augmentations)] if len(ui) else []

        with torch.no_grad():
            px = torch.stack([torch.softmax(net(x), 1) for x in xs]).mean(0)
            targets_x = co_refine(onehot[li], w_all[li], px, dm_cfg.temperature)
            if us:
                targets_u = co_guess([torch.softmax(net(u), 1) for u in us],
                                     [torch.softmax(peer(u), 1) for u in us], dm_cfg.temperature)

        inputs = torch.cat(xs + us)
        targets = torch.cat([targets_x] * len(xs) + ([targets_u] * len(us) if us else []))
        partner = torch.randperm(len(inputs), generator=gen)
        mixed_x, mixed_t, _ = mixup(inputs, targets, inputs[partner], targets[partner],
                                    dm_cfg.alpha, rng=rng)
        logits = net(mixed_x)
        loss = loss_fn(logits, mixed_t, len(li) * len(xs), dm_cfg.lambda_u)
        if dm_cfg.prior_weight:
            loss = loss + dm_cfg.prior_weight * uniform_prior_penalty(logits)
        opt.zero_grad()
        loss.backward()
        opt.step()


def train_dividemix(model_a: Network, model_b: Network, noisy_split: DatasetSplit | TrainView,
                    cfg: TrainConfig, dm_cfg: DivideMixConfig, eval_split: DatasetSplit,
                    monitor: EpochMonitor | None = None, loss_fn=dividemix_loss) -> RunRecord:
    """DivideMix with cross-entropy warm-up, per-network loss GMMs and co-divided MixMatch.

    Each network trains on the clean/noisy division computed from its peer's loss
    mixture.  Logged selection statistics describe ``model_a``'s division.
    """
    view = as_trainer_view(noisy_split)
    _check_nonempty(view)
    if _same_parameters(model_a, model_b):
        warnings.warn("DivideMix networks start from identical parameters; "
                      "expect confirmation bias", RuntimeWarning, stacklevel=2)
    monitor = _default_monitor(noisy_split, eval_split, monitor)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt_a, sched_a = make_optimizer(model_a, cfg)
    opt_b, sched_b = make_optimizer(model_b, cfg)
    x_all = to_nchw(view.pixels)
    y_all = torch.tensor(view.labels)
    record = RunRecord(meta=_run_meta("dividemix", cfg, lambda_u=dm_cfg.lambda_u,
                                      clean_threshold=dm_cfg.clean_threshold,
                                      temperature=dm_cfg.temperature,
                                      warmup_epochs=dm_cfg.warmup_epochs))

    for epoch in range(1, cfg.epochs + 1):
        mask = fit_a = None
        if epoch <= dm_cfg.warmup_epochs:
            for net, opt in ((model_a, opt_a), (model_b, opt_b)):
                net.train()
                for idx in epoch_batches(len(view), dm_cfg.batch_size, gen):
                    x = augment_batch(x_all[idx], cfg.augment, gen)
                    loss = F.cross_entropy(net(x), y_all[idx])
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
        else:
            prob_a, fit_a = divide_by_loss(model_a, view, dm_cfg, cfg.seed)
            prob_b, _ = divide_by_loss(model_b, view, dm_cfg, cfg.seed)
            _dividemix_epoch(model_a, model_b, opt_a, view, x_all, prob_b, dm_cfg, cfg, gen, rng, loss_fn)
            _dividemix_epoch(model_b, model_a, opt_b, view, x_all, prob_a, dm_cfg, cfg, gen, rng, loss_fn)
            mask = SelectionMask(prob_a >= dm_cfg.clean_threshold, prob_a)
            record.selections.append(mask)
        for s in (sched_a, sched_b):
            if s is not None:
                s.step()
        record.append(monitor(epoch, model_a, mask=mask, gmm=fit_a, peer=model_b))
    return record
