"""Two-phase pipeline: pretext pretraining, then noisy-label retraining over noise rates and trials."""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, UnknownChoiceError, derive_seed
from .data import (DatasetSplit, NoiseSpec, SyntheticSpec, inject_symmetric_noise, load_image_folder,
                   make_synthetic_splits, save_records)
from .metrics import (EpochMonitor, TrialSummary, aggregate_trials, best_last, read_summary_csv,
                      read_trials_csv, write_summary_csv, write_trials_csv)
from .model import (CheckpointError, EncoderConfig, Head, build_model, encoder_digest,
                    export_filter_grid, load_checkpoint, load_into, save_checkpoint)
from .pretext import generate_permutation_set
from .pretrain import pretrain
from .trainers import train_coteaching, train_cross_entropy, train_dividemix

log = logging.getLogger(__name__)

NONE_MARKER = "none.marker.json"


class ResultsStore:
    """Directory layout of one results folder.

    ``checkpoints/``, ``runs/<method>-<pretext>/p<p>/trial<k>/``, ``plots/``,
    ``trials.csv``, ``summary.csv``, ``config.yaml`` and ``manifest.json``
    (artifact path -> config hash that produced it).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def trials_csv(self) -> Path:
        return self.root / "trials.csv"

    @property
    def summary_csv(self) -> Path:
        return self.root / "summary.csv"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def run_dir(self, method: str, pretext: str, p: float, trial: int) -> Path:
        return self.root / "runs" / f"{method}-{pretext}" / f"p{p:g}" / f"trial{trial}"

    def checkpoint_path(self, pretext: str, tag: str) -> Path:
        return self.checkpoints / f"{pretext}_{tag}.npz"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def register(self, paths, config_hash: str) -> None:
        manifest = self.manifest()
        for p in paths:
            manifest[str(Path(p).relative_to(self.root))] = config_hash
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def echo_config(self, cfg: ExperimentConfig, verb: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = cfg.dump(self.root / f"config.{verb}.yaml")
        self.register([path], cfg.config_hash())
        return path


# --------------------------------------------------------------------------- data


def load_data(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        spec = SyntheticSpec(num_classes=ds.num_classes, train_per_class=ds.train_per_class,
                             test_per_class=ds.test_per_class, image_size=ds.image_size,
                             channels=ds.channels, pixel_noise=ds.pixel_noise)
        return make_synthetic_splits(spec, seed=ds.seed)
    mode = "RGB" if ds.channels == 3 else "L"
    train = load_image_folder(ds.root, ds.image_size, name="train", mode=mode)
    test = load_image_folder(ds.test_root, ds.image_size, class_names=train.class_names,
                             name="test", mode=mode)
    return train, test


def encoder_config(cfg: ExperimentConfig, train: DatasetSplit) -> EncoderConfig:
    try:
        return EncoderConfig.preset(cfg.encoder, input_size=train.image_shape)
    except ValueError as exc:
        raise UnknownChoiceError(str(exc)) from exc


def _net_tags(cfg: ExperimentConfig) -> tuple[str, ...]:
    return ("a", "b") if cfg.dual else ("a",)


# --------------------------------------------------------------------------- pretrain


def run_pretrain(cfg: ExperimentConfig, store: ResultsStore) -> list[Path]:
    """Pretrain one encoder (two, from independent seeds, for dual-network methods)."""
    store.checkpoints.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    if cfg.pretext == "none":
        marker = store.checkpoints / NONE_MARKER
        marker.write_text(json.dumps({"pretext": "none", "config_hash": chash}, sort_keys=True) + "\n")
        store.register([marker], chash)
        log.info("pretext 'none': downstream training uses default initialization")
        return [marker]

    train, _ = load_data(cfg)
    pcfg = cfg.pretext_config()
    tcfg = cfg.pretrain_config()
    enc = encoder_config(cfg, train)
    perms = None
    if cfg.pretext in ("jigsaw", "jigmag"):
        perms = generate_permutation_set(9, pcfg.num_permutations, pcfg.permutation_seed)
        perm_path = perms.save(store.checkpoints / f"permutations_{pcfg.num_permutations}.txt")
        store.register([perm_path], chash)

    dataset_name = Path(cfg.dataset.root).name if cfg.dataset.kind == "folder" else "synthetic"
    paths = []
    store.plots.mkdir(parents=True, exist_ok=True)
    for tag in _net_tags(cfg):
        seed = derive_seed(cfg.seed, "pretrain", tag)
        net = build_model(enc, pcfg.head(), seed=seed)
        history = pretrain(net, train.pixels, pcfg, replace(tcfg, seed=seed), perms=perms)
        provenance = {"pretext": cfg.pretext, "dataset": dataset_name, "epochs": tcfg.epochs,
                      "seed": seed, "config_hash": chash,
                      "final_loss": history[-1]["loss"] if history else None}
        path = save_checkpoint(net, provenance, store.checkpoint_path(cfg.pretext, tag))
        grid = export_filter_grid(net, store.plots / f"filters_{cfg.pretext}_{tag}.png", seed=seed)
        log.info("pretrained %s network %s: %s (encoder %s)", cfg.pretext, tag, path,
                 encoder_digest(net)[:12])
        paths.append(path)
        store.register([path, grid], chash)
    return paths


# --------------------------------------------------------------------------- train


def _checkpoints_for(cfg: ExperimentConfig, store: ResultsStore) -> list[Path] | None:
    if cfg.pretext == "none":
        return None
    tags = _net_tags(cfg)
    paths = [Path(p) for p in cfg.checkpoints] or [store.checkpoint_path(cfg.pretext, t) for t in tags]
    if len(paths) < len(tags):
        raise CheckpointError(f"{cfg.lnl_method} needs {len(tags)} checkpoints, config lists {len(paths)}")
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise CheckpointError(f"missing checkpoint(s) {missing}; run 'pretrain' with this config first")
    return paths[:len(tags)]


def _build_networks(cfg, enc, k, trial_seed, ckpts):
    nets = []
    for i, tag in enumerate(_net_tags(cfg)):
        net = build_model(enc, Head.classifier(k), seed=derive_seed(trial_seed, "init", tag))
        if ckpts is not None:
            ckpt = load_checkpoint(ckpts[i])
            try:
                load_into(net, ckpt)
            except CheckpointError as exc:
                raise CheckpointError(f"{ckpts[i]} does not fit encoder preset "
                                      f"{cfg.encoder!r}: {exc}") from exc
        nets.append(net)
    return nets


def run_trial(cfg: ExperimentConfig, train: DatasetSplit, test: DatasetSplit, p: float, trial: int,
              ckpts: list[Path] | None = None):
    """One (noise rate, trial) run. Returns (RunRecord, noisy split, trial seed)."""
    trial_seed = derive_seed(cfg.seed, "trial", trial)
    noisy = inject_symmetric_noise(train, NoiseSpec(p, train.num_classes, derive_seed(trial_seed, "noise")))
    enc = encoder_config(cfg, train)
    nets = _build_networks(cfg, enc, train.num_classes, trial_seed, ckpts)
    tcfg = replace(cfg.train_config(), seed=derive_seed(trial_seed, "train", p))
    monitor = EpochMonitor(noisy, test)
    if cfg.lnl_method == "ce":
        record = train_cross_entropy(nets[0], noisy, tcfg, test, monitor=monitor)
    elif cfg.lnl_method == "coteaching":
        record = train_coteaching(nets[0], nets[1], noisy, tcfg, cfg.coteaching_config(p), test,
                                  monitor=monitor)
    else:
        record = train_dividemix(nets[0], nets[1], noisy, tcfg, cfg.dividemix_config(p), test,
                                 monitor=monitor)
    record.meta.update(method=cfg.lnl_method, pretext=cfg.pretext, p=p, seed=trial_seed, trial=trial,
                       dataset=cfg.dataset.kind, config_hash=cfg.config_hash())
    return record, noisy, trial_seed


def _merge_trials(store: ResultsStore, new: list[TrialSummary]) -> list[TrialSummary]:
    keys = {(t.method, t.pretext, t.p, t.seed) for t in new}
    old = read_trials_csv(store.trials_csv) if store.trials_csv.exists() else []
    merged = [t for t in old if (t.method, t.pretext, t.p, t.seed) not in keys] + new
    return sorted(merged, key=lambda t: (t.method, t.pretext, t.p, t.seed))


def run_train(cfg: ExperimentConfig, store: ResultsStore) -> list[TrialSummary]:
    """Every (noise rate, trial) pair; writes run traces, trials.csv and summary.csv.

    Results from earlier configs in the same folder are kept, so several
    method/pretext combinations can share one summary.
    """
    ckpts = _checkpoints_for(cfg, store)
    train, test = load_data(cfg)
    chash = cfg.config_hash()
    summaries = []
    for p in cfg.noise_rates:
        for trial in range(cfg.trials):
            record, noisy, trial_seed = run_trial(cfg, train, test, p, trial, ckpts)
            run_dir = store.run_dir(cfg.lnl_method, cfg.pretext, p, trial)
            run_dir.mkdir(parents=True, exist_ok=True)
            run_path = record.save(run_dir / "run.jsonl")
            save_records(noisy, run_dir / "noise.jsonl")
            store.register([run_path, run_path.with_suffix(".meta.json"), run_dir / "noise.jsonl"], chash)
            s = best_last(record, method=cfg.lnl_method, pretext=cfg.pretext, p=p, seed=trial_seed)
            log.info("%s/%s p=%g trial %d: BEST %.4f LAST %.4f", cfg.lnl_method, cfg.pretext, p,
                     trial, s.best, s.last)
            summaries.append(s)
    merged = _merge_trials(store, summaries)
    write_trials_csv(merged, store.trials_csv)
    write_summary_csv(aggregate_trials(merged), store.summary_csv)
    store.register([store.trials_csv, store.summary_csv], chash)
    return summaries


# --------------------------------------------------------------------------- report


def render_report(store: ResultsStore) -> str:
    if not store.summary_csv.exists():
        raise FileNotFoundError(f"{store.summary_csv} not found; run 'train' first")
    groups = read_summary_csv(store.summary_csv)
    lines = ["| method | pretext | p | BEST | LAST | trials |", "|---|---|---|---|---|---|"]
    for g in groups:
        lines.append(f"| {g.method} | {g.pretext} | {g.p:g} | {g.best_mean:.4f} ± {g.best_std:.4f} "
                     f"| {g.last_mean:.4f} ± {g.last_std:.4f} | {g.trials} |")
    return "\n".join(lines) + "\n"

