"""Experiment configuration: YAML loading, per-pretext defaults, desk scaling and derived seeds."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .lnl import CoteachingConfig, DivideMixConfig
from .pretrain import PRETEXTS, PretextConfig
from .trainers import TrainConfig

METHODS = ("ce", "coteaching", "dividemix")
DUAL_METHODS = ("coteaching", "dividemix")


class ConfigError(ValueError):
    pass


class UnknownChoiceError(ConfigError):
    """A pretext, method or encoder name outside the supported set."""


# Full-size pretext budgets.  Every pretext uses weight decay 1e-4 and cosine annealing.
PAPER_PRETEXT = {
    "rotation": dict(batch_size=256, epochs=70, optimizer="sgd", learning_rate=0.01),
    "jigsaw": dict(batch_size=128, epochs=50, optimizer="adam", learning_rate=0.001),
    "jigmag": dict(batch_size=128, epochs=50, optimizer="adam", learning_rate=0.001),
    "contrastive": dict(batch_size=256, epochs=100, optimizer="adam", learning_rate=0.001),
}
PAPER_LNL_EPOCHS = 50
PAPER_PATCH_SIZE = 64
PAPER_PERMUTATIONS = 1000

# Desk runs keep optimizer, lr, batch and schedule, and shrink the epoch budget.
DESK_EPOCH_FACTOR = 0.2
DESK_MIN_EPOCHS = 5
DESK_LNL_EPOCHS = 40
DESK_PATCH_SIZE = 16
DESK_PERMUTATIONS = 100


def derive_seed(master: int, *tags) -> int:
    """Seed for one role of one run, e.g. ``derive_seed(0, "noise", 0.6, 2)``.

    Hash of the master seed and the role tags; stable across processes and
    Python versions.
    """
    text = json.dumps([int(master), *[str(t) for t in tags]])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=4).digest(), "little") & 0x7FFFFFFF


def pretext_train_config(name: str, paper_scale: bool = False, **overrides) -> TrainConfig:
    base = dict(PAPER_PRETEXT[name], weight_decay=1e-4, lr_schedule="cosine_annealing", augment="none")
    if not paper_scale:
        base["epochs"] = max(DESK_MIN_EPOCHS, round(base["epochs"] * DESK_EPOCH_FACTOR))
    base.update(overrides)
    return TrainConfig(**base)


def lnl_train_config(paper_scale: bool = False, **overrides) -> TrainConfig:
    base = dict(epochs=PAPER_LNL_EPOCHS if paper_scale else DESK_LNL_EPOCHS, batch_size=256,
                optimizer="sgd", learning_rate=0.01, momentum=0.9, weight_decay=1e-4,
                lr_schedule="constant", augment="flip")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # or "folder"
    root: str | None = None
    test_root: str | None = None
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    num_classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 250
    pixel_noise: float = 0.12
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.kind not in ("synthetic", "folder"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not (self.root and self.test_root):
            raise ConfigError("folder datasets need dataset.root and dataset.test_root")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    noise_rates: list[float] = field(default_factory=lambda: [0.6])
    pretext: str = "none"
    lnl_method: str = "ce"
    encoder: str = "tiny"
    trials: int = 3
    seed: int = 0
    out: str = "results"
    paper_scale: bool = False
    # overrides on top of the scale defaults; keys are TrainConfig fields
    pretrain: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    pretext_options: dict = field(default_factory=dict)
    coteaching: dict = field(default_factory=dict)
    dividemix: dict = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = _build(DatasetConfig, self.dataset, "dataset")
        self.noise_rates = [float(p) for p in self.noise_rates]
        if self.pretext not in PRETEXTS:
            raise UnknownChoiceError(f"unknown pretext {self.pretext!r}; expected one of {PRETEXTS}")
        if self.lnl_method not in METHODS:
            raise UnknownChoiceError(f"unknown lnl_method {self.lnl_method!r}; expected one of {METHODS}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.noise_rates or not all(0.0 <= p <= 1.0 for p in self.noise_rates):
            raise ConfigError("noise_rates must be a nonempty list of values in [0, 1]")
        for name, section in (("pretrain", self.pretrain), ("train", self.train)):
            unknown = set(section) - {f.name for f in fields(TrainConfig)}
            if unknown:
                raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")

    # ------------------------------------------------------------------ resolved phases

    @property
    def dual(self) -> bool:
        return self.lnl_method in DUAL_METHODS

    def pretrain_config(self) -> TrainConfig:
        try:
            return pretext_train_config(self.pretext, self.paper_scale, **self.pretrain)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pretrain: {exc}") from exc

    def train_config(self) -> TrainConfig:
        try:
            return lnl_train_config(self.paper_scale, **self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def pretext_config(self) -> PretextConfig:
        opts = dict(patch_size=PAPER_PATCH_SIZE if self.paper_scale else DESK_PATCH_SIZE,
                    num_permutations=PAPER_PERMUTATIONS if self.paper_scale else DESK_PERMUTATIONS)
        opts.update(self.pretext_options)
        if "jigmag_factors" in opts:
            opts["jigmag_factors"] = tuple(opts["jigmag_factors"])
        return _build(PretextConfig, dict(opts, name=self.pretext), "pretext_options")

    def coteaching_config(self, p: float) -> CoteachingConfig:
        opts = dict(self.coteaching)
        opts.setdefault("forget_rate", p)
        return _build(CoteachingConfig, opts, "coteaching")

    def dividemix_config(self, p: float) -> DivideMixConfig:
        try:
            return DivideMixConfig.for_noise_rate(p, **self.dividemix)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dividemix: {exc}") from exc

    # ------------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["image_size"] = list(self.dataset.image_size)
        return d

    def resolved(self) -> dict:
        """Everything a run depends on, with scale defaults filled in."""
        d = self.to_dict()
        d.pop("out")
        d["resolved"] = {
            "pretrain": asdict(self.pretrain_config()) if self.pretext != "none" else None,
            "train": asdict(self.train_config()),
            "pretext": _jsonable(asdict(self.pretext_config())) if self.pretext != "none" else None,
        }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> Path:
        Path(path).write_text(yaml.safe_dump(_jsonable(self.to_dict()), sort_keys=True))
        return Path(path)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _build(ExperimentConfig, data, "config")
    return cfg.with_overrides(**overrides)
