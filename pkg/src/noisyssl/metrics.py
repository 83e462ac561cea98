"""Evaluation: BEST/LAST, memorization, selection quality, trial aggregation and CSV export."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetSplit
from .model import predict_logits

log = logging.getLogger(__name__)

LAST_WINDOW = 5

ROW_FIELDS = (
    "epoch", "train_acc_observed", "test_acc", "memorization_rate", "selected_count",
    "selection_precision", "selection_recall", "per_class_selected", "gmm",
)


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # per-epoch SelectionMask objects; kept in memory only
    selections: list = field(default_factory=list, repr=False)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs in a run record must be strictly increasing")
        for key in ("train_acc_observed", "test_acc"):
            v = row.get(key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key}={v} outside [0, 1]")
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [r.get(key) for r in self.rows]

    @property
    def test_acc(self) -> list[float]:
        return self.column("test_acc")

    def __len__(self) -> int:
        return len(self.rows)

    def save(self, path: str | Path) -> Path:
        """JSON-lines, one row per epoch; metadata goes next to it as ``<name>.meta.json``."""
        path = Path(path)
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        path.with_suffix(".meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        rec = cls(meta=meta)
        for r in rows:
            rec.append(r)
        return rec


@dataclass(frozen=True)
class TrialSummary:
    best: float
    last: float
    seed: int = 0
    method: str = ""
    pretext: str = ""
    p: float = 0.0


def best_last(record: RunRecord | Sequence[float], window: int = LAST_WINDOW,
              **labels) -> TrialSummary:
    """BEST is the maximum test accuracy; LAST the mean of the final ``window`` epochs."""
    accs = record.test_acc if isinstance(record, RunRecord) else list(record)
    if len(accs) < window:
        raise ValueError(f"need at least {window} epochs for LAST, got {len(accs)}")
    if isinstance(record, RunRecord):
        for key in ("seed", "method", "pretext", "p"):
            if key in record.meta:
                labels.setdefault(key, record.meta[key])
    best = float(max(accs))
    last = float(math.fsum(accs[-window:]) / window)
    return TrialSummary(best=best, last=last, **labels)


# --------------------------------------------------------------------------- memorization


def memorization_stats(predicted: np.ndarray, split: DatasetSplit) -> dict:
    corrupted = split.is_corrupted
    n_corrupted = int(corrupted.sum())
    if n_corrupted == 0:
        return {"memorization_rate": 0.0, "corrupted_clean_acc": None, "n_corrupted": 0}
    pred = np.asarray(predicted)[corrupted]
    return {
        "memorization_rate": float(np.mean(pred == split.observed_labels[corrupted])),
        "corrupted_clean_acc": float(np.mean(pred == split.clean_labels[corrupted])),
        "n_corrupted": n_corrupted,
    }


def memorization_rate(model, split: DatasetSplit) -> float:
    """Fraction of corrupted training samples the model assigns to their (wrong) observed label.

    Defined as 0.0 when no sample is corrupted; a warning is logged in that case.
    """
    predicted = predict_logits(model, split.pixels).argmax(1).numpy()
    stats = memorization_stats(predicted, split)
    if stats["n_corrupted"] == 0:
        log.warning("memorization rate requested on a split without corrupted samples")
    return stats["memorization_rate"]


# --------------------------------------------------------------------------- selection


@dataclass(frozen=True)
class SelectionMask:
    selected: np.ndarray
    losses: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "selected", np.asarray(self.selected, dtype=bool))

    @classmethod
    def from_indices(cls, n: int, indices, losses=None) -> "SelectionMask":
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = True
        return cls(mask, losses)

    def __len__(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class SelectionStats:
    precision: float | None
    recall: float | None
    per_class: list[int]
    selected_count: int


def selection_metrics(mask: SelectionMask, split: DatasetSplit) -> SelectionStats:
    if len(mask) != len(split):
        raise ValueError("selection mask is not aligned with the split")
    sel = mask.selected
    clean = ~split.is_corrupted
    hits = int(np.sum(sel & clean))
    n_sel = int(sel.sum())
    n_clean = int(clean.sum())
    hist = np.bincount(split.observed_labels[sel], minlength=split.num_classes)
    return SelectionStats(
        precision=hits / n_sel if n_sel else None,
        recall=hits / n_clean if n_clean else None,
        per_class=[int(c) for c in hist],
        selected_count=n_sel,
    )


# --------------------------------------------------------------------------- per-epoch monitor


class EpochMonitor:
    """Computes one RunRecord row per epoch.

    ``train`` may be a full DatasetSplit (enables memorization and selection
    columns), a TrainView (observed-label accuracy only) or None.

    This is the only place that touches clean labels during a run; trainers
    hand it the model and their selection, and never read its output back.
    """

    def __init__(self, train, test: DatasetSplit, batch_size: int = 500):
        self.train = train
        self.test = test
        self.batch_size = batch_size

    def __call__(self, epoch: int, net, mask: SelectionMask | None = None,
                 gmm=None, peer=None) -> dict:
        test_pred = predict_logits(net, self.test.pixels, self.batch_size).argmax(1).numpy()
        train_acc = None
        mem = {"memorization_rate": None, "corrupted_clean_acc": None}
        if self.train is not None:
            train_pred = predict_logits(net, self.train.pixels, self.batch_size).argmax(1).numpy()
            if isinstance(self.train, DatasetSplit):
                observed = self.train.observed_labels
                mem = memorization_stats(train_pred, self.train)
            else:
                observed = self.train.labels
            train_acc = float(np.mean(train_pred == observed))
        row = {
            "epoch": epoch,
            "train_acc_observed": train_acc,
            "test_acc": float(np.mean(test_pred == self.test.clean_labels)),
            "memorization_rate": mem["memorization_rate"],
            "corrupted_clean_acc": mem["corrupted_clean_acc"],
            "selected_count": None,
            "selection_precision": None,
            "selection_recall": None,
            "per_class_selected": None,
            "gmm": None,
        }
        if mask is not None and isinstance(self.train, DatasetSplit):
            stats = selection_metrics(mask, self.train)
            row.update(selected_count=stats.selected_count, selection_precision=stats.precision,
                       selection_recall=stats.recall, per_class_selected=stats.per_class)
        if gmm is not None:
            row["gmm"] = {"means": [float(m) for m in gmm.means],
                          "weights": [float(w) for w in gmm.weights]}
        if peer is not None:
            peer_pred = predict_logits(peer, self.test.pixels, self.batch_size).argmax(1).numpy()
            row["test_acc_peer"] = float(np.mean(peer_pred == self.test.clean_labels))
        return row


# --------------------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class GroupSummary:
    method: str
    pretext: str
    p: float
    best_mean: float
    best_std: float
    last_mean: float
    last_std: float
    trials: int

    @property
    def single_trial(self) -> bool:
        return self.trials == 1


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1))


def aggregate_trials(summaries: Iterable[TrialSummary]) -> list[GroupSummary]:
    """Mean and sample standard deviation of BEST/LAST per (method, pretext, p) group."""
    groups: dict[tuple, list[TrialSummary]] = {}
    for s in summaries:
        groups.setdefault((s.method, s.pretext, s.p), []).append(s)
    if not groups:
        raise ValueError("no trials to aggregate")
    out = []
    for (method, pretext, p), items in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        best_mean, best_std = _mean_std([t.best for t in items])
        last_mean, last_std = _mean_std([t.last for t in items])
        if len(items) == 1:
            log.warning("group %s/%s/p=%s has a single trial; std reported as 0", method, pretext, p)
        out.append(GroupSummary(method, pretext, p, best_mean, best_std, last_mean, last_std, len(items)))
    return out


TRIAL_COLUMNS = ("method", "pretext", "p", "seed", "best", "last")
SUMMARY_COLUMNS = ("method", "pretext", "p", "best_mean", "best_std", "last_mean", "last_std", "trials")


def write_trials_csv(summaries: Iterable[TrialSummary], path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_COLUMNS)
        for s in summaries:
            writer.writerow([s.method, s.pretext, repr(float(s.p)), s.seed, repr(s.best), repr(s.last)])
    return Path(path)


def read_trials_csv(path: str | Path) -> list[TrialSummary]:
    with open(path, newline="") as fh:
        return [TrialSummary(best=float(r["best"]), last=float(r["last"]), seed=int(r["seed"]),
                             method=r["method"], pretext=r["pretext"], p=float(r["p"]))
                for r in csv.DictReader(fh)]


def write_summary_csv(groups: Iterable[GroupSummary], path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for g in groups:
            d = asdict(g)
            writer.writerow([d[c] if isinstance(d[c], (str, int)) else repr(float(d[c]))
                             for c in SUMMARY_COLUMNS])
    return Path(path)


def read_summary_csv(path: str | Path) -> list[GroupSummary]:
    with open(path, newline="") as fh:
        return [GroupSummary(r["method"], r["pretext"], float(r["p"]), float(r["best_mean"]),
                             float(r["best_std"]), float(r["last_mean"]), float(r["last_std"]),
                             int(r["trials"]))
                for r in csv.DictReader(fh)]
