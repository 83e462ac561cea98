import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from noisyssl.data import DatasetSplit, NoiseSpec, inject_symmetric_noise
from noisyssl.metrics import (RunRecord, SelectionMask, TrialSummary, aggregate_trials, best_last,
                              memorization_stats, read_summary_csv, read_trials_csv,
                              selection_metrics, write_summary_csv, write_trials_csv)


def _split(clean, observed, k=3):
    n = len(clean)
    return DatasetSplit(pixels=np.zeros((n, 2, 2, 1), np.float32), clean_labels=np.array(clean),
                        observed_labels=np.array(observed), ids=tuple(f"s{i}" for i in range(n)),
                        num_classes=k)


def test_best_last_examples():
    s = best_last([0.1, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    assert s.best == 0.9 and s.last == pytest.approx(0.6, abs=1e-12)
    const = best_last([0.5] * 6)
    assert const.best == const.last == 0.5
    inc = best_last([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    assert inc.best == 0.6 and inc.last < inc.best
    with pytest.raises(ValueError):
        best_last([0.1, 0.2, 0.3, 0.4])


@given(st.lists(st.floats(0, 1), min_size=5, max_size=40), st.randoms())
def test_best_last_invariants(accs, rnd):
    s = best_last(accs)
    assert s.last <= s.best + 1e-12
    head, tail = accs[:-5], accs[-5:]
    rnd.shuffle(head)
    again = best_last(head + tail)
    assert again.best == s.best and again.last == s.last


def test_best_last_reads_record_meta():
    rec = RunRecord(meta={"method": "ce", "seed": 4, "p": 0.6})
    for e, a in enumerate([0.2, 0.4, 0.3, 0.5, 0.6], start=1):
        rec.append({"epoch": e, "test_acc": a})
    s = best_last(rec, pretext="none")
    assert (s.method, s.seed, s.p, s.pretext) == ("ce", 4, 0.6, "none")


def test_run_record_invariants_and_roundtrip(tmp_path):
    rec = RunRecord(meta={"method": "ce"})
    rec.append({"epoch": 1, "test_acc": 0.5, "train_acc_observed": 0.4})
    with pytest.raises(ValueError):
        rec.append({"epoch": 1, "test_acc": 0.5})
    with pytest.raises(ValueError):
        rec.append({"epoch": 2, "test_acc": 1.5})
    rec.append({"epoch": 2, "test_acc": 0.6, "gmm": {"means": [0.1, 0.9], "weights": [0.5, 0.5]}})
    loaded = RunRecord.load(rec.save(tmp_path / "run.jsonl"))
    assert loaded.rows == rec.rows and loaded.meta == rec.meta


def test_memorization_rate_definition():
    split = _split([0, 1, 2, 0], [0, 2, 0, 0])
    assert memorization_stats(np.array([0, 1, 2, 0]), split)["memorization_rate"] == 0.0
    assert memorization_stats(np.array([0, 2, 0, 0]), split)["memorization_rate"] == 1.0
    none_corrupted = _split([0, 1], [0, 1])
    assert memorization_stats(np.array([1, 0]), none_corrupted)["memorization_rate"] == 0.0


def test_selection_metrics_examples():
    # clean = {1, 2}
    split = _split([0, 1, 2, 0], [1, 1, 2, 2])
    stats = selection_metrics(SelectionMask.from_indices(4, [0, 1]), split)
    assert (stats.precision, stats.recall) == (0.5, 0.5)
    assert stats.per_class == [0, 2, 0]
    oracle = selection_metrics(SelectionMask(~split.is_corrupted), split)
    assert (oracle.precision, oracle.recall) == (1.0, 1.0)
    empty = selection_metrics(SelectionMask(np.zeros(4, bool)), split)
    assert empty.precision is None and empty.selected_count == 0
    with pytest.raises(ValueError):
        selection_metrics(SelectionMask(np.ones(3, bool)), split)


def test_select_all_gives_base_rate(small_synthetic):
    noisy = inject_symmetric_noise(small_synthetic, NoiseSpec(0.5, 3, seed=0))
    stats = selection_metrics(SelectionMask(np.ones(len(noisy), bool)), noisy)
    assert stats.precision == pytest.approx(1 - noisy.is_corrupted.mean())
    assert stats.recall == 1.0


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.booleans()), min_size=1, max_size=50))
def test_selection_metrics_bounds(rows):
    split = _split([r[0] for r in rows], [r[1] for r in rows])
    stats = selection_metrics(SelectionMask([r[2] for r in rows]), split)
    for v in (stats.precision, stats.recall):
        assert v is None or 0 <= v <= 1
    assert sum(stats.per_class) == stats.selected_count


def test_aggregate_examples(caplog):
    groups = aggregate_trials([TrialSummary(0.6, 0.6, seed=i, method="ce") for i in range(3)])
    assert groups[0].best_mean == pytest.approx(0.6) and groups[0].best_std == 0.0
    pair = aggregate_trials([TrialSummary(0.5, 0.5, 0, "ce"), TrialSummary(0.7, 0.7, 1, "ce")])[0]
    assert pair.last_mean == pytest.approx(0.6) and pair.last_std == pytest.approx(0.141421356, abs=1e-6)
    with caplog.at_level(logging.WARNING):
        single = aggregate_trials([TrialSummary(0.3, 0.2, 0, "ce")])[0]
    assert single.single_trial and single.best_std == 0.0 and "single trial" in caplog.text
    with pytest.raises(ValueError):
        aggregate_trials([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_aggregate_mean_within_range(values):
    g = aggregate_trials([TrialSummary(v, v, i) for i, v in enumerate(values)])[0]
    assert min(values) - 1e-12 <= g.best_mean <= max(values) + 1e-12


def test_csv_roundtrip(tmp_path):
    trials = [TrialSummary(0.81, 0.7123456789, seed=s, method="coteaching", pretext="rotation", p=0.6)
              for s in range(2)]
    assert read_trials_csv(write_trials_csv(trials, tmp_path / "t.csv")) == trials
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "method,pretext,p,seed,best,last"
    groups = aggregate_trials(trials)
    assert read_summary_csv(write_summary_csv(groups, tmp_path / "s.csv")) == groups
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == \
        "method,pretext,p,best_mean,best_std,last_mean,last_std,trials"
