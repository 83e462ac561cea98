import json

import numpy as np
import pytest
import yaml

from noisyssl.cli import main
from noisyssl.config import ConfigError, ExperimentConfig, derive_seed, load_config
from noisyssl.metrics import GroupSummary, read_trials_csv, write_summary_csv
from noisyssl.model import load_checkpoint
from noisyssl.plots import make_plot, read_sidecar

TINY_DATA = {"num_classes": 3, "train_per_class": 20, "test_per_class": 10, "image_size": [16, 16]}


def _write_config(tmp_path, name="cfg.yaml", **kw):
    data = {"dataset": TINY_DATA, "noise_rates": [0.5], "trials": 1, "out": str(tmp_path / "res"),
            "train": {"epochs": 5, "batch_size": 16}, "pretrain": {"epochs": 1, "batch_size": 32}}
    data.update(kw)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


# --------------------------------------------------------------------------- config


def test_derive_seed_is_stable_and_role_specific():
    assert derive_seed(0, "noise", 1) == derive_seed(0, "noise", 1)
    assert len({derive_seed(0, "noise", 1), derive_seed(0, "init", 1), derive_seed(1, "noise", 1)}) == 3
    assert 0 <= derive_seed(123, "x") < 2 ** 31


def test_pretext_defaults_follow_table_and_desk_scaling():
    paper = ExperimentConfig(pretext="jigsaw", paper_scale=True)
    t = paper.pretrain_config()
    assert (t.batch_size, t.epochs, t.optimizer, t.learning_rate, t.weight_decay, t.lr_schedule) == \
        (128, 50, "adam", 0.001, 1e-4, "cosine_annealing")
    assert paper.pretext_config().patch_size == 64 and paper.pretext_config().num_permutations == 1000
    rot = ExperimentConfig(pretext="rotation", paper_scale=True).pretrain_config()
    assert (rot.batch_size, rot.epochs, rot.optimizer, rot.learning_rate) == (256, 70, "sgd", 0.01)
    con = ExperimentConfig(pretext="contrastive", paper_scale=True).pretrain_config()
    assert (con.batch_size, con.optimizer, con.learning_rate) == (256, "adam", 0.001)
    desk = ExperimentConfig(pretext="rotation").pretrain_config()
    assert desk.epochs < rot.epochs and (desk.batch_size, desk.optimizer) == (256, "sgd")
    lnl = ExperimentConfig(paper_scale=True).train_config()
    assert (lnl.epochs, lnl.batch_size, lnl.learning_rate, lnl.momentum, lnl.weight_decay) == \
        (50, 256, 0.01, 0.9, 1e-4)


def test_lnl_configs_follow_noise_rate():
    cfg = ExperimentConfig(lnl_method="coteaching")
    assert cfg.coteaching_config(0.7).forget_rate == 0.7
    assert cfg.dividemix_config(0.8).lambda_u == 0.25


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="pretext"):
        ExperimentConfig(pretext="colorization")
    with pytest.raises(ConfigError, match="trials"):
        ExperimentConfig(trials=0)
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(_write_config(tmp_path, bogus=1))
    with pytest.raises(ConfigError, match="unknown keys in train"):
        ExperimentConfig(train={"epoch": 3})
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.yaml")


def test_config_hash_ignores_output_dir_only(tmp_path):
    a = ExperimentConfig(out="x")
    assert a.config_hash() == ExperimentConfig(out="y").config_hash()
    assert a.config_hash() != ExperimentConfig(seed=1).config_hash()
    dumped = load_config(a.dump(tmp_path / "echo.yaml"))
    assert dumped.config_hash() == a.config_hash()


# --------------------------------------------------------------------------- verbs


def test_pretrain_none_writes_marker(tmp_path, capsys):
    assert main(["pretrain", "--config", str(_write_config(tmp_path))]) == 0
    marker = tmp_path / "res" / "checkpoints" / "none.marker.json"
    assert json.loads(marker.read_text())["pretext"] == "none"
    manifest = json.loads((tmp_path / "res" / "manifest.json").read_text())
    assert "checkpoints/none.marker.json" in manifest


def test_pretrain_rotation_dual_checkpoints(tmp_path):
    cfg = _write_config(tmp_path, pretext="rotation", lnl_method="coteaching")
    assert main(["pretrain", "--config", str(cfg)]) == 0
    ckpts = [load_checkpoint(tmp_path / "res" / "checkpoints" / f"rotation_{t}.npz") for t in "ab"]
    assert all(c.provenance["pretext"] == "rotation" for c in ckpts)
    assert ckpts[0].provenance["seed"] != ckpts[1].provenance["seed"]
    a, b = (c.encoder_state["stem.0.weight"] for c in ckpts)
    assert not np.array_equal(a, b)
    assert (tmp_path / "res" / "plots" / "filters_rotation_a.png").exists()


def test_train_zero_noise_and_run_count(tmp_path):
    cfg = _write_config(tmp_path, noise_rates=[0.0], trials=2)
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "res" / "runs" / "ce-none" / "p0" / "trial0"
    noise = [json.loads(line) for line in (run / "noise.jsonl").read_text().splitlines()]
    assert not any(r["is_corrupted"] for r in noise)
    assert len(read_trials_csv(tmp_path / "res" / "trials.csv")) == 2

    cfg = _write_config(tmp_path, "b.yaml", noise_rates=[0.5, 0.8], trials=3, out=str(tmp_path / "res2"))
    assert main(["train", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "res2" / "runs").rglob("run.jsonl"))) == 6
    meta = json.loads(next((tmp_path / "res2" / "runs").rglob("run.meta.json")).read_text())
    assert meta["config_hash"] == load_config(cfg).config_hash()


def test_train_is_deterministic(tmp_path):
    cfg = _write_config(tmp_path, lnl_method="coteaching", coteaching={"warmup_epochs": 2})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "one")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "two")]) == 0
    assert (tmp_path / "one" / "summary.csv").read_bytes() == (tmp_path / "two" / "summary.csv").read_bytes()


def test_train_without_checkpoint_fails_cleanly(tmp_path, capsys):
    cfg = _write_config(tmp_path, pretext="rotation")
    assert main(["train", "--config", str(cfg)]) == 5
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: checkpoint: missing checkpoint")


def test_checkpoint_preset_mismatch_is_reported(tmp_path, capsys):
    cfg = _write_config(tmp_path, pretext="rotation")
    assert main(["pretrain", "--config", str(cfg)]) == 0
    cfg = _write_config(tmp_path, "r18.yaml", pretext="rotation", encoder="resnet18")
    assert main(["train", "--config", str(cfg)]) == 5
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: checkpoint:") and "resnet18" in err and "encoder/" in err


def test_usage_and_config_errors(tmp_path, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train", "--config", str(_write_config(tmp_path, pretext="colorization"))]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 3
    assert main(["report", "--out", str(tmp_path / "empty")]) == 6
    lines = capsys.readouterr().err.strip().splitlines()
    assert [ln.split(":")[1].strip() for ln in lines if ln.startswith("error:")] == \
        ["usage", "usage", "config", "io"]


def test_plot_and_report_verbs(tmp_path, capsys):
    cfg = _write_config(tmp_path, noise_rates=[0.5, 0.8])
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["plot", "--config", str(cfg)]) == 0
    plots = tmp_path / "res" / "plots"
    for fig in ("noise-curve", "ce-bars", "lnl-curves"):
        for ext in ("png", "svg", "csv"):
            assert (plots / f"{fig}.{ext}").exists()
    assert main(["report", "--out", str(tmp_path / "res")]) == 0
    assert "| ce | none | 0.5 |" in capsys.readouterr().out


# --------------------------------------------------------------------------- plots


def _summary(tmp_path, groups):
    return write_summary_csv(groups, tmp_path / "summary.csv")


def test_single_trial_plot_warns(tmp_path):
    path = _summary(tmp_path, [GroupSummary("ce", "none", 0.5, 0.8, 0.0, 0.7, 0.0, 1)])
    result = make_plot(path, "noise-curve", tmp_path / "plots")
    assert any("single-trial" in w for w in result.warnings)
    assert all(p.exists() for p in result.images)


def test_two_noise_rates_give_two_points(tmp_path):
    path = _summary(tmp_path, [GroupSummary("ce", "none", p, 0.8, 0.01, 0.7, 0.02, 3) for p in (0.8, 0.5)])
    rows = read_sidecar(make_plot(path, "noise-curve", tmp_path / "plots").sidecar)
    assert sorted({r["p"] for r in rows}) == [0.5, 0.8]


def test_ce_bars_sidecar_matches_csv_means(tmp_path):
    groups = [GroupSummary("ce", pt, p, 0.5 + i / 10, 0.01, 0.4 + i / 10, 0.02, 3)
              for i, (pt, p) in enumerate([("none", 0.6), ("rotation", 0.6), ("none", 0.8)])]
    groups.append(GroupSummary("coteaching", "none", 0.6, 0.9, 0.0, 0.9, 0.0, 3))
    result = make_plot(_summary(tmp_path, groups), "ce-bars", tmp_path / "plots")
    rows = read_sidecar(result.sidecar)
    for g in groups[:3]:
        got = {r["metric"]: r["mean"] for r in rows if r["series"] == g.pretext and r["p"] == g.p}
        assert got == {"best": g.best_mean, "last": g.last_mean}
    assert not any(r["series"] == "coteaching" for r in rows)
    assert any("gaps" in w for w in result.warnings)


def test_lnl_curves_series(tmp_path):
    groups = [GroupSummary(m, "none", 0.6, 0.5, 0.01, 0.4, 0.01, 3) for m in ("ce", "coteaching")]
    rows = read_sidecar(make_plot(_summary(tmp_path, groups), "lnl-curves", tmp_path / "p").sidecar)
    assert {r["series"] for r in rows} == {"ce+none", "coteaching+none"}
    with pytest.raises(ValueError):
        make_plot(tmp_path / "summary.csv", "pie-chart", tmp_path / "p")
