import numpy as np
import pytest

from mbj.cli import main
from mbj.config import ConfigError, ExperimentConfig
from mbj.experiment import compare, read_summary

QUICK = [
    "--set", "schedule.phase1_epochs=3",
    "--set", "schedule.phase2_epochs=2",
    "--set", "schedule.lr_decay_epochs=2",
    "--set", "data.max_count=200",
    "--set", "data.test_per_class=40",
    "--set", "analysis.observe_epochs=1",
]




def test_config_roundtrip_is_exact():
    cfg = ExperimentConfig()
    cfg.override("memory.beta", "0.75")
    cfg.override("schedule.lr_decay_epochs", "10, 20")
    again = ExperimentConfig.from_ini(cfg.to_ini())
    assert again == cfg and again.to_ini() == cfg.to_ini()


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.memory.beta == 1.5 and cfg.memory.capacity is None and cfg.eta == 15
    cfg.experiment.task, cfg.data.source = "metric-learning", "synthetic-retrieval"
    assert cfg.eta == pytest.approx(1 / 15)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="memory.gamma"):
        ExperimentConfig.from_ini("[memory]\ngamma = 2\n")
    with pytest.raises(ConfigError, match="optimizer"):
        ExperimentConfig.from_ini("[optimizer]\nlr = 2\n")


def test_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MBJ_DATA_ROOT", str(tmp_path / "nowhere"))
    assert main(["train", "--set", "memory.gamma=1"]) == 2
    assert "memory.gamma" in capsys.readouterr().err
    assert main(["train", "--variant", "dropout"]) == 2
    assert main(["train", "--set", "data.source=cifar10", "-o", str(tmp_path / "c")]) == 3
    assert str(tmp_path / "nowhere") in capsys.readouterr().err
    assert main(["train", "--set", "schedule.phase1_lr=1e6", "-o", str(tmp_path / "n")] + QUICK) == 4


def test_same_seed_gives_identical_summary(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "-o", str(tmp_path / name), "--seed", "3"] + QUICK) == 0
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_run_directory_layout(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "-o", str(out)] + QUICK) == 0
    for rel in [
        "config.ini",
        "metrics.jsonl",
        "summary.csv",
        "checkpoints/phase1.pt",
        "checkpoints/final.pt",
        "jitter_feature.csv",
        "embeddings_test.bin",
        "memory_bank.csv",
        "data/profile.csv",
    ]:
        assert (out / rel).exists(), rel
    assert ExperimentConfig.load(out / "config.ini").schedule.phase1_epochs == 3


def test_baseline_writes_no_bank(tmp_path):
    out = tmp_path / "base"
    assert main(["train", "-o", str(out), "--variant", "baseline"] + QUICK) == 0
    assert not list(out.glob("*bank*.csv"))


def test_compare_deltas(tmp_path, capsys):
    main(["train", "-o", str(tmp_path / "base"), "--variant", "baseline"] + QUICK)
    main(["train", "-o", str(tmp_path / "mbj")] + QUICK)
    table = compare([tmp_path / "base", tmp_path / "mbj"])
    base, mbj = read_summary(tmp_path / "base" / "summary.csv"), read_summary(tmp_path / "mbj" / "summary.csv")
    assert table["rows"][1]["delta_final_top1"] == pytest.approx(mbj["final_top1"] - base["final_top1"], abs=1e-9)
    same = compare([tmp_path / "mbj", tmp_path / "mbj"])
    assert all(v == 0 for k, v in same["rows"][1].items() if k.startswith("delta_"))
    assert main(["compare", str(tmp_path / "base"), str(tmp_path / "mbj"), "--output", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").exists()
    assert main(["compare", str(tmp_path / "base")]) == 2


def test_compare_rejects_mismatched_tasks(tmp_path):
    main(["train", "-o", str(tmp_path / "cls")] + QUICK)
    main(
        ["train", "-o", str(tmp_path / "ret"), "--set", "experiment.task=metric-learning",
         "--set", "data.source=synthetic-retrieval"] + QUICK
    )
    with pytest.raises(ValueError):
        compare([tmp_path / "cls", tmp_path / "ret"])


def test_eval_and_export_need_only_the_run_directory(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "-o", str(out)] + QUICK)
    capsys.readouterr()
    assert main(["eval", str(out)]) == 0
    assert '"top1"' in capsys.readouterr().out
    assert main(["export-embeddings", str(out), "--output-dir", str(tmp_path / "emb")]) == 0
    assert (tmp_path / "emb" / "embeddings_train.bin").exists()
    assert main(["jitter-stats", str(out / "trace_feature.csv"), "--output", str(tmp_path / "curve.csv")]) == 0
    curve = np.loadtxt(tmp_path / "curve.csv", delimiter=",", skiprows=1)
    assert curve[0, 0] == 1 and curve[0, 1] == 0


def test_ablate_shares_phase_one(tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "-o", str(out), "--variants", "baseline,fr+rj,mbj"] + QUICK) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert {"baseline", "fr_rj", "mbj"} <= set(dirs)
    p1 = {read_summary(out / d / "summary.csv")["phase1_top1"] for d in ("baseline", "fr_rj", "mbj")}
    assert len(p1) == 1
    assert (out / "comparison.csv").exists()


def test_synth_data(tmp_path):
    assert main(["synth-data", "-o", str(tmp_path / "d"), "--set", "data.source=synthetic"] + QUICK) == 0
    arrays = np.load(tmp_path / "d" / "data" / "arrays.npz")
    counts = np.bincount(arrays["train_y"])
    assert counts[0] == 200 and counts[-1] == 2
