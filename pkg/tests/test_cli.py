import csv
import json
import os

import pytest

from safereach import cli
from safereach import config as cfgmod
from safereach import policy as pol


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny but complete run directory: dataset + one checkpoint."""
    d = tmp_path_factory.mktemp("clirun")
    assert cli.main(["gen", "--out-dir", str(d), "--count", "5", "--seed", "5"]) == 0
    assert cli.main(["train", "--out-dir", str(d), "--steps", "25", "--seed", "5",
                     "--lambda", "1"]) == 0
    return d


# ---------------------------------------------------------------------------
# config


def test_config_roundtrip_lossless(tmp_path):
    cfg = cfgmod.RunConfig()
    cfg.lr = 0.000271828
    cfg.ssr_pairs = ((0.02, 0.10), (0.07, 0.33))
    cfg.hidden = (64, 32)
    path = tmp_path / "run.ini"
    cfgmod.save_config(cfg, path)
    back = cfgmod.load_config(path)
    for f in cfgmod.fields(cfgmod.RunConfig):
        assert getattr(back, f.name) == getattr(cfg, f.name), f.name
    assert cfgmod.config_hash(back) == cfgmod.config_hash(cfg)


def test_config_validation():
    cfg = cfgmod.RunConfig()
    cfg.level = "huge"
    with pytest.raises(cfgmod.ConfigError):
        cfg.validate()
    cfg = cfgmod.RunConfig()
    cfg.beta_end = 1.0
    with pytest.raises(cfgmod.ConfigError):
        cfg.validate()


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nwarp_speed = 9\n")
    with pytest.raises(cfgmod.ConfigError, match="unknown config key"):
        cfgmod.load_config(path)


def test_flag_overrides_beat_config(tmp_path):
    path = tmp_path / "run.ini"
    cfg = cfgmod.RunConfig()
    cfg.count = 99
    cfgmod.save_config(cfg, path)
    parser = cli.build_parser()
    args = parser.parse_args(["gen", "--config", str(path), "--count", "3"])
    merged = cli._apply_overrides(cfgmod.load_config(args.config), args)
    assert merged.count == 3
    args2 = parser.parse_args(["gen", "--config", str(path)])
    merged2 = cli._apply_overrides(cfgmod.load_config(args2.config), args2)
    assert merged2.count == 99


# ---------------------------------------------------------------------------
# gen


def test_gen_outputs_and_rerun_hash(workdir, tmp_path):
    dataset = workdir / "dataset.jsonl"
    stats = workdir / "dataset_stats.json"
    assert dataset.exists() and stats.exists()
    with open(stats) as fh:
        doc = json.load(fh)
    assert doc["episodes"] == 5
    assert cli.main(["gen", "--out-dir", str(tmp_path), "--count", "5",
                     "--seed", "5"]) == 0
    assert read_bytes(tmp_path / "dataset.jsonl") == read_bytes(dataset)


def test_gen_count_zero_usage_error(tmp_path, capsys):
    assert cli.main(["gen", "--out-dir", str(tmp_path), "--count", "0"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_gen_parallel_identical(workdir, tmp_path):
    assert cli.main(["gen", "--out-dir", str(tmp_path), "--count", "5", "--seed", "5",
                     "--jobs", "2"]) == 0
    assert read_bytes(tmp_path / "dataset.jsonl") == read_bytes(workdir / "dataset.jsonl")


# ---------------------------------------------------------------------------
# train


def test_train_missing_dataset_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--out-dir", str(tmp_path)]) == 1
    assert "dataset not found" in capsys.readouterr().err


def test_train_outputs(workdir):
    ckpt = workdir / "checkpoint.json"
    log = workdir / "train_log.csv"
    assert ckpt.exists() and log.exists()
    with open(log) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "mse", "geo", "total"]
    assert len(rows) == 26
    for row in rows[1:]:
        assert float(row[3]) == pytest.approx(float(row[1]) + 1.0 * float(row[2]), abs=1e-12)


def test_train_rerun_identical_checkpoint(workdir, tmp_path):
    os.link(workdir / "dataset.jsonl", tmp_path / "dataset.jsonl")
    assert cli.main(["train", "--out-dir", str(tmp_path), "--steps", "25",
                     "--seed", "5", "--lambda", "1"]) == 0
    assert pol.file_hash(tmp_path / "checkpoint.json") == \
        pol.file_hash(workdir / "checkpoint.json")


def test_train_lambda_zero_is_baseline_method(workdir, tmp_path):
    os.link(workdir / "dataset.jsonl", tmp_path / "dataset.jsonl")
    assert cli.main(["train", "--out-dir", str(tmp_path), "--steps", "5",
                     "--seed", "5", "--lambda", "0",
                     "--checkpoint", "base.json"]) == 0
    with open(tmp_path / "base.json") as fh:
        doc = json.load(fh)
    assert doc["train_config"]["method"] == "mse"
    assert doc["train_config"]["lambda"] == 0.0


# ---------------------------------------------------------------------------
# eval


def test_eval_unknown_level_usage_error(workdir, capsys):
    assert cli.main(["eval", "--out-dir", str(workdir), "--level", "huge"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_eval_small_report(workdir):
    assert cli.main(["eval", "--out-dir", str(workdir), "--level", "small",
                     "--seed", "5"]) == 0
    with open(workdir / "eval_report.csv") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[:4] == ["method", "data_size", "level", "metric"]
    assert {r[3] for r in body} == {"ssr(0.02,0.1)", "ssr(0.05,0.15)", "p(d_min<0.02)",
                                    "p(d_min<0.05)", "p(d_tgt<0.1)", "p(d_tgt<0.15)"}
    assert all(r[2] == "small" for r in body)
    assert all(r[6] == "25" for r in body)  # 5 episodes x 5 perturbations x 1 rollout
    for r in body:
        assert len(r[7]) == 12 and len(r[8]) == 12 and len(r[9]) == 12
    records = (workdir / "eval_records.jsonl").read_text().strip().splitlines()
    assert len(records) == 25
    assert (workdir / "eval_report.md").exists()


def test_eval_large_report_counts(workdir):
    assert cli.main(["eval", "--out-dir", str(workdir), "--level", "large",
                     "--seed", "5", "--report-prefix", "large"]) == 0
    records = (workdir / "large_records.jsonl").read_text().strip().splitlines()
    assert len(records) == 10  # 5 episodes x 2 perturbations, rollouts averaged
    assert all(json.loads(r)["rollout_id"] == -1 for r in records)


def test_eval_rerun_byte_identical(workdir, tmp_path):
    for name in ("dataset.jsonl", "checkpoint.json"):
        os.link(workdir / name, tmp_path / name)
    assert cli.main(["eval", "--out-dir", str(tmp_path), "--level", "small",
                     "--seed", "5"]) == 0
    assert read_bytes(tmp_path / "eval_report.csv") == \
        read_bytes(workdir / "eval_report.csv")


# ---------------------------------------------------------------------------
# ablate / datascale


def test_ablate_grid_shape_and_rerun(workdir):
    args = ["ablate", "--out-dir", str(workdir), "--steps", "5", "--seed", "5"]
    assert cli.main(args) == 0
    first = read_bytes(workdir / "ablate_report.csv")
    with open(workdir / "ablate_report.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 8  # header + baseline + 3 deltas x 2 lambdas
    assert rows[1][0] == "baseline"
    settings = [r[0] for r in rows[2:]]
    assert settings == ["delta=0.05,lambda=1", "delta=0.05,lambda=4",
                        "delta=0.1,lambda=1", "delta=0.1,lambda=4",
                        "delta=0.15,lambda=1", "delta=0.15,lambda=4"]
    for r in rows[1:]:
        assert len(r[-1]) == 12 and len(r[-2]) == 12 and len(r[-3]) == 12
    assert cli.main(args) == 0  # cached checkpoints -> identical bytes
    assert read_bytes(workdir / "ablate_report.csv") == first
    assert (workdir / "ablate_report.md").exists()


def test_ablate_single_lambda_shrinks_grid(workdir, tmp_path):
    os.link(workdir / "dataset.jsonl", tmp_path / "dataset.jsonl")
    assert cli.main(["ablate", "--out-dir", str(tmp_path), "--steps", "5",
                     "--seed", "5", "--lambdas", "1"]) == 0
    with open(tmp_path / "ablate_report.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 5  # header + baseline + 3 deltas x 1 lambda


def test_datascale_grid(workdir, tmp_path):
    os.link(workdir / "dataset.jsonl", tmp_path / "dataset.jsonl")
    args = ["datascale", "--out-dir", str(tmp_path), "--steps", "5", "--seed", "5",
            "--sizes", "2,4,5"]
    assert cli.main(args) == 0
    with open(tmp_path / "datascale_report.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 7  # header + 3 sizes x 2 objectives
    assert [r[0] for r in rows[1:]] == ["2", "2", "4", "4", "5", "5"]
    assert [r[1] for r in rows[1:]] == ["mse", "mse+feas"] * 3
    first = read_bytes(tmp_path / "datascale_report.csv")
    assert cli.main(args) == 0
    assert read_bytes(tmp_path / "datascale_report.csv") == first


def test_datascale_oversize_subset_is_usage_error(workdir, tmp_path, capsys):
    os.link(workdir / "dataset.jsonl", tmp_path / "dataset.jsonl")
    assert cli.main(["datascale", "--out-dir", str(tmp_path), "--steps", "5",
                     "--sizes", "2,400"]) == 1
    assert "exceeds" in capsys.readouterr().err


def test_unknown_subcommand_usage_error(capsys):
    assert cli.main(["frobnicate"]) == 1


def test_runtime_failure_exit_code(workdir, tmp_path, capsys):
    os.link(workdir / "dataset.jsonl", tmp_path / "dataset.jsonl")
    (tmp_path / "checkpoint.json").write_text('{"format": "not-a-checkpoint"}')
    assert cli.main(["eval", "--out-dir", str(tmp_path), "--level", "small"]) == 2
    assert "error" in capsys.readouterr().err


def test_custom_chain_config_file(tmp_path):
    chain_doc = {
        "name": "short2",
        "segments": [
            {"name": "j1", "offset": [0, 0, 0], "axis": [0, 0, 1]},
            {"name": "j2", "offset": [0.3, 0, 0], "axis": [0, 0, 1]},
            {"name": "end_effector", "offset": [0.25, 0, 0], "axis": None},
        ],
        "representative_set": ["j2", "end_effector"],
        "radii": {"j2": 0.02, "end_effector": 0.02},
        "joint_limits": [[-3, 3], [-3, 3]],
    }
    chain_path = tmp_path / "chain.json"
    chain_path.write_text(json.dumps(chain_doc))
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\nchain_path = {chain_path}\n")
    assert cli.main(["gen", "--config", str(ini), "--out-dir", str(tmp_path),
                     "--count", "2", "--seed", "3"]) == 0
    line = json.loads((tmp_path / "dataset.jsonl").read_text().splitlines()[0])
    assert len(line["trajectory"][0]) == 2  # two joints
    from safereach.config import load_config, load_chain

    chain = load_chain(load_config(ini))
    assert line["chain_hash"] == chain.chain_hash
