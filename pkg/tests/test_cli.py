import csv
import json

import numpy as np
import pytest

from trialign.cli import bench_loss, build_parser, dispatch
from trialign.config import dump_config, load_config, parse_config
from trialign.losses import ConfigError
from trialign.synthdata import read_jsonl

SUBCOMMANDS = ("gen-data", "train", "eval", "ablate", "export-embeddings", "bench-loss")


def tiny_doc(out_dir=None, iterations=4):
    stage = {"iterations": iterations, "eval_interval": 2, "batch_size": 16}
    doc = {
        "seed": 0,
        "data": {"n_train": 64, "n_test": 32},
        "model": {"pose_encoder": "mlp", "embed_dim": 8, "mlp_width": 16, "n_blocks": 1, "decoder_blocks": 1},
        "eval": {"probe_size": 32},
        "stages": {"1": dict(stage), "2": dict(stage), "3": dict(stage)},
    }
    if out_dir is not None:
        doc["output_dir"] = str(out_dir)
    return doc


def write_doc(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


# -- config files ----------------------------------------------------------------------------


def test_config_parses_and_round_trips():
    cfg = parse_config(tiny_doc())
    assert cfg.n_train == 64 and cfg.model.embed_dim == 8 and cfg.stage(2).iterations == 4
    assert cfg.stage(2).frozen == ("enc_2d", "enc_3d")  # untouched defaults survive overrides
    again = parse_config(dump_config(cfg))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.update(lr=1.0), "unknown keys in config"),
    (lambda d: d["data"].update(n_samples=3), "unknown keys in data"),
    (lambda d: d["model"].update(depth=3), "unknown keys in model"),
    (lambda d: d["stages"]["1"].update(momentum=0.9), r"unknown keys in stages\.1"),
    (lambda d: d["stages"].pop("3"), "neither configured nor disabled"),
    (lambda d: d.pop("stages"), "needs a 'stages' block"),
])
def test_config_rejects_bad_keys(mutate, match):
    doc = tiny_doc()
    mutate(doc)
    with pytest.raises(ConfigError, match=match):
        parse_config(doc)


def test_null_stage_disables_it():
    doc = tiny_doc()
    doc["stages"]["1"] = None
    assert parse_config(doc).stage(1) is None


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


# -- command line ------------------------------------------------------------------------------


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert dispatch([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert dispatch([]) == 1
    assert dispatch(["gen-data", "--n", "0", "--seed", "1", "--out", "x"]) == 1
    assert dispatch(["frobnicate"]) == 1


def test_gen_data_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert dispatch(["gen-data", "--n", "20", "--seed", "5", "--out", str(a)]) == 0
    assert dispatch(["gen-data", "--n", "20", "--seed", "5", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(read_jsonl(a)) == 20


def test_gen_data_stdout(capsys):
    assert dispatch(["gen-data", "--n", "2", "--seed", "1", "--out", "-"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["id"] == 0


def test_missing_files_exit_one(tmp_path, capsys):
    assert dispatch(["train", "--config", str(tmp_path / "none.json")]) == 1
    assert "error:" in capsys.readouterr().err
    assert dispatch(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--data", str(tmp_path / "x")]) == 1


def test_train_without_output_dir_exits_one(tmp_path, capsys):
    path = write_doc(tmp_path, tiny_doc())
    assert dispatch(["train", "--config", str(path)]) == 1
    assert "output directory" in capsys.readouterr().err


def test_stage_two_alone_warns(tmp_path, capsys):
    path = write_doc(tmp_path, tiny_doc(tmp_path / "run"))
    assert dispatch(["train", "--config", str(path), "--stage", "2"]) == 0
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_train_eval_export_round(tmp_path, capsys):
    run = tmp_path / "run"
    path = write_doc(tmp_path, tiny_doc(run))
    assert dispatch(["train", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "stage 3: checkpoint" in out
    for name in ("stage1.npz", "stage2.npz", "stage3.npz", "stage3_log.csv", "metrics.json", "metrics.csv"):
        assert (run / name).exists(), name

    data = tmp_path / "eval.jsonl"
    assert dispatch(["gen-data", "--n", "10", "--seed", "9", "--out", str(data)]) == 0
    capsys.readouterr()
    assert dispatch(["eval", "--checkpoint", str(run / "stage3.npz"), "--data", str(data),
                     "--out", str(tmp_path / "m.json")]) == 0
    header = capsys.readouterr().out.splitlines()[0].split(",")
    assert "lift_mpjpe" in header and header[-2:] == ["n_samples", "fingerprint"]
    assert json.loads((tmp_path / "m.json").read_text())["n_samples"] == 10

    emb = tmp_path / "emb.csv"
    assert dispatch(["export-embeddings", "--checkpoint", str(run / "stage3.npz"), "--data", str(data),
                     "--out", str(emb)]) == 0
    rows = list(csv.reader(emb.open()))
    assert rows[0] == ["id", "modality"] + [f"e{k}" for k in range(8)]
    assert len(rows) == 1 + 3 * 10
    assert {r[1] for r in rows[1:]} == {"img", "2d", "3d"}
    vec = np.array([float(v) for v in rows[1][2:]])
    assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-12)


def test_resume_stage_from_checkpoint(tmp_path, capsys):
    run = tmp_path / "run"
    path = write_doc(tmp_path, tiny_doc(run))
    assert dispatch(["train", "--config", str(path), "--stage", "1"]) == 0
    capsys.readouterr()
    assert dispatch(["train", "--config", str(path), "--stage", "2"]) == 0
    assert "warning" not in capsys.readouterr().err


def test_training_abort_exit_two(tmp_path, capsys):
    doc = tiny_doc(tmp_path / "run")
    doc["stages"]["1"]["lr"] = 1e300  # the first update overflows the weights
    path = write_doc(tmp_path, doc)
    assert dispatch(["train", "--config", str(path), "--stage", "1"]) == 2
    assert "aborted" in capsys.readouterr().err


def test_ablate_writes_rows(tmp_path, capsys):
    doc = tiny_doc(tmp_path / "abl", iterations=2)
    path = write_doc(tmp_path, doc)
    assert dispatch(["ablate", "--config", str(path), "--toggles", "use_triplet"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("use_triplet,") and len(lines) == 3
    assert (tmp_path / "abl" / "ablation.csv").exists()
    assert dispatch(["ablate", "--config", str(path), "--toggles", "dropout"]) == 1


def test_bench_loss_json(capsys):
    assert dispatch(["bench-loss", "--b", "12", "--d", "16", "--iters", "2"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res) == {"b", "d", "iters", "gram_eig_s", "svd_s", "speedup", "max_abs_diff"}
    assert res["max_abs_diff"] < 1e-10


def test_bench_paths_agree():
    res = bench_loss(20, 64, 1, seed=3)
    assert res["max_abs_diff"] < 1e-10 and res["gram_eig_s"] > 0


def test_parser_lists_all_subcommands():
    text = build_parser().format_help()
    for cmd in SUBCOMMANDS:
        assert cmd in text
