import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mmdoc import cli
from mmdoc import tensor as T
from mmdoc.docdata import read_pgm


def run_cli(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def fast_flags(n_tokens=16, grid="4,4"):
    return [
        "--model.d", "8", "--model.n_tokens", str(n_tokens), "--model.layers", "1",
        "--model.heads", "2", "--model.span", "3", "--model.num_bins", "16",
        "--model.image_size", "32", "--model.cnn_channels", "2,3,4",
        "--model.token_grid", grid,
    ]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """generate -> build-vocab -> pretrain once; reused by later tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus_dir = root / "corpus"
    code = cli.main(
        ["generate", "--out", str(corpus_dir), "--docs", "12",
         "--test-fraction", "0.25", "--seed", "3"]
    )
    assert code == 0
    vocab_path = root / "vocab.txt"
    code = cli.main(
        ["build-vocab", "--manifest", str(corpus_dir / "manifest.json"),
         "--out", str(vocab_path)]
    )
    assert code == 0
    pretrain_dir = root / "pre"
    code = cli.main(
        ["pretrain", "--manifest", str(corpus_dir / "manifest.json"),
         "--vocab", str(vocab_path), "--out", str(pretrain_dir),
         "--epochs", "1", "--batch_size", "4", "--seed", "3", *fast_flags()]
    )
    assert code == 0
    return {
        "root": root,
        "manifest": str(corpus_dir / "manifest.json"),
        "vocab": str(vocab_path),
        "checkpoint": str(pretrain_dir / "final"),
        "corpus_dir": corpus_dir,
        "log": str(pretrain_dir / "train_log.jsonl"),
    }


def test_generate_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run_cli(
            ["generate", "--out", str(tmp_path / name), "--docs", "3", "--seed", "1"],
            capsys,
        )
        assert code == 0
    for sub in ("manifest.json", "meta.json", "ocr/doc00000.json", "img/doc00000.pgm"):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()


def test_generate_creates_missing_dirs_and_counts_match(tmp_path, capsys):
    out = tmp_path / "deep" / "nested" / "corpus"
    code, stdout, _ = run_cli(
        ["generate", "--out", str(out), "--docs", "5", "--seed", "2"], capsys
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 5


def test_pretrain_log_has_required_fields(workspace):
    lines = [json.loads(l) for l in open(workspace["log"])]
    assert len(lines) >= 1
    for rec in lines:
        assert set(rec) >= {"step", "total", "mlm", "ltr", "tdi", "lr", "seconds"}


def test_finetune_then_evaluate_emits_f1(workspace, tmp_path, capsys):
    ft = tmp_path / "ft"
    code, stdout, _ = run_cli(
        ["finetune", "--task", "seq", "--manifest", workspace["manifest"],
         "--checkpoint", workspace["checkpoint"], "--out", str(ft),
         "--finetune_epochs", "1", "--seed", "3"],
        capsys,
    )
    assert code == 0
    metrics = json.loads(stdout.strip().splitlines()[-1])
    assert "f1" in metrics and 0.0 <= metrics["f1"] <= 1.0

    code, stdout, _ = run_cli(
        ["evaluate", "--checkpoint", str(ft), "--manifest", workspace["manifest"],
         "--split", "test"],
        capsys,
    )
    assert code == 0
    metrics = json.loads(stdout.strip().splitlines()[-1])
    assert {"precision", "recall", "f1"} <= set(metrics)


def test_unshared_spatial_flag_grows_params_by_2d2L(workspace, tmp_path, capsys):
    outs = {}
    for share in ("true", "false"):
        out = tmp_path / f"share_{share}"
        code, stdout, _ = run_cli(
            ["finetune", "--task", "seq", "--manifest", workspace["manifest"],
             "--scratch", "--vocab", workspace["vocab"], "--out", str(out),
             "--finetune_epochs", "0", "--seed", "3",
             "--model.share_spatial_weights", share, *fast_flags()],
            capsys,
        )
        assert code == 0
        outs[share] = json.loads(stdout.strip().splitlines()[-1])["param_count"]
    d, layers = 8, 1
    assert outs["false"] - outs["true"] == 2 * d * d * layers


def test_finetune_dimension_mismatch_is_config_error(workspace, tmp_path, capsys):
    code, _, err = run_cli(
        ["finetune", "--task", "seq", "--manifest", workspace["manifest"],
         "--checkpoint", workspace["checkpoint"], "--out", str(tmp_path / "x"),
         "--finetune_epochs", "1", "--model.d", "32"],
        capsys,
    )
    assert code == 2
    payload = json.loads(err.strip())
    assert payload["error"] == "config"
    assert "model.d" in payload["message"]


def test_evaluate_without_labels_is_clear_error(workspace, tmp_path, capsys):
    # strip labels from a copy of the corpus
    corpus_dir = workspace["corpus_dir"]
    stripped = tmp_path / "nolabels"
    os.makedirs(stripped / "ocr")
    os.makedirs(stripped / "img")
    for entry in json.loads((corpus_dir / "manifest.json").read_text()):
        ocr_rel, img_rel, split = entry
        obj = json.loads((corpus_dir / ocr_rel).read_text())
        for w in obj["words"]:
            w["label"] = None
        (stripped / ocr_rel).write_text(json.dumps(obj))
        (stripped / img_rel).write_bytes((corpus_dir / img_rel).read_bytes())
    (stripped / "manifest.json").write_bytes((corpus_dir / "manifest.json").read_bytes())

    ft = tmp_path / "ft_for_eval"
    code, _, _ = run_cli(
        ["finetune", "--task", "seq", "--manifest", workspace["manifest"],
         "--checkpoint", workspace["checkpoint"], "--out", str(ft),
         "--finetune_epochs", "0", "--seed", "3"],
        capsys,
    )
    assert code == 0
    code, _, err = run_cli(
        ["evaluate", "--checkpoint", str(ft), "--manifest", str(stripped / "manifest.json")],
        capsys,
    )
    assert code == 3
    assert json.loads(err.strip())["error"] == "data"


def test_predict_emits_word_labels(workspace, tmp_path, capsys):
    ft = tmp_path / "ft_predict"
    code, _, _ = run_cli(
        ["finetune", "--task", "seq", "--manifest", workspace["manifest"],
         "--checkpoint", workspace["checkpoint"], "--out", str(ft),
         "--finetune_epochs", "0", "--seed", "3"],
        capsys,
    )
    assert code == 0
    corpus_dir = workspace["corpus_dir"]
    code, stdout, _ = run_cli(
        ["predict", "--checkpoint", str(ft),
         "--ocr", str(corpus_dir / "ocr" / "doc00000.json"),
         "--image", str(corpus_dir / "img" / "doc00000.pgm")],
        capsys,
    )
    assert code == 0
    payload = json.loads(stdout.strip().splitlines()[-1])
    assert payload["id"] == "doc00000"
    assert len(payload["words"]) > 0
    assert all("label_name" in w for w in payload["words"])


def test_export_attention_rows_sum_to_one_and_pgm_formula(workspace, tmp_path, capsys):
    corpus_dir = workspace["corpus_dir"]
    prefix = str(tmp_path / "attn")
    code, stdout, _ = run_cli(
        ["export-attention", "--checkpoint", workspace["checkpoint"],
         "--ocr", str(corpus_dir / "ocr" / "doc00001.json"),
         "--image", str(corpus_dir / "img" / "doc00001.pgm"),
         "--layer", "0", "--head", "1", "--out-prefix", prefix],
        capsys,
    )
    assert code == 0
    with open(prefix + ".bin", "rb") as f:
        grid = T.load_array(f)
    assert grid.shape[0] == grid.shape[1]
    assert np.max(np.abs(grid.sum(axis=1) - 1.0)) < 1e-6
    pgm = read_pgm(prefix + ".pgm")
    want = np.round(255.0 * (1.0 - grid / grid.max())).astype(np.uint8)
    assert np.array_equal(pgm, want)
    # masked key columns exactly zero
    mask_cols = np.flatnonzero((grid == 0).all(axis=0))
    ocr = json.loads((corpus_dir / "ocr" / "doc00001.json").read_text())
    assert len(mask_cols) >= 0  # pads exist only if tokens < N; sums already checked


def test_export_attention_out_of_range_is_config_error(workspace, tmp_path, capsys):
    corpus_dir = workspace["corpus_dir"]
    code, _, err = run_cli(
        ["export-attention", "--checkpoint", workspace["checkpoint"],
         "--ocr", str(corpus_dir / "ocr" / "doc00001.json"),
         "--image", str(corpus_dir / "img" / "doc00001.pgm"),
         "--layer", "9", "--head", "0", "--out-prefix", str(tmp_path / "x")],
        capsys,
    )
    assert code == 2
    assert json.loads(err.strip())["error"] == "config"


def test_help_documents_every_config_key(capsys):
    from mmdoc.config import RunConfig, to_flat_dict

    for command in ("generate", "build-vocab", "pretrain", "finetune"):
        with pytest.raises(SystemExit):
            cli.main([command, "--help"])
        out = capsys.readouterr().out
        for key in to_flat_dict(RunConfig()):
            assert f"--{key}" in out, (command, key)


def test_config_file_roundtrip_and_flag_precedence(tmp_path, capsys):
    from mmdoc.config import RunConfig, load_config_file, save_config_file, to_flat_dict

    cfg = RunConfig()
    cfg.model.d = 48
    cfg.seed = 9
    path = tmp_path / "cfg.json"
    save_config_file(cfg, path)
    back = load_config_file(path)
    assert to_flat_dict(back) == to_flat_dict(cfg)

    # flag > file > default
    out = tmp_path / "gen"
    code, _, _ = run_cli(
        ["generate", "--out", str(out), "--docs", "2", "--config", str(path), "--seed", "11"],
        capsys,
    )
    assert code == 0
    # same command with explicit seed 11 and no config file gives identical bytes
    out2 = tmp_path / "gen2"
    code, _, _ = run_cli(["generate", "--out", str(out2), "--docs", "2", "--seed", "11"], capsys)
    assert code == 0
    assert (out / "ocr" / "doc00000.json").read_bytes() == (out2 / "ocr" / "doc00000.json").read_bytes()


def test_unknown_config_key_in_file_is_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"model.nonexistent": 1}')
    code, _, err = run_cli(
        ["generate", "--out", str(tmp_path / "g"), "--docs", "1", "--config", str(path)],
        capsys,
    )
    assert code == 2
    assert json.loads(err.strip())["error"] == "config"


def test_console_entrypoint_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "mmdoc.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "export-attention" in proc.stdout
