import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from dislab.cli import (
    COMMANDS,
    EXIT_DOMAIN,
    EXIT_OK,
    EXIT_USAGE,
    SNAPSHOT_NAME,
    build_parser,
    main,
    read_config_file,
)
from dislab.training import read_metrics

from stub_server import StubTileServer

TINY = ["--synthetic", "digit", "--count", "8", "--epochs", "1", "--batch", "2",
        "--latent-dim", "8", "--content-dim", "4"]


def _snapshot(path):
    return json.loads(path.read_text())


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    stack = [cmp]
    while stack:
        c = stack.pop()
        if c.left_only or c.right_only or c.diff_files or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        if mismatch or errors:
            return False
        stack.extend(c.subdirs.values())
    return True


# ---------------------------------------------------------------- resolution

def test_train_flags_echoed_in_resolved_config(capsys):
    code = main(["train", "--variant", "fen", "--beta", "4.0", "--gamma", "100", "--lr", "0.001", "--dry-run"])
    assert code == EXIT_OK
    snap = json.loads(capsys.readouterr().out)
    assert (snap["variant"], snap["beta"], snap["gamma"], snap["lr"]) == ("fen", 4.0, 100.0, 0.001)


def test_negative_beta_is_usage_error(capsys):
    assert main(["train", "--beta", "-1"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "beta" in err and ">= 0" in err


def test_unknown_flag_is_usage_error():
    assert main(["train", "--bogus", "1"]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE


def test_unknown_config_key_is_error(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("beta = 2\nbetta = 3\n")
    assert main(["train", "--config", str(cfg), "--dry-run"]) == EXIT_USAGE
    assert "betta" in capsys.readouterr().err
    assert main(["train", "--set", "nope=1", "--dry-run"]) == EXIT_USAGE


def test_override_order(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("# comment\nbeta = 2\ngamma = 3\nepochs = 9\n")
    assert main(["train", "--config", str(cfg), "--set", "gamma=5", "--set", "epochs=11",
                 "--epochs", "13", "--dry-run"]) == EXIT_OK
    snap = json.loads(capsys.readouterr().out)
    assert (snap["beta"], snap["gamma"], snap["epochs"]) == (2.0, 5.0, 13)


def test_config_file_with_section_header(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('[train]\nsynthetic = "map"\nhead-lr = none\n')
    assert read_config_file(cfg) == {"synthetic": "map", "head_lr": "none"}


def test_unparseable_value_is_usage_error():
    assert main(["train", "--set", "epochs=many", "--dry-run"]) == EXIT_USAGE


def test_help_lists_every_flag_with_default(capsys):
    for command, (_, params) in COMMANDS.items():
        with pytest.raises(SystemExit):
            build_parser().parse_args([command, "--help"])
        text = " ".join(capsys.readouterr().out.split())
        for p in params:
            assert p.option in text, (command, p.option)
        assert text.count("(default:") >= len(params) + 3


def test_help_exits_zero():
    assert main(["dataset-gen", "--help"]) == EXIT_OK


# ---------------------------------------------------------------- commands

def test_dataset_gen_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["dataset-gen", "--kind", "map", "--count", "10", "--seed", "7",
                     "--out", str(tmp_path / name)]) == EXIT_OK
    assert _same_tree(tmp_path / "a", tmp_path / "b")
    snap = _snapshot(tmp_path / "a" / SNAPSHOT_NAME)
    assert snap["kind"] == "map" and snap["count"] == 10 and "out" not in snap


def test_dataset_gen_different_seed_differs(tmp_path):
    main(["dataset-gen", "--kind", "digit", "--count", "4", "--seed", "1", "--out", str(tmp_path / "a")])
    main(["dataset-gen", "--kind", "digit", "--count", "4", "--seed", "2", "--out", str(tmp_path / "b")])
    assert not _same_tree(tmp_path / "a", tmp_path / "b")


def test_train_eval_grid_transfer(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--gamma", "2", "--out", str(run)]) == EXIT_OK
    recs = read_metrics(run / "metrics.jsonl")
    assert len(recs) == 3 and all(r.is_finite() for r in recs)
    snap = _snapshot(run / SNAPSHOT_NAME)
    assert snap["gamma"] == 2.0 and snap["command"] == "train"
    ckpt = run / "checkpoints" / "epoch-0001"
    assert ckpt.is_dir()

    # probes need 10 examples per class, so evaluation uses a larger held-out set
    data = ["--synthetic", "digit", "--count", "40"]
    assert main(["eval", "--checkpoint", str(ckpt), *data, "--pairs", "10", "--out", str(tmp_path / "ev")]) == EXIT_OK
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert 0 <= report["friend_probe_acc"] <= 1 and report["n_eval"] == 30

    grid = tmp_path / "g.png"
    assert main(["grid", "--checkpoint", str(ckpt), *data, "--columns", "2", "--out", str(grid)]) == EXIT_OK
    img = Image.open(grid)
    assert img.size == (2 * 32 + 3 * 2, 5 * 32 + 6 * 2)
    assert img.text["row1"] == "reconstruction"
    assert (tmp_path / "g.config.json").exists()

    src = tmp_path / "ds"
    main(["dataset-gen", "--kind", "digit", "--count", "2", "--out", str(src)])
    out = tmp_path / "t.png"
    content, style = sorted((src / "plain").iterdir())[0], sorted((src / "noisy").iterdir())[1]
    assert main(["transfer", "--checkpoint", str(ckpt), "--content", str(content),
                 "--style", str(style), "--out", str(out)]) == EXIT_OK
    assert np.asarray(Image.open(out)).shape == (32, 32, 3)


def test_train_resume_appends_metrics(tmp_path):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--out", str(run)]) == EXIT_OK
    resume = ["--resume", str(run / "checkpoints" / "epoch-0001"), "--epochs", "2"]
    assert main(["train", *TINY, *resume, "--out", str(run)]) == EXIT_OK
    recs = read_metrics(run / "metrics.jsonl")
    assert [r.epoch for r in recs] == [0, 0, 0, 1, 1, 1]


def test_dsed_train_and_eval(tmp_path):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--variant", "dsed", "--beta", "5", "--out", str(run)]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(run / "checkpoints" / "epoch-0001"), "--synthetic", "digit",
                 "--count", "40", "--out", str(tmp_path / "ev")]) == EXIT_OK
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert len(report["cross_style_rates"]) == 3


def test_missing_checkpoint_names_module_and_operation(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--count", "8"]) == EXIT_DOMAIN
    err = capsys.readouterr().err
    assert "training.load_checkpoint" in err


def test_missing_dataset_names_module_and_operation(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--epochs", "1"]) == EXIT_DOMAIN
    assert "datasets.DatasetManifest.read" in capsys.readouterr().err


def test_required_flag(capsys):
    assert main(["eval"]) == EXIT_USAGE
    assert "--checkpoint" in capsys.readouterr().err


def test_model_config_error_is_usage_error(capsys):
    assert main(["train", "--synthetic", "digit", "--count", "4", "--latent-dim", "8",
                 "--content-dim", "8", "--epochs", "1", "--out", "/tmp/unused-run"]) == EXIT_USAGE
    assert "content_dim" in capsys.readouterr().err


def test_tiles_fetch_and_align_with_cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DISLAB_CACHE_DIR", str(tmp_path / "cache"))
    with StubTileServer() as srv:
        for style in ("toner", "terrain"):
            assert main(["tiles-fetch", "--url-template", srv.template, "--style", style,
                         "--bbox=-80,-30,80,60", "--zoom", "2", "--min-request-interval", "0"]) == EXIT_OK
        n = len(srv.requests)
        assert main(["tiles-fetch", "--url-template", srv.template, "--style", "toner",
                     "--bbox=-80,-30,80,60", "--zoom", "2", "--min-request-interval", "0"]) == EXIT_OK
        assert len(srv.requests) == n == 8
    root = tmp_path / "cache"
    assert sorted(p.name for p in (root / "toner").iterdir()) == ["1-1-2.png", "1-2-2.png", "2-1-2.png", "2-2-2.png"]
    assert (root / "toner.fetch.config.json").exists()
    assert main(["tiles-align", "--styles", "toner,terrain", "--split", "1:1"]) == EXIT_OK
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["style_names"] == ["toner", "terrain"]
    assert _snapshot(root / SNAPSHOT_NAME)["styles"] == "toner,terrain"


def test_tiles_fetch_bad_bbox_and_zoom():
    assert main(["tiles-fetch", "--url-template", "http://x/{z}/{x}/{y}.png", "--bbox", "1,2,3"]) == EXIT_USAGE
    assert main(["tiles-fetch", "--url-template", "http://x/{z}/{x}/{y}.png", "--zoom", "23"]) == EXIT_USAGE


def test_tiles_fetch_invalid_region_is_domain_error(tmp_path, capsys):
    code = main(["tiles-fetch", "--url-template", "http://x/{z}/{x}/{y}.png", "--bbox", "10,0,5,1",
                 "--out", str(tmp_path)])
    assert code == EXIT_DOMAIN
    assert "tiles.FetchJob" in capsys.readouterr().err
