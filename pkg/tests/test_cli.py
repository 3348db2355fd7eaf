import json
import logging

import jsonschema
import numpy as np
import pytest

from conftest import write_toy_corpus
from i2gfp.cli import CliConfigError, _model_config, infer_alpha, main, resolve_config
from i2gfp.matting_core import Label, load_alpha, save_alpha, save_rgb, save_trimap
from i2gfp.metrics import REPORT_SCHEMA
from i2gfp.network import ModelConfig, build_model, save_params
from i2gfp.synthetic import make_sample


@pytest.fixture
def corpus(tmp_path):
    return write_toy_corpus(tmp_path / "corpus", n_fg=2, n_bg=3, size=40)


def compose_config(path, corpus, out, seed=3):
    path.write_text(
        "# toy composition\n"
        f"fg_dir = {corpus['fg']}\n"
        f"alpha_dir = {corpus['alpha']}\n"
        f"bg_dir = {corpus['bg']}\n"
        f"output_dir = {out}\n"
        "backgrounds_per_foreground = 3\n"
        f"seed = {seed}  # fixed\n")
    return path


# -- compose ---------------------------------------------------------------------------

def test_compose_writes_six_samples_and_is_reproducible(tmp_path, corpus):
    assert main(["compose", str(compose_config(tmp_path / "a.cfg", corpus, tmp_path / "out_a"))]) == 0
    assert main(["compose", "--config", str(compose_config(tmp_path / "b.cfg", corpus, tmp_path / "out_b"))]) == 0
    merged = sorted((tmp_path / "out_a" / "merged").glob("*.png"))
    assert len(merged) == 6
    manifest_a = (tmp_path / "out_a" / "manifest.jsonl").read_bytes()
    assert len(manifest_a.splitlines()) == 6
    assert manifest_a == (tmp_path / "out_b" / "manifest.jsonl").read_bytes()
    for p in merged:
        assert p.read_bytes() == (tmp_path / "out_b" / "merged" / p.name).read_bytes()


def test_compose_missing_alpha_dir_exits_2(tmp_path, corpus, caplog):
    missing = tmp_path / "no_such_alpha"
    cfg = compose_config(tmp_path / "c.cfg", corpus, tmp_path / "out")
    with caplog.at_level(logging.ERROR):
        status = main(["compose", str(cfg), "--set", f"alpha_dir={missing}"])
    assert status == 2
    assert str(missing) in caplog.text


def test_compose_paths_are_relative_to_config(tmp_path, corpus):
    cfg = tmp_path / "corpus" / "rel.cfg"
    cfg.write_text("fg_dir = fg\nalpha_dir = alpha\nbg_dir = bg\noutput_dir = ../rel_out\n")
    assert main(["compose", str(cfg)]) == 0
    assert len(list((tmp_path / "rel_out" / "merged").glob("*.png"))) == 2


# -- config resolution -------------------------------------------------------------------

def test_precedence_file_env_set_flag(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("iterations = 10\nbatch_size = 3\nlr_initial = 0.01\nstage = 1\n")
    env = {"I2GFP_BATCH_SIZE": "5", "I2GFP_LR_INITIAL": "0.02"}
    resolved = resolve_config("train", str(cfg), ["lr_initial=0.03", "stage=2"], {"stage": 1}, environ=env)
    assert resolved["iterations"] == 10  # file
    assert resolved["batch_size"] == 5  # env beats file
    assert resolved["lr_initial"] == 0.03  # --set beats env
    assert resolved["stage"] == 1  # explicit flag beats --set
    assert resolved["lr_min"] == 0.0  # default


@pytest.mark.parametrize("text", ["iterations = ten\n", "no_such_key = 1\n", "just words\n"])
def test_bad_config_file_is_a_config_error(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    with pytest.raises(CliConfigError):
        resolve_config("train", str(cfg), [], {}, environ={})
    assert main(["train", "-c", str(cfg)]) == 2


def test_every_command_echoes_its_config(tmp_path, caplog):
    with caplog.at_level(logging.INFO):
        main(["eval", str(tmp_path / "p"), str(tmp_path / "g"), str(tmp_path / "t")])
    assert "eval config:" in caplog.text
    assert "region = unknown" in caplog.text


@pytest.mark.parametrize("name, ic, gfp", [("base", False, False), ("base_ic", True, False),
                                           ("i2gfp", True, True)])
def test_ablation_mapping(name, ic, gfp):
    cfg = resolve_config("train", None, [f"ablation={name}"], {}, environ={})
    mc = _model_config(cfg)
    assert (mc.use_ic, mc.use_gfp) == (ic, gfp)


def test_train_stage_two_without_checkpoint_exits_2(tmp_path, corpus):
    main(["compose", str(compose_config(tmp_path / "a.cfg", corpus, tmp_path / "data"))])
    assert main(["train", "--stage", "2", "--manifest", str(tmp_path / "data" / "manifest.jsonl"),
                 "--set", "iterations=1"]) == 2
    assert main(["train", "--stage", "2", "--ablation", "base", "--set", "iterations=1",
                 "--manifest", str(tmp_path / "data" / "manifest.jsonl")]) == 2


def test_train_and_infer_end_to_end(tmp_path, corpus, capsys):
    main(["compose", str(compose_config(tmp_path / "a.cfg", corpus, tmp_path / "data"))])
    run = tmp_path / "run"
    status = main(["train", "--manifest", str(tmp_path / "data" / "manifest.jsonl"), "--out-dir", str(run),
                   "--set", "input_size=32", "--set", "iterations=2", "--set", "batch_size=2",
                   "--set", "checkpoint_every=2"])
    assert status == 0
    ck = run / "stage1_iter0000002.npz"
    assert ck.exists() and (run / "train_log.jsonl").exists()
    merged = sorted((tmp_path / "data" / "merged").glob("*.png"))[0]
    trimap = tmp_path / "data" / "trimap" / merged.name
    args = ["infer", "--checkpoint", str(ck), "--image", str(merged), "--trimap", str(trimap)]
    assert main(args + ["--out", str(tmp_path / "a.png")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert load_alpha(tmp_path / "a.png").shape == (40, 40)


# -- infer -------------------------------------------------------------------------------

@pytest.fixture
def desk_checkpoint(tmp_path):
    path = tmp_path / "model.npz"
    save_params(path, build_model(ModelConfig.desk(32)))
    return path


@pytest.mark.parametrize("label, value", [(Label.FOREGROUND, 1.0), (Label.BACKGROUND, 0.0)])
def test_infer_known_regions_are_forced(tmp_path, desk_checkpoint, label, value):
    s = make_sample(1, size=48)
    save_rgb(tmp_path / "img.png", s.image)
    save_trimap(tmp_path / "tri.png", np.full((48, 48), label, np.uint8))
    assert main(["infer", "--checkpoint", str(desk_checkpoint), "--image", str(tmp_path / "img.png"),
                 "--trimap", str(tmp_path / "tri.png"), "--out", str(tmp_path / "out.png")]) == 0
    assert (load_alpha(tmp_path / "out.png") == value).all()


def test_infer_size_mismatch_exits_2(tmp_path, desk_checkpoint):
    save_rgb(tmp_path / "img.png", np.zeros((20, 30, 3)))
    save_trimap(tmp_path / "tri.png", np.ones((20, 20), np.uint8))
    assert main(["infer", "--checkpoint", str(desk_checkpoint), "--image", str(tmp_path / "img.png"),
                 "--trimap", str(tmp_path / "tri.png"), "--out", str(tmp_path / "out.png")]) == 2


def test_infer_missing_checkpoint_exits_1(tmp_path):
    save_rgb(tmp_path / "img.png", np.zeros((20, 20, 3)))
    save_trimap(tmp_path / "tri.png", np.ones((20, 20), np.uint8))
    assert main(["infer", "--checkpoint", str(tmp_path / "none.npz"), "--image", str(tmp_path / "img.png"),
                 "--trimap", str(tmp_path / "tri.png"), "--out", str(tmp_path / "out.png")]) == 1


def test_infer_alpha_restores_input_size():
    model = build_model(ModelConfig.desk(32))
    s = make_sample(2, size=50)
    a = infer_alpha(model, s.image, s.trimap)
    assert a.shape == (50, 50) and 0.0 <= a.min() and a.max() <= 1.0


# -- eval -------------------------------------------------------------------------------

def write_eval_dirs(root, n=3, size=24, seed=0):
    rng = np.random.default_rng(seed)
    dirs = {k: root / k for k in ("pred", "gt", "tri")}
    for d in dirs.values():
        d.mkdir(parents=True)
    for i in range(n):
        g = rng.random((size, size))
        tri = np.full((size, size), Label.UNKNOWN, np.uint8)
        tri[:4] = Label.BACKGROUND
        save_alpha(dirs["gt"] / f"im{i}.png", g)
        save_alpha(dirs["pred"] / f"im{i}.png", g)
        save_trimap(dirs["tri"] / f"im{i}.png", tri)
    return dirs


@pytest.mark.parametrize("region", ["unknown", "full"])
def test_eval_identical_dirs_give_zeros(tmp_path, capsys, region):
    d = write_eval_dirs(tmp_path)
    report = tmp_path / "report.json"
    assert main(["eval", str(d["pred"]), str(d["gt"]), str(d["tri"]), "--region", region,
                 "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["region"] == region
    assert doc["aggregate"] == {"count": 3, "sad": 0.0, "mse": 0.0, "grad": 0.0, "conn": 0.0}
    assert "mean (3 images)" in capsys.readouterr().out


def test_eval_count_mismatch_exits_2(tmp_path):
    d = write_eval_dirs(tmp_path)
    (d["pred"] / "im0.png").unlink()
    assert main(["eval", str(d["pred"]), str(d["gt"]), str(d["tri"])]) == 2


def test_eval_unreadable_image_exits_1(tmp_path):
    d = write_eval_dirs(tmp_path)
    (d["pred"] / "im1.png").write_bytes(b"not a png")
    assert main(["eval", str(d["pred"]), str(d["gt"]), str(d["tri"])]) == 1


# -- audit ---------------------------------------------------------------------------------

def test_audit_command(tmp_path, capsys):
    report = tmp_path / "audit.json"
    assert main(["audit", "--probes", "5", "--seed", "2", "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert len(doc["probes"]) == 5 and doc["max_rel_error"] < 1e-2
    assert "max relative error" in capsys.readouterr().out
