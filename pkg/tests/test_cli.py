import json
from pathlib import Path

import numpy as np
import pytest

from rectangling.cli import main
from rectangling.io_utils import load_image_png, read_manifest

TINY_GEN = ["--n", "3", "--height", "16", "--width", "16", "--max-disp", "2.0", "--seed", "5"]
TINY_TRAIN = [
    "--steps", "40", "--batch", "2", "--lr", "2e-4", "--base-channels", "4",
    "--emb-dim", "8", "--ckpt-every", "20",
]


def _tree_bytes(root: Path, skip_manifest=True) -> dict:
    """File bytes keyed by relative path; the manifest records the target
    directory itself, so byte comparisons across directories exclude it."""
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and not (skip_manifest and p.name == "manifest.json")
    }


def _manifest_equal_modulo_paths(a: Path, b: Path) -> bool:
    ma, mb = read_manifest(a), read_manifest(b)
    for m in (ma, mb):
        for section in ("cli_config", "config"):
            if isinstance(m.get(section), dict):
                for key in ("out", "outputs", "data"):
                    m[section].pop(key, None)
    return ma == mb


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus briefly trained checkpoints, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data)] + TINY_GEN) == 0
    assert main(["train", "mdm", "--data", str(data), "--out", str(root / "mdm")] + TINY_TRAIN) == 0
    assert main(["train", "cdm", "--data", str(data), "--out", str(root / "cdm")] + TINY_TRAIN) == 0
    return root


def test_gen_data_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--out", str(a)] + TINY_GEN) == 0
    assert main(["gen-data", "--out", str(b)] + TINY_GEN) == 0
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert ta.keys() == tb.keys()
    for k in ta:
        assert ta[k] == tb[k], f"{k} differs between runs"
    assert _manifest_equal_modulo_paths(a, b)


def test_gen_data_rejects_zero_samples(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--n", "0"]) == 1
    assert "error:" in capsys.readouterr().err


def test_gen_data_manifest_contents(workspace):
    man = read_manifest(workspace / "data")
    assert man["command"] == "gen-data"
    assert man["config"]["seed"] == 5
    assert man["cli_config"]["seed"] == 5
    assert man["n_samples"] == 3
    assert len(man["baseline"]["rows"]) == 3


def test_train_invalid_model_name_is_usage_error(workspace):
    with pytest.raises(SystemExit) as exc:
        main(["train", "xdm", "--data", str(workspace / "data"), "--out", "/tmp/x"])
    assert exc.value.code == 2


def test_train_rejects_nonpositive_lr(workspace, tmp_path, capsys):
    code = main(
        ["train", "mdm", "--data", str(workspace / "data"), "--out", str(tmp_path), "--lr", "-1"]
    )
    assert code == 1
    assert "lr" in capsys.readouterr().err


def test_train_writes_checkpoint_history_manifest(workspace):
    out = workspace / "mdm"
    assert (out / "mdm.ckpt").exists()
    assert (out / "mdm.ckpt.opt.npz").exists()
    hist = (out / "mdm_history.csv").read_text().splitlines()
    assert hist[0] == "step,l_mse,l_pl,weight,l_total"
    assert len(hist) == 41
    man = read_manifest(out)
    assert man["command"] == "train mdm"
    assert man["train_config"]["steps"] == 40


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    data = workspace / "data"
    full, half = tmp_path / "full", tmp_path / "half"
    common = ["--batch", "2", "--lr", "2e-4", "--base-channels", "4", "--emb-dim", "8", "--seed", "9"]
    assert main(["train", "cdm", "--data", str(data), "--out", str(full), "--steps", "30"] + common) == 0
    assert main(["train", "cdm", "--data", str(data), "--out", str(half), "--steps", "15"] + common) == 0
    assert main(
        ["train", "cdm", "--data", str(data), "--out", str(half), "--steps", "30",
         "--resume", str(half / "cdm.ckpt")] + common
    ) == 0
    from rectangling.training import load_model

    a = load_model(full / "cdm.ckpt")
    b = load_model(half / "cdm.ckpt")
    assert np.array_equal(a.params.values, b.params.values)
    assert (half / "cdm_history.csv").read_text() == (full / "cdm_history.csv").read_text()


RECT_FAST = ["--mdm-steps", "2", "--cdm-steps", "4", "--cfg-scale", "1.0"]


def test_rectangle_missing_checkpoint_names_flag(workspace, tmp_path, capsys):
    code = main(
        ["rectangle", "--data", str(workspace / "data"), "--out", str(tmp_path / "o"),
         "--mdm-ckpt", str(tmp_path / "nope.ckpt"), "--cdm-ckpt", str(workspace / "cdm" / "cdm.ckpt")]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "--mdm-ckpt" in err
    code = main(
        ["rectangle", "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]
    )
    assert code == 1
    assert "--mdm-ckpt" in capsys.readouterr().err


def test_rectangle_is_byte_identical(workspace, tmp_path):
    args = [
        "rectangle", "--data", str(workspace / "data"),
        "--mdm-ckpt", str(workspace / "mdm" / "mdm.ckpt"),
        "--cdm-ckpt", str(workspace / "cdm" / "cdm.ckpt"),
        "--seed", "3",
    ] + RECT_FAST
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert set(ta) == set(tb)
    for k in ta:
        assert ta[k] == tb[k], f"{k} differs between runs"
    assert _manifest_equal_modulo_paths(a, b)
    assert sorted(p for p in ta if p.endswith(".png")) == ["00000.png", "00001.png", "00002.png"]


def test_rectangle_debug_emits_intermediates(workspace, tmp_path):
    out = tmp_path / "dbg"
    assert main(
        ["rectangle", "--data", str(workspace / "data"),
         "--mdm-ckpt", str(workspace / "mdm" / "mdm.ckpt"),
         "--cdm-ckpt", str(workspace / "cdm" / "cdm.ckpt"),
         "--out", str(out), "--debug"] + RECT_FAST
    ) == 0
    for suffix in ("_field.f32", "_field_dx.png", "_field_dy.png", "_coarse.png",
                   "_coarse.f32", "_conf.png", "_conf.f32", "_out.f32"):
        assert (out / f"00000{suffix}").exists(), suffix


def test_rectangle_gt_field_injection(workspace, tmp_path):
    out = tmp_path / "gt"
    assert main(
        ["rectangle", "--data", str(workspace / "data"),
         "--cdm-ckpt", str(workspace / "cdm" / "cdm.ckpt"),
         "--out", str(out), "--gt-field", "--cdm-steps", "4"]
    ) == 0
    assert (out / "00000.png").exists()


def test_eval_against_gt_hits_caps(workspace, tmp_path):
    data = workspace / "data"
    outputs = tmp_path / "copy_gt"
    outputs.mkdir()
    for p in (data / "gt").glob("*.png"):
        (outputs / p.name).write_bytes(p.read_bytes())
    out = tmp_path / "report"
    assert main(["eval", "--outputs", str(outputs), "--data", str(data), "--out", str(out)]) == 0
    man = read_manifest(out)
    assert man["psnr_mean"] == 100.0
    assert abs(man["ssim_mean"] - 1.0) < 1e-12
    assert (out / "report.csv").exists()
    assert "reference" in (out / "summary.txt").read_text()


def test_eval_reference_row_reproduces_generator_baseline(workspace, tmp_path):
    data = workspace / "data"
    outputs = tmp_path / "o"
    outputs.mkdir()
    for p in (data / "gt").glob("*.png"):
        (outputs / p.name).write_bytes(p.read_bytes())
    out = tmp_path / "rep"
    assert main(["eval", "--outputs", str(outputs), "--data", str(data), "--out", str(out)]) == 0
    man = read_manifest(out)
    gen_man = read_manifest(data)
    assert abs(man["ref_psnr_mean"] - gen_man["baseline"]["psnr_mean"]) < 1e-9
    assert abs(man["ref_ssim_mean"] - gen_man["baseline"]["ssim_mean"]) < 1e-9


def test_eval_unmatched_outputs_error(workspace, tmp_path, capsys):
    outputs = tmp_path / "partial"
    outputs.mkdir()
    gt = sorted((workspace / "data" / "gt").glob("*.png"))[0]
    (outputs / gt.name).write_bytes(gt.read_bytes())
    code = main(["eval", "--outputs", str(outputs), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "rep")])
    assert code == 1
    assert "matched" in capsys.readouterr().err


def test_eval_empty_set_errors(tmp_path, capsys):
    (tmp_path / "outs").mkdir()
    (tmp_path / "data").mkdir()
    code = main(["eval", "--outputs", str(tmp_path / "outs"), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "rep")])
    assert code == 1


def test_config_file_defaults_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy config\nn = 2\nheight = 16\nwidth = 16\nmax_disp = 2.0\nseed = 9\n")
    out = tmp_path / "ds"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out), "--seed", "10"]) == 0
    man = read_manifest(out)
    assert man["config"]["n_samples"] == 2   # from file
    assert man["config"]["seed"] == 10       # flag overrides file
    assert main(["gen-data", "--config", str(tmp_path / "nope.cfg"), "--out", str(out)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(out)]) == 1
