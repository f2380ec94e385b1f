import json

import numpy as np
import pytest
from PIL import Image

from tcgan.cli import MANIFEST_NAME, main
from tcgan.config import ConfigError, EvalOptions, parse_config
from tcgan.data import SynthSpec
from tcgan.trainer import TrainConfig

TINY_YAML = """\
gen_channels: 4
gen_blocks: 1
disc_channels: 4
msm_channels: 4
load_size: 36
crop_size: 32
epochs_total: 1
epochs_constant: 1
msm_epochs: 1
"""


def _yaml(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --------------------------------------------------------------------------
# config


def test_empty_config_gives_defaults(tmp_path):
    assert parse_config(_yaml(tmp_path, ""), env={}) == TrainConfig()
    assert parse_config(None, "synth", env={}) == SynthSpec()
    assert parse_config(None, "eval", env={}) == EvalOptions()


def test_config_overrides_and_coercion(tmp_path):
    cfg = parse_config(_yaml(tmp_path, "lambda2: 0\nbase_lr: 0.0001\n"), env={})
    assert cfg.lambda2 == 0.0 and isinstance(cfg.lambda2, float)
    assert cfg.base_lr == 1e-4 and cfg.lambda1 == 1


@pytest.mark.parametrize("text,match", [
    ("lamda2: 40\n", "lamda2"),
    ("epochs_total: ten\n", "epochs_total"),
    ("flip: 1\n", "flip"),
    ("- a\n- b\n", "mapping"),
    ("epochs_constant: 500\n", "epochs"),
])
def test_bad_configs_rejected(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(_yaml(tmp_path, text), env={})


def test_seed_env_overrides_config(tmp_path):
    path = _yaml(tmp_path, "seed: 3\n")
    assert parse_config(path, env={}).seed == 3
    assert parse_config(path, env={"TCGAN_SEED": "11"}).seed == 11
    assert parse_config(None, "synth", env={"TCGAN_SEED": "5"}).seed == 5
    with pytest.raises(ConfigError, match="TCGAN_SEED"):
        parse_config(path, env={"TCGAN_SEED": "x"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.yaml")


# --------------------------------------------------------------------------
# command line


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("TCGAN_SEED", raising=False)


def _synth(tmp_path, name="corpus", seed=7, n_shadow=4, n_nonshadow=3, size=32):
    cfg = _yaml(tmp_path, f"n_shadow: {n_shadow}\nn_nonshadow: {n_nonshadow}\nimage_size: {size}\n",
                f"synth_{name}.yaml")
    out = tmp_path / name
    assert main(["synth", "--config", str(cfg), "--seed", str(seed), "--out", str(out)]) == 0
    return out


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != MANIFEST_NAME}


def test_synth_is_byte_reproducible(tmp_path):
    a, b = _synth(tmp_path, "a"), _synth(tmp_path, "b")
    assert _files(a) == _files(b)
    assert len([k for k in _files(a) if k.startswith("shadow/")]) == 4
    c = _synth(tmp_path, "c", seed=8)
    assert _files(a) != _files(c)


def test_synth_manifest(tmp_path):
    root = _synth(tmp_path)
    m = json.loads((root / MANIFEST_NAME).read_text())
    assert m["command"] == "synth" and m["seeds"] == {"seed": 7}
    assert m["config"]["n_shadow"] == 4
    assert {"argv", "code_version", "started", "finished", "outputs"} <= set(m)


def test_help_lists_defaults(capsys):
    assert main(["train", "--help"]) == 0
    out = " ".join(capsys.readouterr().out.split())
    assert "default: paper" in out and "--resume" in out
    assert main(["infer", "--help"]) == 0
    assert "default: msm" in " ".join(capsys.readouterr().out.split())


def test_usage_and_config_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["train", "--data", str(tmp_path)]) == 2  # --out missing
    bad = _yaml(tmp_path, "lamda2: 1\n")
    assert main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "lamda2" in capsys.readouterr().err


def test_single_nonshadow_image_exits_3(tmp_path, capsys):
    root = _synth(tmp_path, n_nonshadow=1)
    cfg = _yaml(tmp_path, TINY_YAML)
    code = main(["train", "--config", str(cfg), "--data", str(root), "--out", str(tmp_path / "run")])
    assert code == 3
    assert "two shadow-free images" in capsys.readouterr().err


def test_missing_data_exits_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_divergence_exits_4(tmp_path, monkeypatch):
    import tcgan.cli as cli
    from tcgan.losses import NonFiniteLossError

    def boom(*a, **k):
        raise NonFiniteLossError("tc", float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    root = _synth(tmp_path)
    assert main(["train", "--config", str(_yaml(tmp_path, TINY_YAML)), "--data", str(root),
                 "--out", str(tmp_path / "run")]) == 4


def test_train_infer_eval_round_trip(tmp_path):
    root = _synth(tmp_path, n_shadow=5, n_nonshadow=4)
    cfg = _yaml(tmp_path, TINY_YAML)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(root), "--out", str(run)]) == 0
    manifest = json.loads((run / MANIFEST_NAME).read_text())
    assert manifest["seeds"]["g1"] != manifest["seeds"]["g2"]
    assert (run / "final.ckpt").is_file()

    msm = tmp_path / "msm.pt"
    assert main(["train-msm", "--config", str(cfg), "--data", str(root), "--out", str(msm)]) == 0
    assert msm.is_file()

    out = tmp_path / "out"
    assert main(["infer", "--checkpoint", str(run / "final.ckpt"), "--msm", str(msm),
                 "--input", str(root / "shadow"), "--output", str(out), "--dump-candidates"]) == 0
    outputs = sorted(out.glob("*.png"))
    assert len(outputs) == 5
    assert np.asarray(Image.open(outputs[0])).shape == (32, 32, 3)
    sel = json.loads((out / "selection.json").read_text())
    assert len(sel) == 5 and all(v["branch"] in (1, 2) for v in sel.values())
    assert len(list((out / "candidates").glob("*.png"))) == 10

    report = tmp_path / "report.json"
    assert main(["eval", "--pred", str(out), "--ref", str(root / "gt"), "--mask", str(root / "mask"),
                 "--input", str(root / "shadow"), "--metrics", "fid,kid,rmse", "--space", "rgb",
                 "--report", str(report)]) == 0
    r = json.loads(report.read_text())
    assert {"fid", "kid_mean", "kid_std", "rmse", "extractor_id", "color_space"} <= set(r)
    assert set(r["rmse"]) <= {"S", "N", "A", "N-I"} and "A" in r["rmse"]

    report2 = tmp_path / "fid_only.json"
    assert main(["eval", "--pred", str(out), "--ref", str(root / "nonshadow"), "--metrics", "fid",
                 "--report", str(report2)]) == 0
    assert set(json.loads(report2.read_text())) == {"fid", "extractor_id"}

    feats = tmp_path / "feats"
    first = sorted((root / "shadow").glob("*.png"))[0]
    assert main(["dump-features", "--checkpoint", str(run / "final.ckpt"), "--input", str(first),
                 "--channels", "3", "--out", str(feats)]) == 0
    assert np.asarray(Image.open(feats / f"{first.stem}_ste1.png")).shape == (4, 12, 3)


def test_infer_resizes_odd_inputs_and_fixed_branch(tmp_path):
    root = _synth(tmp_path)
    cfg = _yaml(tmp_path, TINY_YAML)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(root), "--out", str(run)]) == 0
    odd = tmp_path / "odd.png"
    Image.fromarray(np.full((37, 45, 3), 90, dtype=np.uint8)).save(odd)
    out = tmp_path / "out"
    assert main(["infer", "--checkpoint", str(run / "final.ckpt"), "--branch", "2",
                 "--input", str(odd), "--output", str(out)]) == 0
    assert np.asarray(Image.open(out / "odd.png")).shape == (37, 45, 3)
    assert main(["infer", "--checkpoint", str(run / "final.ckpt"), "--input", str(odd),
                 "--output", str(out)]) == 2  # msm branch without a classifier


def test_seed_env_reaches_synth(tmp_path, monkeypatch):
    cfg = _yaml(tmp_path, "n_shadow: 1\nn_nonshadow: 1\nimage_size: 16\n")
    monkeypatch.setenv("TCGAN_SEED", "21")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / MANIFEST_NAME).read_text())["seeds"] == {"seed": 21}
