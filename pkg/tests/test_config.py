import json
from pathlib import Path

import pytest

from robustlab.config import ConfigError, ExperimentConfig, apply_overrides, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_shipped_configs_load():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = load_config(path)
        assert cfg.kind == path.stem


def test_overrides_are_typed():
    cfg = load_config(overrides=["conjugate.steps=3", "packet.window_taper=null", "attack.epsilon=0.2",
                                 "spectral.lf_rows=[1,2]", "model.activation=tanh"])
    assert cfg.conjugate.steps == 3 and cfg.packet.window_taper is None
    assert cfg.attack.epsilon == 0.2 and cfg.spectral.lf_rows == [1, 2]
    assert cfg.model.activation == "tanh"


def test_integer_accepted_for_float():
    cfg = load_config(overrides=["attack.epsilon=1"])
    assert cfg.attack.epsilon == 1.0 and isinstance(cfg.attack.epsilon, float)


@pytest.mark.parametrize("override, message", [
    ("bogus=1", "unknown key"),
    ("attack.bogus=1", "unknown key"),
    ("data.n_train=abc", "expected an integer"),
    ("model.widths=3", "expected a list"),
    ("attack.epsilon=true", "expected a number"),
    ("attack=3", "expected an object"),
    ("kind=nonsense", "unknown experiment kind"),
    ("seed=-1", "unsigned"),
    ("data.source=tape", "unknown data source"),
    ("data.images=/nonexistent.gz", "not found"),
    ("checkpoint=/nonexistent", "not found"),
    ("ifa.checkpoint_epochs=[]", "checkpoint_epochs"),
    ("conjugate.eval_every=0", "eval_every"),
])
def test_config_errors(override, message):
    with pytest.raises(ConfigError, match=message):
        load_config(overrides=[override])


def test_override_syntax():
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({}, ["novalue"])
    assert apply_overrides({}, ["a.b=text with spaces"]) == {"a": {"b": "text with spaces"}}


def test_spectra_needs_two_checkpoints():
    with pytest.raises(ConfigError, match="need >= 2 checkpoints"):
        load_config(kind="spectra", overrides=["spectral.checkpoint_epochs=[3]"])


def test_file_paths_relative_to_file(tmp_path):
    data = Path(__file__).resolve().parents[1] / "data" / "mnist5k"
    sub = tmp_path / "cfgs"
    sub.mkdir()
    (sub / "c.json").write_text(json.dumps({"data": {
        "images": str(Path("..") / "mnist" / "images-idx3-ubyte.gz"),
        "labels": str(data / "labels-idx1-ubyte.gz")}}))
    with pytest.raises(ConfigError, match="not found"):
        load_config(sub / "c.json")
    (tmp_path / "mnist").symlink_to(data)
    cfg = load_config(sub / "c.json")
    assert Path(cfg.data.images).resolve() == (data / "images-idx3-ubyte.gz").resolve()


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError, match="top level"):
        load_config(tmp_path / "list.json")


def test_hash_ignores_output_dir_only():
    a, b = ExperimentConfig(out="x"), ExperimentConfig(out="y")
    assert a.hash() == b.hash()
    b.seed = 1
    assert a.hash() != b.hash()


def test_explicit_arguments_win():
    cfg = load_config(CONFIGS / "attack.json", ["seed=5"], seed=9, out="/tmp/o")
    assert cfg.seed == 9 and cfg.out == "/tmp/o"
