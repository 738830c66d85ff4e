import pytest

from glus import config as C


def test_parse_and_defaults(tmp_path):
    f = tmp_path / "exp.cfg"
    f.write_text("# comment\ntrain.steps = 12\nworld.motion_vocabulary = move-left, stop\n\nloss.tau = 0.2  # inline\n")
    cfg = C.load(f, ["train.steps=5"])
    assert cfg["train.steps"] == 5
    assert cfg["world.motion_vocabulary"] == ("move-left", "stop")
    assert cfg["loss.tau"] == 0.2
    assert cfg["train.learning_rate"] == 3e-4
    assert C.train_config(cfg).steps == 5


def test_errors_report_file_and_line(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("train.steps = 3\ntrain.stepz = 4\n")
    with pytest.raises(C.ConfigParseError, match=r"bad.cfg:2: unknown config key"):
        C.load(f)
    f.write_text("train.steps = many\n")
    with pytest.raises(C.ConfigParseError, match=r"bad.cfg:1: bad value"):
        C.load(f)
    f.write_text("\n\njust words\n")
    with pytest.raises(C.ConfigParseError, match=r"bad.cfg:3"):
        C.load(f)
    with pytest.raises(C.ConfigParseError):
        C.load(None, ["nokey"])


def test_dump_roundtrip():
    cfg = C.load(None, ["train.use_memory=false", "data.source_weights=synthetic:1, extra:0.5", "ablate.seeds=3,4"])
    again = C.parse_text(C.dump(cfg))
    for k in C.KEYS:
        assert again[k] == cfg[k], k


def test_builders_accept_defaults():
    cfg = C.Config()
    C.world_config(cfg).validate()
    assert C.model_config(cfg).d_model == 128
    assert C.loss_weights(cfg).lambda_bce == 2.0
    assert C.infer_options(cfg).stride == 3
    assert C.selector_config(cfg).mlp_layers == 3


def test_every_verb_has_keys_listed():
    assert "world.seed" in C.keys_for("generate")
    assert "train.steps" in C.keys_for("train") and "world.seed" not in C.keys_for("train")
    assert set(C.keys_for("ablate")) == set(C.KEYS)
