import pytest

from semcomp.config import SCHEMA, Config, ConfigError, config_from_text, parse_config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == Config()
    assert cfg.text().count("\n") == len(SCHEMA)


def test_override_beats_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nmgsc.image = 0.7\nmodel.dim = 32  # trailing\n")
    cfg = parse_config(p, ["mgsc.image=0.9"])
    assert cfg["mgsc.image"] == 0.9 and cfg["model.dim"] == 32
    assert p.read_text().startswith("# comment")


@pytest.mark.parametrize("text,key", [
    ("mgsc.image = 1.5", "mgsc.image"),
    ("mlm.ratio = -0.1", "mlm.ratio"),
    ("model.dim = sixty", "model.dim"),
    ("task.cl = maybe", "task.cl"),
    ("loss.completion_global = hinge", "loss.completion_global"),
    ("nope.key = 1", "nope.key"),
])
def test_errors_name_the_key(tmp_path, text, key):
    p = tmp_path / "bad.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(p)


def test_divisibility_is_checked():
    with pytest.raises(ConfigError):
        Config({"model.dim": 30, "model.heads": 4})
    with pytest.raises(ConfigError):
        Config({"model.image_size": 30})


def test_text_roundtrip():
    cfg = Config({"model.dim": 32, "task.mgsc": False, "optim.lr": 3e-4})
    assert config_from_text(cfg.text()) == cfg
