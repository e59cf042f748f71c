import json
import logging

import pytest

from microvlm.config import RunConfig, load_config, parse_config
from microvlm.errors import ConfigError

TEXT = """
[train]
epochs = 7
lr = 0.002

[rank]
r_min = 2
r_max = 8
weights = 1, 1, 2, 1, 1, 1, 1

[fusion]
d_model = 32
heads = 2
head_dim = 16

[vision]
dim = 16
"""


def test_parse_and_build():
    cfg = parse_config(TEXT)
    t = cfg.train_config()
    assert (t.epochs, t.lr, t.r_min, t.r_max) == (7, 0.002, 2, 8)
    assert t.rank_weights == [1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0]
    f = cfg.fusion_config(40)
    assert (f.vocab_size, f.vision_dim, f.r_max) == (40, 16, 8)


def test_unknown_key_and_section():
    with pytest.raises(ConfigError):
        parse_config("[train]\nepochz = 3\n")
    with pytest.raises(ConfigError):
        parse_config("[nope]\na = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[fusion]\nr_max = 8\n")


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_config("[train]\nepochs = many\n")
    with pytest.raises(ConfigError):
        parse_config("[rank]\nrank_norm = maybe\n")
    with pytest.raises(ConfigError):
        parse_config("[train]\nlr = 0\n").train_config()
    with pytest.raises(ConfigError):
        parse_config("not an ini file")


def test_override_beats_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(TEXT)
    cfg = load_config(path)
    cfg.set("train", "epochs", "3")
    cfg.set("rank", "rank_norm", "true")
    assert cfg.train_config().epochs == 3 and cfg.train_config().rank_norm
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_effective_config_echoed(caplog):
    cfg = RunConfig()
    with caplog.at_level(logging.INFO, logger="microvlm.config"):
        cfg.echo(50)
    msg = next(r.getMessage() for r in caplog.records if "effective config" in r.getMessage())
    data = json.loads(msg.split(":", 1)[1])
    assert data["fusion"]["vocab_size"] == 50 and data["train"]["r_max"] == 16


def test_inline_comments():
    cfg = parse_config("[train]\nepochs = 4   ; short run\n[rank]\nweights = none ; uniform\n")
    assert cfg.train_config().epochs == 4 and cfg.rank_config().weights is None
