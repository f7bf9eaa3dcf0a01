import struct

import numpy as np
import pytest

from trajode.checkpoint import (checkpoint_from_bytes, checkpoint_to_bytes, format_config,
                                parse_config, read_checkpoint, write_checkpoint)
from trajode.errors import ParseError, UnsupportedVersionError

PARAMS = {"enc.s0.W": np.arange(6.0).reshape(2, 3), "ode.b2": np.array([0.1, -2.5]),
          "gmm.means": np.random.default_rng(0).normal(size=(3, 2, 2)), "scalar": np.array(4.0)}
CONFIG = {"backbone": "ode", "solver.steps": 10, "solver.method": "rk4", "ode.augment": None,
          "variational": False, "learning_rate": 1e-4, "tool.version": "0.1.0"}


def test_round_trip(tmp_path):
    write_checkpoint(tmp_path / "m.ltrj", PARAMS, CONFIG)
    params, config = read_checkpoint(tmp_path / "m.ltrj")
    assert config == CONFIG
    assert set(params) == set(PARAMS)
    for k in PARAMS:
        assert params[k].shape == np.shape(PARAMS[k]) and np.array_equal(params[k], PARAMS[k])


def test_layout():
    raw = checkpoint_to_bytes({"w": np.array([[1.0, 2.0]])}, {"a": 1})
    assert raw[:4] == b"LTRJ"
    version, n = struct.unpack("<II", raw[4:12])
    assert version == 1 and raw[12:12 + n] == b"a=1"
    pos = 12 + n
    assert struct.unpack("<II", raw[pos:pos + 8]) == (1, 1)
    assert raw[pos + 8:pos + 9] == b"w"
    assert struct.unpack("<3I", raw[pos + 9:pos + 21]) == (2, 1, 2)
    assert struct.unpack("<2d", raw[pos + 21:]) == (1.0, 2.0)


def test_errors():
    raw = checkpoint_to_bytes(PARAMS, CONFIG)
    with pytest.raises(ParseError, match="byte offset"):
        checkpoint_from_bytes(raw[:-3])
    with pytest.raises(ParseError):
        checkpoint_from_bytes(b"FMTJ" + raw[4:])
    with pytest.raises(UnsupportedVersionError):
        checkpoint_from_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(ParseError):
        checkpoint_from_bytes(raw + b"\0")


def test_config_text():
    text = format_config({"b": 1.5, "a": True, "c": None, "d": "x"})
    assert text == "a=true\nb=1.5\nc=none\nd=x"
    assert parse_config("# comment\n\nkey = 3\nname=forward\n") == {"key": 3, "name": "forward"}
    with pytest.raises(ParseError):
        parse_config("novalue")
    with pytest.raises(ValueError):
        format_config({"a": "x\ny"})
