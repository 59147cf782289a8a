"""Typed flat-config parsing and round trips."""

import pytest

from vidflow.config import check_keys, parse_config, serialize_config


def test_parse_types():
    cfg = parse_config("""
# a comment
steps = 200
lr = 3e-4
gan_start = 0.3
shuffle = true
frozen = FALSE
name = desk run one
""")
    assert cfg == {"steps": 200, "lr": 3e-4, "gan_start": 0.3,
                   "shuffle": True, "frozen": False, "name": "desk run one"}
    assert isinstance(cfg["steps"], int)
    assert isinstance(cfg["lr"], float)
    assert isinstance(cfg["shuffle"], bool)


def test_parse_preserves_order():
    cfg = parse_config("z = 1\na = 2\nm = 3\n")
    assert list(cfg) == ["z", "a", "m"]


def test_parse_error_carries_line_number():
    with pytest.raises(ValueError, match="line 3"):
        parse_config("a = 1\n\nnot a pair\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_config("a = 1\n= 2\n")


def test_parse_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        parse_config("a = 1\na = 2\n")


def test_round_trip_identity():
    text = ("steps = 5000\nlr = 0.0003\nt_final = 0.05\nshuffle = false\n"
            "prompt = red square moving right quickly\ntiny = 1e-07\n")
    once = parse_config(text)
    twice = parse_config(serialize_config(once))
    assert once == twice
    assert list(once) == list(twice)
    # a second lap is a fixed point
    assert serialize_config(twice) == serialize_config(once)


def test_value_containing_equals_sign():
    cfg = parse_config("note = a = b\n")
    assert cfg["note"] == "a = b"


def test_check_keys():
    cfg = {"steps": 1, "lr": 0.1}
    assert check_keys(cfg, ("steps", "lr", "extra")) is cfg
    with pytest.raises(ValueError, match="stepz"):
        check_keys({"stepz": 1}, ("steps",), "vae-train")
