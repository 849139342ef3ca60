import pytest

from flowdistill import config as cfglib
from flowdistill.errors import ConfigError


def test_parse_basic_lines():
    cfg = cfglib.parse_config_text("a.b = 1\nc = hello world\n")
    assert cfg == {"a.b": "1", "c": "hello world"}


def test_parse_skips_comments_and_blanks():
    text = "# full comment\n\na = 1  # trailing\n   \nb = 2\n"
    assert cfglib.parse_config_text(text) == {"a": "1", "b": "2"}


def test_parse_rejects_duplicate_keys():
    with pytest.raises(ConfigError, match="duplicate"):
        cfglib.parse_config_text("a = 1\na = 2\n")


def test_parse_rejects_missing_equals():
    with pytest.raises(ConfigError, match="key = value"):
        cfglib.parse_config_text("just some words\n")


def test_parse_rejects_empty_key():
    with pytest.raises(ConfigError, match="empty key"):
        cfglib.parse_config_text("= 3\n")


def test_load_config_reads_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("io.seed = 7\n")
    assert cfglib.load_config(p) == {"io.seed": "7"}


def test_overrides_last_one_wins():
    out = cfglib.apply_overrides({"a": "1"}, ["a=2", "b=3", "a=4"])
    assert out == {"a": "4", "b": "3"}


def test_override_must_have_equals():
    with pytest.raises(ConfigError):
        cfglib.apply_overrides({}, ["broken"])


def test_resolve_fills_defaults_and_rejects_unknown():
    defaults = {"a.x": "1", "a.y": "2"}
    assert cfglib.resolve(defaults, {"a.x": "9"}) == {"a.x": "9", "a.y": "2"}
    with pytest.raises(ConfigError, match="unknown config keys: a.z"):
        cfglib.resolve(defaults, {"a.z": "0"})


def test_resolve_keeps_open_namespace_keys():
    defaults = {"teacher.kind": "ring"}
    out = cfglib.resolve(defaults, {"teacher.dimension": "3", "teacher.kind": "mixture"})
    assert out["teacher.dimension"] == "3"
    assert out["teacher.kind"] == "mixture"


def test_format_config_is_sorted():
    text = cfglib.format_config({"b": "2", "a": "1"})
    assert text == "a = 1\nb = 2\n"


def test_namespace_strips_prefix():
    cfg = {"teacher.kind": "ring", "teacher.radius": "4", "io.seed": "0"}
    assert cfglib.namespace(cfg, "teacher") == {"kind": "ring", "radius": "4"}


def test_typed_accessors():
    cfg = {"i": "42", "f": "2.5", "b": "Yes", "s": "name"}
    assert cfglib.get_int(cfg, "i") == 42
    assert cfglib.get_float(cfg, "f") == 2.5
    assert cfglib.get_bool(cfg, "b") is True
    assert cfglib.get_str(cfg, "s") == "name"


def test_missing_key_raises():
    with pytest.raises(ConfigError, match="missing config key"):
        cfglib.get_int({}, "nope")


@pytest.mark.parametrize("bad,getter", [("x", "get_int"), ("x", "get_float"), ("x", "get_bool")])
def test_bad_values_raise(bad, getter):
    with pytest.raises(ConfigError):
        getattr(cfglib, getter)({"k": bad}, "k")


def test_bool_accepts_many_spellings():
    for v in ("true", "1", "yes", "on"):
        assert cfglib.get_bool({"k": v}, "k") is True
    for v in ("false", "0", "no", "off"):
        assert cfglib.get_bool({"k": v}, "k") is False


def test_list_accessors():
    cfg = {"fs": "0.25, 0.5,0.75", "is": "128,128", "empty": "  "}
    assert cfglib.get_floats(cfg, "fs") == (0.25, 0.5, 0.75)
    assert cfglib.get_ints(cfg, "is") == (128, 128)
    assert cfglib.get_floats(cfg, "empty") == ()
    assert cfglib.get_ints(cfg, "empty") == ()
    with pytest.raises(ConfigError):
        cfglib.get_ints({"k": "1,b"}, "k")


def test_optional_accessors():
    cfg = {"set": "3.5", "blank": "   ", "name": " path.csv "}
    assert cfglib.get_optional_float(cfg, "set") == 3.5
    assert cfglib.get_optional_float(cfg, "blank") is None
    assert cfglib.get_optional_float(cfg, "absent") is None
    assert cfglib.get_optional_str(cfg, "name") == "path.csv"
    assert cfglib.get_optional_str(cfg, "blank") is None


def test_parse_range():
    assert cfglib.parse_range("0.25, 0.75") == (0.25, 0.75)
    with pytest.raises(ConfigError):
        cfglib.parse_range("0.25")
    with pytest.raises(ConfigError):
        cfglib.parse_range("a,b")
