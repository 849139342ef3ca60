import math

import numpy as np
import pytest

from flowdistill.errors import ConfigError
from flowdistill.svg import _ticks, line_plot, write_line_plot

XS = np.linspace(0.0, 1.0, 11)


def test_returns_svg_document():
    text = line_plot(XS, [XS**2], title="t", x_label="x", y_label="y")
    assert text.startswith("<svg ")
    assert text.rstrip().endswith("</svg>")
    assert 'xmlns="http://www.w3.org/2000/svg"' in text


def test_deterministic_output():
    a = line_plot(XS, [np.sin(XS), np.cos(XS)], labels=["s", "c"])
    b = line_plot(XS, [np.sin(XS), np.cos(XS)], labels=["s", "c"])
    assert a == b


def test_one_polyline_per_series():
    text = line_plot(XS, [XS, 1.0 - XS, XS * 0.5])
    assert text.count("<polyline") == 3


def test_nonfinite_breaks_polyline_into_segments():
    y = XS.copy()
    y[5] = math.nan
    text = line_plot(XS, [y])
    assert text.count("<polyline") == 2


def test_all_nonfinite_rejected():
    with pytest.raises(ConfigError):
        line_plot(XS, [np.full_like(XS, np.nan)])


def test_constant_series_is_plottable():
    text = line_plot(XS, [np.zeros_like(XS)])
    assert text.count("<polyline") == 1


def test_title_is_escaped():
    text = line_plot(XS, [XS], title="a<b & c>d")
    assert "a&lt;b &amp; c&gt;d" in text
    assert "a<b" not in text


def test_needs_two_points():
    with pytest.raises(ConfigError):
        line_plot([0.5], [[1.0]])


def test_x_grid_must_be_1d():
    with pytest.raises(ConfigError):
        line_plot(np.ones((3, 2)), [np.ones((3, 2))])


def test_needs_at_least_one_series():
    with pytest.raises(ConfigError):
        line_plot(XS, [])


def test_series_length_must_match():
    with pytest.raises(ConfigError):
        line_plot(XS, [XS[:-1]])


def test_one_label_per_series():
    with pytest.raises(ConfigError):
        line_plot(XS, [XS, XS], labels=["only one"])


def test_tick_ladder_uses_round_steps():
    assert list(_ticks(0.0, 1.0)) == [0.0, 0.5, 1.0]
    ticks = _ticks(0.0, 10.0)
    assert ticks[0] == 0.0 and ticks[-1] == 10.0
    steps = {round(b - a, 9) for a, b in zip(ticks, ticks[1:])}
    assert len(steps) == 1


def test_ticks_stay_inside_range():
    for lo, hi in [(0.0, 1.0), (-3.7, 12.4), (0.001, 0.999), (5.0, 5.0)]:
        for t in _ticks(lo, hi):
            assert t >= lo - 1e-9
    with pytest.raises(ConfigError):
        _ticks(0.0, math.inf)


def test_write_line_plot_uses_lf_endings(tmp_path):
    path = tmp_path / "plot.svg"
    write_line_plot(path, XS, [XS])
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode().startswith("<svg ")
