import json
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from erasure_lab.autodiff import ContractError, DimensionError
from erasure_lab.erasure import ExampleScore, ImportanceReport
from erasure_lab.report import (
    HeatmapData,
    color,
    csv_text,
    emit_csv,
    emit_detail_csv,
    erasure_text,
    fmt,
    metadata,
    render_erasure,
    report_document,
    svg_heatmap,
)


def reports():
    per = [ExampleScore("a", 0.5, 0.75, 0.5), ExampleScore("b", 1.0, 1.0, 0.0)]
    return [ImportanceReport("dim:0", 0.25, per, 2, 0), ImportanceReport("dim:1", -1 / 3, per[:1], 1, 1)]


def test_fmt():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(0.0) == "0" and fmt(-0.0) == "0"
    assert fmt(7) == "7" and fmt(np.int64(3)) == "3"
    assert fmt(123456789012.0) == "1.23456789e+11"
    assert fmt(True) == "true" and fmt("x") == "x"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_nine_significant_digits(x):
    s = fmt(x)
    assert float(s) == pytest.approx(x, rel=1e-8, abs=0)
    mantissa = re.sub(r"e.*$", "", s).lstrip("-").replace(".", "").lstrip("0")
    assert len(mantissa) <= 9


def test_csv_shape_and_metadata(tmp_path):
    path = tmp_path / "r.csv"
    meta = metadata({"level": "dim"}, 3)
    emit_csv(reports(), path, meta)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    lines = raw.decode().splitlines()
    head = json.loads(lines[0][2:])
    assert head["seed"] == 3 and head["tool"] == "erasure-lab" and "positive" in head["sign_convention"]
    assert lines[1] == "target,I,n,skipped"
    assert lines[2] == "dim:0,0.25,2,0"
    assert lines[3] == "dim:1,-0.333333333,1,1"
    assert len({line.count(",") for line in lines[1:]}) == 1


def test_detail_csv(tmp_path):
    path = tmp_path / "d.csv"
    emit_detail_csv(reports(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "target,id,S,S_erased,contribution"
    assert lines[1] == "dim:0,a,0.5,0.75,0.5"
    assert len(lines) == 4


def test_csv_quoting_and_width():
    assert csv_text(["a"], [["x,y"]]).splitlines()[1] == '"x,y"'
    with pytest.raises(ContractError):
        csv_text(["a", "b"], [[1]])


def test_report_document_is_json():
    doc = json.loads(report_document(reports()))
    assert doc["reports"][1]["I"] == -0.333333333
    assert doc["metadata"]["version"]


def test_heatmap_one_rect_per_cell():
    data = HeatmapData(["r0", "r1"], ["c0", "c1", "c2"], np.arange(6.0).reshape(2, 3) - 2)
    svg = svg_heatmap(data)
    cells = re.search(r'<g class="cells">(.*?)</g>', svg, re.S).group(1)
    assert cells.count("<rect") == 6
    assert svg.count("<rect") == 6
    assert "<metadata>" in svg and svg.startswith("<svg") and svg.endswith("</svg>\n")
    fills = re.findall(r'fill="(#[0-9a-f]{6})"', cells)
    assert fills[2] == "#ffffff"  # value 0
    assert fills[0] == color(-2.0, 3.0) and fills[-1] == "#b2182b"


def test_single_zero_cell_is_white():
    svg = svg_heatmap(HeatmapData(["r"], ["c"], [[0.0]]))
    assert re.findall(r'<rect[^>]*fill="(#[0-9a-f]{6})"', svg) == ["#ffffff"]


def test_heatmap_errors():
    with pytest.raises(ContractError):
        svg_heatmap(HeatmapData([], [], np.zeros((0, 0))))
    with pytest.raises(DimensionError):
        HeatmapData(["r"], ["a", "b"], [[1.0]])
    with pytest.raises(ValueError):
        HeatmapData(["r"], ["a"], [[1.0]], scale="cubic")


def test_heatmap_is_deterministic_and_escaped():
    data = HeatmapData(["<t&>"], ["a"], [[0.5]], scale="signed_log")
    a, b = svg_heatmap(data, metadata(seed=1)), svg_heatmap(data, metadata(seed=1))
    assert a == b
    assert "&lt;t&amp;&gt;" in a and "<t&>" not in a


def test_color_scale():
    assert color(0.0, 1.0) == "#ffffff"
    assert color(5.0, 1.0) == color(1.0, 1.0) == "#b2182b"
    assert color(-1.0, 1.0) == "#2166ac"
    assert color(0.3, 0.0) == "#ffffff"


def test_erasure_text():
    toks = ["it", "is", "not", "bad", "."]
    assert erasure_text(toks, [2, 3], 1, 0, ["neg", "pos"]) == "it is [[not bad]] .\tpos -> neg"
    assert erasure_text(toks, [0, 2], 1, 1) == "[[it]] is [[not]] bad .\t1 -> 1"
    assert erasure_text(toks, [], 0, 0).startswith("it is not bad .")


def test_render_erasure_files(tmp_path):
    txt, svg = render_erasure(["a", "b"], [1], (1, 0), tmp_path / "e.txt", ["n", "p"], metadata(seed=0))
    lines = txt.read_text().splitlines()
    assert lines[0].startswith("# {") and lines[1] == "a [[b]]\tp -> n"
    body = svg.read_text()
    assert "line-through" in body and "p -&gt; n" in body
