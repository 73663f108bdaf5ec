import xml.etree.ElementTree as ET
from fractions import Fraction

import pytest

from liteheads.builders import PRESETS, HeadVariant, PredictorPolicy, build_retinanet
from liteheads.cost import cost_report
from liteheads.graph import BlockTag, Branch, Conv, Graph, Input, Node, TensorShape
from liteheads.tradeoff import (
    ANNOTATIONS,
    AnnotationTable,
    Family,
    MapAnnotation,
    SweepFailure,
    TradeoffPoint,
    emit_distribution_chart,
    emit_tradeoff_chart,
    input_scaling_baseline,
    points_from_csv,
    points_from_json,
    points_to_csv,
    points_to_json,
    reduction_factor,
    sweep,
    what_if_scaled,
)
from liteheads.transforms import ScaleInput, SetSharing, SubstituteHead

SVG = "{http://www.w3.org/2000/svg}"
BASE = PRESETS["baseline-800"]
BOTH = frozenset(Branch)
V3_BOTH_PRED = [SubstituteHead(HeadVariant.V3, BOTH, {3}, PredictorPolicy.REPLACE_PREDICTOR_TOO)]


@pytest.fixture(scope="module")
def base_report():
    return cost_report(build_retinanet(BASE))


def test_baseline_sweep_point():
    (point,) = sweep(BASE)
    assert point.label == "baseline-800" and 140 <= point.gmacs <= 172
    assert point.map_annotation == MapAnnotation(35.7, ANNOTATIONS[0].source)


def test_sweep_v3_both_pred():
    base, lw = sweep(BASE, [("v3", V3_BOTH_PRED)])
    assert 80 <= lw.gmacs <= 97
    assert 1.6 <= reduction_factor(lw, base) <= 1.9
    assert lw.map_annotation is None  # label is not a reported config


def test_sweep_reports_failures_in_place():
    chains = [
        ("ok", [ScaleInput(600)]),
        ("bad", [SubstituteHead(HeadVariant.V3, {Branch.REGRESSION}, {3}), SetSharing("FullyShared")]),
        ("also-ok", [ScaleInput(400)]),
    ]
    results = sweep(BASE, chains)
    assert [r.label for r in results] == ["baseline-800", "ok", "bad", "also-ok"]
    assert isinstance(results[2], SweepFailure) and "WeightGroupMismatch" in results[2].message
    assert isinstance(results[3], TradeoffPoint)


def test_sweep_is_deterministic():
    chains = [("a", [ScaleInput(500)]), ("b", V3_BOTH_PRED)]
    assert sweep(BASE, chains) == sweep(BASE, chains)


def test_input_scaling_points():
    pts = input_scaling_baseline(BASE, [800, 700, 600, 500, 400])
    assert [p.family for p in pts] == [Family.INPUT_SCALING] * 5
    assert all(a.gmacs > b.gmacs for a, b in zip(pts, pts[1:]))
    (base,) = sweep(BASE)
    assert pts[0].macs == base.macs
    assert 0.22 <= pts[-1].gmacs / base.gmacs <= 0.35
    assert pts[0].map_annotation.value_percent == 35.7
    assert all(p.map_annotation is None for p in pts[1:])


def test_annotations_only_for_matching_configs():
    (base,) = sweep(PRESETS["lw-v3-reg"])
    assert base.label == "base" and base.map_annotation is None
    # a chain labelled like a preset but costing something else gets nothing
    _, fake = sweep(BASE, [("lw-v2-reg", [ScaleInput(600)])])
    assert fake.map_annotation is None
    table = AnnotationTable()
    assert table.lookup("lw-v2-reg").value_percent == pytest.approx(35.6)
    assert table.lookup("lw-v1-reg") is None  # relative to an unreported value
    assert all(e.source for e in ANNOTATIONS)


def test_reduction_factor():
    (base,) = sweep(BASE)
    assert reduction_factor(base, base) == 1.0
    with pytest.raises(ValueError):
        TradeoffPoint("zero", 0.0)


def test_halving_identity(base_report):
    frac = what_if_scaled(base_report, "D3", Fraction(1, 2))
    d3 = base_report.by_group()["D3"].macs
    assert frac == Fraction(d3, 2 * base_report.totals.macs)
    assert float(frac) == pytest.approx(base_report.group_fraction("D3") / 2, rel=1e-12)
    assert 0.21 <= frac <= 0.26


def test_points_roundtrip():
    pts = sweep(BASE, [("v3", V3_BOTH_PRED)]) + input_scaling_baseline(BASE, [800, 400])
    back = points_from_csv(points_to_csv(pts))
    for a, b in zip(pts, back):
        assert (a.label, a.gmacs, a.family, a.map_annotation) == (b.label, b.gmacs, b.family, b.map_annotation)
    assert points_from_json(points_to_json(pts)) == pts
    header = points_to_csv(pts).splitlines()[0]
    assert header == "label,family,gmacs,reduction_factor_vs_baseline,map_percent,map_source"


def bars(svg_text):
    root = ET.fromstring(svg_text)
    return root, [r for r in root.iter(f"{SVG}rect") if r.get("class") == "bar"]


def test_distribution_chart(base_report, tmp_path):
    path = tmp_path / "fig3.svg"
    text = emit_distribution_chart(base_report, path)
    assert path.read_text() == text
    root, rects = bars(text)
    assert root.get("width") == "960" and root.get("height") == "540"
    blocks = [r.get("data-block") for r in rects if r.get("data-metric") == "macs"]
    assert blocks == ["Stem", "Res2", "Res3", "Res4", "Res5", "FPN", "D3", "D4", "D5", "D6", "D7"]
    macs = {r.get("data-block"): float(r.get("height")) for r in rects if r.get("data-metric") == "macs"}
    assert max(macs, key=macs.get) == "D3"
    params = {r.get("data-block"): float(r.get("height")) for r in rects if r.get("data-metric") == "params"}
    backbone = sum(params[b] for b in ("Stem", "Res2", "Res3", "Res4", "Res5"))
    assert max(params, key=params.get) == "Res5"
    assert backbone > params["FPN"] + params["D3"]
    assert emit_distribution_chart(base_report) == text


def test_distribution_chart_single_block():
    g = Graph([Node("x", Input(TensorShape(1, 3, 8, 8))),
               Node("c", Conv(3, 3, 1, 1, 3, 8), ["x"], BlockTag("Stem"))], ["c"])
    _, rects = bars(emit_distribution_chart(cost_report(g)))
    assert len(rects) == 2


def polylines(svg_text):
    root = ET.fromstring(svg_text)
    return root, [p for p in root.iter(f"{SVG}polyline") if p.get("class") == "trend"]


def test_tradeoff_chart_two_families():
    ann = MapAnnotation(35.0, "test")
    pts = [
        TradeoffPoint("a", 150.0, Family.PROPOSED, ann),
        TradeoffPoint("b", 120.0, Family.PROPOSED, MapAnnotation(34.5, "test")),
        TradeoffPoint("c", 150.0, Family.INPUT_SCALING, ann),
        TradeoffPoint("d", 90.0, Family.INPUT_SCALING, MapAnnotation(33.0, "test")),
    ]
    root, lines = polylines(emit_tradeoff_chart(pts))
    assert sorted(p.get("data-family") for p in lines) == ["InputScaling", "Proposed"]
    legend = [t.text for t in root.iter(f"{SVG}text") if t.get("class") == "legend"]
    assert legend == ["Proposed", "InputScaling"]


def test_tradeoff_chart_unannotated_is_rug_only():
    pts = [TradeoffPoint("a", 150.0), TradeoffPoint("b", 90.0)]
    root, lines = polylines(emit_tradeoff_chart(pts))
    assert lines == []
    rugs = [e for e in root.iter(f"{SVG}line") if e.get("class") == "rug"]
    assert len(rugs) == 2
    assert not [c for c in root.iter(f"{SVG}circle")]


def test_tradeoff_chart_baseline_and_v3_span():
    pts = sweep(BASE, [("v3", V3_BOTH_PRED)])
    root, _ = polylines(emit_tradeoff_chart(pts))
    xs = {}
    for e in root.iter():
        if e.get("data-label"):
            xs[e.get("data-label")] = float(e.get("cx") or e.get("x1"))
    assert xs["baseline-800"] > xs["v3"]
    assert pts[0].gmacs == pytest.approx(146.25, abs=0.01)
    assert 80 <= pts[1].gmacs <= 97


def test_tradeoff_chart_needs_points():
    with pytest.raises(ValueError):
        emit_tradeoff_chart([])
