import json

import pytest
from hypothesis import given, settings, strategies as st

from liteheads.builders import PRESETS, ModelConfig, SharingScheme, build_retinanet
from liteheads.cost import (
    CostOptions,
    CostReport,
    MacsPerFlop,
    conv_macs_closed_form,
    cost_report,
    loop_count_oracle,
    op_macs,
    op_params,
)
from liteheads.graph import (
    BatchNorm,
    BlockTag,
    Conv,
    Graph,
    Input,
    MaxPool,
    Node,
    ReLU,
    TensorShape,
)


def conv(cin, cout, k, stride=1, pad=None, groups=1, bias=False):
    return Conv(k, k, stride, k // 2 if pad is None else pad, cin, cout, groups, bias)


# Oracle values: produced by the enumeration itself.
@pytest.mark.parametrize(
    "c, shape, expected",
    [
        (conv(1, 1, 1), TensorShape(1, 1, 1, 1), 1),
        (conv(2, 4, 3, pad=1), TensorShape(1, 2, 5, 5), 1800),
        (conv(4, 4, 1, groups=2), TensorShape(1, 4, 3, 3), 72),
    ],
)
def test_oracle_examples(c, shape, expected):
    assert loop_count_oracle(c, shape) == expected
    assert conv_macs_closed_form(c, shape) == expected


def test_oracle_guard():
    with pytest.raises(ValueError):
        loop_count_oracle(conv(17, 1, 1), TensorShape(1, 17, 2, 2))


def test_closed_form_at_scale_matches_scaled_oracle():
    # At 4x4 / 4 channels the oracle and closed form agree; the formula is
    # multilinear in (h, w, cin, cout), so the 100x100 / 256-channel value
    # follows by scaling.
    small = loop_count_oracle(conv(4, 4, 3), TensorShape(1, 4, 4, 4))
    assert small == 4 * 4 * 4 * 4 * 9
    big = conv_macs_closed_form(conv(256, 256, 3), TensorShape(1, 256, 100, 100))
    assert big == small * (100 // 4) ** 2 * (256 // 4) ** 2 == 5_898_240_000
    dw_small = loop_count_oracle(conv(4, 4, 3, groups=4), TensorShape(1, 4, 4, 4))
    dw_big = conv_macs_closed_form(conv(256, 256, 3, groups=256), TensorShape(1, 256, 100, 100))
    assert dw_big == dw_small * (100 // 4) ** 2 * (256 // 4) == 23_040_000


def test_op_params_examples():
    assert op_params(Node("c", conv(256, 256, 3, bias=True), ("x",))) == 590_080
    assert op_params(Node("d", conv(256, 256, 3, groups=256), ("x",))) == 2_304
    assert op_params(Node("b", BatchNorm(64), ("x",))) == 128
    assert op_params(Node("r", ReLU(), ("x",))) == 0


def test_elementwise_flag_and_zero_cost_ops():
    shape = TensorShape(1, 4, 5, 5)
    relu = Node("r", ReLU(), ("x",))
    assert op_macs(relu, shape) == 0
    assert op_macs(relu, shape, CostOptions(count_elementwise=True)) == 100
    assert op_macs(Node("p", MaxPool(3, 2, 1), ("x",)), shape, CostOptions(True)) == 0
    with pytest.raises(Exception):
        op_macs(relu, None)


def test_input_only_graph_costs_nothing():
    report = cost_report(Graph([Node("x", Input(TensorShape(1, 3, 8, 8)))], ["x"]))
    assert report.totals.macs == 0 and report.totals.params == 0
    assert report.per_block == {}


def test_shared_group_counted_once():
    tag3, tag4 = BlockTag.head(3, "Regression"), BlockTag.head(4, "Regression")
    nodes = [
        Node("p3", Input(TensorShape(1, 8, 4, 4))),
        Node("p4", Input(TensorShape(1, 8, 2, 2))),
        Node("h3", conv(8, 8, 3, bias=True), ["p3"], tag3, "g"),
        Node("h4", conv(8, 8, 3, bias=True), ["p4"], tag4, "g"),
    ]
    report = cost_report(Graph(nodes, ["h3", "h4"]))
    one = 8 * 8 * 9 + 8
    assert report.totals.params == one
    assert report.per_block[tag3].params == report.per_block[tag4].params == one
    assert report.totals.macs == 8 * 8 * 9 * (16 + 4)


def test_two_flop_convention():
    g = build_retinanet(ModelConfig(input_size=256))
    one = cost_report(g)
    two = cost_report(g, opts=CostOptions(macs_per_flop=MacsPerFlop.MAC_IS_TWO_FLOPS))
    assert two.totals.macs == one.totals.macs
    assert two.flops == 2 * one.flops


def test_report_invariants_on_presets():
    for name, config in PRESETS.items():
        report = cost_report(build_retinanet(config))
        assert sum(c.macs for c in report.per_block.values()) == report.totals.macs, name
        assert abs(sum(report.block_fractions.values()) - 1.0) <= 1e-12, name
        assert report.blocks()[0] == BlockTag("Stem")


def test_report_json_csv():
    report = cost_report(build_retinanet(ModelConfig(input_size=256)))
    text = report.to_json()
    doc = json.loads(text)
    assert set(doc) >= {"per_node", "per_block", "totals", "block_fractions"}
    back = CostReport.from_json(text)
    assert back.totals == report.totals and back.per_block == report.per_block
    lines = report.to_csv().splitlines()
    assert lines[0] == "block,branch,macs,params,fraction"
    assert lines[1].startswith("Stem,,")
    assert any(line.startswith("D3,Classification,") for line in lines)


def test_fully_shared_head_params_are_one_set_per_branch():
    base = cost_report(build_retinanet(PRESETS["baseline-800"]))
    groups = base.by_group()
    # every level reports the same shared set
    assert len({groups[f"D{lvl}"].params for lvl in range(3, 8)}) == 1
    head_set = groups["D3"].params
    trunk = 4 * (256 * 256 * 9 + 256)
    assert head_set == trunk + (256 * 720 * 9 + 720) + trunk + (256 * 36 * 9 + 36)
    non_head = sum(c.params for name, c in groups.items() if not name.startswith("D"))
    assert base.totals.params == non_head + head_set


def test_sharing_changes_params_not_macs():
    full = cost_report(build_retinanet(ModelConfig()))
    part = cost_report(build_retinanet(ModelConfig(sharing=SharingScheme.PARTIAL_D3_INDEPENDENT)))
    assert part.totals.macs == full.totals.macs
    assert part.totals.params - full.totals.params == full.by_group()["D3"].params


@st.composite
def conv_cases(draw):
    kernel = draw(st.sampled_from([1, 3, 7]))
    c = draw(st.integers(1, 8))
    depthwise = draw(st.booleans())
    out = c if depthwise else draw(st.integers(1, 8))
    pad = draw(st.integers(0, kernel // 2 + 1))
    lo = max(1, kernel - 2 * pad)
    h = draw(st.integers(lo, 10))
    w = draw(st.integers(lo, 10))
    stride = draw(st.integers(1, 3))
    return conv(c, out, kernel, stride, pad, c if depthwise else 1), TensorShape(1, c, h, w)


@settings(max_examples=200, deadline=None)
@given(conv_cases())
def test_closed_form_matches_oracle(case):
    c, shape = case
    assert conv_macs_closed_form(c, shape) == loop_count_oracle(c, shape)


@settings(max_examples=15, deadline=None)
@given(st.integers(128, 900), st.integers(0, 200))
def test_macs_monotone_in_input_size(size, extra):
    small = cost_report(build_retinanet(ModelConfig(input_size=size))).totals.macs
    large = cost_report(build_retinanet(ModelConfig(input_size=size + extra))).totals.macs
    assert large >= small
