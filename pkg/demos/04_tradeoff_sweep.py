"""Sweep head substitutions against plain input downscaling and draw both charts.

Writes distribution.svg and tradeoff.svg next to this script.
"""
from pathlib import Path

from liteheads import build_retinanet, cost_report, preset
from liteheads.builders import HeadVariant, PredictorPolicy
from liteheads.graph import Branch
from liteheads.tradeoff import (
    emit_distribution_chart,
    emit_tradeoff_chart,
    input_scaling_baseline,
    reduction_factor,
    sweep,
)
from liteheads.transforms import SubstituteHead

out = Path(__file__).parent
base = preset("baseline-800")
both = frozenset(Branch)
chains = [
    ("lw-v2-reg", [SubstituteHead(HeadVariant.V2, {Branch.REGRESSION}, set(range(3, 8)))]),
    ("lw-v3-reg", [SubstituteHead(HeadVariant.V3, {Branch.REGRESSION}, {3})]),
    ("lw-v3-both", [SubstituteHead(HeadVariant.V3, both, {3})]),
    ("lw-v3-both-pred", [SubstituteHead(HeadVariant.V3, both, {3}, PredictorPolicy.REPLACE_PREDICTOR_TOO)]),
]
points = sweep(base, chains) + input_scaling_baseline(base)
reference = points[0]
for p in points:
    mAP = f"{p.map_annotation.value_percent:.1f}" if p.map_annotation else "-"
    print(f"{p.label:16s} {p.family.value:12s} {p.gmacs:8.3f} GMACs  "
          f"{reduction_factor(p, reference):5.2f}x  mAP {mAP}")

emit_distribution_chart(cost_report(build_retinanet(base)), out / "distribution.svg")
emit_tradeoff_chart(points, out / "tradeoff.svg")
print(f"\ncharts written to {out}")
