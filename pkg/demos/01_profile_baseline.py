"""Where does a RetinaNet spend its multiply-accumulates?

Builds the 800x800 ResNet-50 baseline, profiles it per block, and shows that
the highest-resolution head level dominates the budget.
"""
from fractions import Fraction

from liteheads import build_retinanet, cost_report, preset
from liteheads.tradeoff import what_if_scaled

report = cost_report(build_retinanet(preset("baseline-800")))
print(f"baseline: {report.gmacs:.3f} GMACs, {report.totals.params:,} params\n")

for group, cost in report.by_group().items():
    share = cost.macs / report.totals.macs
    print(f"  {group:5s} {cost.macs / 1e9:8.3f} GMACs  {share:6.1%}  {'#' * round(share * 60)}")

saved = what_if_scaled(report, "D3", Fraction(1, 2))
print(f"\nHalving the D3 head alone would remove {float(saved):.1%} of the total.")
