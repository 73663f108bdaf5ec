"""Giving D3 its own weights costs parameters, not compute.

Each preset is compared against the baseline, then the sharing scheme is
flipped to show MACs stay put while the parameter count moves.
"""
from liteheads import build_retinanet, cost_report, preset
from liteheads.builders import PRESETS, SharingScheme
from liteheads.transforms import SetSharing, apply, param_overhead

base = preset("baseline-800")
for name, config in PRESETS.items():
    r = cost_report(build_retinanet(config))
    print(f"{name:16s} {r.gmacs:8.3f} GMACs  param overhead {param_overhead(base, config):+.2%}")

split = apply(base, SetSharing(SharingScheme.PARTIAL_D3_INDEPENDENT))
a, b = cost_report(build_retinanet(base)), cost_report(build_retinanet(split))
print(f"\nbaseline with its own D3 weights: MACs equal? {a.totals.macs == b.totals.macs}; "
      f"params {a.totals.params:,} -> {b.totals.params:,}")
