"""Compare the light-weight head variants on a single P3 feature map."""
from liteheads.builders import HeadVariant, ModelConfig, build_head_block
from liteheads.cost import cost_report
from liteheads.graph import Branch, TensorShape

p3 = TensorShape(1, 256, 100, 100)
config = ModelConfig()
reference = None
for variant in HeadVariant:
    block = build_head_block(variant, Branch.REGRESSION, p3, config)
    report = cost_report(block.graph([block.taps["reg3"]]))
    reference = reference or report.totals.macs
    print(f"{variant.value:9s} {report.gmacs:7.3f} GMACs  "
          f"{report.totals.params:>9,} params  {reference / report.totals.macs:5.2f}x fewer MACs than Original")
