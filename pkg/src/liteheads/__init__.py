"""Static cost analysis and head surgery for RetinaNet-style detectors."""
from .builders import (
    PRESETS,
    ConfigError,
    HeadVariant,
    ModelConfig,
    PredictorPolicy,
    SharingScheme,
    build_retinanet,
    preset,
)
from .cost import CostOptions, CostReport, cost_report, loop_count_oracle, op_macs, op_params
from .graph import BlockTag, Branch, Graph, GraphError, Node, ShapeError, TensorShape, validate
from .tradeoff import (
    Family,
    TradeoffPoint,
    input_scaling_baseline,
    reduction_factor,
    sweep,
    what_if_scaled,
)
from .transforms import ScaleInput, SetSharing, SubstituteHead, apply, param_overhead

__all__ = [
    "PRESETS", "ConfigError", "HeadVariant", "ModelConfig", "PredictorPolicy", "SharingScheme",
    "build_retinanet", "preset", "CostOptions", "CostReport", "cost_report", "loop_count_oracle",
    "op_macs", "op_params", "BlockTag", "Branch", "Graph", "GraphError", "Node", "ShapeError",
    "TensorShape", "validate", "Family", "TradeoffPoint", "input_scaling_baseline",
    "reduction_factor", "sweep", "what_if_scaled", "ScaleInput", "SetSharing", "SubstituteHead",
    "apply", "param_overhead",
]
