"""Graph constructors for ResNet-50, FPN and RetinaNet detection heads.

Layout conventions:

* backbone convs carry no bias and are followed by BatchNorm; head and FPN
  convs carry a bias and no BatchNorm;
* padding is ``kernel // 2`` except for the canonical ResNet stem;
* bottleneck downsampling puts the stride on the first 1x1 conv, as in the
  original MSRA ResNet used by Detectron;
* FPN top-down upsampling targets the lateral map's extent, so odd-sized
  maps (e.g. 13 -> 25 at 400px input) line up without padding the image.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional

from .graph import (
    Add,
    BatchNorm,
    BlockTag,
    Branch,
    Conv,
    Graph,
    GraphError,
    HEAD_LEVELS,
    Input,
    MaxPool,
    NearestUpsample,
    Node,
    OpKind,
    ReLU,
    ShapeError,
    Sigmoid,
    TensorShape,
    check,
    infer_node_shape,
)

MIN_INPUT_SIZE = 128
RESNET50_STAGES = ((3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048))


class ConfigError(ValueError):
    """A ModelConfig or transform violates a configuration invariant."""


class HeadVariant(str, enum.Enum):
    ORIGINAL = "Original"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"


class SharingScheme(str, enum.Enum):
    FULLY_SHARED = "FullyShared"
    PARTIAL_D3_INDEPENDENT = "PartialD3Independent"


class PredictorPolicy(str, enum.Enum):
    KEEP_PREDICTOR_3X3 = "KeepPredictor3x3"
    REPLACE_PREDICTOR_TOO = "ReplacePredictorToo"


ALL_LEVELS = frozenset(HEAD_LEVELS)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 800
    num_classes: int = 80
    anchors_per_location: int = 9
    head_channels: int = 256
    head_depth: int = 4
    fpn_channels: int = 256
    variant_cls: HeadVariant = HeadVariant.ORIGINAL
    variant_reg: HeadVariant = HeadVariant.ORIGINAL
    lw_levels: frozenset[int] = field(default_factory=lambda: frozenset({3}))
    sharing: SharingScheme = SharingScheme.FULLY_SHARED
    predictor_policy: PredictorPolicy = PredictorPolicy.KEEP_PREDICTOR_3X3

    def __post_init__(self):
        object.__setattr__(self, "variant_cls", HeadVariant(self.variant_cls))
        object.__setattr__(self, "variant_reg", HeadVariant(self.variant_reg))
        object.__setattr__(self, "sharing", SharingScheme(self.sharing))
        object.__setattr__(self, "predictor_policy", PredictorPolicy(self.predictor_policy))
        object.__setattr__(self, "lw_levels", frozenset(int(x) for x in self.lw_levels))

    def variant(self, branch: Branch) -> HeadVariant:
        return self.variant_cls if Branch(branch) is Branch.CLASSIFICATION else self.variant_reg

    def variant_at(self, branch: Branch, level: int) -> HeadVariant:
        return self.variant(branch) if level in self.lw_levels else HeadVariant.ORIGINAL

    def predictor_channels(self, branch: Branch) -> int:
        if Branch(branch) is Branch.CLASSIFICATION:
            return self.num_classes * self.anchors_per_location
        return 4 * self.anchors_per_location

    def independent_branches(self) -> frozenset[Branch]:
        """Branches whose D3 weights are split off under partial sharing.

        Only branches carrying a light-weight block are split; a branch left
        Original keeps its shared set. With no light-weight branch at all,
        both branches are split (plain unsharing of D3).
        """
        if self.sharing is SharingScheme.FULLY_SHARED:
            return frozenset()
        light = frozenset(b for b in Branch if self.variant(b) is not HeadVariant.ORIGINAL)
        return light or frozenset(Branch)

    def sharing_sets(self, branch: Branch) -> list[frozenset[int]]:
        """Sets of levels whose ``branch`` convs share one weight set."""
        if Branch(branch) in self.independent_branches():
            return [frozenset({3}), ALL_LEVELS - {3}]
        return [ALL_LEVELS]

    def validate(self) -> "ModelConfig":
        positive = (
            "num_classes", "anchors_per_location", "head_channels", "head_depth", "fpn_channels",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.input_size < MIN_INPUT_SIZE:
            raise ConfigError(f"input_size must be >= {MIN_INPUT_SIZE}, got {self.input_size}")
        if not self.lw_levels <= ALL_LEVELS:
            raise ConfigError(f"lw_levels must be a subset of 3..7, got {sorted(self.lw_levels)}")
        for branch in Branch:
            if self.variant(branch) is HeadVariant.ORIGINAL:
                continue
            for levels in self.sharing_sets(branch):
                variants = {self.variant_at(branch, lvl) for lvl in levels}
                if len(variants) > 1:
                    raise ConfigError(
                        f"WeightGroupMismatch: {branch.value} levels {sorted(levels)} share "
                        f"weights under {self.sharing.value} but lw_levels="
                        f"{sorted(self.lw_levels)} gives them different blocks "
                        f"({sorted(v.value for v in variants)})"
                    )
        return self

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        for key in ("variant_cls", "variant_reg", "sharing", "predictor_policy"):
            doc[key] = doc[key].value
        doc["lw_levels"] = sorted(self.lw_levels)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


class GraphBuilder:
    """Accumulates nodes with eagerly inferred shapes."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.shapes: dict[str, TensorShape] = {}
        self.taps: dict[str, str] = {}

    def add(
        self,
        node_id: str,
        kind: OpKind,
        inputs: Iterable[str] = (),
        block: Optional[BlockTag] = None,
        weight_group: Optional[str] = None,
    ) -> str:
        if node_id in self.nodes:
            raise GraphError(f"duplicate node id {node_id!r}")
        node = Node(node_id, kind, tuple(inputs), block, weight_group)
        self.shapes[node_id] = infer_node_shape(node, [self.shapes[i] for i in node.inputs])
        self.nodes[node_id] = node
        return node_id

    def input(self, node_id: str, shape: TensorShape) -> str:
        return self.add(node_id, Input(shape))

    def conv(
        self,
        node_id: str,
        src: str,
        out_channels: int,
        kernel: int,
        block: BlockTag,
        *,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        bias: bool = True,
        weight_group: Optional[str] = None,
    ) -> str:
        kind = Conv(
            kernel_h=kernel,
            kernel_w=kernel,
            stride=stride,
            padding=kernel // 2 if padding is None else padding,
            in_channels=self.shapes[src].c,
            out_channels=out_channels,
            groups=groups,
            has_bias=bias,
        )
        return self.add(node_id, kind, [src], block, weight_group)

    def shape(self, node_id: str) -> TensorShape:
        return self.shapes[node_id]

    def graph(self, outputs: Iterable[str]) -> Graph:
        return check(Graph(self.nodes.values(), outputs))


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


def _conv_bn(b: GraphBuilder, name: str, src: str, out: int, kernel: int, block: BlockTag,
             stride: int = 1, padding: Optional[int] = None, relu: bool = True) -> str:
    x = b.conv(f"{name}.conv", src, out, kernel, block, stride=stride, padding=padding, bias=False)
    x = b.add(f"{name}.bn", BatchNorm(out), [x], block)
    if relu:
        x = b.add(f"{name}.relu", ReLU(), [x], block)
    return x


def _bottleneck(b: GraphBuilder, name: str, src: str, mid: int, out: int, stride: int,
                block: BlockTag) -> str:
    x = _conv_bn(b, f"{name}.a", src, mid, 1, block, stride=stride)
    x = _conv_bn(b, f"{name}.b", x, mid, 3, block)
    x = _conv_bn(b, f"{name}.c", x, out, 1, block, relu=False)
    shortcut = src
    if stride != 1 or b.shape(src).c != out:
        shortcut = _conv_bn(b, f"{name}.proj", src, out, 1, block, stride=stride, relu=False)
    x = b.add(f"{name}.sum", Add(), [x, shortcut], block)
    return b.add(f"{name}.relu", ReLU(), [x], block)


def build_backbone_resnet50(input: TensorShape, builder: Optional[GraphBuilder] = None,
                            input_id: str = "image") -> GraphBuilder:
    """ResNet-50 without the classifier; taps C3, C4 and C5.

    Raises:
        ShapeError: if a downsampling stage would receive a 1-pixel map, so
            that C5 cannot sit at stride 32.
    """
    if input.c != 3:
        raise GraphError(f"backbone expects 3 input channels, got {input.c}")
    b = builder or GraphBuilder()
    x = b.input(input_id, input)
    stem = BlockTag("Stem")
    x = _conv_bn(b, "backbone.stem", x, 64, 7, stem, stride=2, padding=3)
    x = b.add("backbone.stem.pool", MaxPool(3, 2, 1), [x], stem)
    for stage, (blocks, mid, out) in enumerate(RESNET50_STAGES, start=2):
        tag = BlockTag(f"Res{stage}")
        for i in range(blocks):
            stride = 2 if i == 0 and stage > 2 else 1
            src = b.shape(x)
            if stride > 1 and min(src.h, src.w) < stride:
                raise ShapeError(
                    f"input {input} too small: Res{stage} would downsample a {src.h}x{src.w} map"
                )
            x = _bottleneck(b, f"backbone.res{stage}.{i}", x, mid, out, stride, tag)
        b.taps[f"C{stage}"] = x
    return b


# ---------------------------------------------------------------------------
# Feature pyramid
# ---------------------------------------------------------------------------


def build_fpn(builder: GraphBuilder, channels: int = 256, align: bool = True) -> GraphBuilder:
    """Add P3..P7 on top of the C3..C5 taps already in ``builder``.

    With ``align=False`` the top-down path upsamples by a plain factor of 2
    and a size mismatch surfaces as a ShapeError from the merge.
    """
    b = builder
    fpn = BlockTag("FPN")
    lateral = {
        lvl: b.conv(f"fpn.lateral{lvl}", b.taps[f"C{lvl}"], channels, 1, fpn) for lvl in (3, 4, 5)
    }
    merged = {5: lateral[5]}
    for lvl in (4, 3):
        target = b.shape(lateral[lvl])
        up = b.add(
            f"fpn.up{lvl + 1}",
            NearestUpsample(2, (target.h, target.w) if align else None),
            [merged[lvl + 1]],
            fpn,
        )
        merged[lvl] = b.add(f"fpn.merge{lvl}", Add(), [up, lateral[lvl]], fpn)
    for lvl in (3, 4, 5):
        b.taps[f"P{lvl}"] = b.conv(f"fpn.out{lvl}", merged[lvl], channels, 3, fpn)
    b.taps["P6"] = b.conv("fpn.p6", b.taps["C5"], channels, 3, fpn, stride=2)
    p6_relu = b.add("fpn.p6.relu", ReLU(), [b.taps["P6"]], fpn)
    b.taps["P7"] = b.conv("fpn.p7", p6_relu, channels, 3, fpn, stride=2)
    return b


# ---------------------------------------------------------------------------
# Detection heads
# ---------------------------------------------------------------------------


def trunk_kernels(variant: HeadVariant, depth: int) -> list[int]:
    """Kernel size of each trunk layer (a V1 layer is depthwise 3x3 + 1x1)."""
    variant = HeadVariant(variant)
    if variant in (HeadVariant.ORIGINAL, HeadVariant.V1):
        return [3] * depth
    if variant is HeadVariant.V2:
        return [3 if i % 2 == 0 else 1 for i in range(depth)]
    return [1] * depth


def build_head_block(
    variant: HeadVariant,
    branch: Branch,
    level_shape: TensorShape,
    config: ModelConfig,
    *,
    level: int = 3,
    builder: Optional[GraphBuilder] = None,
    source: Optional[str] = None,
    group_scope: Optional[str] = None,
) -> GraphBuilder:
    """One detection branch (trunk + predictor) for one pyramid level.

    With no ``builder`` a standalone fragment is created whose input is an
    Input node of ``level_shape``. ``group_scope`` labels the weight groups;
    levels built with the same scope share weights.
    """
    variant, branch = HeadVariant(variant), Branch(branch)
    if level_shape.c != config.fpn_channels:
        raise GraphError(
            f"head input has {level_shape.c} channels, expected fpn_channels={config.fpn_channels}"
        )
    b = builder or GraphBuilder()
    if source is None:
        source = b.input(f"P{level}", level_shape)
    tag = BlockTag.head(level, branch)
    prefix = f"head.{branch.short}.p{level}"

    def group(slot: str) -> Optional[str]:
        return f"{branch.short}.{group_scope}.{slot}" if group_scope else None

    x = source
    width = config.head_channels
    for i, kernel in enumerate(trunk_kernels(variant, config.head_depth)):
        name = f"{prefix}.trunk{i}"
        if variant is HeadVariant.V1:
            c = b.shape(x).c
            x = b.conv(f"{name}.dw", x, c, 3, tag, groups=c, weight_group=group(f"trunk{i}.dw"))
            x = b.add(f"{name}.dw.relu", ReLU(), [x], tag)
            x = b.conv(f"{name}.pw", x, width, 1, tag, weight_group=group(f"trunk{i}.pw"))
        else:
            x = b.conv(f"{name}.conv", x, width, kernel, tag, weight_group=group(f"trunk{i}"))
        x = b.add(f"{name}.relu", ReLU(), [x], tag)

    out = config.predictor_channels(branch)
    replace_pred = config.predictor_policy is PredictorPolicy.REPLACE_PREDICTOR_TOO
    if replace_pred and variant is HeadVariant.V3:
        x = b.conv(f"{prefix}.pred", x, out, 1, tag, weight_group=group("pred"))
    elif replace_pred and variant is HeadVariant.V1:
        c = b.shape(x).c
        x = b.conv(f"{prefix}.pred.dw", x, c, 3, tag, groups=c, weight_group=group("pred.dw"))
        x = b.add(f"{prefix}.pred.dw.relu", ReLU(), [x], tag)
        x = b.conv(f"{prefix}.pred", x, out, 1, tag, weight_group=group("pred"))
    else:
        x = b.conv(f"{prefix}.pred", x, out, 3, tag, weight_group=group("pred"))
    if branch is Branch.CLASSIFICATION:
        x = b.add(f"{prefix}.sigmoid", Sigmoid(), [x], tag)
    b.taps[f"{branch.short}{level}"] = x
    return b


def group_scope(config: ModelConfig, branch: Branch, level: int) -> str:
    for levels in config.sharing_sets(branch):
        if level in levels:
            if len(levels) == 1:
                return f"d{level}"
            return "shared"
    raise ConfigError(f"level {level} is not covered by any sharing set")


def build_retinanet(config: ModelConfig) -> Graph:
    """Backbone + FPN + classification and regression heads on P3..P7."""
    config.validate()
    size = config.input_size
    b = build_backbone_resnet50(TensorShape(1, 3, size, size))
    build_fpn(b, config.fpn_channels)
    outputs = []
    for level in HEAD_LEVELS:
        for branch in Branch:
            build_head_block(
                config.variant_at(branch, level),
                branch,
                b.shape(b.taps[f"P{level}"]),
                config,
                level=level,
                builder=b,
                source=b.taps[f"P{level}"],
                group_scope=group_scope(config, branch, level),
            )
            outputs.append(b.taps[f"{branch.short}{level}"])
    return b.graph(outputs)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_BASE = ModelConfig()
_PARTIAL = SharingScheme.PARTIAL_D3_INDEPENDENT

PRESETS: dict[str, ModelConfig] = {
    "baseline-800": _BASE,
    # V2 on the regression branch of every level; all levels still share one set.
    "lw-v2-reg": replace(_BASE, variant_reg=HeadVariant.V2, lw_levels=ALL_LEVELS),
    "lw-v3-reg": replace(_BASE, variant_reg=HeadVariant.V3, sharing=_PARTIAL),
    "lw-v3-both": replace(
        _BASE, variant_cls=HeadVariant.V3, variant_reg=HeadVariant.V3, sharing=_PARTIAL
    ),
    "lw-v3-both-pred": replace(
        _BASE,
        variant_cls=HeadVariant.V3,
        variant_reg=HeadVariant.V3,
        sharing=_PARTIAL,
        predictor_policy=PredictorPolicy.REPLACE_PREDICTOR_TOO,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
