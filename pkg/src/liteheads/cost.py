"""Analytic MAC and parameter accounting with weight-sharing deduplication."""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass
from typing import Any, Mapping, Optional

from .graph import (
    Add,
    BatchNorm,
    BlockTag,
    Conv,
    Graph,
    GraphError,
    Node,
    ReLU,
    Sigmoid,
    TensorShape,
    conv_out_extent,
    infer_shapes,
    topo_order,
)

ORACLE_LIMIT = 16


class MacsPerFlop(str, enum.Enum):
    MAC_IS_ONE_FLOP = "MacIsOneFlop"
    MAC_IS_TWO_FLOPS = "MacIsTwoFlops"

    @property
    def factor(self) -> int:
        return 1 if self is MacsPerFlop.MAC_IS_ONE_FLOP else 2


@dataclass(frozen=True)
class CostOptions:
    count_elementwise: bool = False
    macs_per_flop: MacsPerFlop = MacsPerFlop.MAC_IS_ONE_FLOP

    def __post_init__(self):
        object.__setattr__(self, "macs_per_flop", MacsPerFlop(self.macs_per_flop))


@dataclass(frozen=True)
class Cost:
    macs: int = 0
    params: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.macs + other.macs, self.params + other.params)


def op_macs(node: Node, out_shape: Optional[TensorShape], opts: CostOptions = CostOptions()) -> int:
    """Multiply-accumulates performed by ``node`` producing ``out_shape``."""
    kind = node.kind
    if out_shape is None:
        raise GraphError(f"{node.id}: no shape available for costing")
    if isinstance(kind, Conv):
        per_output = (kind.in_channels // kind.groups) * kind.kernel_h * kind.kernel_w
        return out_shape.n * out_shape.h * out_shape.w * out_shape.c * per_output
    if isinstance(kind, (BatchNorm, ReLU, Sigmoid, Add)):
        return out_shape.elements if opts.count_elementwise else 0
    return 0


def op_params(node: Node) -> int:
    kind = node.kind
    if isinstance(kind, Conv):
        weights = kind.out_channels * (kind.in_channels // kind.groups) * kind.kernel_h * kind.kernel_w
        return weights + (kind.out_channels if kind.has_bias else 0)
    if isinstance(kind, BatchNorm):
        return 2 * kind.channels
    return 0


def loop_count_oracle(conv: Conv, in_shape: TensorShape) -> int:
    """Count MACs of ``conv`` over ``in_shape`` by explicit enumeration.

    Slides the window over the zero-padded input and tallies one MAC for
    every (output position, output channel, input channel in group, tap).
    Only meant for tiny problems; every extent must be <= 16.
    """
    extents = (
        in_shape.n, in_shape.c, in_shape.h, in_shape.w,
        conv.out_channels, conv.kernel_h, conv.kernel_w,
    )
    if max(extents) > ORACLE_LIMIT:
        raise ValueError(f"oracle limited to extents <= {ORACLE_LIMIT}, got {extents}")
    if in_shape.c != conv.in_channels:
        raise ValueError("input channels do not match the conv")

    def window_starts(size: int, kernel: int) -> list[int]:
        starts, start = [], -conv.padding
        while start + kernel <= size + conv.padding:
            starts.append(start)
            start += conv.stride
        return starts

    rows = window_starts(in_shape.h, conv.kernel_h)
    cols = window_starts(in_shape.w, conv.kernel_w)
    in_per_group = conv.in_channels // conv.groups
    out_per_group = conv.out_channels // conv.groups
    count = 0
    for _ in range(in_shape.n):
        for _ in rows:
            for _ in cols:
                for oc in range(conv.out_channels):
                    group = oc // out_per_group
                    for ic in range(group * in_per_group, (group + 1) * in_per_group):
                        for _ in range(conv.kernel_h):
                            for _ in range(conv.kernel_w):
                                count += 1
    return count


@dataclass(frozen=True)
class CostReport:
    per_node: Mapping[str, Cost]
    per_block: Mapping[BlockTag, Cost]
    totals: Cost
    block_fractions: Mapping[BlockTag, float]
    macs_per_flop: int = 1

    @property
    def flops(self) -> int:
        return self.totals.macs * self.macs_per_flop

    @property
    def gmacs(self) -> float:
        return self.totals.macs / 1e9

    def blocks(self) -> list[BlockTag]:
        return sorted(self.per_block, key=BlockTag.sort_key)

    def by_group(self) -> dict[str, Cost]:
        """Costs keyed by coarse block (Stem, Res2..Res5, FPN, D3..D7).

        Head params are summed over both branches, so a fully shared level
        shows the per-level share of the head weights.
        """
        groups: dict[str, Cost] = {}
        for tag in self.blocks():
            groups[tag.group] = groups.get(tag.group, Cost()) + self.per_block[tag]
        return groups

    def group_fraction(self, group: str) -> float:
        return self.by_group().get(group, Cost()).macs / self.totals.macs

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_node": {
                nid: {"macs": c.macs, "params": c.params} for nid, c in sorted(self.per_node.items())
            },
            "per_block": {
                tag.label: {"macs": self.per_block[tag].macs, "params": self.per_block[tag].params}
                for tag in self.blocks()
            },
            "totals": {"macs": self.totals.macs, "params": self.totals.params},
            "block_fractions": {tag.label: self.block_fractions[tag] for tag in self.blocks()},
            "macs_per_flop": self.macs_per_flop,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CostReport":
        per_block = {BlockTag.parse(k): Cost(v["macs"], v["params"]) for k, v in doc["per_block"].items()}
        return cls(
            per_node={k: Cost(v["macs"], v["params"]) for k, v in doc.get("per_node", {}).items()},
            per_block=per_block,
            totals=Cost(doc["totals"]["macs"], doc["totals"]["params"]),
            block_fractions={BlockTag.parse(k): v for k, v in doc["block_fractions"].items()},
            macs_per_flop=doc.get("macs_per_flop", 1),
        )

    @classmethod
    def from_json(cls, text: str) -> "CostReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["block", "branch", "macs", "params", "fraction"])
        for tag in self.blocks():
            cost = self.per_block[tag]
            writer.writerow([
                tag.group,
                tag.branch.value if tag.branch else "",
                cost.macs,
                cost.params,
                repr(self.block_fractions[tag]),
            ])
        return buf.getvalue()


def cost_report(
    graph: Graph,
    input_shapes: Optional[Mapping[str, TensorShape]] = None,
    opts: CostOptions = CostOptions(),
) -> CostReport:
    """Per-node, per-block and total costs for ``graph``.

    Nodes sharing a weight group contribute their parameters once to the
    totals. Per-block params count a shared group once in every block that
    uses it, so the per-block params may sum to more than the total.
    """
    shapes = infer_shapes(graph, input_shapes)
    per_node: dict[str, Cost] = {}
    per_block: dict[BlockTag, Cost] = {}
    block_groups: dict[BlockTag, set[str]] = {}
    seen_groups: set[str] = set()
    total_macs = total_params = 0
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        if node.block is None:
            per_node[nid] = Cost()
            continue
        cost = Cost(op_macs(node, shapes.get(nid), opts), op_params(node))
        per_node[nid] = cost
        total_macs += cost.macs
        block_params = cost.params
        if node.weight_group is not None:
            used = block_groups.setdefault(node.block, set())
            if node.weight_group in used:
                block_params = 0
            used.add(node.weight_group)
            if node.weight_group not in seen_groups:
                seen_groups.add(node.weight_group)
                total_params += cost.params
        else:
            total_params += cost.params
        per_block[node.block] = per_block.get(node.block, Cost()) + Cost(cost.macs, block_params)

    fractions = {
        tag: (c.macs / total_macs if total_macs else 0.0) for tag, c in per_block.items()
    }
    return CostReport(
        per_node=per_node,
        per_block=per_block,
        totals=Cost(total_macs, total_params),
        block_fractions=fractions,
        macs_per_flop=opts.macs_per_flop.factor,
    )


def conv_macs_closed_form(conv: Conv, in_shape: TensorShape) -> int:
    """Closed-form MACs of a standalone conv; convenience over :func:`op_macs`."""
    out = TensorShape(
        in_shape.n,
        conv.out_channels,
        conv_out_extent(in_shape.h, conv.kernel_h, conv.stride, conv.padding),
        conv_out_extent(in_shape.w, conv.kernel_w, conv.stride, conv.padding),
    )
    return op_macs(Node("conv", conv, ("x",)), out)
