"""Typed computation-graph IR for convolutional detection networks.

Graphs are immutable DAGs of :class:`Node` objects. Each node carries an
operation kind, a block tag used for cost aggregation, and an optional
weight-group label that marks physically shared parameters.
"""
from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional, Union


class GraphError(Exception):
    """Raised when a graph is structurally invalid."""


class ShapeError(GraphError):
    """Raised when shape inference fails."""


class UnknownOpKindError(GraphError):
    """Raised when deserializing an op kind that is not in the vocabulary."""


@dataclass(frozen=True, order=True)
class TensorShape:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ShapeError(f"TensorShape.{name} must be a positive int, got {value!r}")

    @property
    def elements(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_list(self) -> list[int]:
        return [self.n, self.c, self.h, self.w]

    def __str__(self) -> str:
        return f"{self.c}x{self.h}x{self.w}"


# ---------------------------------------------------------------------------
# Op kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Input:
    shape: TensorShape
    arity = 0


@dataclass(frozen=True)
class Conv:
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int
    groups: int = 1
    has_bias: bool = False
    arity = 1

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.groups) < 1:
            raise ValueError(f"kernel, stride and groups must be >= 1: {self}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channels must be >= 1: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"channels not divisible by groups: {self}")

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    arity = 1


@dataclass(frozen=True)
class ReLU:
    arity = 1


@dataclass(frozen=True)
class Sigmoid:
    arity = 1


@dataclass(frozen=True)
class Add:
    arity = 2


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int
    padding: int = 0
    arity = 1


@dataclass(frozen=True)
class NearestUpsample:
    """Nearest-neighbour upsampling by ``factor``.

    With ``size`` set, the output is cut to that (h, w), which must not
    exceed ``factor`` times the input.
    """

    factor: int
    size: Optional[tuple[int, int]] = None
    arity = 1

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"upsample factor must be >= 1: {self}")
        if self.size is not None:
            object.__setattr__(self, "size", tuple(int(v) for v in self.size))


OpKind = Union[Input, Conv, BatchNorm, ReLU, Sigmoid, Add, MaxPool, NearestUpsample]

OP_KINDS: dict[str, type] = {
    cls.__name__: cls
    for cls in (Input, Conv, BatchNorm, ReLU, Sigmoid, Add, MaxPool, NearestUpsample)
}


# ---------------------------------------------------------------------------
# Block tags
# ---------------------------------------------------------------------------


class Branch(str, enum.Enum):
    CLASSIFICATION = "Classification"
    REGRESSION = "Regression"

    @property
    def short(self) -> str:
        return "cls" if self is Branch.CLASSIFICATION else "reg"


BACKBONE_BLOCKS = ("Stem", "Res2", "Res3", "Res4", "Res5")
HEAD_LEVELS = (3, 4, 5, 6, 7)


@dataclass(frozen=True)
class BlockTag:
    """Which architectural block a node belongs to.

    ``block`` is one of Stem, Res2..Res5, FPN or Head; head tags also carry
    the pyramid level (3..7) and the branch.
    """

    block: str
    level: Optional[int] = None
    branch: Optional[Branch] = None

    def __post_init__(self):
        if self.block == "Head":
            if self.level not in HEAD_LEVELS or self.branch is None:
                raise ValueError(f"Head tag needs level in 3..7 and a branch: {self}")
            object.__setattr__(self, "branch", Branch(self.branch))
        elif self.block in BACKBONE_BLOCKS or self.block == "FPN":
            if self.level is not None or self.branch is not None:
                raise ValueError(f"only Head tags take level/branch: {self}")
        else:
            raise ValueError(f"unknown block {self.block!r}")

    @classmethod
    def head(cls, level: int, branch: Branch) -> "BlockTag":
        return cls("Head", level, Branch(branch))

    @property
    def group(self) -> str:
        """Coarse block name: Stem, Res2..Res5, FPN, or D3..D7."""
        return f"D{self.level}" if self.block == "Head" else self.block

    @property
    def label(self) -> str:
        if self.block == "Head":
            return f"D{self.level}.{self.branch.value}"
        return self.block

    @classmethod
    def parse(cls, text: str) -> "BlockTag":
        if text.startswith("D") and "." in text:
            level, branch = text[1:].split(".", 1)
            return cls.head(int(level), Branch(branch))
        return cls(text)

    def sort_key(self) -> tuple:
        return (BLOCK_ORDER.index(self.group), self.branch.value if self.branch else "")

    def __str__(self) -> str:
        return self.label


BLOCK_ORDER = BACKBONE_BLOCKS + ("FPN",) + tuple(f"D{lvl}" for lvl in HEAD_LEVELS)


# ---------------------------------------------------------------------------
# Nodes and graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    id: str
    kind: OpKind
    inputs: tuple[str, ...] = ()
    block: Optional[BlockTag] = None
    weight_group: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class Graph:
    """An immutable, id-indexed collection of nodes plus output ids."""

    nodes: Mapping[str, Node]
    outputs: tuple[str, ...]
    _order: Optional[tuple[str, ...]] = field(default=None, compare=False, repr=False)

    def __init__(self, nodes: Iterable[Node] | Mapping[str, Node], outputs: Iterable[str]):
        if isinstance(nodes, Mapping):
            nodes = nodes.values()
        index: dict[str, Node] = {}
        duplicates = []
        for node in nodes:
            if node.id in index:
                duplicates.append(node.id)
            index[node.id] = node
        if duplicates:
            raise GraphError(f"duplicate node ids: {sorted(set(duplicates))}")
        object.__setattr__(self, "nodes", MappingProxyType(index))
        object.__setattr__(self, "outputs", tuple(outputs))
        object.__setattr__(self, "_order", None)

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def input_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if isinstance(n.kind, Input)]

    def weight_groups(self, block: Optional[BlockTag] = None) -> set[str]:
        return {
            n.weight_group
            for n in self.nodes.values()
            if n.weight_group is not None and (block is None or n.block == block)
        }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuralError:
    kind: str
    node: Optional[str]
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


def _kahn(graph: Graph) -> tuple[list[str], set[str]]:
    """Kahn's algorithm with ascending-id tie breaking. Returns (order, leftover)."""
    indegree = {}
    consumers: dict[str, list[str]] = {nid: [] for nid in graph.nodes}
    for nid, node in graph.nodes.items():
        deps = [i for i in node.inputs if i in graph.nodes]
        indegree[nid] = len(deps)
        for dep in deps:
            consumers[dep].append(nid)
    ready = [nid for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for consumer in consumers[nid]:
            indegree[consumer] -= 1
            if indegree[consumer] == 0:
                heapq.heappush(ready, consumer)
    return order, set(graph.nodes) - set(order)


def validate(graph: Graph) -> list[StructuralError]:
    """Return every structural violation in ``graph``; an empty list means valid."""
    errors: list[StructuralError] = []
    if not graph.outputs:
        errors.append(StructuralError("NoOutputs", None, "graph declares no outputs"))
    for out in graph.outputs:
        if out not in graph.nodes:
            errors.append(StructuralError("DanglingEdge", out, f"output {out!r} is not a node"))

    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        for src in node.inputs:
            if src not in graph.nodes:
                errors.append(
                    StructuralError("DanglingEdge", nid, f"{nid!r} consumes missing node {src!r}")
                )
        if len(node.inputs) != node.kind.arity:
            errors.append(
                StructuralError(
                    "ArityMismatch",
                    nid,
                    f"{nid!r} ({type(node.kind).__name__}) expects {node.kind.arity} "
                    f"inputs, got {len(node.inputs)}",
                )
            )
        if not isinstance(node.kind, Input) and node.block is None:
            errors.append(StructuralError("MissingBlockTag", nid, f"{nid!r} has no block tag"))

    _, cyclic = _kahn(graph)
    if cyclic:
        errors.append(
            StructuralError("Cycle", min(cyclic), f"cycle through nodes {sorted(cyclic)}")
        )

    groups: dict[str, list[Node]] = {}
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        if node.weight_group is not None:
            groups.setdefault(node.weight_group, []).append(node)
    for label, members in sorted(groups.items()):
        first = members[0]
        for other in members[1:]:
            if other.kind != first.kind:
                errors.append(
                    StructuralError(
                        "WeightGroupMismatch",
                        other.id,
                        f"weight group {label!r}: {other.id!r} has {other.kind} "
                        f"but {first.id!r} has {first.kind}",
                    )
                )
    return errors


def check(graph: Graph) -> Graph:
    """Raise :class:`GraphError` listing every violation, else return ``graph``."""
    errors = validate(graph)
    if errors:
        raise GraphError("; ".join(str(e) for e in errors))
    return graph


def topo_order(graph: Graph) -> list[str]:
    """Deterministic topological order; ties are broken by ascending node id."""
    if graph._order is not None:
        return list(graph._order)
    order, cyclic = _kahn(graph)
    if cyclic:
        raise GraphError(f"Cycle: nodes {sorted(cyclic)} are on a cycle")
    object.__setattr__(graph, "_order", tuple(order))
    return order


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_node_shape(node: Node, in_shapes: list[TensorShape]) -> TensorShape:
    """Output shape of a single node given the shapes of its inputs."""
    kind = node.kind
    if isinstance(kind, Input):
        return kind.shape
    if isinstance(kind, (Conv, MaxPool)):
        (x,) = in_shapes
        if isinstance(kind, Conv):
            if x.c != kind.in_channels:
                raise ShapeError(
                    f"{node.id}: conv expects {kind.in_channels} input channels, got {x.c}"
                )
            kh, kw, channels = kind.kernel_h, kind.kernel_w, kind.out_channels
        else:
            kh = kw = kind.kernel
            channels = x.c
        h = conv_out_extent(x.h, kh, kind.stride, kind.padding)
        w = conv_out_extent(x.w, kw, kind.stride, kind.padding)
        if h < 1 or w < 1:
            raise ShapeError(f"{node.id}: non-positive output extent {h}x{w} from input {x}")
        return TensorShape(x.n, channels, h, w)
    if isinstance(kind, BatchNorm):
        (x,) = in_shapes
        if x.c != kind.channels:
            raise ShapeError(f"{node.id}: batch norm over {kind.channels} channels, got {x.c}")
        return x
    if isinstance(kind, (ReLU, Sigmoid)):
        return in_shapes[0]
    if isinstance(kind, Add):
        a, b = in_shapes
        if a != b:
            raise ShapeError(f"{node.id}: add operands differ, {a} vs {b}")
        return a
    if isinstance(kind, NearestUpsample):
        (x,) = in_shapes
        h, w = x.h * kind.factor, x.w * kind.factor
        if kind.size is not None:
            if kind.size[0] > h or kind.size[1] > w:
                raise ShapeError(f"{node.id}: cannot upsample {x} by {kind.factor} to {kind.size}")
            h, w = kind.size
        return TensorShape(x.n, x.c, h, w)
    raise GraphError(f"{node.id}: unsupported op {kind!r}")


def infer_shapes(
    graph: Graph, input_shapes: Optional[Mapping[str, TensorShape]] = None
) -> dict[str, TensorShape]:
    """Propagate shapes from Input nodes through the whole graph.

    ``input_shapes`` overrides the shapes stored on Input nodes. Nodes not
    reachable from any Input are left out of the result.
    """
    input_shapes = dict(input_shapes or {})
    shapes: dict[str, TensorShape] = {}
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        if isinstance(node.kind, Input):
            shapes[nid] = input_shapes.get(nid, node.kind.shape)
            continue
        if not all(src in shapes for src in node.inputs):
            continue
        shapes[nid] = infer_node_shape(node, [shapes[src] for src in node.inputs])
    return shapes


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def _kind_attrs(kind: OpKind) -> dict[str, Any]:
    if isinstance(kind, Input):
        return {"shape": kind.shape.as_list()}
    attrs = {name: getattr(kind, name) for name in kind.__dataclass_fields__}  # type: ignore[union-attr]
    if isinstance(kind, NearestUpsample):
        attrs["size"] = list(kind.size) if kind.size else None
    return attrs


def _kind_from(name: str, attrs: Mapping[str, Any]) -> OpKind:
    try:
        cls = OP_KINDS[name]
    except KeyError:
        raise UnknownOpKindError(f"unknown op kind {name!r}") from None
    if cls is Input:
        return Input(TensorShape(*attrs["shape"]))
    return cls(**attrs)


def graph_to_dict(graph: Graph) -> dict[str, Any]:
    nodes = []
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        nodes.append(
            {
                "id": node.id,
                "kind": type(node.kind).__name__,
                "attrs": _kind_attrs(node.kind),
                "inputs": list(node.inputs),
                "block": node.block.label if node.block else None,
                "weight_group": node.weight_group,
            }
        )
    return {"nodes": nodes, "outputs": list(graph.outputs)}


def graph_from_dict(doc: Mapping[str, Any]) -> Graph:
    nodes = []
    for entry in doc["nodes"]:
        block = entry.get("block")
        nodes.append(
            Node(
                id=entry["id"],
                kind=_kind_from(entry["kind"], entry.get("attrs", {})),
                inputs=tuple(entry.get("inputs", ())),
                block=BlockTag.parse(block) if block else None,
                weight_group=entry.get("weight_group"),
            )
        )
    return Graph(nodes, doc["outputs"])


def graph_to_json(graph: Graph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2, sort_keys=True) + "\n"


def graph_from_json(text: str) -> Graph:
    return graph_from_dict(json.loads(text))
