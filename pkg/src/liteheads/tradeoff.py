"""FLOPs/accuracy trade-off sweeps, reported-mAP annotations and report emitters."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union
from xml.sax.saxutils import escape

from .builders import PRESETS, ConfigError, ModelConfig, build_retinanet
from .cost import CostOptions, CostReport, cost_report
from .graph import GraphError
from .transforms import ScaleInput, Transform, apply, apply_all

BASELINE_LABEL = "baseline-800"


class Family(str, enum.Enum):
    PROPOSED = "Proposed"
    INPUT_SCALING = "InputScaling"


@dataclass(frozen=True)
class MapAnnotation:
    value_percent: float
    source: str


@dataclass(frozen=True)
class AnnotationEntry:
    """A reported mAP figure, absolute or relative to another entry."""

    key: str
    source: str
    value_percent: Optional[float] = None
    relative_to: Optional[str] = None
    delta_percent: Optional[float] = None


# Only figures stated in running text are shipped; table cells are not.
ANNOTATIONS: tuple[AnnotationEntry, ...] = (
    AnnotationEntry(
        "baseline-800",
        "reported: RetinaNet ResNet50-FPN at 800px, COCO test-dev",
        value_percent=35.7,
    ),
    AnnotationEntry(
        "input-800",
        "reported: RetinaNet ResNet50-FPN at 800px, COCO test-dev",
        value_percent=35.7,
    ),
    AnnotationEntry(
        "lw-v2-reg",
        "reported: D-block-v2 on the regression branch, 0.1 below baseline",
        relative_to="baseline-800",
        delta_percent=-0.1,
    ),
    AnnotationEntry(
        "lw-v1-reg",
        "reported: D-block-v1 0.8 below D-block-v3 at equal reduction",
        relative_to="lw-v3-reg",
        delta_percent=-0.8,
    ),
)


class AnnotationTable:
    def __init__(self, entries: Iterable[AnnotationEntry] = ANNOTATIONS):
        self.entries = {e.key: e for e in entries}

    def lookup(self, key: str) -> Optional[MapAnnotation]:
        """Resolve ``key`` to an absolute mAP, following relative entries.

        Returns None when the chain ends in an entry without an absolute value.
        """
        entry = self.entries.get(key)
        if entry is None:
            return None
        if entry.value_percent is not None:
            return MapAnnotation(entry.value_percent, entry.source)
        base = self.lookup(entry.relative_to) if entry.relative_to else None
        if base is None:
            return None
        value = round(base.value_percent + entry.delta_percent, 6)
        return MapAnnotation(value, entry.source)


@dataclass(frozen=True)
class TradeoffPoint:
    label: str
    gmacs: float
    family: Family = Family.PROPOSED
    map_annotation: Optional[MapAnnotation] = None
    macs: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.gmacs > 0:
            raise ValueError(f"gmacs must be positive, got {self.gmacs}")

    @property
    def exact_macs(self) -> Union[int, float]:
        return self.macs if self.macs is not None else self.gmacs * 1e9


@dataclass(frozen=True)
class SweepFailure:
    label: str
    message: str


def _reference_config(label: str) -> Optional[ModelConfig]:
    """The config a reported figure was measured on, if ``label`` names one."""
    if label in PRESETS:
        return PRESETS[label]
    if label.startswith("input-") and label[6:].isdigit():
        return replace(PRESETS[BASELINE_LABEL], input_size=int(label[6:]))
    return None


def _point(label: str, config: ModelConfig, family: Family, opts: CostOptions,
           table: AnnotationTable) -> TradeoffPoint:
    macs = cost_report(build_retinanet(config), opts=opts).totals.macs
    # A reported figure is attached only when the costed config is exactly
    # the one it was reported for.
    ann = table.lookup(label) if _reference_config(label) == config else None
    return TradeoffPoint(label, macs / 1e9, family, ann, macs)


def sweep(
    base: ModelConfig,
    chains: Sequence[tuple[str, Sequence[Transform]]] = (),
    opts: CostOptions = CostOptions(),
    *,
    base_label: Optional[str] = None,
    table: Optional[AnnotationTable] = None,
) -> list[Union[TradeoffPoint, SweepFailure]]:
    """Cost the base config and every named transform chain, in input order.

    A chain that fails to apply or build yields a :class:`SweepFailure` in its
    slot; the other points are still produced.
    """
    table = table or AnnotationTable()
    if base_label is None:
        base_label = BASELINE_LABEL if base == PRESETS[BASELINE_LABEL] else "base"
    results: list[Union[TradeoffPoint, SweepFailure]] = [
        _point(base_label, base, Family.PROPOSED, opts, table)
    ]
    for label, transforms in chains:
        try:
            config = apply_all(base, transforms)
            results.append(_point(label, config, Family.PROPOSED, opts, table))
        except (ConfigError, GraphError) as exc:
            results.append(SweepFailure(label, str(exc)))
    return results


def input_scaling_baseline(
    base: ModelConfig,
    sizes: Sequence[int] = (800, 700, 600, 500, 400),
    opts: CostOptions = CostOptions(),
    *,
    table: Optional[AnnotationTable] = None,
) -> list[TradeoffPoint]:
    table = table or AnnotationTable()
    return [
        _point(f"input-{size}", apply(base, ScaleInput(size)), Family.INPUT_SCALING, opts, table)
        for size in sizes
    ]


def reduction_factor(point: TradeoffPoint, baseline: TradeoffPoint) -> float:
    if point.gmacs <= 0 or baseline.gmacs <= 0:
        raise ZeroDivisionError("reduction factor needs positive GMACs")
    return float(Fraction(baseline.exact_macs) / Fraction(point.exact_macs))


def what_if_scaled(report: CostReport, group: str = "D3", keep: Fraction = Fraction(1, 2)) -> Fraction:
    """Fractional reduction of total MACs if ``group`` ran at ``keep`` of its cost."""
    group_macs = report.by_group()[group].macs
    removed = group_macs * (1 - Fraction(keep))
    return removed / report.totals.macs


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["label", "family", "gmacs", "reduction_factor_vs_baseline", "map_percent", "map_source"]


def points_to_csv(points: Sequence[TradeoffPoint], baseline: Optional[TradeoffPoint] = None) -> str:
    """CSV table of points; gmacs is written with full float precision."""
    baseline = baseline or points[0]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in points:
        ann = p.map_annotation
        writer.writerow([
            p.label,
            p.family.value,
            repr(p.gmacs),
            f"{reduction_factor(p, baseline):.6f}",
            repr(ann.value_percent) if ann else "",
            ann.source if ann else "",
        ])
    return buf.getvalue()


def points_from_csv(text: str) -> list[TradeoffPoint]:
    points = []
    for row in csv.DictReader(io.StringIO(text)):
        ann = None
        if row.get("map_percent"):
            ann = MapAnnotation(float(row["map_percent"]), row.get("map_source", ""))
        points.append(TradeoffPoint(row["label"], float(row["gmacs"]), Family(row["family"]), ann))
    return points


def point_to_dict(p: TradeoffPoint) -> dict[str, Any]:
    ann = p.map_annotation
    return {
        "label": p.label,
        "gmacs": p.gmacs,
        "macs": p.macs,
        "family": p.family.value,
        "map_annotation": (
            {"value_percent": ann.value_percent, "source": ann.source} if ann else None
        ),
    }


def point_from_dict(doc: Mapping[str, Any]) -> TradeoffPoint:
    ann = doc.get("map_annotation")
    return TradeoffPoint(
        doc["label"],
        doc["gmacs"],
        Family(doc["family"]),
        MapAnnotation(ann["value_percent"], ann["source"]) if ann else None,
        doc.get("macs"),
    )


def points_to_json(points: Sequence[TradeoffPoint]) -> str:
    return json.dumps([point_to_dict(p) for p in points], indent=2) + "\n"


def points_from_json(text: str) -> list[TradeoffPoint]:
    return [point_from_dict(d) for d in json.loads(text)]


# ---------------------------------------------------------------------------
# SVG charts
# ---------------------------------------------------------------------------

WIDTH, HEIGHT = 960, 540
MARGIN = dict(left=80, right=30, top=50, bottom=90)
COLORS = {
    "macs": "#c0392b",
    "params": "#2c3e50",
    Family.PROPOSED: "#d62728",
    Family.INPUT_SCALING: "#1f77b4",
}


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _svg(body: list[str], title: str) -> str:
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="28" text-anchor="middle" font-size="16">{escape(title)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _write(path: Union[str, Path, None], text: str) -> str:
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * span:
        ticks.append(round(v, 10))
        v += step
    return ticks


def emit_distribution_chart(report: CostReport, path: Union[str, Path, None] = None) -> str:
    """Grouped bars of MAC share and parameter share per block.

    Both series are normalized to their own totals. Head levels show the
    params of the weight sets they use, so fully shared levels all show the
    same shared set.
    """
    groups = report.by_group()
    if not groups:
        raise ValueError("report has no blocks to chart")
    names = list(groups)
    param_total = sum(c.params for c in groups.values()) or 1
    macs_total = report.totals.macs or 1
    shares = {
        name: {"macs": groups[name].macs / macs_total, "params": groups[name].params / param_total}
        for name in names
    }
    top = max(max(s.values()) for s in shares.values()) or 1.0
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    slot = (x1 - x0) / len(names)
    bar = slot * 0.35

    body = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for tick in _nice_ticks(0.0, top):
        y = y0 - (y0 - y1) * tick / top
        body.append(f'<line x1="{x0 - 4}" y1="{_fmt(y)}" x2="{x0}" y2="{_fmt(y)}" stroke="black"/>')
        body.append(
            f'<text x="{x0 - 8}" y="{_fmt(y + 4)}" text-anchor="end">{tick * 100:.0f}%</text>'
        )
    for i, name in enumerate(names):
        cx = x0 + slot * (i + 0.5)
        for j, metric in enumerate(("macs", "params")):
            value = shares[name][metric]
            h = (y0 - y1) * value / top
            x = cx - bar + j * bar
            raw = getattr(groups[name], metric)
            body.append(
                f'<rect class="bar" data-block="{name}" data-metric="{metric}" '
                f'data-value="{raw}" x="{_fmt(x)}" y="{_fmt(y0 - h)}" width="{_fmt(bar)}" '
                f'height="{_fmt(h)}" fill="{COLORS[metric]}"/>'
            )
        body.append(f'<text x="{_fmt(cx)}" y="{y0 + 18}" text-anchor="middle">{escape(name)}</text>')
    ly = HEIGHT - 30
    for j, (metric, text) in enumerate((("macs", "MACs share"), ("params", "Parameter share"))):
        lx = x0 + j * 180
        body.append(f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" fill="{COLORS[metric]}"/>')
        body.append(f'<text class="legend" x="{lx + 18}" y="{ly}">{text}</text>')
    title = f"MACs and parameter distribution ({report.gmacs:.3f} GMACs total)"
    return _write(path, _svg(body, title))


def emit_tradeoff_chart(points: Sequence[TradeoffPoint], path: Union[str, Path, None] = None) -> str:
    """Scatter of GMACs against annotated mAP, one polyline per family.

    Points without an mAP annotation are drawn as ticks on a rug strip under
    the plot area; they never get a y position.
    """
    if not points:
        raise ValueError("need at least one point")
    xs = [p.gmacs for p in points]
    lo, hi = min(xs), max(xs)
    pad = (hi - lo) * 0.08 or max(hi * 0.1, 1.0)
    lo, hi = max(lo - pad, 0.0), hi + pad
    annotated = [p for p in points if p.map_annotation]
    if annotated:
        ys = [p.map_annotation.value_percent for p in annotated]
        ylo, yhi = min(ys), max(ys)
        ypad = (yhi - ylo) * 0.15 or 0.5
        ylo, yhi = ylo - ypad, yhi + ypad
    else:
        ylo, yhi = 0.0, 1.0

    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    rug = y0 + 40

    def sx(v: float) -> float:
        return x0 + (x1 - x0) * (v - lo) / (hi - lo)

    def sy(v: float) -> float:
        return y0 - (y0 - y1) * (v - ylo) / (yhi - ylo)

    body = [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<line x1="{x0}" y1="{rug}" x2="{x1}" y2="{rug}" stroke="#999" stroke-dasharray="2,3"/>',
        f'<text x="{(x0 + x1) / 2:.0f}" y="{HEIGHT - 8}" text-anchor="middle">GMACs</text>',
        f'<text x="18" y="{(y0 + y1) / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(y0 + y1) / 2:.0f})">reported mAP (%)</text>',
    ]
    for tick in _nice_ticks(lo, hi):
        body.append(f'<text x="{_fmt(sx(tick))}" y="{y0 + 16}" text-anchor="middle">{tick:g}</text>')
    if annotated:
        for tick in _nice_ticks(ylo, yhi):
            body.append(
                f'<text x="{x0 - 8}" y="{_fmt(sy(tick) + 4)}" text-anchor="end">{tick:g}</text>'
            )

    families = [f for f in Family if any(p.family is f for p in points)]
    for family in families:
        color = COLORS[family]
        fam_annotated = sorted(
            (p for p in annotated if p.family is family), key=lambda p: (p.gmacs, p.label)
        )
        if len(fam_annotated) >= 2:
            coords = " ".join(
                f"{_fmt(sx(p.gmacs))},{_fmt(sy(p.map_annotation.value_percent))}"
                for p in fam_annotated
            )
            body.append(
                f'<polyline class="trend" data-family="{family.value}" points="{coords}" '
                f'fill="none" stroke="{color}" stroke-dasharray="4,3"/>'
            )
        for p in points:
            if p.family is not family:
                continue
            if p.map_annotation:
                body.append(
                    f'<circle class="point" data-label="{escape(p.label)}" cx="{_fmt(sx(p.gmacs))}" '
                    f'cy="{_fmt(sy(p.map_annotation.value_percent))}" r="4" fill="{color}"/>'
                )
            else:
                body.append(
                    f'<line class="rug" data-label="{escape(p.label)}" x1="{_fmt(sx(p.gmacs))}" '
                    f'y1="{rug - 6}" x2="{_fmt(sx(p.gmacs))}" y2="{rug + 6}" stroke="{color}" '
                    f'stroke-width="2"/>'
                )
    for j, family in enumerate(families):
        lx = x1 - 170
        ly = y1 + 16 + j * 18
        body.append(f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" fill="{COLORS[family]}"/>')
        body.append(f'<text class="legend" x="{lx + 18}" y="{ly}">{family.value}</text>')
    return _write(path, _svg(body, "GMACs versus reported mAP"))
