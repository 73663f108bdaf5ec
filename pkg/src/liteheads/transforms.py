"""Config-level rewrites: head substitution, sharing change, input scaling."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Union

from .builders import (
    ALL_LEVELS,
    MIN_INPUT_SIZE,
    ConfigError,
    HeadVariant,
    ModelConfig,
    PredictorPolicy,
    SharingScheme,
    build_retinanet,
)
from .cost import cost_report
from .graph import Branch


@dataclass(frozen=True)
class SubstituteHead:
    variant: HeadVariant
    branches: frozenset[Branch] = frozenset(Branch)
    levels: frozenset[int] = frozenset({3})
    predictor_policy: PredictorPolicy = PredictorPolicy.KEEP_PREDICTOR_3X3

    def __post_init__(self):
        object.__setattr__(self, "variant", HeadVariant(self.variant))
        object.__setattr__(self, "branches", frozenset(Branch(b) for b in self.branches))
        object.__setattr__(self, "levels", frozenset(int(x) for x in self.levels))
        object.__setattr__(self, "predictor_policy", PredictorPolicy(self.predictor_policy))
        if not self.branches:
            raise ConfigError("SubstituteHead needs at least one branch")
        if not self.levels or not self.levels <= ALL_LEVELS:
            raise ConfigError("SubstituteHead levels must be a non-empty subset of 3..7")


@dataclass(frozen=True)
class SetSharing:
    scheme: SharingScheme

    def __post_init__(self):
        object.__setattr__(self, "scheme", SharingScheme(self.scheme))


@dataclass(frozen=True)
class ScaleInput:
    target_size: int

    def __post_init__(self):
        if self.target_size < MIN_INPUT_SIZE:
            raise ConfigError(f"ScaleInput target_size must be >= {MIN_INPUT_SIZE}")


Transform = Union[SubstituteHead, SetSharing, ScaleInput]
TRANSFORM_TYPES = {cls.__name__: cls for cls in (SubstituteHead, SetSharing, ScaleInput)}


def apply(config: ModelConfig, t: Transform) -> ModelConfig:
    """Return a new config with ``t`` applied; ``config`` is left untouched.

    Raises:
        ConfigError: if the resulting config violates an invariant.
    """
    if isinstance(t, ScaleInput):
        out = replace(config, input_size=t.target_size)
    elif isinstance(t, SetSharing):
        out = replace(config, sharing=t.scheme)
    elif isinstance(t, SubstituteHead):
        untouched = [b for b in Branch if b not in t.branches]
        for branch in untouched:
            if config.variant(branch) is not HeadVariant.ORIGINAL and config.lw_levels != t.levels:
                raise ConfigError(
                    f"{branch.value} already uses {config.variant(branch).value} on levels "
                    f"{sorted(config.lw_levels)}; cannot move light-weight levels to {sorted(t.levels)}"
                )
        changes: dict[str, Any] = {"lw_levels": t.levels, "predictor_policy": t.predictor_policy}
        if Branch.CLASSIFICATION in t.branches:
            changes["variant_cls"] = t.variant
        if Branch.REGRESSION in t.branches:
            changes["variant_reg"] = t.variant
        if t.levels != ALL_LEVELS and t.variant is not HeadVariant.ORIGINAL:
            changes["sharing"] = SharingScheme.PARTIAL_D3_INDEPENDENT
        out = replace(config, **changes)
    else:
        raise TypeError(f"not a transform: {t!r}")
    return out.validate()


def apply_all(config: ModelConfig, transforms: Iterable[Transform]) -> ModelConfig:
    for t in transforms:
        config = apply(config, t)
    return config


def param_overhead(before: ModelConfig, after: ModelConfig) -> float:
    """Relative change in deduplicated parameter count from ``before`` to ``after``."""
    p0 = cost_report(build_retinanet(before)).totals.params
    p1 = cost_report(build_retinanet(after)).totals.params
    return (p1 - p0) / p0


def transform_to_dict(t: Transform) -> dict[str, Any]:
    if isinstance(t, SubstituteHead):
        return {
            "type": "SubstituteHead",
            "variant": t.variant.value,
            "branches": sorted(b.value for b in t.branches),
            "levels": sorted(t.levels),
            "predictor_policy": t.predictor_policy.value,
        }
    if isinstance(t, SetSharing):
        return {"type": "SetSharing", "scheme": t.scheme.value}
    return {"type": "ScaleInput", "target_size": t.target_size}


def transform_from_dict(doc: Mapping[str, Any]) -> Transform:
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind not in TRANSFORM_TYPES:
        raise ConfigError(f"unknown transform type {kind!r}; expected one of {sorted(TRANSFORM_TYPES)}")
    try:
        return TRANSFORM_TYPES[kind](**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {kind} transform: {exc}") from exc


def transforms_from_json(text: str) -> list[Transform]:
    """Parse one transform object or a list of them."""
    doc = json.loads(text)
    if isinstance(doc, Mapping):
        doc = [doc]
    return [transform_from_dict(d) for d in doc]


def transforms_to_json(transforms: Iterable[Transform]) -> str:
    return json.dumps([transform_to_dict(t) for t in transforms], indent=2) + "\n"
