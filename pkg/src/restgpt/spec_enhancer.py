"""Merge extracted rules into the source document and validate the result.

The merge is strictly additive: a machine-readable keyword that already has a
value is never overwritten. A rule that disagrees with an existing keyword
becomes a ConflictRecord; a rule whose whole effect is already present is
dropped as a duplicate. Every input rule therefore lands in exactly one of
three buckets (applied, conflict, duplicate), which keeps the accounting
total.

Placements: value bounds and defaults go to ``minimum``/``maximum``/
``default``; typing facts to ``type``/``items``/``format``/
``collectionFormat``; exhaustive example sets to ``enum``; open example sets
to ``example`` (first value) plus the ``x-example-values`` vendor extension
(full list, unioned across rules); inter-parameter rules to an
operation-level ``x-dependencies`` list holding canonical rule text.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

from . import constraint_dsl
from .rule_extractor import (
    Examples,
    ExtractedRule,
    OperationalConstraint,
    ParameterConstraint,
    TypeFormat,
    rule_to_json,
)
from .spec_model import ApiSpecification, ParameterDescriptor, serialize_tree

logger = logging.getLogger(__name__)

X_DEPENDENCIES = "x-dependencies"
X_EXAMPLE_VALUES = "x-example-values"


class EnhancementError(Exception):
    """A rule targets something the specification does not contain."""


def _pointer(path: Sequence[Any]) -> str:
    return "/" + "/".join(
        str(part).replace("~", "~0").replace("/", "~1") for part in path)


def _node_at(tree: Any, path: Sequence[Any], create: bool = False) -> Any:
    node = tree
    for part in path:
        if isinstance(part, int):
            node = node[part]
            continue
        if isinstance(node, dict) and part not in node and create:
            node[part] = {}
        node = node[part]
    return node


@dataclass(frozen=True)
class AppliedRule:
    rule: ExtractedRule
    placement: str  # JSON pointer of the written keyword(s)


@dataclass(frozen=True)
class ConflictRecord:
    rule: ExtractedRule
    keyword_path: str
    existing_value: Any
    reason: str


@dataclass(frozen=True)
class DroppedDuplicate:
    rule: ExtractedRule
    reason: str


@dataclass(frozen=True)
class Diagnostic:
    path: str
    code: str
    message: str


@dataclass
class EnhancedSpec:
    base: ApiSpecification
    applied: list[AppliedRule] = field(default_factory=list)
    conflicts: list[ConflictRecord] = field(default_factory=list)
    duplicates: list[DroppedDuplicate] = field(default_factory=list)
    document: dict = field(default_factory=dict)

    def to_text(self, fmt: str | None = None) -> str:
        return serialize_tree(self.document, fmt or self.base.source_format)

    def conflict_report(self) -> dict:
        return {
            "conflicts": [
                {"rule": rule_to_json(record.rule),
                 "existing_keyword": {"path": record.keyword_path,
                                      "value": record.existing_value},
                 "reason": record.reason}
                for record in self.conflicts],
            "applied": len(self.applied),
            "duplicates": len(self.duplicates),
        }


class _Merger:
    def __init__(self, spec: ApiSpecification, document: dict):
        self.spec = spec
        self.document = document
        self.applied: list[AppliedRule] = []
        self.conflicts: list[ConflictRecord] = []
        self.duplicates: list[DroppedDuplicate] = []

    def _descriptor_for(self, rule) -> ParameterDescriptor:
        descriptor = self.spec.descriptor(rule.target)
        if descriptor is None:
            raise EnhancementError(
                f"rule targets unknown parameter {rule.target.as_dict()}")
        return descriptor

    def _container(self, descriptor: ParameterDescriptor) -> dict:
        return _node_at(self.document, descriptor.keyword_path, create=True)

    def _merge_keywords(self, rule, descriptor: ParameterDescriptor,
                        parts: dict[str, Any],
                        bad_keys: dict[str, str] | None = None) -> None:
        """Atomic merge of keyword -> value pairs into the descriptor's node."""
        container = self._container(descriptor)
        pointer = _pointer(descriptor.keyword_path)
        if bad_keys:
            keyword, reason = next(iter(bad_keys.items()))
            self.conflicts.append(ConflictRecord(
                rule, f"{pointer}/{keyword}", container.get(keyword), reason))
            return
        # First disagreeing keyword sends the whole rule to the conflict
        # bucket; partial application would blur the accounting.
        for keyword, value in parts.items():
            existing = container.get(keyword)
            if keyword in container and not _values_equal(existing, value):
                self.conflicts.append(ConflictRecord(
                    rule, f"{pointer}/{keyword}", existing,
                    f"machine-readable keyword {keyword!r} is already set to "
                    f"{existing!r}; rule value {value!r} differs"))
                return
        fresh = {k: v for k, v in parts.items() if k not in container}
        if not fresh:
            self.duplicates.append(DroppedDuplicate(
                rule, "all keywords already carry these values"))
            logger.info("dropped duplicate rule for %s: %s",
                        descriptor.name, sorted(parts))
            return
        container.update(fresh)
        placement = pointer + "/" + ",".join(sorted(fresh))
        self.applied.append(AppliedRule(rule, placement))

    def merge(self, rule: ExtractedRule) -> None:
        if isinstance(rule, OperationalConstraint):
            self._merge_operational(rule)
        elif isinstance(rule, ParameterConstraint):
            descriptor = self._descriptor_for(rule)
            parts: dict[str, Any] = {}
            if rule.min is not None:
                parts["minimum"] = rule.min
            if rule.max is not None:
                parts["maximum"] = rule.max
            if rule.default is not None:
                parts["default"] = rule.default
            self._merge_keywords(rule, descriptor, parts)
        elif isinstance(rule, TypeFormat):
            self._merge_type_format(rule)
        elif isinstance(rule, Examples):
            self._merge_examples(rule)
        else:
            raise EnhancementError(f"unknown rule type {type(rule).__name__}")

    def _merge_operational(self, rule: OperationalConstraint) -> None:
        operation = self.spec.operation(rule.scope.path, rule.scope.method)
        if operation is None or rule.scope.service != self.spec.service:
            raise EnhancementError(
                f"rule targets unknown operation "
                f"{rule.scope.method.upper()} {rule.scope.path} "
                f"(service {rule.scope.service!r})")
        node_path = operation.node_path or \
            ("paths", rule.scope.path, rule.scope.method)
        node = _node_at(self.document, node_path)
        text = constraint_dsl.canonical_text(rule.expr)
        existing = node.setdefault(X_DEPENDENCIES, [])
        if not isinstance(existing, list):
            self.conflicts.append(ConflictRecord(
                rule, _pointer(node_path + (X_DEPENDENCIES,)), existing,
                f"existing {X_DEPENDENCIES} is not a list"))
            return
        if text in existing:
            self.duplicates.append(DroppedDuplicate(rule, "dependency already present"))
            return
        existing.append(text)
        self.applied.append(
            AppliedRule(rule, _pointer(node_path + (X_DEPENDENCIES,))))

    def _merge_type_format(self, rule: TypeFormat) -> None:
        descriptor = self._descriptor_for(rule)
        parts: dict[str, Any] = {}
        bad: dict[str, str] = {}
        if rule.type is not None:
            parts["type"] = rule.type
        if rule.format is not None:
            parts["format"] = rule.format
        if rule.items is not None:
            parts["items"] = {"type": rule.items}
        if rule.collection_format is not None:
            if self.spec.oas_version == "2.0":
                parts["collectionFormat"] = rule.collection_format
            else:
                bad["collectionFormat"] = (
                    "collectionFormat is not a recognized keyword for "
                    "OpenAPI 3.x documents")
        self._merge_keywords(rule, descriptor, parts, bad)

    def _merge_examples(self, rule: Examples) -> None:
        descriptor = self._descriptor_for(rule)
        if rule.exhaustive:
            self._merge_keywords(rule, descriptor, {"enum": list(rule.values)})
            return
        container = self._container(descriptor)
        pointer = _pointer(descriptor.keyword_path)
        pool = container.get(X_EXAMPLE_VALUES)
        if pool is not None and not isinstance(pool, list):
            self.conflicts.append(ConflictRecord(
                rule, f"{pointer}/{X_EXAMPLE_VALUES}", pool,
                f"existing {X_EXAMPLE_VALUES} is not a list"))
            return
        changed = False
        if "example" not in container:
            container["example"] = rule.values[0]
            changed = True
        if pool is None:
            pool = container[X_EXAMPLE_VALUES] = []
        for value in rule.values:
            if value not in pool:
                pool.append(value)
                changed = True
        if changed:
            self.applied.append(
                AppliedRule(rule, f"{pointer}/{X_EXAMPLE_VALUES}"))
        else:
            self.duplicates.append(
                DroppedDuplicate(rule, "example values already present"))


def _values_equal(existing: Any, proposed: Any) -> bool:
    if isinstance(existing, list) or isinstance(proposed, list):
        return list(existing or ()) == list(proposed or ())
    return existing == proposed


def enhance(spec: ApiSpecification, rules: Sequence[ExtractedRule]) -> EnhancedSpec:
    """Merge rules into a copy of the document; the input spec is untouched.

    Raises EnhancementError when a rule targets a parameter or operation that
    does not exist in the spec (a pipeline bug, never model output drift).
    """
    document = copy.deepcopy(spec.raw_document)
    merger = _Merger(spec, document)
    for rule in rules:
        merger.merge(rule)
    enhanced = EnhancedSpec(
        base=spec,
        applied=merger.applied,
        conflicts=merger.conflicts,
        duplicates=merger.duplicates,
        document=document,
    )
    total = len(enhanced.applied) + len(enhanced.conflicts) + len(enhanced.duplicates)
    assert total == len(rules), "rule accounting must be total"
    return enhanced


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

_STYLE_TYPES = ("array", "object")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_enhanced(enhanced: EnhancedSpec) -> list[Diagnostic]:
    """Consistency checks over the enhanced document; returns diagnostics.

    Checks: ``style`` only on array/object-typed parameters; ``minimum`` not
    above ``maximum``; ``default`` inside declared bounds and enum;
    ``collectionFormat`` only on arrays; every ``x-dependencies`` entry must
    parse in the constraint language.
    """
    diagnostics: list[Diagnostic] = []
    document = enhanced.document

    for operation in enhanced.base.operations:
        for descriptor in operation.parameters:
            try:
                container = _node_at(document, descriptor.keyword_path)
            except (KeyError, IndexError, TypeError):
                container = {}
            if not isinstance(container, dict):
                container = {}
            try:
                param_node = _node_at(document, descriptor.node_path)
            except (KeyError, IndexError, TypeError):
                param_node = {}
            if not isinstance(param_node, dict):
                param_node = {}
            pointer = _pointer(descriptor.keyword_path)
            declared_type = container.get("type")

            style = container.get("style", param_node.get("style"))
            if style is not None and declared_type not in _STYLE_TYPES:
                diagnostics.append(Diagnostic(
                    pointer, "style-requires-array-or-object",
                    f"parameter {descriptor.name!r} carries style={style!r} but its "
                    f"type is {declared_type!r}; style is only allowed when the "
                    f"data type is array or object"))

            minimum = container.get("minimum")
            maximum = container.get("maximum")
            if _is_number(minimum) and _is_number(maximum) and minimum > maximum:
                diagnostics.append(Diagnostic(
                    pointer, "minimum-above-maximum",
                    f"parameter {descriptor.name!r} declares minimum {minimum} "
                    f"greater than maximum {maximum}"))

            default = container.get("default")
            if default is not None:
                enum = container.get("enum")
                if isinstance(enum, list) and default not in enum:
                    diagnostics.append(Diagnostic(
                        pointer, "default-not-in-enum",
                        f"parameter {descriptor.name!r} default {default!r} is not "
                        f"one of its enum values"))
                elif _is_number(default) and (
                        (_is_number(minimum) and default < minimum)
                        or (_is_number(maximum) and default > maximum)):
                    diagnostics.append(Diagnostic(
                        pointer, "default-outside-range",
                        f"parameter {descriptor.name!r} default {default!r} falls "
                        f"outside [{minimum}, {maximum}]"))

            collection_format = container.get("collectionFormat")
            if collection_format is not None and declared_type != "array":
                diagnostics.append(Diagnostic(
                    pointer, "collection-format-requires-array",
                    f"parameter {descriptor.name!r} carries collectionFormat="
                    f"{collection_format!r} but its type is {declared_type!r}"))

        node_path = operation.node_path or \
            ("paths", operation.path, operation.http_method)
        try:
            op_node = _node_at(document, node_path)
        except (KeyError, IndexError, TypeError):
            continue
        entries = op_node.get(X_DEPENDENCIES)
        if entries is None:
            continue
        if not isinstance(entries, list):
            diagnostics.append(Diagnostic(
                _pointer(node_path + (X_DEPENDENCIES,)), "unparseable-dependency",
                f"{X_DEPENDENCIES} must be a list"))
            continue
        for index, entry in enumerate(entries):
            try:
                constraint_dsl.parse_constraint(str(entry))
            except constraint_dsl.DslError as exc:
                diagnostics.append(Diagnostic(
                    _pointer(node_path + (X_DEPENDENCIES, index)),
                    "unparseable-dependency",
                    f"dependency entry {entry!r} does not parse: {exc}"))
    return diagnostics
