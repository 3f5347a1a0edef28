"""Turn model output into typed rules, one completion per rule kind.

For every descriptor the extractor issues exactly four completions
(operational, parameter_constraint, type_format, examples), parses each
response line-by-line against that kind's output configuration, and attaches
provenance (raw output, prompt digest) to every rule it produces. A literal
"None" answer contributes no rules; unrecognized lines are skipped and
logged, never fatal.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

from . import constraint_dsl
from .constraint_dsl import Dependency, DslError, Expr, Logical, Relational
from .llm_backend import (
    DEFAULT_MODEL,
    BackendError,
    CompletionRequest,
    RequestTag,
    cache_key,
)
from .prompt_builder import (
    DEFAULT_CHAR_BUDGET,
    DEFAULT_K_SHOTS,
    RULE_KINDS,
    PromptTemplateSet,
    build_prompt,
    render_messages,
)
from .spec_model import DescriptorIdentity, ParameterDescriptor

logger = logging.getLogger(__name__)

Scalar = Union[int, float, bool, str]


class ExtractionError(Exception):
    """The backend failed for at least one rule kind of a descriptor.

    Carries the identity of the failing descriptor plus whatever rules the
    other kinds produced before/after the failure.
    """

    def __init__(self, identity: DescriptorIdentity, failures, partial_rules,
                 diagnostics):
        self.identity = identity
        self.failures = failures  # list of (rule_kind, BackendError)
        self.partial_rules = partial_rules
        self.diagnostics = diagnostics
        details = "; ".join(f"{kind}: {error}" for kind, error in failures)
        super().__init__(
            f"extraction failed for {identity.as_dict()} ({details})")


@dataclass(frozen=True)
class Provenance:
    raw_output: str
    prompt_digest: str


@dataclass(frozen=True)
class OperationScope:
    service: str
    path: str
    method: str


@dataclass(frozen=True)
class OperationalConstraint:
    expr: Expr
    scope: OperationScope
    provenance: Provenance | None = field(default=None, compare=False)

    kind = "operational"


@dataclass(frozen=True)
class ParameterConstraint:
    target: DescriptorIdentity
    min: int | float | None = None
    max: int | float | None = None
    default: Scalar | None = None
    provenance: Provenance | None = field(default=None, compare=False)

    kind = "parameter_constraint"

    def __post_init__(self):
        if self.min is not None and self.max is not None and self.min > self.max:
            raise ValueError(f"min {self.min} exceeds max {self.max}")


@dataclass(frozen=True)
class TypeFormat:
    target: DescriptorIdentity
    type: str | None = None
    items: str | None = None
    format: str | None = None
    collection_format: str | None = None
    provenance: Provenance | None = field(default=None, compare=False)

    kind = "type_format"


@dataclass(frozen=True)
class Examples:
    target: DescriptorIdentity
    values: tuple[Scalar, ...]
    exhaustive: bool = False
    provenance: Provenance | None = field(default=None, compare=False)

    kind = "examples"

    def __post_init__(self):
        if not self.values:
            raise ValueError("an examples rule needs at least one value")


ExtractedRule = Union[OperationalConstraint, ParameterConstraint, TypeFormat, Examples]


@dataclass
class ExtractionDiagnostics:
    skipped_lines: list[tuple[str, str]] = field(default_factory=list)
    none_responses: int = 0
    malformed_responses: int = 0

    def merge(self, other: "ExtractionDiagnostics") -> None:
        self.skipped_lines.extend(other.skipped_lines)
        self.none_responses += other.none_responses
        self.malformed_responses += other.malformed_responses


# ---------------------------------------------------------------------------
# Output parsing
# ---------------------------------------------------------------------------

_NONE_RE = re.compile(r"^\s*[\"']?none[\"']?\.?\s*$", re.IGNORECASE)
_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")
_KEY_RES = {
    "parameter_constraint": re.compile(r"\b(min|max|default)\s*\["),
    "type_format": re.compile(r"\b(type|items|format|collectionFormat)\s*\["),
    "examples": re.compile(r"\b(examples|exhaustive)\s*\["),
}
_CONSTRAINT_WRAPPER_RE = re.compile(r"^\s*constraint\s*\[(.*)\]\s*$", re.DOTALL)


def _scan_bracketed(text: str, open_index: int) -> tuple[str, int] | None:
    """Return (content, index past the closing bracket) for a '[' at open_index.

    Tracks nested brackets and quoted spans so values may contain commas,
    quotes, and parentheses. Returns None when the bracket never closes.
    """
    depth = 0
    quote: str | None = None
    for i in range(open_index, len(text)):
        ch = text[i]
        if quote is not None:
            if ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
        elif ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return text[open_index + 1:i], i + 1
    return None


def _scan_key_values(text: str, key_re: re.Pattern) -> dict[str, str]:
    """First occurrence of each recognized ``key [value]`` pair in the text."""
    found: dict[str, str] = {}
    pos = 0
    while True:
        m = key_re.search(text, pos)
        if m is None:
            return found
        scanned = _scan_bracketed(text, m.end() - 1)
        if scanned is None:
            return found
        value, pos = scanned
        found.setdefault(m.group(1), value.strip())


def _split_values(text: str) -> list[str]:
    """Split a value list on top-level commas, honoring quotes and brackets."""
    parts: list[str] = []
    current: list[str] = []
    depth = 0
    quote: str | None = None
    for ch in text:
        if quote is not None:
            current.append(ch)
            if ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
            current.append(ch)
        elif ch in "([{":
            depth += 1
            current.append(ch)
        elif ch in ")]}":
            depth = max(0, depth - 1)
            current.append(ch)
        elif ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return [p.strip() for p in parts if p.strip()]


def _strip_quotes(text: str) -> tuple[str, bool]:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1], True
    return text, False


def _parse_scalar(raw: str) -> Scalar:
    text, quoted = _strip_quotes(raw.strip())
    if quoted:
        return text
    lowered = text.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _parse_number(raw: str) -> int | float | None:
    value = _parse_scalar(raw)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    return value


def _is_none_response(text: str) -> bool:
    return bool(_NONE_RE.match(text))


def parse_model_output(
    text: str,
    rule_kind: str,
    *,
    target: DescriptorIdentity | None = None,
    scope: OperationScope | None = None,
) -> tuple[list[ExtractedRule], ExtractionDiagnostics]:
    """Parse one completion into rules of the given kind.

    Never raises on arbitrary input: a literal "None" yields no rules and a
    none-response tick; text in which nothing can be recognized yields no
    rules and a malformed tick; everything in between yields the rules that
    did parse plus skipped-line diagnostics.
    """
    if rule_kind not in RULE_KINDS:
        raise ValueError(f"unknown rule kind {rule_kind!r}")
    diagnostics = ExtractionDiagnostics()
    if not isinstance(text, str):
        text = str(text)
    if _is_none_response(text):
        diagnostics.none_responses += 1
        return [], diagnostics

    if rule_kind == "operational":
        rules = _parse_operational(text, scope, diagnostics)
    elif rule_kind == "parameter_constraint":
        rules = _parse_parameter_constraint(text, target, diagnostics)
    elif rule_kind == "type_format":
        rules = _parse_type_format(text, target, diagnostics)
    else:
        rules = _parse_examples(text, target, diagnostics)

    if not rules:
        diagnostics.malformed_responses += 1
    return rules, diagnostics


_PLACEHOLDER_IDENTITY = DescriptorIdentity("", "", "", "")
_PLACEHOLDER_SCOPE = OperationScope("", "", "")


def _parse_operational(text: str, scope: OperationScope | None,
                       diagnostics: ExtractionDiagnostics) -> list[ExtractedRule]:
    rules: list[ExtractedRule] = []
    for raw_line in text.splitlines():
        line = _BULLET_RE.sub("", raw_line.strip())
        if not line or _is_none_response(line):
            continue
        wrapped = _CONSTRAINT_WRAPPER_RE.match(line)
        if wrapped:
            line = wrapped.group(1).strip()
        try:
            expr = constraint_dsl.parse_constraint(line)
        except DslError as exc:
            diagnostics.skipped_lines.append((raw_line, str(exc)))
            continue
        if not isinstance(expr, (Relational, Dependency, Logical)):
            diagnostics.skipped_lines.append((raw_line, "not a predicate"))
            continue
        rules.append(OperationalConstraint(
            expr=expr, scope=scope or _PLACEHOLDER_SCOPE))
    return rules


def _parse_parameter_constraint(text: str, target: DescriptorIdentity | None,
                                diagnostics: ExtractionDiagnostics) -> list[ExtractedRule]:
    pairs = _scan_key_values(text, _KEY_RES["parameter_constraint"])
    if not pairs:
        return []
    fields: dict[str, Scalar | None] = {}
    for key in ("min", "max"):
        if key in pairs:
            number = _parse_number(pairs[key])
            if number is None:
                diagnostics.skipped_lines.append(
                    (f"{key} [{pairs[key]}]", f"{key} is not numeric"))
            else:
                fields[key] = number
    if "default" in pairs:
        fields["default"] = _parse_scalar(pairs["default"])
    if not fields:
        return []
    try:
        return [ParameterConstraint(target=target or _PLACEHOLDER_IDENTITY, **fields)]
    except ValueError as exc:
        diagnostics.skipped_lines.append((text.strip(), str(exc)))
        return []


def _parse_type_format(text: str, target: DescriptorIdentity | None,
                       diagnostics: ExtractionDiagnostics) -> list[ExtractedRule]:
    pairs = _scan_key_values(text, _KEY_RES["type_format"])
    if not pairs:
        return []
    cleaned = {key: _strip_quotes(value)[0] for key, value in pairs.items() if value}
    if not cleaned:
        diagnostics.skipped_lines.append((text.strip(), "empty typing values"))
        return []
    return [TypeFormat(
        target=target or _PLACEHOLDER_IDENTITY,
        type=cleaned.get("type"),
        items=cleaned.get("items"),
        format=cleaned.get("format"),
        collection_format=cleaned.get("collectionFormat"),
    )]


def _parse_examples(text: str, target: DescriptorIdentity | None,
                    diagnostics: ExtractionDiagnostics) -> list[ExtractedRule]:
    pairs = _scan_key_values(text, _KEY_RES["examples"])
    listed = pairs.get("examples")
    if listed is None:
        return []
    values = [_parse_scalar(part) for part in _split_values(listed)]
    values = dedupe_values(values)
    if not values:
        diagnostics.skipped_lines.append((text.strip(), "empty example list"))
        return []
    exhaustive = False
    if "exhaustive" in pairs:
        flag = _parse_scalar(pairs["exhaustive"])
        exhaustive = flag is True or (isinstance(flag, str) and flag.lower() == "true")
    return [Examples(target=target or _PLACEHOLDER_IDENTITY,
                     values=tuple(values), exhaustive=exhaustive)]


def dedupe_values(values: Iterable[Scalar]) -> list[Scalar]:
    """Drop duplicates, first occurrence wins; 1, 1.0 and True stay distinct."""
    seen = set()
    out = []
    for value in values:
        key = (type(value).__name__, value)
        if key not in seen:
            seen.add(key)
            out.append(value)
    return out


def coerce_values(values: Iterable[Scalar], machine_type: str | None) -> list[Scalar]:
    """Align value types with the descriptor's declared machine-readable type."""
    if machine_type not in ("integer", "number", "boolean", "string"):
        return list(values)
    out: list[Scalar] = []
    for value in values:
        coerced: Scalar = value
        try:
            if machine_type == "integer" and not isinstance(value, bool):
                coerced = int(value)
            elif machine_type == "number" and not isinstance(value, bool):
                coerced = float(value)
            elif machine_type == "boolean":
                if isinstance(value, str):
                    if value.lower() in ("true", "false"):
                        coerced = value.lower() == "true"
                else:
                    coerced = bool(value)
            elif machine_type == "string" and not isinstance(value, str):
                coerced = json.dumps(value) if isinstance(value, bool) else str(value)
        except (TypeError, ValueError):
            logger.debug("kept value %r; not coercible to %s", value, machine_type)
        out.append(coerced)
    return dedupe_values(out)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractorConfig:
    model_name: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 512
    k_shots: int = DEFAULT_K_SHOTS
    char_budget: int = DEFAULT_CHAR_BUDGET


@dataclass
class KindOutcome:
    rule_kind: str
    prompt_digest: str
    raw_output: str
    rules: list[ExtractedRule]
    diagnostics: ExtractionDiagnostics


@dataclass
class DescriptorExtraction:
    descriptor: ParameterDescriptor
    outcomes: list[KindOutcome]

    @property
    def rules(self) -> list[ExtractedRule]:
        return [rule for outcome in self.outcomes for rule in outcome.rules]

    @property
    def diagnostics(self) -> ExtractionDiagnostics:
        merged = ExtractionDiagnostics()
        for outcome in self.outcomes:
            merged.merge(outcome.diagnostics)
        return merged


def build_request(descriptor: ParameterDescriptor, rule_kind: str,
                  templates: PromptTemplateSet,
                  config: ExtractorConfig = ExtractorConfig()) -> CompletionRequest:
    """The exact completion request the extractor issues for one rule kind."""
    bundle = build_prompt(descriptor, rule_kind, templates,
                          k_shots=config.k_shots, char_budget=config.char_budget)
    identity = descriptor.identity
    return CompletionRequest(
        messages=render_messages(bundle),
        model_name=config.model_name,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        request_tag=RequestTag(identity.service, identity.path, identity.method,
                               identity.name, rule_kind),
    )


def extract_descriptor(descriptor: ParameterDescriptor, backend,
                       templates: PromptTemplateSet,
                       config: ExtractorConfig = ExtractorConfig()) -> DescriptorExtraction:
    """Run all four rule kinds for one descriptor; one completion per kind."""
    identity = descriptor.identity
    scope = OperationScope(identity.service, identity.path, identity.method)
    machine_type = descriptor.machine_keywords.get("type")
    outcomes: list[KindOutcome] = []
    failures: list[tuple[str, BackendError]] = []

    for rule_kind in RULE_KINDS:
        request = build_request(descriptor, rule_kind, templates, config)
        digest = cache_key(request)
        try:
            result = backend.complete(request)
        except BackendError as exc:
            logger.error("backend failed for %s/%s: %s", identity.name, rule_kind, exc)
            failures.append((rule_kind, exc))
            continue
        rules, diagnostics = parse_model_output(
            result.text, rule_kind, target=identity, scope=scope)
        provenance = Provenance(raw_output=result.text, prompt_digest=digest)
        finished: list[ExtractedRule] = []
        for rule in rules:
            if isinstance(rule, OperationalConstraint):
                rule = replace(rule, expr=constraint_dsl.canonicalize(rule.expr))
            if isinstance(rule, Examples):
                rule = replace(rule, values=tuple(
                    coerce_values(rule.values, machine_type)))
            finished.append(replace(rule, provenance=provenance))
        outcomes.append(KindOutcome(rule_kind, digest, result.text, finished,
                                    diagnostics))

    extraction = DescriptorExtraction(descriptor, outcomes)
    if failures:
        raise ExtractionError(identity, failures, extraction.rules,
                              extraction.diagnostics)
    return extraction


def extract_rules(descriptor: ParameterDescriptor, backend,
                  templates: PromptTemplateSet,
                  config: ExtractorConfig = ExtractorConfig(),
                  ) -> tuple[list[ExtractedRule], ExtractionDiagnostics]:
    """Extracted rules plus diagnostics for one descriptor (all four kinds)."""
    extraction = extract_descriptor(descriptor, backend, templates, config)
    return extraction.rules, extraction.diagnostics


def generate_example_values(descriptor: ParameterDescriptor, backend,
                            templates: PromptTemplateSet,
                            config: ExtractorConfig = ExtractorConfig()) -> list[Scalar]:
    """Candidate values for one parameter: examples-kind extraction only."""
    request = build_request(descriptor, "examples", templates, config)
    result = backend.complete(request)
    rules, _ = parse_model_output(result.text, "examples",
                                  target=descriptor.identity)
    values: list[Scalar] = []
    for rule in rules:
        values.extend(rule.values)
    return coerce_values(values, descriptor.machine_keywords.get("type"))


def extract_all(descriptors: Sequence[ParameterDescriptor], backend,
                templates: PromptTemplateSet,
                config: ExtractorConfig = ExtractorConfig(),
                concurrency: int = 4) -> list[DescriptorExtraction]:
    """Extract every descriptor, concurrently up to ``concurrency`` workers.

    Results come back in descriptor order regardless of completion order.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if len(descriptors) <= 1 or concurrency == 1:
        return [extract_descriptor(d, backend, templates, config) for d in descriptors]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(
            lambda d: extract_descriptor(d, backend, templates, config), descriptors))


# ---------------------------------------------------------------------------
# Rule serialization and the extraction log
# ---------------------------------------------------------------------------

def rule_to_json(rule: ExtractedRule) -> dict:
    if isinstance(rule, OperationalConstraint):
        return {"kind": rule.kind, "service": rule.scope.service,
                "path": rule.scope.path, "method": rule.scope.method,
                "expr": constraint_dsl.to_text(rule.expr)}
    base = {"kind": rule.kind, "service": rule.target.service,
            "path": rule.target.path, "method": rule.target.method,
            "parameter": rule.target.name}
    if isinstance(rule, ParameterConstraint):
        for key in ("min", "max", "default"):
            value = getattr(rule, key)
            if value is not None:
                base[key] = value
        return base
    if isinstance(rule, TypeFormat):
        for key, attr in (("type", "type"), ("items", "items"), ("format", "format"),
                          ("collectionFormat", "collection_format")):
            value = getattr(rule, attr)
            if value is not None:
                base[key] = value
        return base
    base["values"] = list(rule.values)
    base["exhaustive"] = rule.exhaustive
    return base


def rule_from_json(data: dict) -> ExtractedRule:
    kind = data.get("kind")
    if kind == "operational":
        raw = data["expr"]
        expr = (constraint_dsl.expr_from_json(raw) if isinstance(raw, dict)
                else constraint_dsl.parse_constraint(raw))
        return OperationalConstraint(
            expr=expr,
            scope=OperationScope(data.get("service", ""), data.get("path", ""),
                                 data.get("method", "")))
    target = DescriptorIdentity(data.get("service", ""), data.get("path", ""),
                                data.get("method", ""), data.get("parameter", ""))
    if kind == "parameter_constraint":
        return ParameterConstraint(target=target, min=data.get("min"),
                                   max=data.get("max"), default=data.get("default"))
    if kind == "type_format":
        return TypeFormat(target=target, type=data.get("type"),
                          items=data.get("items"), format=data.get("format"),
                          collection_format=data.get("collectionFormat"))
    if kind == "examples":
        return Examples(target=target, values=tuple(data.get("values", ())),
                        exhaustive=bool(data.get("exhaustive", False)))
    raise ValueError(f"unknown rule kind {kind!r}")


def write_extraction_log(path: str | Path,
                         extractions: Iterable[DescriptorExtraction]) -> None:
    """One JSONL record per (descriptor, rule kind) exchange, for audit."""
    with open(path, "w", encoding="utf-8") as fh:
        for extraction in extractions:
            identity = extraction.descriptor.identity
            for outcome in extraction.outcomes:
                record = {
                    "service": identity.service,
                    "path": identity.path,
                    "method": identity.method,
                    "parameter": identity.name,
                    "location": extraction.descriptor.location,
                    "rule_kind": outcome.rule_kind,
                    "prompt_digest": outcome.prompt_digest,
                    "raw_output": outcome.raw_output,
                    "rules": [rule_to_json(r) for r in outcome.rules],
                    "skipped_lines": [
                        {"text": text, "reason": reason}
                        for text, reason in outcome.diagnostics.skipped_lines],
                    "none_response": outcome.diagnostics.none_responses > 0,
                    "malformed": outcome.diagnostics.malformed_responses > 0,
                }
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_extracted_rules(path: str | Path) -> list[ExtractedRule]:
    """Rules recorded in an extraction log (provenance is not rebuilt)."""
    rules: list[ExtractedRule] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                rules.extend(rule_from_json(r) for r in record.get("rules", ()))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError,
                    DslError) as exc:
                raise ValueError(f"{path}: bad extraction record at line {lineno}: "
                                 f"{exc}") from exc
    return rules
