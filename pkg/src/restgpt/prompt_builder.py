"""Assemble extraction prompts from editable template files.

A prompt has four fixed sections (guidelines, cases, grammar highlights,
output configurations) shared as one system message, a configurable number of
few-shot input/output pairs, and finally the subject parameter rendered with
its name, machine-readable keywords, and verbatim description. Rendering is
a pure function of its inputs: same bundle, same bytes.

Template files live in a directory with one ``<rule_kind>.txt`` per rule
kind, using ``[GUIDELINES]``, ``[CASES]``, ``[GRAMMAR]`` and ``[OUTPUT]``
section markers, plus a ``few_shot.jsonl`` pool (one example per line with
``rule_kind``, ``input``, ``output``). The shipped defaults are starting
points meant to be edited and versioned alongside the specs they are used on.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .llm_backend import ChatMessage
from .spec_model import ParameterDescriptor

RULE_KINDS = ("operational", "parameter_constraint", "type_format", "examples")
SECTION_NAMES = ("guidelines", "cases", "grammar_highlights", "output_configurations")

_MARKERS = {
    "[GUIDELINES]": "guidelines",
    "[CASES]": "cases",
    "[GRAMMAR]": "grammar_highlights",
    "[OUTPUT]": "output_configurations",
}
_CASE_RE = re.compile(r"^Case (\d+):", re.MULTILINE)

REQUIRED_CASE_COUNT = 10
DEFAULT_K_SHOTS = 2
DEFAULT_CHAR_BUDGET = 16000  # model-agnostic budget, ~4 chars per token


class TemplateError(Exception):
    """A template file is missing, malformed, or incomplete."""


class PromptBudgetError(TemplateError):
    """The fixed sections plus the subject alone exceed the character budget."""


@dataclass(frozen=True)
class FewShotExample:
    rule_kind: str
    input_text: str
    output_text: str


@dataclass(frozen=True)
class KindTemplate:
    guidelines: str
    cases: tuple[str, ...]
    grammar: str
    output_config: str

    @property
    def cases_text(self) -> str:
        return "\n".join(self.cases)


@dataclass(frozen=True)
class PromptTemplateSet:
    kinds: Mapping[str, KindTemplate]
    few_shot_pool: Mapping[str, tuple[FewShotExample, ...]]

    @classmethod
    def load(cls, directory: str | Path) -> "PromptTemplateSet":
        directory = Path(directory)
        kinds: dict[str, KindTemplate] = {}
        for kind in RULE_KINDS:
            path = directory / f"{kind}.txt"
            if not path.is_file():
                raise TemplateError(f"missing template file: {path}")
            kinds[kind] = _parse_template(path.read_text(encoding="utf-8"), str(path))
        pool: dict[str, list[FewShotExample]] = {kind: [] for kind in RULE_KINDS}
        few_shot_path = directory / "few_shot.jsonl"
        if few_shot_path.is_file():
            for lineno, line in enumerate(
                    few_shot_path.read_text(encoding="utf-8").splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    example = FewShotExample(record["rule_kind"], record["input"],
                                             record["output"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise TemplateError(
                        f"{few_shot_path}: bad few-shot record at line {lineno}: {exc}"
                    ) from exc
                if example.rule_kind not in pool:
                    raise TemplateError(
                        f"{few_shot_path}: unknown rule kind "
                        f"{example.rule_kind!r} at line {lineno}")
                pool[example.rule_kind].append(example)
        return cls(kinds=kinds,
                   few_shot_pool={k: tuple(v) for k, v in pool.items()})

    @classmethod
    def default(cls) -> "PromptTemplateSet":
        return _default_templates()


def _parse_template(text: str, source: str) -> KindTemplate:
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        marker = _MARKERS.get(line.strip())
        if marker is not None:
            if marker in sections:
                raise TemplateError(f"{source}: duplicate section marker {line.strip()}")
            sections[marker] = []
            current = marker
            continue
        if current is not None:
            sections[current].append(line)
    missing = [name for name in SECTION_NAMES if name not in sections]
    if missing:
        raise TemplateError(f"{source}: missing sections: {', '.join(missing)}")
    parts = {name: "\n".join(lines).strip() for name, lines in sections.items()}
    for name, body in parts.items():
        if not body:
            raise TemplateError(f"{source}: section {name} is empty")
    cases = _split_cases(parts["cases"], source)
    return KindTemplate(
        guidelines=parts["guidelines"],
        cases=cases,
        grammar=parts["grammar_highlights"],
        output_config=parts["output_configurations"],
    )


def _split_cases(text: str, source: str) -> tuple[str, ...]:
    starts = [(m.start(), int(m.group(1))) for m in _CASE_RE.finditer(text)]
    if [number for _, number in starts] != list(range(1, REQUIRED_CASE_COUNT + 1)):
        raise TemplateError(
            f"{source}: cases must be numbered Case 1 … Case {REQUIRED_CASE_COUNT}, "
            f"found {[n for _, n in starts]}")
    bounds = [pos for pos, _ in starts] + [len(text)]
    return tuple(text[bounds[i]:bounds[i + 1]].strip()
                 for i in range(len(starts)))


_default_cache: PromptTemplateSet | None = None


def _default_templates() -> PromptTemplateSet:
    global _default_cache
    if _default_cache is None:
        with resources.as_file(resources.files("restgpt") / "templates") as path:
            _default_cache = PromptTemplateSet.load(path)
    return _default_cache


@dataclass(frozen=True)
class PromptBundle:
    rule_kind: str
    sections: tuple[tuple[str, str], ...]  # ordered (section_name, text), all four
    few_shot: tuple[tuple[str, str], ...]  # (input rendering, output rendering)
    subject: str


def render_subject(descriptor: ParameterDescriptor) -> str:
    """Render the extraction target: identity, keywords, verbatim description."""
    keywords = descriptor.machine_keywords
    if keywords:
        rendered = ", ".join(
            f"{key}={json.dumps(keywords[key], sort_keys=True)}"
            if isinstance(keywords[key], (list, dict))
            else f"{key}={keywords[key]}"
            for key in sorted(keywords))
    else:
        rendered = "(none)"
    description = descriptor.description if descriptor.has_description else "(empty)"
    return (
        f"Parameter: {descriptor.name}\n"
        f"Location: {descriptor.location}\n"
        f"Required: {'true' if descriptor.required else 'false'}\n"
        f"Machine-readable keywords: {rendered}\n"
        f"Description:\n{description}"
    )


def build_prompt(
    descriptor: ParameterDescriptor,
    rule_kind: str,
    templates: PromptTemplateSet,
    k_shots: int = DEFAULT_K_SHOTS,
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> PromptBundle:
    """Assemble the prompt bundle for one descriptor and rule kind.

    Few-shot examples come first-k from the kind's pool. If the rendering
    exceeds ``char_budget``, few-shot pairs are dropped from the end; the
    subject is never truncated.
    """
    if k_shots < 0:
        raise ValueError("k_shots must be >= 0")
    template = templates.kinds.get(rule_kind)
    if template is None:
        raise TemplateError(
            f"no template for rule kind {rule_kind!r}; configured kinds: "
            f"{', '.join(sorted(templates.kinds))}")
    pool = templates.few_shot_pool.get(rule_kind, ())
    shots = tuple((ex.input_text, ex.output_text) for ex in pool[:k_shots])
    bundle = PromptBundle(
        rule_kind=rule_kind,
        sections=(
            ("guidelines", template.guidelines),
            ("cases", template.cases_text),
            ("grammar_highlights", template.grammar),
            ("output_configurations", template.output_config),
        ),
        few_shot=shots,
        subject=render_subject(descriptor),
    )
    while rendered_length(bundle) > char_budget and bundle.few_shot:
        bundle = PromptBundle(bundle.rule_kind, bundle.sections,
                              bundle.few_shot[:-1], bundle.subject)
    if rendered_length(bundle) > char_budget:
        raise PromptBudgetError(
            f"prompt for {descriptor.name!r}/{rule_kind} needs "
            f"{rendered_length(bundle)} characters; budget is {char_budget}")
    return bundle


def render_messages(bundle: PromptBundle) -> tuple[ChatMessage, ...]:
    """Deterministic chat rendering: system, k user/assistant pairs, subject."""
    header_by_name = {name: marker for marker, name in _MARKERS.items()}
    system = "\n\n".join(
        f"{header_by_name[name]}\n{text}" for name, text in bundle.sections)
    messages = [ChatMessage("system", system)]
    for shot_input, shot_output in bundle.few_shot:
        messages.append(ChatMessage("user", shot_input))
        messages.append(ChatMessage("assistant", shot_output))
    messages.append(ChatMessage("user", bundle.subject))
    return tuple(messages)


def rendered_length(bundle: PromptBundle) -> int:
    return sum(len(m.content) for m in render_messages(bundle))
