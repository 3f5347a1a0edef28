#!/usr/bin/env python3
"""Regenerate the replay-cache and ground-truth fixtures.

Runs the real extraction pipeline (default templates, default extractor
settings) against scripted stand-ins for the model, recording every exchange
through the production RecordingBackend. Replaying a cache reproduces its
run byte-for-byte, which is what the golden end-to-end tests rely on.

Re-run whenever the default templates or the prompt rendering change, then
commit the updated fixtures:

    python3 scripts/build_replay_fixtures.py
"""

from pathlib import Path

from restgpt.evaluator import GroundTruthEntry, write_ground_truth
from restgpt.llm_backend import CompletionResult, RecordingBackend, ReplayCache, Usage
from restgpt.prompt_builder import PromptTemplateSet
from restgpt.rule_extractor import extract_all
from restgpt.spec_model import extract_descriptors, read_spec_file

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

FDIC_ANSWERS = {
    ("filters", "operational"): "None",
    ("filters", "parameter_constraint"): "None",
    ("filters", "type_format"): "type [string]",
    ("filters", "examples"):
        "examples ['STNAME:\"California\"', 'STNAME:(\"California\", \"New York\")']\n"
        "exhaustive [false]",
    ("sort_order", "operational"): "None",
    ("sort_order", "parameter_constraint"): "None",
    ("sort_order", "type_format"): "None",
    ("sort_order", "examples"): "examples [ASC, DESC]\nexhaustive [true]",
}

# The same dependency surfaces in both limit's and offset's descriptions; the
# enhancer must apply it once and drop the second copy as a duplicate.
DEVICE_ANSWERS = {
    ("limit", "operational"): "AllOrNone(limit, offset)",
    ("limit", "parameter_constraint"): "min [1], max [200], default [25]",
    ("limit", "type_format"): "None",
    ("limit", "examples"): "examples [25, 100]\nexhaustive [false]",
    ("offset", "operational"): "AllOrNone(limit, offset)",
    ("offset", "parameter_constraint"): "min [0]",
    ("offset", "type_format"): "None",
    ("offset", "examples"): "None",
    ("state", "operational"): "None",
    ("state", "parameter_constraint"): "None",
    ("state", "type_format"): "None",
    ("state", "examples"): "examples [active, retired, pending]\nexhaustive [true]",
}

FIXTURE_SETS = [
    ("fdic_institutions.yaml", "fdic_replay.jsonl", "fdic_ground_truth.jsonl",
     FDIC_ANSWERS),
    ("device_registry.yaml", "device_replay.jsonl", "device_ground_truth.jsonl",
     DEVICE_ANSWERS),
]


class KeyedBackend:
    """Answers by (parameter, rule kind); every exchange is deterministic."""

    kind = "scripted"

    def __init__(self, answers):
        self._answers = answers

    def complete(self, request):
        tag = request.request_tag
        text = self._answers[(tag.parameter, tag.rule_kind)]
        prompt_units = sum(max(1, len(m.content) // 4) for m in request.messages)
        return CompletionResult(text, "stop",
                                Usage(prompt_units, max(1, len(text) // 4)),
                                "scripted", 0.0)


def build(spec_name: str, cache_name: str, truth_name: str, answers) -> None:
    spec = read_spec_file(FIXTURES / spec_name)
    descriptors = extract_descriptors(spec)

    cache_path = FIXTURES / cache_name
    cache_path.unlink(missing_ok=True)
    backend = RecordingBackend(KeyedBackend(answers), ReplayCache(cache_path))

    extractions = extract_all(descriptors, backend, PromptTemplateSet.default(),
                              concurrency=1)
    rules = [rule for extraction in extractions for rule in extraction.rules]
    print(f"recorded {backend.upstream_calls} exchanges -> {cache_path}")

    # Ground truth holds each distinct rule once, even when two descriptors
    # yielded the same dependency.
    seen = set()
    entries = []
    for rule in rules:
        from restgpt.evaluator import rule_signature
        signature = rule_signature(rule)
        if signature in seen:
            continue
        seen.add(signature)
        entries.append(GroundTruthEntry(spec.service, rule))
    truth_path = FIXTURES / truth_name
    write_ground_truth(truth_path, entries)
    print(f"wrote {len(entries)} ground-truth rules -> {truth_path}")


def main() -> None:
    for spec_name, cache_name, truth_name, answers in FIXTURE_SETS:
        build(spec_name, cache_name, truth_name, answers)


if __name__ == "__main__":
    main()
