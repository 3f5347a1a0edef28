"""Command-line pipeline: enhance specs, record/replay exchanges, evaluate runs.

Data goes to files and standard output; logs go to standard error. Settings
come from flags or a TOML config file (flags win); the API key for the live
backend comes from the RESTGPT_API_KEY environment variable only.

Exit codes: 0 success; 1 error (unreadable input, backend failure, cache
miss, schema violation); 2 when `enhance` found conflicts (disable with
--no-conflict-exit) or `validate` found diagnostics.
"""

from __future__ import annotations

import json
import logging
import random
import sys
from pathlib import Path

import click

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .evaluator import (
    DatasetError,
    evaluate,
    load_ground_truth,
)
from .llm_backend import (
    DEFAULT_BASE_URL,
    DEFAULT_MODEL,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayCache,
    ReplayCacheError,
    ScriptedBackend,
)
from .prompt_builder import PromptTemplateSet, TemplateError
from .rule_extractor import (
    ExtractionError,
    ExtractorConfig,
    extract_all,
    load_extracted_rules,
    write_extraction_log,
)
from .spec_enhancer import EnhancementError, enhance, validate_enhanced
from .spec_model import SpecError, extract_descriptors, read_spec_file
from . import __version__

logger = logging.getLogger("restgpt")

_CONFIG_KEYS = ("backend", "model", "temperature", "max_output_tokens", "k_shots",
                "cache", "templates", "concurrency", "seed", "format", "base_url")


class PipelineFailure(click.ClickException):
    exit_code = 1


def _fail(message: str) -> "PipelineFailure":
    return PipelineFailure(message)


def _apply_config_file(ctx: click.Context) -> None:
    """TOML config fills in every setting the command line left at default."""
    config_path = ctx.params.get("config")
    if not config_path:
        return
    try:
        with open(config_path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise _fail(f"cannot read config file {config_path}: {exc}")
    for key, value in data.items():
        if key not in _CONFIG_KEYS:
            raise _fail(f"unknown config key {key!r} in {config_path}")
        if key in ctx.params and \
                ctx.get_parameter_source(key) == click.core.ParameterSource.DEFAULT:
            ctx.params[key] = value


def _load_templates(directory: str | None) -> PromptTemplateSet:
    try:
        if directory:
            return PromptTemplateSet.load(directory)
        return PromptTemplateSet.default()
    except TemplateError as exc:
        raise _fail(str(exc))


def _make_backend(params: dict, record: bool):
    backend_name = params["backend"]
    cache_path = params.get("cache")
    seed = params.get("seed") or 0
    if record:
        cache = None
        if cache_path and Path(cache_path).is_file():
            cache = _load_cache(cache_path)
        else:
            cache = ReplayCache(cache_path)
        live = LiveBackend(base_url=params["base_url"],
                           max_in_flight=params["concurrency"],
                           rng=random.Random(seed))
        return RecordingBackend(live, cache)
    if backend_name == "replay":
        if not cache_path:
            raise _fail("replay backend needs --cache pointing at a recorded file")
        return ReplayBackend(_load_cache(cache_path))
    if backend_name == "scripted":
        return ScriptedBackend(list(params.get("scripted_response") or ()),
                               default="None")
    if backend_name == "live":
        return LiveBackend(base_url=params["base_url"],
                           max_in_flight=params["concurrency"],
                           rng=random.Random(seed))
    raise _fail(f"unknown backend {backend_name!r}")


def _load_cache(path: str) -> ReplayCache:
    try:
        return ReplayCache.load(path)
    except OSError as exc:
        raise _fail(f"cannot read cache {path}: {exc}")
    except ReplayCacheError as exc:
        raise _fail(str(exc))


def _read_spec(path: str, service: str | None):
    try:
        return read_spec_file(path, service=service)
    except OSError as exc:
        raise _fail(f"cannot read {path}: {exc}")
    except SpecError as exc:
        raise _fail(f"{path}: {exc}")


def _derived_paths(spec_path: str, output: str | None, out_format: str | None):
    source = Path(spec_path)
    fmt = out_format or ("json" if source.suffix == ".json" else "yaml")
    if output:
        out = Path(output)
    else:
        out = source.with_name(f"{source.stem}.enhanced.{fmt}")
    stem = out.with_suffix("")
    return out, fmt, Path(f"{stem}.extraction.jsonl"), Path(f"{stem}.conflicts.json")


def _run_pipeline(ctx, spec_path, output, record: bool) -> int:
    params = ctx.params
    _apply_config_file(ctx)
    spec = _read_spec(spec_path, params.get("service"))
    templates = _load_templates(params.get("templates"))
    backend = _make_backend(params, record=record)
    config = ExtractorConfig(
        model_name=params["model"],
        temperature=params["temperature"],
        max_output_tokens=params["max_output_tokens"],
        k_shots=params["k_shots"],
    )
    descriptors = extract_descriptors(spec)
    logger.info("extracting rules for %d descriptors from %s",
                len(descriptors), spec_path)
    concurrency = params["concurrency"]
    if params["backend"] == "scripted" and params.get("scripted_response"):
        # Programmed responses are consumed in call order; keep it deterministic.
        concurrency = 1
    try:
        extractions = extract_all(descriptors, backend, templates, config,
                                  concurrency=concurrency)
    except ExtractionError as exc:
        raise _fail(str(exc))
    rules = [rule for extraction in extractions for rule in extraction.rules]
    try:
        enhanced = enhance(spec, rules)
    except EnhancementError as exc:
        raise _fail(str(exc))

    out, fmt, log_path, conflicts_path = _derived_paths(
        spec_path, output, params.get("format"))
    out.write_text(enhanced.to_text(fmt), encoding="utf-8")
    write_extraction_log(log_path, extractions)
    if record and isinstance(backend, RecordingBackend) and params.get("cache"):
        Path(params["cache"]).touch(exist_ok=True)

    logger.info("wrote %s (%d applied, %d conflicts, %d duplicates)",
                out, len(enhanced.applied), len(enhanced.conflicts),
                len(enhanced.duplicates))
    if enhanced.conflicts:
        conflicts_path.write_text(
            json.dumps(enhanced.conflict_report(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8")
        logger.warning("%d rule(s) conflicted with machine-readable keywords; "
                       "see %s", len(enhanced.conflicts), conflicts_path)
        if params.get("conflict_exit", True):
            return 2
    return 0


def _pipeline_options(command):
    decorators = [
        click.option("--backend", type=click.Choice(["replay", "live", "scripted"]),
                     default="replay", show_default=True,
                     help="Completion backend for rule extraction."),
        click.option("--model", default=DEFAULT_MODEL, show_default=True,
                     help="Model name sent to the backend."),
        click.option("--temperature", type=click.FloatRange(0.0, 2.0), default=0.0,
                     show_default=True),
        click.option("--max-output-tokens", type=click.IntRange(min=1), default=512,
                     show_default=True),
        click.option("--k-shots", type=click.IntRange(min=0), default=2,
                     show_default=True, help="Few-shot examples per prompt."),
        click.option("--cache", type=click.Path(), default=None,
                     help="Replay cache file (JSONL)."),
        click.option("--templates", type=click.Path(exists=True, file_okay=False),
                     default=None, help="Directory of prompt templates."),
        click.option("--concurrency", type=click.IntRange(min=1), default=4,
                     show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--format", type=click.Choice(["yaml", "json"]), default=None,
                     help="Output format (defaults to the input format)."),
        click.option("--service", default=None,
                     help="Service label for descriptor identities "
                          "(defaults to the spec title)."),
        click.option("--base-url", default=DEFAULT_BASE_URL, show_default=True,
                     help="Base URL of the OpenAI-compatible endpoint."),
        click.option("--config", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="TOML config file; flags win."),
        click.option("--scripted-response", multiple=True,
                     help="Programmed responses for the scripted backend "
                          "(repeatable; falls back to \"None\")."),
    ]
    for decorator in reversed(decorators):
        command = decorator(command)
    return command


@click.group()
@click.version_option(version=__version__, prog_name="restgpt")
@click.option("-v", "--verbose", is_flag=True, help="Chattier logs on stderr.")
def main(verbose):
    """Enrich OpenAPI specifications from their natural-language descriptions."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command(name="enhance")
@click.argument("spec_path", type=click.Path(dir_okay=False))
@click.option("-o", "--output", type=click.Path(), default=None,
              help="Enhanced spec path [default: <input>.enhanced.<ext>].")
@click.option("--conflict-exit/--no-conflict-exit", default=True,
              show_default=True,
              help="Exit with status 2 when rules conflicted with the spec.")
@_pipeline_options
@click.pass_context
def enhance_cmd(ctx, spec_path, output, conflict_exit, **_kwargs):
    """Extract rules for SPEC_PATH and write the enhanced specification."""
    sys.exit(_run_pipeline(ctx, spec_path, output, record=False))


@main.command(name="record")
@click.argument("spec_path", type=click.Path(dir_okay=False))
@click.option("-o", "--output", type=click.Path(), default=None,
              help="Enhanced spec path [default: <input>.enhanced.<ext>].")
@_pipeline_options
@click.pass_context
def record_cmd(ctx, spec_path, output, **_kwargs):
    """Run live extraction for SPEC_PATH, recording every exchange to --cache."""
    if not ctx.params.get("cache"):
        raise _fail("record mode needs --cache to know where to store exchanges")
    ctx.params["conflict_exit"] = False
    sys.exit(_run_pipeline(ctx, spec_path, output, record=True))


@main.command(name="evaluate")
@click.argument("extraction_log", type=click.Path(dir_okay=False))
@click.argument("ground_truth", type=click.Path(dir_okay=False))
@click.option("-o", "--output", type=click.Path(), default=None,
              help="Report JSON path [default: <log>.report.json].")
def evaluate_cmd(extraction_log, ground_truth, output):
    """Score an extraction log against ground truth; print the metrics table."""
    try:
        extracted = load_extracted_rules(extraction_log)
        truth = load_ground_truth(ground_truth)
        report = evaluate(extracted, truth)
    except (DatasetError, ValueError, OSError) as exc:
        raise _fail(str(exc))
    out = Path(output) if output else Path(f"{extraction_log}.report.json")
    out.write_text(json.dumps(report.to_json(), indent=2, ensure_ascii=False) + "\n",
                   encoding="utf-8")
    click.echo(report.to_markdown())
    logger.info("wrote %s", out)


@main.command()
@click.argument("spec_path", type=click.Path(dir_okay=False))
@click.option("--service", default=None)
def validate(spec_path, service):
    """Run the consistency checks on SPEC_PATH and print any diagnostics."""
    spec = _read_spec(spec_path, service)
    diagnostics = validate_enhanced(enhance(spec, []))
    for diagnostic in diagnostics:
        click.echo(f"{diagnostic.path}: [{diagnostic.code}] {diagnostic.message}")
    if diagnostics:
        sys.exit(2)
    click.echo("OK: no diagnostics")


if __name__ == "__main__":
    main()
