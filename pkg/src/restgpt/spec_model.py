"""Parse, represent, and serialize OpenAPI documents.

Both Swagger 2.0 and OpenAPI 3.x documents are normalized into one model in
which every parameter (and every leaf property of a request body schema)
becomes a :class:`ParameterDescriptor` that separates the machine-readable
keywords from the human-readable description text.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

import yaml

logger = logging.getLogger(__name__)

HTTP_METHODS = ("get", "put", "post", "delete", "options", "head", "patch")

# Keywords the enhancer may touch, per document version. Anything else in the
# source document is preserved verbatim in the raw tree but not surfaced as a
# machine keyword.
RECOGNIZED_KEYWORDS = {
    "2.0": ("type", "format", "items", "collectionFormat", "enum",
            "minimum", "maximum", "default"),
    "3.x": ("type", "format", "items", "enum",
            "minimum", "maximum", "default", "style"),
}


class SpecError(Exception):
    """Base class for specification-model failures."""


class SpecParseError(SpecError):
    """The document is not well-formed YAML/JSON or violates OAS structure."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class UnsupportedDocumentError(SpecError):
    """The document carries no recognizable `swagger`/`openapi` version key."""


class RefResolutionError(SpecError):
    """A `$ref` could not be resolved within the document."""


@dataclass(frozen=True)
class DescriptorIdentity:
    """Stable identity of a parameter across the pipeline."""

    service: str
    path: str
    method: str
    name: str

    def as_dict(self) -> dict[str, str]:
        return {"service": self.service, "path": self.path,
                "method": self.method, "name": self.name}


@dataclass(frozen=True)
class ParameterDescriptor:
    """One parameter split into machine-readable and human-readable parts.

    ``machine_keywords`` holds only keywords recognized for the document's
    version; ``description`` is verbatim from the source (trailing whitespace
    stripped), or None when the source carries no description at all.
    ``keyword_path`` locates, inside the raw document tree, the mapping node
    that owns the type-level keywords (the parameter node itself for 2.0,
    its ``schema`` node for 3.x, the property schema for body properties).
    ``node_path`` locates the parameter node itself.
    """

    name: str
    location: str  # query | path | header | cookie | body-property
    required: bool
    machine_keywords: Mapping[str, Any]
    description: str | None
    identity: DescriptorIdentity
    keyword_path: tuple[Any, ...] = field(default=(), compare=False)
    node_path: tuple[Any, ...] = field(default=(), compare=False)

    @property
    def has_description(self) -> bool:
        return bool(self.description)


@dataclass(frozen=True)
class OperationRecord:
    path: str
    http_method: str
    operation_id: str | None
    parameters: tuple[ParameterDescriptor, ...]
    responses: Mapping[str, Any]  # status-code text -> response schema (raw subtree)
    node_path: tuple[Any, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class ApiSpecification:
    source_format: str  # yaml | json
    oas_version: str  # "2.0" | "3.x"
    title: str
    service: str
    operations: tuple[OperationRecord, ...]
    raw_document: dict

    def operation(self, path: str, method: str) -> OperationRecord | None:
        for op in self.operations:
            if op.path == path and op.http_method == method:
                return op
        return None

    def descriptor(self, identity: DescriptorIdentity) -> ParameterDescriptor | None:
        for op in self.operations:
            for p in op.parameters:
                if p.identity == identity:
                    return p
        return None


def _normalize_keys(node: Any) -> Any:
    """Coerce mapping keys to str so YAML's typed keys (e.g. 200) match JSON."""
    if isinstance(node, dict):
        return {str(k): _normalize_keys(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_normalize_keys(v) for v in node]
    return node


def trees_equal(a: Any, b: Any) -> bool:
    """Semantic equality of two document trees: key order ignored, values not."""
    return _normalize_keys(a) == _normalize_keys(b)


def _load_tree(document: str, fmt: str) -> dict:
    if fmt == "json":
        try:
            tree = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SpecParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    else:
        try:
            tree = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            if mark is not None:
                raise SpecParseError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                                     mark.line + 1, mark.column + 1) from exc
            raise SpecParseError(f"invalid YAML: {exc}") from exc
    if not isinstance(tree, dict):
        raise SpecParseError("document root must be a mapping")
    return tree


def _sniff_format(document: str) -> str:
    stripped = document.lstrip()
    if stripped.startswith("{"):
        return "json"
    return "yaml"


def _detect_version(tree: Mapping[str, Any]) -> str:
    if str(tree.get("swagger", "")) == "2.0":
        return "2.0"
    openapi = str(tree.get("openapi", ""))
    if openapi.startswith("3"):
        return "3.x"
    raise UnsupportedDocumentError(
        "document has no supported `swagger: \"2.0\"` or `openapi: 3.x` version key")


class _RefResolver:
    def __init__(self, tree: Mapping[str, Any]):
        self._tree = tree

    def resolve(self, node: Any, seen: frozenset[str] = frozenset()) -> Any:
        """Follow a `$ref`, in-document only. Returns a node with no top-level ref."""
        return self.resolve_with_path(node, (), seen)[0]

    def resolve_with_path(self, node: Any, path: tuple[Any, ...],
                          seen: frozenset[str] = frozenset()) -> tuple[Any, tuple]:
        """Like resolve, but also reports where the resolved node lives.

        Keyword paths must point at the referenced definition, not at the
        `$ref` stub, so later keyword writes land on a real node.
        """
        while isinstance(node, dict) and "$ref" in node:
            ref = node["$ref"]
            if not isinstance(ref, str) or not ref.startswith("#/"):
                raise RefResolutionError(f"external or malformed reference: {ref!r}")
            if ref in seen:
                raise RefResolutionError(f"circular reference: {ref!r}")
            seen = seen | {ref}
            target: Any = self._tree
            parts: list[str] = []
            for part in ref[2:].split("/"):
                part = part.replace("~1", "/").replace("~0", "~")
                if not isinstance(target, dict) or part not in target:
                    raise RefResolutionError(f"unresolvable reference: {ref!r}")
                target = target[part]
                parts.append(part)
            node = target
            path = tuple(parts)
        return node, path


def _pick_keywords(container: Mapping[str, Any], version: str) -> dict[str, Any]:
    recognized = RECOGNIZED_KEYWORDS[version]
    return {k: copy.deepcopy(container[k]) for k in recognized if k in container}


def _clean_description(raw: Any) -> str | None:
    if raw is None:
        return None
    return str(raw).rstrip()


def _walk_body_schema(
    schema: Mapping[str, Any],
    resolver: _RefResolver,
    prefix: str,
    path_prefix: tuple[Any, ...],
    required_names: set[str],
) -> Iterator[tuple[str, dict, tuple[Any, ...], bool]]:
    """Yield (dotted_name, schema_node, node_path, required) for each leaf property.

    Only `properties` maps are descended into; arrays and scalar schemas are
    leaves. ``schema``/``path_prefix`` must already be resolved; referenced
    property schemas report the path of their definition, so later keyword
    writes land on real nodes.
    """
    properties = schema.get("properties")
    if not isinstance(properties, dict):
        return
    for prop_name, prop_schema in properties.items():
        dotted = f"{prefix}.{prop_name}" if prefix else str(prop_name)
        resolved_prop, prop_path = resolver.resolve_with_path(
            prop_schema, path_prefix + ("properties", prop_name))
        if isinstance(resolved_prop, dict) and isinstance(resolved_prop.get("properties"), dict):
            yield from _walk_body_schema(resolved_prop, resolver, dotted, prop_path,
                                         set(resolved_prop.get("required") or ()))
        else:
            if not isinstance(resolved_prop, dict):
                resolved_prop = {}
            yield dotted, resolved_prop, prop_path, prop_name in required_names


def _body_descriptors_v2(
    param: Mapping[str, Any],
    param_path: tuple[Any, ...],
    resolver: _RefResolver,
    make_identity,
) -> list[ParameterDescriptor]:
    schema = param.get("schema")
    if not isinstance(schema, dict):
        return []
    resolved, schema_path = resolver.resolve_with_path(
        schema, param_path + ("schema",))
    required = set(resolved.get("required") or ())
    out = []
    for dotted, node, node_path, is_required in _walk_body_schema(
            resolved, resolver, "", schema_path, required):
        out.append(ParameterDescriptor(
            name=dotted,
            location="body-property",
            required=is_required,
            machine_keywords=_pick_keywords(node, "2.0"),
            description=_clean_description(node.get("description")),
            identity=make_identity(dotted),
            keyword_path=node_path,
            node_path=node_path,
        ))
    return out


def _body_descriptors_v3(
    request_body: Mapping[str, Any],
    body_path: tuple[Any, ...],
    resolver: _RefResolver,
    make_identity,
) -> list[ParameterDescriptor]:
    request_body, body_path = resolver.resolve_with_path(request_body, body_path)
    content = request_body.get("content")
    if not isinstance(content, dict) or not content:
        return []
    # One media type is enough for rule extraction; prefer JSON.
    media = "application/json" if "application/json" in content else next(iter(content))
    media_obj = content.get(media) or {}
    schema = media_obj.get("schema")
    if not isinstance(schema, dict):
        return []
    resolved, schema_path = resolver.resolve_with_path(
        schema, body_path + ("content", media, "schema"))
    required = set(resolved.get("required") or ())
    out = []
    for dotted, node, node_path, is_required in _walk_body_schema(
            resolved, resolver, "", schema_path, required):
        out.append(ParameterDescriptor(
            name=dotted,
            location="body-property",
            required=is_required,
            machine_keywords=_pick_keywords(node, "3.x"),
            description=_clean_description(node.get("description")),
            identity=make_identity(dotted),
            keyword_path=node_path,
            node_path=node_path,
        ))
    return out


def _parameter_descriptor(
    param: Mapping[str, Any],
    param_path: tuple[Any, ...],
    version: str,
    resolver: _RefResolver,
    make_identity,
) -> ParameterDescriptor:
    name = str(param.get("name", ""))
    location = str(param.get("in", ""))
    if version == "2.0":
        if location == "formData":
            # Form fields are body content; fold them into the body-property
            # namespace so the location vocabulary stays closed.
            location = "body-property"
        keywords = _pick_keywords(param, "2.0")
        keyword_path = param_path
    else:
        schema = param.get("schema")
        keyword_path = param_path + ("schema",)
        if isinstance(schema, dict):
            schema, keyword_path = resolver.resolve_with_path(schema, keyword_path)
            keywords = _pick_keywords(schema, "3.x")
        else:
            keywords = {}
        if "style" in param:
            keywords["style"] = param["style"]
    return ParameterDescriptor(
        name=name,
        location=location,
        required=bool(param.get("required", False)),
        machine_keywords=keywords,
        description=_clean_description(param.get("description")),
        identity=make_identity(name),
        keyword_path=keyword_path,
        node_path=param_path,
    )


def _extract_responses(operation: Mapping[str, Any], version: str,
                       resolver: _RefResolver) -> dict[str, Any]:
    out: dict[str, Any] = {}
    responses = operation.get("responses")
    if not isinstance(responses, dict):
        return out
    for code, response in responses.items():
        response = resolver.resolve(response) if isinstance(response, dict) else {}
        if version == "2.0":
            out[str(code)] = response.get("schema")
        else:
            content = response.get("content") or {}
            schema = None
            if isinstance(content, dict) and content:
                media = ("application/json" if "application/json" in content
                         else next(iter(content)))
                schema = (content.get(media) or {}).get("schema")
            out[str(code)] = schema
    return out


def parse_spec(document: str, format_hint: str | None = None,
               service: str | None = None) -> ApiSpecification:
    """Parse an OpenAPI document (YAML or JSON, Swagger 2.0 or OAS 3.x).

    ``service`` labels descriptor identities; it defaults to the document's
    ``info.title``. Raises SpecParseError / UnsupportedDocumentError /
    RefResolutionError on bad input.
    """
    if not document or not document.strip():
        raise SpecParseError("document is empty")
    fmt = format_hint or _sniff_format(document)
    if fmt not in ("yaml", "json"):
        raise ValueError(f"format_hint must be 'yaml' or 'json', got {fmt!r}")
    tree = _normalize_keys(_load_tree(document, fmt))
    version = _detect_version(tree)
    resolver = _RefResolver(tree)

    info = tree.get("info") or {}
    title = str(info.get("title", "")) if isinstance(info, dict) else ""
    service_name = service if service is not None else title

    operations: list[OperationRecord] = []
    seen_ops: set[tuple[str, str]] = set()
    paths = tree.get("paths") or {}
    if not isinstance(paths, dict):
        raise SpecParseError("`paths` must be a mapping")

    for path, path_item in paths.items():
        if not isinstance(path_item, dict):
            continue
        path_item, item_path = resolver.resolve_with_path(path_item, ("paths", path))
        shared_params = path_item.get("parameters") or []
        for method, operation in path_item.items():
            if method not in HTTP_METHODS or not isinstance(operation, dict):
                continue
            if (path, method) in seen_ops:
                raise SpecParseError(f"duplicate operation {method.upper()} {path}")
            seen_ops.add((path, method))

            def make_identity(param_name: str, _path=path, _method=method) -> DescriptorIdentity:
                return DescriptorIdentity(service_name, _path, _method, param_name)

            descriptors: list[ParameterDescriptor] = []
            seen_params: set[tuple[str, str]] = set()

            own_params = operation.get("parameters") or []
            if not isinstance(own_params, list):
                raise SpecParseError(f"`parameters` of {method.upper()} {path} must be a list")

            # Operation-level parameters override path-level ones on (name, in).
            merged: list[tuple[Mapping[str, Any], tuple[Any, ...]]] = []
            own_keys = set()
            for i, raw in enumerate(own_params):
                resolved, p_path = resolver.resolve_with_path(
                    raw, item_path + (method, "parameters", i))
                own_keys.add((str(resolved.get("name", "")), str(resolved.get("in", ""))))
                merged.append((resolved, p_path))
            for i, raw in enumerate(shared_params):
                resolved, p_path = resolver.resolve_with_path(
                    raw, item_path + ("parameters", i))
                key = (str(resolved.get("name", "")), str(resolved.get("in", "")))
                if key not in own_keys:
                    merged.append((resolved, p_path))

            for param, param_path in merged:
                if version == "2.0" and param.get("in") == "body":
                    descriptors.extend(_body_descriptors_v2(
                        param, param_path, resolver, make_identity))
                    continue
                descriptor = _parameter_descriptor(
                    param, param_path, version, resolver, make_identity)
                key = (descriptor.name, descriptor.location)
                if key in seen_params:
                    raise SpecParseError(
                        f"duplicate parameter {descriptor.name!r} ({descriptor.location}) "
                        f"in {method.upper()} {path}")
                seen_params.add(key)
                descriptors.append(descriptor)

            if version == "3.x" and isinstance(operation.get("requestBody"), dict):
                descriptors.extend(_body_descriptors_v3(
                    operation["requestBody"],
                    item_path + (method, "requestBody"),
                    resolver, make_identity))

            operations.append(OperationRecord(
                path=path,
                http_method=method,
                operation_id=operation.get("operationId"),
                parameters=tuple(descriptors),
                responses=_extract_responses(operation, version, resolver),
                node_path=item_path + (method,),
            ))

    return ApiSpecification(
        source_format=fmt,
        oas_version=version,
        title=title,
        service=service_name,
        operations=tuple(operations),
        raw_document=tree,
    )


def extract_descriptors(spec: ApiSpecification) -> list[ParameterDescriptor]:
    """All descriptors of a spec in stable (path, method, location, name) order."""
    out = [p for op in spec.operations for p in op.parameters]
    out.sort(key=lambda d: (d.identity.path, d.identity.method, d.location, d.name))
    return out


def serialize_spec(spec: ApiSpecification, fmt: str | None = None) -> str:
    """Render the (raw) document tree back to text; defaults to the source format."""
    return serialize_tree(spec.raw_document, fmt or spec.source_format)


def serialize_tree(tree: Mapping[str, Any], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(tree, indent=2, ensure_ascii=False) + "\n"
    if fmt == "yaml":
        return yaml.safe_dump(tree, sort_keys=False, allow_unicode=True,
                              default_flow_style=False, width=100)
    raise ValueError(f"unknown format {fmt!r}")


def specs_semantically_equal(a: ApiSpecification, b: ApiSpecification) -> bool:
    """Equality that ignores the serialization format the documents arrived in."""
    return trees_equal(a.raw_document, b.raw_document) and a.operations == b.operations


def read_spec_file(path: str, service: str | None = None) -> ApiSpecification:
    fmt = "json" if str(path).endswith(".json") else "yaml"
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spec(fh.read(), format_hint=fmt, service=service)
