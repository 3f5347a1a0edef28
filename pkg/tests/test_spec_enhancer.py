"""Enhancement tests: placements, conflicts, accounting, validation."""

import pytest

from restgpt.constraint_dsl import parse_constraint
from restgpt.rule_extractor import (
    Examples,
    OperationalConstraint,
    OperationScope,
    ParameterConstraint,
    TypeFormat,
)
from restgpt.spec_enhancer import (
    EnhancementError,
    enhance,
    validate_enhanced,
)
from restgpt.spec_model import (
    DescriptorIdentity,
    parse_spec,
    trees_equal,
)

SERVICE = "FDIC Bank Data"


def identity(name, path="/institutions", method="get", service=SERVICE):
    return DescriptorIdentity(service, path, method, name)


def scope(path="/institutions", method="get", service=SERVICE):
    return OperationScope(service, path, method)


@pytest.fixture()
def fdic_spec(fdic_text):
    return parse_spec(fdic_text)


def param_node(document, index, path="/institutions", method="get"):
    return document["paths"][path][method]["parameters"][index]


# ---------------------------------------------------------------------------
# Placements
# ---------------------------------------------------------------------------

def test_exhaustive_examples_become_enum(fdic_spec):
    rule = Examples(target=identity("sort_order"), values=("ASC", "DESC"),
                    exhaustive=True)
    enhanced = enhance(fdic_spec, [rule])
    assert param_node(enhanced.document, 1)["enum"] == ["ASC", "DESC"]
    assert len(enhanced.applied) == 1
    assert enhanced.conflicts == [] and enhanced.duplicates == []


def test_open_examples_become_example_plus_vendor_list(fdic_spec):
    rule = Examples(target=identity("filters"),
                    values=('STNAME:"California"', 'STNAME:("California", "New York")'))
    enhanced = enhance(fdic_spec, [rule])
    node = param_node(enhanced.document, 0)
    assert node["example"] == 'STNAME:"California"'
    assert node["x-example-values"] == [
        'STNAME:"California"', 'STNAME:("California", "New York")']
    assert "enum" not in node


def test_example_values_union_first_seen(fdic_spec):
    first = Examples(target=identity("filters"), values=("a", "b"))
    second = Examples(target=identity("filters"), values=("b", "c"))
    enhanced = enhance(fdic_spec, [first, second])
    node = param_node(enhanced.document, 0)
    assert node["x-example-values"] == ["a", "b", "c"]
    assert node["example"] == "a"
    assert len(enhanced.applied) == 2


def test_parameter_constraint_placement(fdic_spec):
    rule = ParameterConstraint(target=identity("sort_order"), min=0, max=10, default=5)
    enhanced = enhance(fdic_spec, [rule])
    node = param_node(enhanced.document, 1)
    assert (node["minimum"], node["maximum"], node["default"]) == (0, 10, 5)
    assert enhanced.applied[0].placement.endswith("default,maximum,minimum")


def test_operational_constraint_lands_on_operation(fdic_spec):
    rule = OperationalConstraint(expr=parse_constraint("ZeroOrOne(sort_order, filters)"),
                                 scope=scope())
    enhanced = enhance(fdic_spec, [rule])
    op = enhanced.document["paths"]["/institutions"]["get"]
    assert op["x-dependencies"] == ["ZeroOrOne(filters, sort_order)"]  # canonical text


def test_type_format_fills_only_unset_keywords(fdic_spec):
    rule = TypeFormat(target=identity("filters"), type="string", format="query-filter")
    enhanced = enhance(fdic_spec, [rule])
    node = param_node(enhanced.document, 0)
    assert node["format"] == "query-filter"
    assert node["type"] == "string"  # untouched
    assert len(enhanced.applied) == 1


def test_referenced_parameter_gets_keywords_at_its_definition():
    spec = parse_spec("""
swagger: "2.0"
info: {title: svc}
parameters:
  Page:
    name: page
    in: query
    type: integer
paths:
  /a:
    get:
      parameters:
        - $ref: '#/parameters/Page'
      responses: {'200': {description: ok}}
""")
    rule = ParameterConstraint(
        target=DescriptorIdentity("svc", "/a", "get", "page"), min=1)
    enhanced = enhance(spec, [rule])
    # The write must land on the shared definition, not beside the $ref stub.
    assert enhanced.document["parameters"]["Page"]["minimum"] == 1
    assert enhanced.document["paths"]["/a"]["get"]["parameters"][0] == \
        {"$ref": "#/parameters/Page"}
    assert validate_enhanced(enhanced) == []


def test_referenced_body_schema_gets_keywords_at_its_definition():
    spec = parse_spec("""
openapi: 3.0.0
info: {title: svc}
components:
  schemas:
    Widget:
      type: object
      required: [name]
      properties:
        name: {type: string, description: Display name.}
paths:
  /w:
    post:
      requestBody:
        content:
          application/json:
            schema: {$ref: '#/components/schemas/Widget'}
      responses: {'201': {description: created}}
""")
    (descriptor,) = spec.operations[0].parameters
    assert descriptor.name == "name" and descriptor.required is True
    rule = Examples(target=DescriptorIdentity("svc", "/w", "post", "name"),
                    values=("Widget One",))
    enhanced = enhance(spec, [rule])
    node = enhanced.document["components"]["schemas"]["Widget"]["properties"]["name"]
    assert node["example"] == "Widget One"


def test_oas3_constraints_go_into_schema():
    spec = parse_spec("""
openapi: 3.0.0
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - name: limit
          in: query
          schema: {type: integer}
      responses: {'200': {description: ok}}
""")
    rule = ParameterConstraint(
        target=DescriptorIdentity("svc", "/a", "get", "limit"), min=1, max=50)
    enhanced = enhance(spec, [rule])
    schema = enhanced.document["paths"]["/a"]["get"]["parameters"][0]["schema"]
    assert (schema["minimum"], schema["maximum"]) == (1, 50)
    assert schema["type"] == "integer"


# ---------------------------------------------------------------------------
# Conflicts, duplicates, accounting
# ---------------------------------------------------------------------------

def test_type_conflict_keeps_machine_readable_value(fdic_spec):
    rule = TypeFormat(target=identity("filters"), type="number")
    enhanced = enhance(fdic_spec, [rule])
    assert param_node(enhanced.document, 0)["type"] == "string"
    (conflict,) = enhanced.conflicts
    assert conflict.existing_value == "string"
    assert "type" in conflict.reason
    assert enhanced.applied == []


def test_equal_rule_is_a_duplicate_not_a_conflict(fdic_spec):
    rule = TypeFormat(target=identity("filters"), type="string")
    enhanced = enhance(fdic_spec, [rule])
    assert enhanced.conflicts == []
    assert len(enhanced.duplicates) == 1


def test_enum_conflict_when_spec_already_has_one():
    spec = parse_spec("""
swagger: "2.0"
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - {name: mode, in: query, type: string, enum: [fast, slow]}
      responses: {'200': {description: ok}}
""")
    rule = Examples(target=DescriptorIdentity("svc", "/a", "get", "mode"),
                    values=("fast", "furious"), exhaustive=True)
    enhanced = enhance(spec, [rule])
    assert enhanced.document["paths"]["/a"]["get"]["parameters"][0]["enum"] == \
        ["fast", "slow"]
    assert len(enhanced.conflicts) == 1


def test_collection_format_is_rejected_for_oas3():
    spec = parse_spec("""
openapi: 3.0.0
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - {name: ids, in: query, schema: {type: array}}
      responses: {'200': {description: ok}}
""")
    rule = TypeFormat(target=DescriptorIdentity("svc", "/a", "get", "ids"),
                      collection_format="csv")
    enhanced = enhance(spec, [rule])
    (conflict,) = enhanced.conflicts
    assert "OpenAPI 3.x" in conflict.reason


def test_zero_rules_is_identity(fdic_spec):
    enhanced = enhance(fdic_spec, [])
    assert trees_equal(enhanced.document, fdic_spec.raw_document)
    assert enhanced.applied == enhanced.conflicts == enhanced.duplicates == []


def test_unknown_target_is_a_hard_error(fdic_spec):
    rule = ParameterConstraint(target=identity("ghost"), min=1)
    with pytest.raises(EnhancementError):
        enhance(fdic_spec, [rule])
    dependency = OperationalConstraint(expr=parse_constraint("Or(a, b)"),
                                       scope=scope(path="/missing"))
    with pytest.raises(EnhancementError):
        enhance(fdic_spec, [dependency])


def rules_for_accounting():
    return [
        Examples(target=identity("sort_order"), values=("ASC", "DESC"), exhaustive=True),
        Examples(target=identity("sort_order"), values=("ASC", "DESC"), exhaustive=True),
        TypeFormat(target=identity("filters"), type="number"),  # conflict
        TypeFormat(target=identity("filters"), type="string"),  # duplicate
        OperationalConstraint(expr=parse_constraint("Or(filters, sort_order)"),
                              scope=scope()),
    ]


def test_accounting_is_total(fdic_spec):
    rules = rules_for_accounting()
    enhanced = enhance(fdic_spec, rules)
    assert len(enhanced.applied) + len(enhanced.conflicts) + \
        len(enhanced.duplicates) == len(rules)
    assert len(enhanced.applied) == 2
    assert len(enhanced.conflicts) == 1
    assert len(enhanced.duplicates) == 2
    report = enhanced.conflict_report()
    assert report["applied"] == 2 and len(report["conflicts"]) == 1


def subset_preserved(before, after):
    """Every keyword in `before` must keep its value in `after`; nodes may
    gain keys and the vendor lists may gain trailing entries, nothing more."""
    if isinstance(before, dict):
        assert isinstance(after, dict)
        for k, v in before.items():
            assert k in after
            subset_preserved(v, after[k])
    elif isinstance(before, list):
        assert isinstance(after, list) and len(after) >= len(before)
        for b, a in zip(before, after):
            subset_preserved(b, a)
    else:
        assert before == after


def test_conservativity_over_fixture_corpus(fdic_spec, fdic_text):
    oas3 = parse_spec("""
openapi: 3.0.0
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - name: limit
          in: query
          schema: {type: integer, minimum: 1}
      responses: {'200': {description: ok}}
""")
    cases = [
        (fdic_spec, rules_for_accounting()),
        (oas3, [ParameterConstraint(
            target=DescriptorIdentity("svc", "/a", "get", "limit"),
            min=5, max=50, default=10)]),  # min conflicts, atomic rule
    ]
    for spec, rules in cases:
        enhanced = enhance(spec, rules)
        subset_preserved(spec.raw_document, enhanced.document)


def test_enhancement_is_idempotent(fdic_spec):
    rules = rules_for_accounting()
    first = enhance(fdic_spec, rules)
    respec = parse_spec(first.to_text())
    # No rules: nothing changes.
    assert trees_equal(enhance(respec, []).document, respec.raw_document)
    # Same rules again: everything is a duplicate or conflict, nothing changes.
    second = enhance(respec, rules)
    assert second.applied == []
    assert trees_equal(second.document, respec.raw_document)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def make_enhanced(doc_text):
    spec = parse_spec(doc_text)
    return enhance(spec, [])


def test_style_on_scalar_parameter_is_flagged():
    enhanced = make_enhanced("""
openapi: 3.0.0
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - name: q
          in: query
          style: form
          schema: {type: string}
      responses: {'200': {description: ok}}
""")
    (diagnostic,) = validate_enhanced(enhanced)
    assert diagnostic.code == "style-requires-array-or-object"
    assert "array or object" in diagnostic.message


def test_style_on_array_parameter_is_fine():
    enhanced = make_enhanced("""
openapi: 3.0.0
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - name: ids
          in: query
          style: form
          schema: {type: array, items: {type: string}}
      responses: {'200': {description: ok}}
""")
    assert validate_enhanced(enhanced) == []


def test_min_above_max_is_flagged():
    enhanced = make_enhanced("""
swagger: "2.0"
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - {name: n, in: query, type: integer, minimum: 5, maximum: 3}
      responses: {'200': {description: ok}}
""")
    (diagnostic,) = validate_enhanced(enhanced)
    assert diagnostic.code == "minimum-above-maximum"


def test_default_outside_enum_is_flagged():
    enhanced = make_enhanced("""
swagger: "2.0"
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - {name: mode, in: query, type: string, enum: [fast, slow], default: warp}
      responses: {'200': {description: ok}}
""")
    (diagnostic,) = validate_enhanced(enhanced)
    assert diagnostic.code == "default-not-in-enum"


def test_default_outside_range_is_flagged():
    enhanced = make_enhanced("""
swagger: "2.0"
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - {name: n, in: query, type: integer, minimum: 1, maximum: 10, default: 99}
      responses: {'200': {description: ok}}
""")
    (diagnostic,) = validate_enhanced(enhanced)
    assert diagnostic.code == "default-outside-range"


def test_collection_format_on_non_array_is_flagged():
    enhanced = make_enhanced("""
swagger: "2.0"
info: {title: svc}
paths:
  /a:
    get:
      parameters:
        - {name: q, in: query, type: string, collectionFormat: csv}
      responses: {'200': {description: ok}}
""")
    (diagnostic,) = validate_enhanced(enhanced)
    assert diagnostic.code == "collection-format-requires-array"


def test_unparseable_dependency_is_flagged(fdic_spec):
    enhanced = enhance(fdic_spec, [])
    enhanced.document["paths"]["/institutions"]["get"]["x-dependencies"] = \
        ["AllOrNone(filters, sort_order)", "definitely not a rule ((("]
    diagnostics = validate_enhanced(enhanced)
    (diagnostic,) = diagnostics
    assert diagnostic.code == "unparseable-dependency"


def test_well_formed_enhancement_yields_zero_diagnostics(fdic_spec):
    rules = [
        Examples(target=identity("sort_order"), values=("ASC", "DESC"), exhaustive=True),
        Examples(target=identity("filters"), values=('STNAME:"California"',)),
        OperationalConstraint(expr=parse_constraint("Or(filters, sort_order)"),
                              scope=scope()),
    ]
    enhanced = enhance(fdic_spec, rules)
    assert validate_enhanced(enhanced) == []
