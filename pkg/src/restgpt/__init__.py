"""restgpt: enrich OpenAPI specifications from their natural-language descriptions.

The pipeline parses a specification, asks an LLM backend for machine-
interpretable rules hidden in each parameter description (inter-parameter
dependencies, value bounds, type/format details, example values), and merges
the answers back into an enhanced specification without ever contradicting
the hand-written machine-readable keywords.
"""

__version__ = "0.1.0"
