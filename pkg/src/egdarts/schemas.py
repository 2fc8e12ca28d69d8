"""JSON schemas for every artifact the command line writes."""

from __future__ import annotations

import jsonschema

from .search_space import ALL_OPS

_OP_NAMES = [o.value for o in ALL_OPS]

_GENE = {
    "type": "array",
    "items": {
        "type": "array",
        "prefixItems": [{"enum": _OP_NAMES}, {"type": "integer", "minimum": 0}],
        "minItems": 2,
        "maxItems": 2,
    },
}

GENOTYPE = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "genotype",
    "type": "object",
    "required": ["normal", "reduce", "nodes"],
    "additionalProperties": False,
    "properties": {"normal": _GENE, "reduce": _GENE, "nodes": {"type": "integer", "minimum": 4}},
}

GENOME = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "network genome",
    "type": "object",
    "required": ["v0", "v1", "v2", "v3", "v4", "v5", "normal", "reduce"],
    "additionalProperties": False,
    "properties": {
        **{k: {"type": "integer", "minimum": 1} for k in ("v0", "v1", "v2", "v3")},
        **{k: {"type": "number", "exclusiveMinimum": 0} for k in ("v4", "v5")},
        "normal": _GENE,
        "reduce": _GENE,
        "nodes": {"type": "integer", "minimum": 4},
    },
}

_NULLABLE_NUMBER = {"type": ["number", "null"]}

METRICS = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "metrics",
    "type": "object",
    "required": ["err", "params", "flops", "depth", "latency_ms", "eval_set", "eval_size"],
    "additionalProperties": False,
    "properties": {
        "err": {"type": "number", "minimum": 0, "maximum": 1},
        "params": {"type": "integer", "minimum": 1},
        "flops": {"type": "integer", "minimum": 0},
        "depth": {"type": "integer", "minimum": 3},
        "latency_ms": _NULLABLE_NUMBER,
        "eval_set": {"type": "string"},
        "eval_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "train_loss": {"type": "array", "items": {"type": "number"}},
    },
}

_ROW = {
    "type": "object",
    "required": ["v0", "v1", "v2", "v3", "v4", "v5", "params", "err_pct", "flops", "latency_ms", "depth"],
    "properties": {
        "params": {"type": "integer"},
        "err_pct": {"type": "number", "minimum": 0, "maximum": 100},
        "flops": {"type": ["integer", "null"]},
        "latency_ms": _NULLABLE_NUMBER,
        "depth": {"type": ["integer", "null"]},
    },
}

DECISION = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "decision",
    "type": "object",
    "required": ["index", "row", "genome", "line", "distances", "degenerate"],
    "additionalProperties": False,
    "properties": {
        "index": {"type": "integer", "minimum": 0},
        "row": _ROW,
        "genome": {"oneOf": [GENOME, {"type": "null"}]},
        "line": {
            "oneOf": [
                {"type": "null"},
                {"type": "object", "required": ["A", "B", "anchor_max", "anchor_min"],
                 "properties": {"A": {"type": "number"}, "B": {"type": "number"}}},
            ]
        },
        "distances": {"type": "array", "items": {"type": "number"}},
        "degenerate": {"type": "boolean"},
    },
}

MANIFEST = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "run manifest",
    "type": "object",
    "required": ["command", "config_hash", "config", "seed", "versions", "timestamp", "inputs", "outputs"],
    "additionalProperties": False,
    "properties": {
        "command": {"enum": ["search-blocks", "search-network", "decide", "train", "eval"]},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "config": {"type": "object"},
        "seed": {"type": "integer"},
        "versions": {"type": "object", "additionalProperties": {"type": "string"}},
        "timestamp": {"type": "string"},
        "inputs": {"type": "object", "additionalProperties": {"type": "string"}},
        "outputs": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}

SCHEMAS = {"genotype": GENOTYPE, "genome": GENOME, "metrics": METRICS, "decision": DECISION, "manifest": MANIFEST}


def validate(obj, kind: str) -> None:
    """Raise ``jsonschema.ValidationError`` when ``obj`` does not match schema ``kind``."""
    jsonschema.validate(obj, SCHEMAS[kind], cls=jsonschema.Draft202012Validator)
