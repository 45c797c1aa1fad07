"""JSON Schemas for emitted reports and a header check for CSV tables."""

from __future__ import annotations

import csv
import io

import jsonschema

from contrastvae.errors import FormatError

_METRICS = {
    "type": "object",
    "required": ["recall@20", "ndcg@20", "recall@40", "ndcg@40"],
    "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["view", "n_users", "overall", "frequency_groups", "length_groups", "diagnostics"],
    "properties": {
        "view": {"enum": ["validation", "test"]},
        "n_users": {"type": "integer", "minimum": 0},
        "overall": _METRICS,
        "frequency_groups": {
            "type": "array",
            "minItems": 5,
            "maxItems": 5,
            "items": {
                "type": "object",
                "required": ["group", "n_users", "metrics", "mean_kl", "mean_variance"],
                "properties": {
                    "group": {"type": "string"},
                    "n_users": {"type": "integer", "minimum": 0},
                    "metrics": _METRICS,
                    "mean_kl": {"type": "number", "minimum": 0},
                    "mean_variance": {"type": "number", "minimum": 0},
                },
            },
        },
        "length_groups": {
            "type": "array",
            "minItems": 5,
            "maxItems": 5,
            "items": {
                "type": "object",
                "required": ["group", "n_users", "metrics"],
                "properties": {"group": {"type": "string"}, "n_users": {"type": "integer"}, "metrics": _METRICS},
            },
        },
        "diagnostics": {
            "type": "object",
            "required": ["mean_kl", "mean_variance"],
            "additionalProperties": {"type": "number", "minimum": 0},
        },
    },
}

_num_or_null = {"type": ["number", "null"]}

LOG_RECORD_SCHEMA = {
    "type": "object",
    "required": ["epoch", "ce", "ce'", "kl", "kl'", "infonce", "alpha_reg", "total", "val_recall@20", "val_ndcg@20"],
    "properties": {
        "epoch": {"type": "integer", "minimum": 1},
        "ce": {"type": "number"},
        "ce'": {"type": "number"},
        "kl": {"type": "number", "minimum": 0},
        "kl'": {"type": "number", "minimum": 0},
        "infonce": {"type": "number", "minimum": 0},
        "alpha_reg": {"type": "number"},
        "total": {"type": "number"},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "val_recall@20": _num_or_null,
        "val_ndcg@20": _num_or_null,
        "wall_ms": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

SPLIT_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "n_users", "n_items", "n_interactions", "avg_seq_len", "sequence_file"],
    "properties": {
        "n_users": {"type": "integer", "minimum": 1},
        "n_items": {"type": "integer", "minimum": 1},
        "n_interactions": {"type": "integer", "minimum": 0},
        "avg_seq_len": {"type": "number", "minimum": 0},
    },
}

CSV_HEADERS = {
    "groups": ["group", "metric", "value", "n_users"],
    "diagnostics": ["group", "mean_kl", "mean_variance", "recall@40"],
    "lambda_sweep": ["lambda", "recall@40"],
}


def validate(doc, schema: dict) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"schema violation at {list(exc.absolute_path)}: {exc.message}") from exc


def check_csv(text: str, kind: str) -> list[dict]:
    """Parse a CSV table and confirm its header and numeric columns."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADERS[kind]:
        raise FormatError(f"{kind} CSV header must be {','.join(CSV_HEADERS[kind])}")
    out = []
    for r in rows[1:]:
        if len(r) != len(rows[0]):
            raise FormatError(f"{kind} CSV row has {len(r)} fields: {r}")
        rec = dict(zip(rows[0], r))
        for k, v in rec.items():
            if k not in ("group", "metric"):
                try:
                    float(v)
                except ValueError:
                    raise FormatError(f"{kind} CSV: {k}={v!r} is not numeric") from None
        out.append(rec)
    return out
