"""JSON schema for the summary every CLI run prints on standard output."""

from __future__ import annotations

import copy

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string"}

RESULT_SCHEMAS = {
    "simulate": {"required": ["count", "digest", "metadata"], "properties": {"count": _INT, "digest": _STR}},
    "rir decompose": {"required": ["n0", "gain", "fs", "lengths", "reconstruction_error"],
                      "properties": {"n0": _INT, "gain": _NUM, "reconstruction_error": _NUM}},
    "rir targets": {"required": ["n0", "targets"], "properties": {"n0": _INT, "targets": {"type": "object"}}},
    "stft": {"required": ["fs", "win_len", "hop_len", "frames", "bins"]},
    "istft": {"required": ["fs", "samples"]},
    "bands": {"required": ["fs", "bands"], "properties": {"bands": {"type": "array", "minItems": 1}}},
    "curate score": {"required": ["count", "scorer"]},
    "curate filter": {"required": ["tau", "kept_hours", "dropped_hours", "total_hours", "n_kept", "n_dropped",
                                   "annotations"]},
    "curate hist": {"required": ["histograms"]},
    "dp identity": {"required": ["D0_direct", "D_star", "W2_sq", "residual", "max_quantile_deviation"]},
    "dp curve": {"required": ["points", "monotone", "min_second_difference"]},
    "dp sample-mse": {"required": ["sampling_mse", "stderr", "D_star", "ratio"]},
    "twostage regress": {"required": ["frames", "bins"]},
    "twostage fit": {"required": ["frames", "bins", "n_quantiles"]},
    "twostage correct": {"required": ["frames", "bins", "max_abs_correction"]},
    "twostage residual-corr": {"required": ["correlation"], "properties": {"correlation": _NUM}},
    "twostage lipschitz": {"required": ["pairs", "violations", "min_slack"],
                           "properties": {"violations": _INT, "min_slack": _NUM}},
    "metrics": {"required": ["count", "aggregate"]},
    "schema": {"required": ["schema"]},
}

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "uselab run summary",
    "type": "object",
    "required": ["command", "status", "seed", "result", "outputs"],
    "properties": {
        "command": {"type": "string"},
        "status": {"enum": ["ok", "error"]},
        "seed": {"type": ["integer", "null"]},
        "result": {"type": "object"},
        "outputs": {"type": "array", "items": _STR},
        "error": {"type": "object", "required": ["kind", "message"],
                  "properties": {"kind": _STR, "message": _STR}},
    },
    "allOf": [
        {"if": {"properties": {"status": {"const": "error"}}}, "then": {"required": ["error"]}},
    ]
    + [
        {
            "if": {"properties": {"command": {"const": cmd}, "status": {"const": "ok"}}},
            "then": {"properties": {"result": dict(type="object", **spec)}},
        }
        for cmd, spec in RESULT_SCHEMAS.items()
    ],
}


def summary_schema() -> dict:
    return copy.deepcopy(SUMMARY_SCHEMA)
