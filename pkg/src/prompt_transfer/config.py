"""Experiment configuration: schema, defaults and overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError

OUT_ENV = "PROMPT_TRANSFER_OUT"

_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_POSNUM = {"type": "number", "exclusiveMinimum": 0}
_FRAC = {"type": "number", "minimum": 0, "maximum": 1}

_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "family": {"enum": ["masked_lm", "encoder_decoder"]},
        "num_layers": _POS,
        "hidden_dim": _POS,
        "ffn_dim": _POS,
        "num_heads": _POS,
        "max_seq_len": _POS,
        "seed": _INT,
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": _NONNEG,
                "learning_rate": _POSNUM,
                "batch_size": _POS,
                "records": _POS,
                "null_fraction": _FRAC,
                "plain_fraction": _FRAC,
                "distractor_fraction": _FRAC,
            },
        },
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "output_dir": {"type": "string"},
        "suite": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": _INT,
                "world_seed": _INT,
                "types": {"type": "array", "items": {"enum": ["SA", "NLI", "EJ", "PI", "GEN"]}, "minItems": 1},
                "tasks_per_type": _POS,
                "splits": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
                "words_per_domain": _POS,
            },
        },
        "models": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"source": _MODEL, "target": _MODEL},
        },
        "pt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "prompt_length": _POS,
                "learning_rate": _POSNUM,
                "batch_size": _POS,
                "max_steps": _POS,
                "eval_every": _POS,
                "patience_window": _POS,
                "weight_decay": {"type": "number", "minimum": 0},
                "early_stop": {"type": "boolean"},
            },
        },
        "projector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "objective": {"enum": ["distance", "task_tuning"]},
                "hidden_dim": _POS,
                "learning_rate": _POSNUM,
                "batch_size": _POS,
                "steps": _NONNEG,
                "activation": {"enum": ["leaky_relu", "tanh"]},
                "output_layernorm": {"type": "boolean"},
                "train_tasks": {"type": "array", "items": {"type": "string"}},
                "seed": _INT,
            },
        },
        "metrics": {
            "type": "array",
            "items": {"enum": ["e_concat", "e_average", "c_concat", "c_average", "on"]},
            "minItems": 1,
        },
        "layer_selection": {"type": "string", "pattern": "^(all|top_?[0-9]+|bottom_?[0-9]+)$"},
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
        "random_prompts": _POS,
    },
}

_MODEL_DEFAULT = {
    "family": "masked_lm",
    "num_layers": 4,
    "hidden_dim": 64,
    "ffn_dim": 256,
    "num_heads": 4,
    "max_seq_len": 64,
    "seed": 1,
    "pretrain": {
        "steps": 6000,
        "learning_rate": 2e-3,
        "batch_size": 32,
        "records": 40000,
        "null_fraction": 0.15,
        "plain_fraction": 0.1,
        "distractor_fraction": 0.1,
    },
}

DEFAULTS = {
    "output_dir": "runs/default",
    "suite": {"seed": 0, "world_seed": 0, "types": ["SA", "NLI"], "tasks_per_type": 2, "splits": [2000, 500, 500], "words_per_domain": 40},
    "models": {
        "source": _MODEL_DEFAULT,
        "target": {**_MODEL_DEFAULT, "hidden_dim": 48, "ffn_dim": 192, "seed": 2},
    },
    "pt": {
        "prompt_length": 8,
        "learning_rate": 0.001,
        "batch_size": 16,
        "max_steps": 2000,
        "eval_every": 100,
        "patience_window": 300,
        "weight_decay": 0.01,
        "early_stop": True,
    },
    "projector": {
        "objective": "task_tuning",
        "hidden_dim": 128,
        "learning_rate": 0.005,
        "batch_size": 16,
        "steps": 400,
        "activation": "leaky_relu",
        "output_layernorm": False,
        "train_tasks": [],
        "seed": 0,
    },
    "metrics": ["e_concat", "e_average", "c_concat", "c_average", "on"],
    "layer_selection": "top3",
    "seeds": [0],
    "random_prompts": 20,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(doc: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending field path."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")


@dataclass
class ExperimentConfig:
    """A fully resolved experiment document (defaults merged in)."""

    doc: dict

    @classmethod
    def from_dict(cls, doc: dict | None = None) -> "ExperimentConfig":
        doc = doc or {}
        validate(doc)
        merged = _merge(DEFAULTS, doc)
        validate(merged)
        for role, spec in merged["models"].items():
            if spec["hidden_dim"] % spec["num_heads"]:
                raise ConfigError(f"models.{role}.hidden_dim: must be divisible by num_heads")
        pt = merged["pt"]
        if pt["patience_window"] % pt["eval_every"]:
            raise ConfigError("pt.patience_window: must be a multiple of pt.eval_every")
        return cls(merged)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError("<root>: the config must be a JSON object")
        return cls.from_dict(doc)

    def with_overrides(self, out: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        """Apply CLI/env overrides: ``--out`` beats the env var beats the file."""
        doc = copy.deepcopy(self.doc)
        env = os.environ.get(OUT_ENV)
        if out:
            doc["output_dir"] = str(out)
        elif env:
            doc["output_dir"] = env
        if seed is not None:
            doc["suite"]["seed"] = int(seed)
        return ExperimentConfig(doc)

    def canonical(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.doc["output_dir"])
