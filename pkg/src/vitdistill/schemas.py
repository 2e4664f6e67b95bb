"""JSON schemas for plan, chain and grid documents."""

from __future__ import annotations

import jsonschema

from .vit import ConfigError


class SchemaError(ConfigError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_num = {"type": "number"}
_int = {"type": "integer"}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_int = {"type": "integer", "minimum": 1}

VIT_CONFIG = {
    "type": "object",
    "required": ["depth", "hidden_dim", "heads", "patch_size", "image_size", "num_classes"],
    "additionalProperties": False,
    "properties": {
        "depth": _pos_int, "hidden_dim": _pos_int, "heads": _pos_int,
        "patch_size": _pos_int, "image_size": _pos_int, "num_classes": _pos_int,
        "in_chans": _pos_int, "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
        "drop_path_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adaptive_last_block_heads": {"type": ["integer", "null"], "minimum": 1},
    },
}

LOSS_STRATEGY = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["class_token", "feature", "relation"]},
        "feature_target": {"enum": ["output", "ffn_pre", "ffn_post", "attn_pre", "attn_post", "qkv"]},
        "relation_pairs": {"type": "array", "items": {"enum": ["QQ", "KK", "VV", "QK"]},
                           "uniqueItems": True},
        "relation_softmax": {"type": "boolean"},
        "with_reconstruction": {"type": "boolean"},
        "class_token_temperature": {"type": "number", "exclusiveMinimum": 0},
        "exclude_cls": {"type": "boolean"},
        "student_feature_norm": {"type": "boolean"},
        "reconstruction_weight": {"type": "number", "minimum": 0},
    },
}

PLAN = {
    "type": "object",
    "required": ["student_config"],
    "additionalProperties": False,
    "properties": {
        "teacher_checkpoint": {"type": ["string", "null"]},
        "student_config": VIT_CONFIG,
        "student_init": {"type": ["string", "null"]},
        "target_block_index": {"type": ["integer", "null"], "minimum": 1},
        "loss_strategy": LOSS_STRATEGY,
        "input_mode": {"enum": ["raw", "masked"]},
        "mask_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "teacher_drop_path": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "student_drop_path": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
        "epochs": _nonneg_int,
        "batch_size": _pos_int,
        "peak_lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "min_lr": {"type": "number", "minimum": 0},
        "warmup_epochs": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "seed": _int,
        "cache_teacher": {"type": "boolean"},
    },
}

CHAIN = {
    "type": "object",
    "required": ["stages"],
    "additionalProperties": False,
    "properties": {"stages": {"type": "array", "minItems": 1, "items": PLAN}},
}

TRAIN_SETTINGS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": _nonneg_int, "batch_size": _pos_int,
        "peak_lr": {"type": "number", "exclusiveMinimum": 0},
        "min_lr": {"type": "number", "minimum": 0},
        "warmup_epochs": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "layer_decay": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "drop_path_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "label_smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": _int,
    },
}

GRID = {
    "type": "object",
    "required": ["base_plan", "axes"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "base_plan": PLAN,
        "axes": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {"type": "array", "minItems": 1},
        },
        "eval_mode": {"enum": ["linear_probe", "fine_tune"]},
        "eval": TRAIN_SETTINGS,
        "eval_train_samples": _pos_int,
    },
}


def validate(doc, schema: dict) -> None:
    """Raise :class:`SchemaError` carrying the JSON path of the first violation."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(err.json_path, err.message)
