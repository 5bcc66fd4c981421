"""Shared helpers for the test suite: tiny desk-scale configs."""

from fedssl.config import ExperimentConfig, parse_config


def deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


TINY_DOC = {
    "rounds": 3,
    "num_clients": 4,
    "classes_per_client": 5,
    "local_epochs": 1,
    "batch_size": 8,
    "lr": 0.05,
    "encoder_hidden": [16],
    "embedding_dim": 8,
    "predictor_hidden": [16],
    "eval_every": 1000,
    "linear_epochs": 30,
    "data": {
        "num_classes": 10,
        "per_class": 16,
        "test_per_class": 4,
        "dim": 8,
        "spread": 1.0,
        "aug": {"noise_sigma": 0.3, "mask_prob": 0.1,
                "scale_min": 0.9, "scale_max": 1.1},
    },
}


def tiny_cfg(**overrides) -> ExperimentConfig:
    """A seconds-scale experiment config with optional nested overrides."""
    return parse_config(deep_merge(TINY_DOC, overrides))
