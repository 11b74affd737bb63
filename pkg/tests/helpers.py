"""Tiny experiment configurations shared by the integration tests."""

from tagfex.config import config_from_dict

TINY = {
    "name": "tiny",
    "seed": 0,
    "memory_size": 8,
    "dataset": {"name": "collision", "total_classes": 4, "base_size": 2, "increment_size": 2,
                "train_per_class": 8, "test_per_class": 6,
                "collision": {"image_size": 16}},
    "backbone": {"kind": "convnet", "channels": [4, 8]},
    "optimizer": {"epochs": 1, "batch_size": 8, "lr": 0.05},
    "ssl": {"proj_dim": 8},
    "merge": {"heads": 2},
    "analysis": {"probe_size": 4, "cka_probe_size": 12},
}


def tiny_config(**overrides):
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for key, value in overrides.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return config_from_dict(data)
