"""Run configuration: one TOML document with [model], [shield], [attack.<name>],
[dataset], [fl] and [evaluate] sections.  Missing sections take the defaults
below; unknown keys are rejected so typos fail loudly."""

from __future__ import annotations

import copy
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "model": {"name": "resnet_stem_cnn", "seed": 0, "train_steps": 300, "lr": 0.1, "batch_size": 32},
    "shield": {"enabled": True, "flush_mode": "worst_case_retain", "labels": []},
    "dataset": {
        "kind": "synthetic",
        "n_train": 2000,
        "n_test": 700,
        "size": 16,
        "channels": 1,
        "noise": 0.05,
        "amplitude": [0.2, 0.35],
        "path": "",
        "test_path": "",
    },
    "attack": {
        "pgd": {"epsilon": 0.1, "epsilon_step": 0.0125, "steps": 20},
        "random": {"epsilon": 0.1},
    },
    "evaluate": {"models": ["resnet_stem_cnn"], "ensemble": False, "samples": 500},
    "fl": {
        "n_clients": 4,
        "n_rounds": 3,
        "local_steps": 20,
        "learning_rate": 0.1,
        "compromised": [0],
        "attack": "pgd",
        "shield_enabled": True,
        "attack_samples": 200,
    },
    "memest": {"model": "vit_l16", "batch_size": 1, "mode": "worst_case_retain"},
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if path == "attack":  # attack sections are free-form; validated by AttackConfig
            out[key] = val
        elif key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def load_config(path=None, text=None):
    """Merge a TOML file (or string) over the defaults."""
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    elif text is not None:
        doc = tomllib.loads(text)
    else:
        doc = {}
    cfg = _merge(DEFAULTS, doc)
    if "attack" in doc:  # a file that lists attacks replaces the default list
        cfg["attack"] = copy.deepcopy(doc["attack"])
    return cfg
