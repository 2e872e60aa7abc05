"""Data, training, evaluation, reporting, federated simulation and the CLI."""

from .config import DEFAULTS, ConfigError, load_config
from .data import Dataset, dump_cifar10, gen_synthetic, load_cifar10, parse_cifar10
from .evaluate import (
    CLEAR,
    ENSEMBLE_SETTINGS,
    SHIELDED,
    EvalReport,
    InsufficientSamplesError,
    attack_configs,
    clean_correct,
    evaluate,
    shield_model,
)
from .fl import FLResult, FLRoundConfig, client_rng, fedavg, run_fl_simulation, shards
from .report import emit_report, from_csv, from_json, render, to_csv, to_json, to_table
from .train import TrainingDiverged, TrainResult, accuracy, sgd_step, train_toy
