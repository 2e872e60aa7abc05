"""Command-line driver: ``pelta {train,attack,evaluate,flsim,memest,report}``.

Every subcommand reads the same TOML config (``--config``), honours ``--seed``
and writes its outputs under ``--out``.  Failures print one JSON line
``{"error": ..., "message": ...}`` on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ..attacks import AttackConfig, GradientOracle, SINGLE_MODEL
from ..shield import estimate_enclave_memory, named_prefix, pelta_shield, select
from ..zoo import EnsembleModel, build_model, save_checkpoint, vit_b16, vit_l16
from .config import load_config
from .data import gen_synthetic, load_cifar10
from .evaluate import attack_configs, clean_correct, evaluate
from .fl import FLRoundConfig, run_fl_simulation
from .report import FORMATS, emit_report, from_csv, from_json
from .train import accuracy, train_toy

EXT = {"csv": "csv", "json": "json", "table": "txt"}
LARGE = {"vit_l16": vit_l16, "vit_b16": vit_b16}


def _datasets(cfg, seed):
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        kw = dict(size=d["size"], channels=d["channels"], noise=d["noise"], amplitude=tuple(d["amplitude"]))
        return gen_synthetic(d["n_train"], seed=seed + 1, **kw), gen_synthetic(d["n_test"], seed=seed + 2, **kw)
    if d["kind"] == "cifar10":
        if not d["path"]:
            raise ValueError("dataset.path must name a CIFAR-10 binary batch")
        train = load_cifar10(d["path"])
        test = load_cifar10(d["test_path"]) if d["test_path"] else train
        return train, test
    raise ValueError(f"unknown dataset kind {d['kind']!r}")


def _model(name, cfg, train, seed):
    c, h = train.images.shape[1], train.images.shape[2]
    g = build_model(name, seed=cfg["model"]["seed"] + seed, image_size=h, channels=c, n_classes=train.n_classes)
    m = cfg["model"]
    g.params = train_toy(g, train, m["train_steps"], m["lr"], seed, m["batch_size"]).params
    return g


def _shield(g, cfg):
    labels = cfg["shield"]["labels"] or g.meta["shield"]
    return pelta_shield(g, select(g, named_prefix(labels)), cfg["shield"]["flush_mode"])[1]


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dump(path, doc):
    _write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_train(args, cfg, seed):
    train, test = _datasets(cfg, seed)
    name = cfg["model"]["name"]
    g = _model(name, cfg, train, seed)
    save_checkpoint(g, os.path.join(args.out, f"{name}.pzoo"))
    _write(os.path.join(args.out, f"{name}.graph.json"), g.dumps() + "\n")
    _dump(
        os.path.join(args.out, "train.json"),
        {"model": name, "seed": seed, "train_accuracy": accuracy(g, train), "test_accuracy": accuracy(g, test)},
    )


def cmd_attack(args, cfg, seed):
    train, test = _datasets(cfg, seed)
    name = cfg["model"]["name"]
    g = _model(name, cfg, train, seed)
    n = args.samples or cfg["evaluate"]["samples"]
    idx = clean_correct([g], test, n, seed)
    x, y = test.images[idx], test.labels[idx]
    shielded = cfg["shield"]["enabled"]
    summary = {"model": name, "seed": seed, "samples": len(idx), "shielded": shielded, "attacks": {}}
    for ac in attack_configs(cfg["attack"]):
        if ac == "none" or ac.kind not in SINGLE_MODEL:
            continue
        model = _shield(g, cfg) if shielded else g
        res = SINGLE_MODEL[ac.kind](GradientOracle(model, seed=seed, sample_ids=idx), x, y, ac, seed=seed)
        res.write_trajectory_csv(os.path.join(args.out, f"trajectory_{ac.kind}.csv"))
        summary["attacks"][ac.kind] = {
            "robust_accuracy": 1.0 - res.success_rate,
            "queries_used": res.queries_used,
            "max_linf": float(np.abs(res.x_adv - x).max()) if len(x) else 0.0,
        }
    _dump(os.path.join(args.out, "attack.json"), summary)


def cmd_evaluate(args, cfg, seed):
    train, test = _datasets(cfg, seed)
    ev = cfg["evaluate"]
    models = {name: _model(name, cfg, train, seed) for name in ev["models"]}
    ensemble = None
    if ev["ensemble"]:
        k = models.get("resnet_stem_cnn") or _model("resnet_stem_cnn", cfg, train, seed)
        v = models.get("tiny_vit") or _model("tiny_vit", cfg, train, seed)
        ensemble = EnsembleModel(k, v, seed)
    report = evaluate(models, attack_configs(cfg["attack"]), None, test, args.samples or ev["samples"], seed, ensemble)
    emit_report(report, args.format, os.path.join(args.out, f"report.{EXT[args.format]}"))


def cmd_flsim(args, cfg, seed):
    train, test = _datasets(cfg, seed)
    f = cfg["fl"]
    specs = cfg["attack"]
    if f["attack"] not in specs:
        raise ValueError(f"fl.attack names {f['attack']!r} but no [attack.{f['attack']}] section exists")
    params = dict(specs[f["attack"]])
    params.setdefault("kind", f["attack"])
    fl_cfg = FLRoundConfig(
        n_clients=f["n_clients"],
        n_rounds=f["n_rounds"],
        local_steps=f["local_steps"],
        learning_rate=f["learning_rate"],
        compromised_indices=frozenset(f["compromised"]),
        attack=AttackConfig.from_dict(params),
        shield_enabled=f["shield_enabled"],
        batch_size=cfg["model"]["batch_size"],
        seed=seed,
        model=cfg["model"]["name"],
        attack_samples=args.samples or f["attack_samples"],
    )
    c, h = train.images.shape[1], train.images.shape[2]
    g = build_model(fl_cfg.model, seed=cfg["model"]["seed"] + seed, image_size=h, channels=c, n_classes=train.n_classes)
    res = run_fl_simulation(fl_cfg, train, test, g)
    rounds = []
    for r, params in enumerate(res.global_params):
        g.params = params
        attacked = {str(cl): 1.0 - a.success_rate for (rr, cl), a in sorted(res.attacks.items()) if rr == r}
        rounds.append({"round": r, "test_accuracy": accuracy(g, test), "robust_accuracy": attacked})
    doc = {"seed": seed, "shield_enabled": fl_cfg.shield_enabled, "attack_success_rate": res.success_rate(), "rounds": rounds}
    _dump(os.path.join(args.out, "flsim.json"), doc)


def cmd_memest(args, cfg, seed):
    m = cfg["memest"]
    name = m["model"]
    g = LARGE[name]() if name in LARGE else build_model(name, seed=seed)
    enclave = pelta_shield(g, select(g, named_prefix(g.meta["shield"])), m["mode"])[0]
    rep = estimate_enclave_memory(g, enclave, m["mode"], m["batch_size"])
    _write(os.path.join(args.out, "memory.txt"), rep.to_text(f"Estimated enclave memory for {name}"))


def cmd_report(args, cfg, seed):
    if not args.input:
        raise ValueError("report needs --input <report.json|report.csv>")
    with open(args.input, encoding="utf-8") as fh:
        text = fh.read()
    rep = from_csv(text) if args.input.endswith(".csv") else from_json(text)
    emit_report(rep, args.format, os.path.join(args.out, f"report.{EXT[args.format]}"))


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "flsim": cmd_flsim,
    "memest": cmd_memest,
    "report": cmd_report,
}


def parser():
    p = argparse.ArgumentParser(prog="pelta", description="Enclave shielding against white-box evasion attacks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML run configuration")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--samples", type=int, help="number of clean-correct samples to attack")
        s.add_argument("--format", choices=FORMATS, default="table", help="report format")
        if name == "report":
            s.add_argument("--input", help="existing report (json or csv)")
    return p


def main(argv=None):
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print(json.dumps({"error": "UsageError", "message": "invalid command line"}), file=sys.stderr)
        return exc.code or 0
    try:
        cfg = load_config(args.config)
        seed = cfg["seed"] if args.seed is None else args.seed
        if seed < 0:
            raise ValueError("seed must be non-negative")
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, cfg, seed)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
