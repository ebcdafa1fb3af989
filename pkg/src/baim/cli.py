"""Command-line entry point: ``baim <command> [options]``.

Commands share one working directory (``--out``, default ``$BAIM_OUTPUT_ROOT``
or ``./baim_out``) so they chain without extra flags::

    baim simulate --out run/
    baim extract  --out run/
    baim train    --out run/
    baim analyze-routing --out run/ --learner-id 3

Exit codes: 0 success, 2 validation or config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .backbones import BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ItemCatalog, LearnerSequence, iter_windows, load_sequences, make_folds,
                   simulate_population, write_sequences)
from .embedding import build_table, load_table, read_dumps, save_table, synth_dumps, write_dumps
from .exceptions import BaimError, ConfigError, NumericError, ValidationError
from .model import Batch, KTModel, ModelConfig
from .router import RouterConfig
from .training import evaluate, model_grad_check, stage_shifts, trace_sequences, train

log = logging.getLogger("baim")

OUTPUT_ROOT_ENV = "BAIM_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# default file names inside the working directory
FILES = {
    "dataset": "dataset.csv",
    "catalog": "catalog.json",
    "truth": "ground_truth.json",
    "dumps": "dumps.bin",
    "dumps_index": "dumps.index.jsonl",
    "table": "table.bin",
    "checkpoint": "checkpoint.bin",
    "epoch_log": "epoch_log.jsonl",
    "metrics": "metrics.json",
}


# --- shared helpers ------------------------------------------------------------------

def _out_dir(args) -> Path:
    root = args.out or os.environ.get(OUTPUT_ROOT_ENV) or "baim_out"
    return Path(root)


def _path(cfg, key, out: Path, file_key=None) -> Path:
    given = cfg["paths"].get(key)
    return Path(given) if given else out / FILES[file_key or key]


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_config(args) -> dict:
    cfg = cfgmod.load_config(args.config, getattr(args, "profile", None))
    if args.seed is not None:
        cfg["simulator"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    flag_map = {
        "mode": ("model", "item_repr_mode"), "routing": ("model", "routing"),
        "backbone": ("model", "backbone"), "lambda_lb": ("train", "lambda_lb"),
        "epochs": ("train", "epochs"), "strategy": ("extract", "strategy"),
        "dataset": ("paths", "dataset"), "table": ("paths", "table"),
        "checkpoint": ("paths", "checkpoint"), "learner_id": ("analysis", "learner_id"),
        "plot": ("analysis", "plot"),
    }
    for flag, (section, key) in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    _validate_paths(cfg)
    return cfg


def _validate_paths(cfg) -> None:
    for key, value in cfg["paths"].items():
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"paths.{key} must be a string")


def _load_inputs(cfg, out: Path):
    catalog = ItemCatalog.load(_require_file(_path(cfg, "catalog", out), "catalog"))
    seqs = load_sequences(_require_file(_path(cfg, "dataset", out), "dataset"),
                          max_len=cfg["train"]["window"], catalog=catalog)
    return catalog, seqs


def _split(cfg, seqs):
    t = cfg["train"]
    folds = make_folds(seqs, t["folds"], t["fold_seed"])
    return folds.train_valid_test(seqs, t["test_fold"])


# --- commands ------------------------------------------------------------------------

def cmd_simulate(cfg, out: Path) -> dict:
    """Synthetic learners, catalog, ground truth and stand-in solver dumps."""
    sim = cfgmod.simulator_config(cfg)
    d = cfg["dumps"]
    out.mkdir(parents=True, exist_ok=True)
    catalog, seqs, truth = simulate_population(sim)
    rows = write_sequences(out / FILES["dataset"], iter_windows(seqs, cfg["train"]["window"]))
    catalog.save(out / FILES["catalog"])
    _write_json(out / FILES["truth"], truth.to_json())
    dumps = synth_dumps(catalog, d["layers"], d["tokens"], d["width"], sim.seed,
                        profiles=truth.profiles, profile_scale=d["profile_scale"],
                        noise_std=d["noise_std"])
    write_dumps(out / FILES["dumps"], dumps, out / FILES["dumps_index"])
    return {"rows": rows, "learners": sim.n_learners, "items": sim.n_items}


def cmd_extract(cfg, out: Path) -> dict:
    catalog = ItemCatalog.load(_require_file(_path(cfg, "catalog", out), "catalog"))
    index = _require_file(_path(cfg, "dumps_index", out), "dump index")
    e = cfg["extract"]
    table = build_table(read_dumps(index), e["target_dim"], e["strategy"],
                        item_count=catalog.item_count)
    target = _path(cfg, "table", out)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, target, {"catalog_fingerprint": catalog.fingerprint()})
    return {"table": str(target), "shape": list(table.matrix.shape), "strategy": e["strategy"]}


def build_model(cfg, item_count: int, table=None) -> KTModel:
    m = cfg["model"]
    d_input = table.shape[2] if table is not None else 1
    router = RouterConfig(d_input=d_input, d_kt=m["d_kt"], d_history=m["d_history"],
                          dropout=m["dropout"], noise_std=m["noise_std"],
                          scale_by_gate_prob=m["scale_by_gate_prob"])
    backbone = BackboneConfig(kind=m["backbone"], d_kt=m["d_kt"], hidden=m["hidden"],
                              n_heads=m["n_heads"], max_len=m["max_len"], dropout=m["dropout"])
    config = ModelConfig(item_count, m["item_repr_mode"], m["routing"], router, backbone)
    torch.manual_seed(cfg["train"]["seed"])
    return KTModel(config, table)


def _load_stage_table(cfg, out: Path, catalog: ItemCatalog):
    table_path = _path(cfg, "table", out)
    if cfg["model"]["item_repr_mode"] == "static":
        if cfg["paths"]["table"] is not None:
            warnings.warn(f"static item representations ignore the embedding table {table_path}",
                          UserWarning, stacklevel=2)
        return None
    table = load_table(_require_file(table_path, "embedding table"))
    fp = table.info.get("catalog_fingerprint")
    if table.item_count != catalog.item_count or (fp is not None and fp != catalog.fingerprint()):
        raise ConfigError(
            f"embedding table {table_path} (items={table.item_count}, fingerprint={fp}) "
            f"does not match catalog (items={catalog.item_count}, "
            f"fingerprint={catalog.fingerprint()})")
    routing = cfg["model"]["routing"]
    if (routing == "holistic") != (table.strategy == "holistic"):
        raise ConfigError(f"routing={routing!r} needs a matching table; "
                          f"table strategy is {table.strategy!r}")
    return table.matrix


def cmd_train(cfg, out: Path) -> dict:
    catalog, seqs = _load_inputs(cfg, out)
    table = _load_stage_table(cfg, out, catalog)
    train_seqs, valid_seqs, test_seqs = _split(cfg, seqs)
    model = build_model(cfg, catalog.item_count, table)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, train_seqs, valid_seqs, cfgmod.train_config(cfg),
                   log_path=out / FILES["epoch_log"])
    test = evaluate(result.model, test_seqs)
    valid = evaluate(result.model, valid_seqs)
    ckpt = _path(cfg, "checkpoint", out)
    save_checkpoint(ckpt, result.model, {
        "best_epoch": result.best_epoch, "seed": cfg["train"]["seed"],
        "catalog_fingerprint": catalog.fingerprint(),
        "split": {k: cfg["train"][k] for k in ("folds", "fold_seed", "test_fold")},
    })
    metrics = {"best_epoch": result.best_epoch, "valid": valid.to_dict(), "test": test.to_dict(),
               "item_repr_mode": cfg["model"]["item_repr_mode"],
               "routing": cfg["model"]["routing"], "lambda_lb": cfg["train"]["lambda_lb"]}
    _write_json(out / FILES["metrics"], metrics)
    return metrics


def cmd_eval(cfg, out: Path) -> dict:
    model, _ = load_checkpoint(_require_file(_path(cfg, "checkpoint", out), "checkpoint"))
    _, seqs = _load_inputs(cfg, out)
    _, _, test_seqs = _split(cfg, seqs)
    return evaluate(model, test_seqs).to_dict()


ROUTING_COLUMNS = ["learner_id", "timestep", "item_id", "response",
                   "p0", "p1", "p2", "p3", "k_star", "y"]


def cmd_analyze_routing(cfg, out: Path) -> dict:
    """Per-step routing trace as CSV plus repeated / stage-shifted counts."""
    ckpt = _require_file(_path(cfg, "checkpoint", out), "checkpoint")
    model, _ = load_checkpoint(ckpt)
    if not model.routed:
        raise ValidationError(
            f"{ckpt} holds a static-representation model; it makes no routing "
            "decisions to analyse (train with item_repr_mode=baim)")
    _, seqs = _load_inputs(cfg, out)
    learner = cfg["analysis"]["learner_id"]
    if learner is not None:
        seqs = [s for s in seqs if s.learner_id == learner]
        if not seqs:
            raise ValidationError(f"learner {learner} not found in the dataset")
    traces = trace_sequences(model, seqs)
    repeated, shifted, per = stage_shifts(traces)

    name = "routing.csv" if learner is None else f"routing_learner{learner}.csv"
    target = out / name
    out.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUTING_COLUMNS)
        step = {}
        for tr in traces:
            for t in range(len(tr.items)):
                # windows of one learner continue the timestep count
                ts = step.get(tr.learner_id, 0)
                step[tr.learner_id] = ts + 1
                writer.writerow([tr.learner_id, ts, int(tr.items[t]), int(tr.responses[t]),
                                 *(f"{p:.9g}" for p in tr.probs[t]), int(tr.selected[t]),
                                 f"{tr.y[t]:.9g}"])
    summary = {
        "csv": str(target),
        "repeated_interactions": repeated,
        "stage_shifted": shifted,
        "learners_with_repeats": sum(1 for r, _ in per.values() if r > 0),
        "learners_with_shift": sum(1 for _, s in per.values() if s > 0),
    }
    _write_json(target.with_suffix(".summary.json"), summary)
    if cfg["analysis"]["plot"]:
        summary["plot"] = str(_plot_routing(traces, out / cfg["analysis"]["plot"]))
    return summary


def _plot_routing(traces, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tr = traces[0]
    fig, ax = plt.subplots(figsize=(max(4, len(tr.items) / 4), 2.5))
    ax.imshow(tr.probs.T, aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_yticks(range(4), ["understand", "plan", "carry out", "look back"])
    ax.set_xlabel(f"timestep (learner {tr.learner_id})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def cmd_gradcheck(cfg, out: Path) -> dict:
    """Finite-difference check of a small BAIM + backbone network (5-step sequences)."""
    seed = cfg["train"]["seed"]
    n_items, d = 6, 4
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((n_items, 4, d))
    small = cfgmod.merge(cfg, {"model": {"item_repr_mode": "baim", "d_kt": 4, "d_history": 3,
                                         "hidden": 4, "n_heads": 2}})
    model = build_model(small, n_items, table)

    def make_batch(attempt):
        r = np.random.default_rng(seed + attempt)
        return Batch.from_sequences([
            LearnerSequence(b, r.integers(0, n_items, 5), r.integers(0, 2, 5)) for b in range(2)])

    report = model_grad_check(model, make_batch, lambda_lb=cfg["train"]["lambda_lb"])
    dead = {}
    for k in range(4):
        if k in set(report.routes.reshape(-1).tolist()):
            continue
        for name, g in report.analytic.items():
            if name.startswith(f"items.experts.{k}."):
                dead[name] = float(g.abs().max())
    result = {"max_rel_error": report.max_rel_error, "attempts": report.attempts,
              "unselected_expert_max_abs_grad": max(dead.values(), default=0.0)}
    if report.max_rel_error >= 1e-4 or result["unselected_expert_max_abs_grad"] != 0.0:
        raise NumericError(f"gradient check failed: {result}")
    return result


def cmd_reproduce_synthetic(cfg, out: Path) -> dict:
    """simulate -> extract -> train (baim) -> train (static) -> compare."""
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    cfg = cfgmod.merge(cfg, {"paths": {"catalog": str(data_dir / FILES["catalog"]),
                                       "dataset": str(data_dir / FILES["dataset"]),
                                       "dumps_index": str(data_dir / FILES["dumps_index"]),
                                       "table": str(data_dir / FILES["table"])}})
    cmd_simulate(cfg, data_dir)
    cmd_extract(cfg, data_dir)
    runs = {}
    for mode in ("baim", "static"):
        run_cfg = cfgmod.merge(cfg, {"model": {"item_repr_mode": mode, "routing": "adaptive"},
                                     "paths": {"checkpoint": None}})
        if mode == "static":
            run_cfg["paths"]["table"] = None
        runs[mode] = cmd_train(run_cfg, out / mode)
    gap = runs["baim"]["test"]["auc"] - runs["static"]["test"]["auc"]
    report = {
        "seed": cfg["train"]["seed"],
        "baim_test_auc": runs["baim"]["test"]["auc"],
        "static_test_auc": runs["static"]["test"]["auc"],
        "auc_gap": gap,
        "baim_routing_shares": runs["baim"]["test"]["routing_shares"],
        "gap_at_least_0.02": gap >= 0.02,
    }
    _write_json(out / "report.json", report)
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-routing": cmd_analyze_routing,
    "gradcheck": cmd_gradcheck,
    "reproduce-synthetic": cmd_reproduce_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--profile", choices=cfgmod.PROFILES, help="default profile")
    common.add_argument("--seed", type=int, help="overrides simulator and training seeds")
    common.add_argument("--out", help=f"working directory (default ${OUTPUT_ROOT_ENV} or ./baim_out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="baim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}
    p["extract"].add_argument("--strategy", choices=("global", "final_layer", "holistic"))
    for name in ("train", "reproduce-synthetic"):
        p[name].add_argument("--mode", choices=("baim", "static"))
        p[name].add_argument("--routing",
                             choices=("adaptive", "fixed-0", "fixed-1", "fixed-2", "fixed-3",
                                      "holistic"))
        p[name].add_argument("--backbone", choices=("recurrent", "attention"))
        p[name].add_argument("--lambda", dest="lambda_lb", type=float)
        p[name].add_argument("--epochs", type=int)
    for name in ("train", "eval", "analyze-routing"):
        p[name].add_argument("--dataset")
        p[name].add_argument("--checkpoint")
    p["train"].add_argument("--table")
    p["analyze-routing"].add_argument("--learner-id", type=int)
    p["analyze-routing"].add_argument("--plot", help="optional image file name (png/svg)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        result = COMMANDS[args.command](cfg, _out_dir(args))
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BaimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
