"""Command-line experiment runner: run, sweep, compare, eval.

All artifacts of a run land in one directory: the resolved config, per-round
metrics as CSV and JSON-lines, the loss trace, plot-data files, the final
parameter checkpoint, and a summary with the final accuracies.  Identical
config and seed produce byte-identical metrics files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation, federation
from .config import ConfigError, ExperimentConfig, config_json, emit_config, parse_config
from .data import write_partition
from .nn import Network
from .params import NamedParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

ROUNDS_COLUMNS = ["round", "mean_loss", "weight_sum", "knn_acc", "collapse_stat"]
CLIENTS_COLUMNS = ["round", "client", "n_k", "loss_mean", "divergence", "mu",
                   "lambda_entry", "lambda_exit", "reset"]
LOSSES_COLUMNS = ["round", "client", "epoch", "batch", "loss"]


def run_id_for(cfg: ExperimentConfig) -> str:
    digest = hashlib.sha256(config_json(cfg).encode()).hexdigest()[:12]
    return f"{digest}-s{cfg.seed}"


def output_root() -> Path:
    return Path(os.environ.get("FEDSSL_OUT", "runs"))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def _write_csv(path: Path, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _record_dict(rec: federation.RoundRecord) -> dict:
    out = {"round": rec.round, "selected": rec.selected,
           "weight_sum": rec.weight_sum, "knn_acc": rec.knn_acc,
           "collapse_stat": rec.collapse_stat, "clients": []}
    for c in rec.clients:
        d = asdict(c)
        if math.isnan(c.divergence):
            d["divergence"] = None
        out["clients"].append(d)
    return out


def write_run_outputs(out_dir: Path, cfg: ExperimentConfig,
                      result: federation.ExperimentResult) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    rid = run_id_for(cfg)
    (out_dir / "config.json").write_text(config_json(cfg) + "\n")
    write_partition(out_dir / "partition.txt", result.runtime.partition)

    rounds_rows, clients_rows, knn_rows = [], [], []
    for rec in result.records:
        mean_loss = float(np.mean([c.loss_mean for c in rec.clients]))
        rounds_rows.append([rec.round, mean_loss, rec.weight_sum,
                            rec.knn_acc, rec.collapse_stat])
        if rec.knn_acc is not None:
            knn_rows.append([rec.round, rec.knn_acc])
        for c in rec.clients:
            clients_rows.append([rec.round, c.client, c.n_k, c.loss_mean,
                                 c.divergence, c.mu, c.lambda_entry,
                                 c.lambda_exit, c.reset])
    _write_csv(out_dir / "rounds.csv", ROUNDS_COLUMNS, rounds_rows)
    _write_csv(out_dir / "clients.csv", CLIENTS_COLUMNS, clients_rows)
    _write_csv(out_dir / "losses.csv", LOSSES_COLUMNS, result.runtime.loss_rows)

    div_cols = [f"div_{k}" for k in range(cfg.num_clients)]
    div_rows = []
    for rec in result.records:
        by_client = {c.client: c.divergence for c in rec.clients}
        row = [rec.round]
        for k in range(cfg.num_clients):
            v = by_client.get(k)
            row.append(None if v is None or math.isnan(v) else v)
        div_rows.append(row)
    _write_csv(out_dir / "plot_divergence.csv", ["round"] + div_cols, div_rows)
    _write_csv(out_dir / "plot_knn.csv", ["round", "knn_acc"], knn_rows)

    with open(out_dir / "metrics.jsonl", "w") as f:
        for rec in result.records:
            f.write(json.dumps(_record_dict(rec), sort_keys=True) + "\n")

    with open(out_dir / "eval.jsonl", "w") as f:
        for rec in result.records:
            if rec.knn_acc is None:
                continue
            f.write(json.dumps({"run_id": rid, "round": rec.round,
                                "knn_acc": rec.knn_acc,
                                "collapse_stat": rec.collapse_stat,
                                "linear_acc": None}, sort_keys=True) + "\n")
        fin = result.final_eval
        f.write(json.dumps({"run_id": rid, "round": cfg.rounds,
                            "knn_acc": fin.knn_acc,
                            "collapse_stat": fin.collapse_stat,
                            "linear_acc": fin.linear_acc}, sort_keys=True) + "\n")

    (out_dir / "checkpoint.bin").write_bytes(result.final_params.to_bytes())

    summary = {
        "run_id": rid,
        "seed": cfg.seed,
        "method": cfg.method,
        "method_overrides": cfg.method_overrides,
        "strategy": asdict(cfg.strategy),
        "rounds": cfg.rounds,
        "final_linear_acc": result.final_eval.linear_acc,
        "final_knn_acc": result.final_eval.knn_acc,
        "final_collapse_stat": result.final_eval.collapse_stat,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _parse_set_overrides(pairs: list[str]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _config_from_args(args) -> ExperimentConfig:
    overrides = _parse_set_overrides(args.set or [])
    for name in ("seed", "rounds", "num_clients", "clients_per_round",
                 "classes_per_client", "local_epochs", "batch_size", "lr",
                 "eval_every", "workers", "method"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "momentum", None) is not None:
        overrides["method_overrides.momentum"] = args.momentum
    if getattr(args, "strategy", None) is not None:
        overrides["strategy.kind"] = args.strategy
    if getattr(args, "tau", None) is not None:
        overrides["strategy.tau"] = args.tau
    if getattr(args, "lambda_", None) is not None:
        overrides["strategy.lambda_"] = args.lambda_
        overrides.setdefault("strategy.tau", None)
    return parse_config(args.config, overrides)


def _resolve_out(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return output_root() / run_id_for(cfg)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    out_dir = _resolve_out(args, cfg)
    result = federation.run_experiment(cfg)
    summary = write_run_outputs(out_dir, cfg, result)
    print(f"run {summary['run_id']} -> {out_dir}")
    print(f"  final linear acc : {summary['final_linear_acc']:.4f}")
    print(f"  final knn acc    : {summary['final_knn_acc']:.4f}")
    print(f"  final collapse   : {summary['final_collapse_stat']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = [json.loads(v) for v in args.values.split(",")]
    base_overrides = _parse_set_overrides(args.set or [])
    out_base = Path(args.out) if args.out else output_root() / "sweep"
    rows = []
    for value in values:
        overrides = dict(base_overrides)
        overrides[args.field] = value
        if args.field == "strategy.lambda_":
            overrides.setdefault("strategy.tau", None)
        cfg = parse_config(args.config, overrides)
        run_dir = out_base / f"{args.field.replace('.', '_')}_{value}"
        result = federation.run_experiment(cfg)
        summary = write_run_outputs(run_dir, cfg, result)
        rows.append([args.field, value, summary["final_linear_acc"],
                     summary["final_knn_acc"], str(run_dir)])
        print(f"{args.field}={value}: linear={summary['final_linear_acc']:.4f}")
    out_base.mkdir(parents=True, exist_ok=True)
    _write_csv(out_base / "sweep.csv",
               ["field", "value", "final_linear_acc", "final_knn_acc", "run_dir"],
               rows)
    print(f"sweep summary -> {out_base / 'sweep.csv'}")
    return EXIT_OK


def _load_run(run_dir: Path) -> tuple[dict, dict]:
    config = json.loads((run_dir / "config.json").read_text())
    summary = json.loads((run_dir / "summary.json").read_text())
    return config, summary


def compare_runs(run_dirs: list[Path]) -> list[dict]:
    """Group runs by configuration (ignoring seed) and average over seeds."""
    loaded = [_load_run(d) for d in run_dirs]
    ref_data = loaded[0][0]["data"]
    for config, _ in loaded[1:]:
        if config["data"] != ref_data:
            raise ValueError("runs have different dataset specs")
    groups: dict[str, dict] = {}
    for config, summary in loaded:
        key_doc = {k: v for k, v in config.items() if k != "seed"}
        key = json.dumps(key_doc, sort_keys=True)
        label = config["method"]
        if config.get("method_overrides"):
            label += "+" + ",".join(f"{k}={v}" for k, v
                                    in sorted(config["method_overrides"].items()))
        strat = config["strategy"]
        label += f"/{strat['kind']}"
        if strat.get("tau") is not None:
            label += f"(tau={strat['tau']})"
        if strat.get("lambda_") is not None:
            label += f"(lambda={strat['lambda_']})"
        g = groups.setdefault(key, {"label": label, "seeds": [], "linear": [], "knn": []})
        g["seeds"].append(summary["seed"])
        g["linear"].append(summary["final_linear_acc"])
        g["knn"].append(summary["final_knn_acc"])
    rows = []
    for g in groups.values():
        lin = np.array(g["linear"])
        knn = np.array(g["knn"])
        rows.append({
            "label": g["label"],
            "seeds": len(g["seeds"]),
            "linear_mean": float(lin.mean()),
            "linear_std": float(lin.std(ddof=1)) if lin.size > 1 else 0.0,
            "knn_mean": float(knn.mean()),
            "knn_std": float(knn.std(ddof=1)) if knn.size > 1 else 0.0,
        })
    rows.sort(key=lambda r: -r["linear_mean"])
    return rows


def cmd_compare(args) -> int:
    rows = compare_runs([Path(d) for d in args.run_dirs])
    width = max(len(r["label"]) for r in rows)
    header = f"{'method/strategy':<{width}}  seeds  linear(mean±std)   knn(mean±std)"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['label']:<{width}}  {r['seeds']:>5}  "
              f"{r['linear_mean']:.4f} ± {r['linear_std']:.4f}  "
              f"{r['knn_mean']:.4f} ± {r['knn_std']:.4f}")
    if args.csv:
        _write_csv(Path(args.csv),
                   ["label", "seeds", "linear_mean", "linear_std",
                    "knn_mean", "knn_std"],
                   [[r["label"], r["seeds"], r["linear_mean"], r["linear_std"],
                     r["knn_mean"], r["knn_std"]] for r in rows])
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = parse_config(run_dir / "config.json")
    blob = (run_dir / "checkpoint.bin").read_bytes()
    params = NamedParams.from_bytes(blob)
    encoder = Network(cfg.encoder_spec(), "encoder", params.group("encoder"))
    train_ds, test_ds = federation._build_datasets(cfg)
    knn = evaluation.knn_eval(encoder, train_ds, test_ds, cfg.knn_k)
    linear = evaluation.linear_eval(encoder, train_ds, test_ds,
                                    cfg.linear_epochs, cfg.linear_lr, cfg.seed)
    probe = train_ds.samples[:min(256, len(train_ds))]
    collapse = evaluation.collapse_stat(encoder, probe)
    print(f"knn_acc={knn:.4f} linear_acc={linear:.4f} collapse_stat={collapse:.6f}")
    with open(run_dir / "eval.jsonl", "a") as f:
        f.write(json.dumps({"run_id": run_id_for(cfg), "round": None,
                            "knn_acc": knn, "collapse_stat": collapse,
                            "linear_acc": linear}, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedssl",
        description="Deterministic federated self-supervised learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--config", help="JSON config file")
    run_p.add_argument("--out", help="output directory (default: $FEDSSL_OUT/<run id>)")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field by dotted path")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--rounds", type=int)
    run_p.add_argument("--num-clients", dest="num_clients", type=int)
    run_p.add_argument("--clients-per-round", dest="clients_per_round", type=int)
    run_p.add_argument("--classes-per-client", dest="classes_per_client", type=int)
    run_p.add_argument("--local-epochs", dest="local_epochs", type=int)
    run_p.add_argument("--batch-size", dest="batch_size", type=int)
    run_p.add_argument("--lr", type=float)
    run_p.add_argument("--momentum", type=float)
    run_p.add_argument("--eval-every", dest="eval_every", type=int)
    run_p.add_argument("--workers", type=int)
    run_p.add_argument("--method", choices=["byol", "simsiam", "simclr", "moco"])
    run_p.add_argument("--strategy",
                       choices=["replace", "update_both", "fedema", "constant_mu",
                                "standalone"])
    run_p.add_argument("--tau", type=float)
    run_p.add_argument("--lambda", dest="lambda_", type=float)
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="run one config over a list of values")
    sweep_p.add_argument("--config", help="base JSON config file")
    sweep_p.add_argument("--field", required=True,
                         help="dotted config path to sweep, e.g. strategy.lambda_")
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated JSON values, e.g. 0,0.2,0.4")
    sweep_p.add_argument("--out", help="sweep output directory")
    sweep_p.add_argument("--set", action="append", metavar="KEY=VALUE")
    sweep_p.set_defaults(func=cmd_sweep)

    cmp_p = sub.add_parser("compare", help="tabulate finished runs")
    cmp_p.add_argument("run_dirs", nargs="+")
    cmp_p.add_argument("--csv", help="also write the table as CSV")
    cmp_p.set_defaults(func=cmd_compare)

    eval_p = sub.add_parser("eval", help="re-evaluate a run's final checkpoint")
    eval_p.add_argument("run_dir")
    eval_p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # protocol / numeric failures
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
