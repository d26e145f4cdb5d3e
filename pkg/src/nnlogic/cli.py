"""Pipeline driver: train, hat, compile, verify, report, rank-weights and
explore-stages subcommands over a single TOML config with flag overrides.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from . import cost, datasets, qmodel, synth, timing, train, verilog
from .netlist import NetlistError, load_netlist, save_netlist

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    name: str = "mlp"
    dataset: str = ""  # CSV path or synthetic spec (separable:..., teacher:...)
    task: str = "classification"
    out_dir: str = "out"
    arch: list = field(default_factory=lambda: [8])  # hidden layer sizes
    seed: int = 0
    epochs: int = 30
    hat_epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    sparsity: float = 0.0
    finetune_epochs: int = 5
    quantile: float = 1.0
    hat_n: int = 40
    hat_step: int = 10
    hat_eps: float = 0.01
    extra_stages: int = 0  # extra flop ranks inserted before retiming
    retime: bool = True
    run_stages: list = field(default_factory=list)  # for the run subcommand
    verify_vectors: int = 10_000
    explore_max_k: int = 4
    timing: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    jobs: int = 1

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            epochs=self.epochs,
            hat_epochs=self.hat_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            hat_n=self.hat_n,
            hat_step=self.hat_step,
            hat_eps=self.hat_eps,
        )

    def timing_model(self) -> timing.TimingModel:
        kw = dict(self.timing)
        base = timing.TimingModel()
        merged = dict(base.delay)
        merged.update(kw.pop("delay", {}))
        return timing.TimingModel(
            delay=merged,
            clk_to_q=kw.pop("clk_to_q", base.clk_to_q),
            setup=kw.pop("setup", base.setup),
        )

    def cost_model(self) -> cost.CostModel:
        kw = dict(self.cost)
        base = cost.CostModel()
        transistors = dict(base.transistors)
        transistors.update(kw.pop("transistors", {}))
        return cost.CostModel(
            transistors=transistors,
            flop_transistors=kw.pop("flop_transistors", base.flop_transistors),
            toggle_weight=dict(transistors),
            flop_clock_energy=kw.pop("flop_clock_energy", base.flop_clock_energy),
        )


def load_config(path: str | None, overrides: dict) -> PipelineConfig:
    doc = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"bad TOML in {path}: {e}") from e
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**doc)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _load_dataset(cfg: PipelineConfig) -> datasets.Dataset:
    spec = cfg.dataset
    if not spec:
        raise ConfigError("config field 'dataset' is required")
    if spec.startswith(("separable:", "teacher:")):
        try:
            return _synthetic_dataset(cfg, spec)
        except (ValueError, IndexError) as e:
            raise ConfigError(f"bad synthetic dataset spec {spec!r}: {e}") from e
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {spec}")
    try:
        return datasets.load_csv(path, task=cfg.task, seed=cfg.seed)
    except ValueError as e:
        raise ConfigError(f"bad dataset {spec}: {e}") from e


def _synthetic_dataset(cfg: PipelineConfig, spec: str) -> datasets.Dataset:
    if spec.startswith("separable:"):
        _, dim, n = spec.split(":")
        return datasets.make_separable(int(n), int(dim), seed=cfg.seed)
    parts = spec.split(":")
    arch = [int(v) for v in parts[1].split("-")]
    n = int(parts[2])
    choices = None
    if len(parts) > 3 and parts[3] == "pow2":
        choices = sorted(
            {0} | {1 << k for k in range(7)} | {-(1 << k) for k in range(7)}
        )
    _, data = datasets.make_teacher_dataset(
        arch, n, seed=cfg.seed, weight_choices=choices, task=cfg.task
    )
    return data


def _out_dir(cfg: PipelineConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_log(path: Path, rows: list, columns: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(cfg: PipelineConfig) -> int:
    data = _load_dataset(cfg)
    out = _out_dir(cfg)
    tc = cfg.train_config()
    log: list = []
    latent, model = train.train_qat(data, cfg.arch, tc, log=log)
    if cfg.sparsity > 0:
        latent = train.prune_unstructured(latent, cfg.sparsity)
        latent, model = train.train_qat(
            data, cfg.arch, tc, init=latent, epochs=cfg.finetune_epochs, log=log
        )
    model = train.profile_adder_widths(model, data, cfg.quantile)
    model = qmodel.QuantizedMLP(layers=model.layers, name=cfg.name)
    qmodel.save_model(model, out / "model_qat.json")
    _save_latent(latent, out / "latent_qat.json")
    metric = train.metric_for(data)
    val = train.evaluate(model, data.subset("val"), metric)
    test = train.evaluate(model, data.subset("test"), metric)
    _write_log(out / "train_log.csv", log,
               ["epoch", "tag", "loss", "val_metric", "set_size"])
    summary = {"metric": metric, "val": val, "test": test}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"trained {cfg.name}: val {metric} {val:.4f}, test {metric} {test:.4f}")
    return EXIT_OK


def cmd_hat(cfg: PipelineConfig) -> int:
    data = _load_dataset(cfg)
    out = _out_dir(cfg)
    latent_path = out / "latent_qat.json"
    if not latent_path.exists():
        raise ConfigError(f"QAT model missing, run train first: {latent_path}")
    latent = _load_latent(latent_path)
    table = cost.rank_weight_areas(cfg.cost_model())
    tc = cfg.train_config()
    log: list = []
    model, state = train.train_hat(latent, data, table, tc, eps=cfg.hat_eps, log=log)
    model = train.profile_adder_widths(model, data, cfg.quantile)
    model = qmodel.QuantizedMLP(layers=model.layers, name=cfg.name + "_hat")
    qmodel.save_model(model, out / "model_hat.json")
    selected = sorted(state.selected)
    (out / "selected_weights.txt").write_text(
        "\n".join(str(w) for w in selected) + "\n"
    )
    _write_log(out / "hat_log.csv", log,
               ["epoch", "tag", "loss", "val_metric", "set_size"])
    rows = [{"set_size": n, "val_metric": v} for n, v in state.history]
    _write_log(out / "hat_selection.csv", rows, ["set_size", "val_metric"])
    print(
        f"hardware-aware training done: |set| {len(state.selected)}, "
        f"baseline {state.baseline:.4f}, final {state.history[-1][1]:.4f}"
    )
    return EXIT_OK


def cmd_compile(cfg: PipelineConfig, model_file: str | None = None) -> int:
    out = _out_dir(cfg)
    path = Path(model_file) if model_file else out / "model_qat.json"
    if not path.exists():
        raise ConfigError(f"model file not found: {path}")
    model = qmodel.load_model(path)
    net = synth.flatten_network(model)
    tm = cfg.timing_model()
    if cfg.extra_stages > 0:
        net = timing.insert_pipeline_stages(net, cfg.extra_stages)
    period_before = timing.sta_min_period(net, tm).period
    if cfg.retime:
        res = timing.retime(net, tm)
        net = res.netlist
        period = res.period
    else:
        period = period_before
    save_netlist(net, out / "netlist.json")
    (out / "design.v").write_text(verilog.emit_verilog(net, module_name=cfg.name))
    cm = cfg.cost_model()
    stats = net.stats()
    report = {
        "area_transistors": cost.estimate_area(net, cm),
        "period": period,
        "period_before_retime": period_before,
        "depth": stats["depth"],
        "flops": stats["flops"],
        "cells": stats["total_cells"],
        "latency": net.latency,
    }
    (out / "compile_stats.json").write_text(json.dumps(report, indent=1) + "\n")
    print(
        f"compiled {model.name}: {report['cells']} cells, {report['flops']} flops, "
        f"area {report['area_transistors']}, period {report['period']}"
    )
    return EXIT_OK


def cmd_verify(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    model_path = out / "model_qat.json"
    net_path = out / "netlist.json"
    for p in (model_path, net_path):
        if not p.exists():
            raise ConfigError(f"missing stage output: {p}")
    model = qmodel.load_model(model_path)
    net = load_netlist(net_path)
    extra = None
    if cfg.dataset:
        try:
            extra = _load_dataset(cfg).subset("test").inputs
        except ConfigError:
            extra = None
        if extra is not None and extra.shape[1] != model.n_in:
            extra = None  # dataset does not exercise this model
    res = synth.verify_against_reference(
        net, model, n_vectors=cfg.verify_vectors, seed=cfg.seed, extra_vectors=extra
    )
    if res.equivalent:
        print(f"equivalent over {res.vectors} vectors")
        return EXIT_OK
    print("MISMATCH")
    print(f"  input vector: {res.mismatch_input}")
    print(f"  output y{res.mismatch_output}: expected {res.expected}, got {res.got}")
    return EXIT_VERIFY


def cmd_rank_weights(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    table = cost.rank_weight_areas(cfg.cost_model())
    cost.weight_table_to_csv(table, out / "weight_areas.csv")
    cheap = ", ".join(str(w) for w in table.order[:8])
    print(f"weight area table written; cheapest: {cheap}")
    return EXIT_OK


def cmd_explore_stages(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    net_path = out / "netlist.json"
    if not net_path.exists():
        raise ConfigError(f"missing stage output: {net_path}")
    base = load_netlist(net_path)
    rows = timing.explore_stages(base, cfg.timing_model(), max_k=cfg.explore_max_k)
    _write_log(out / "explore_stages.csv", rows, ["k", "period", "flops"])
    print("k/period/flops: " + "; ".join(
        f"{r['k']}/{r['period']}/{r['flops']}" for r in rows
    ))
    return EXIT_OK


def cmd_report(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    model_path = out / "model_qat.json"
    if not model_path.exists():
        raise ConfigError(f"missing stage output: {model_path}")
    model = qmodel.load_model(model_path)
    cm = cfg.cost_model()
    tm = cfg.timing_model()

    table = cost.rank_weight_areas(cm)
    cost.weight_table_to_csv(table, out / "weight_areas.csv")

    embedded = synth.flatten_network(model)
    generic = synth.flatten_network_generic(model)
    stim_seed = cfg.seed + 3
    stim = _power_stimulus(embedded, model, 200, stim_seed)
    stim_generic = _power_stimulus(generic, model, 200, stim_seed,
                                   fixed=synth.weight_input_assignment(model))
    rows = [
        _build_row("generic-baseline", generic, stim_generic, cm, tm),
        _build_row("weight-embedded", embedded, stim, cm, tm),
    ]
    hat_path = out / "model_hat.json"
    if hat_path.exists():
        hat_model = qmodel.load_model(hat_path)
        hat_net = synth.flatten_network(hat_model)
        hat_stim = _power_stimulus(hat_net, hat_model, 200, stim_seed)
        rows.append(_build_row("hardware-aware", hat_net, hat_stim, cm, tm))
    _write_log(
        out / "comparison.csv",
        rows,
        ["build", "area_transistors", "relative_power", "period", "cells", "flops"],
    )

    explore = timing.explore_stages(embedded, tm, max_k=cfg.explore_max_k)
    _write_log(out / "explore_stages.csv", explore, ["k", "period", "flops"])
    print("report written: weight_areas.csv, comparison.csv, explore_stages.csv")
    return EXIT_OK


def _power_stimulus(net, model, cycles: int, seed: int, fixed=None):
    import random as _random

    rng = _random.Random(seed)
    stim = []
    for _ in range(cycles):
        assign = {
            f"x{i}": rng.randint(0, 255) for i in range(model.n_in)
        }
        if fixed:
            assign.update(fixed)
        stim.append(assign)
    return stim


def _build_row(name, net, stim, cm, tm):
    return {
        "build": name,
        "area_transistors": cost.estimate_area(net, cm),
        "relative_power": round(cost.estimate_power(net, stim, cm), 3),
        "period": timing.sta_min_period(net, tm).period,
        "cells": len(net.cells),
        "flops": len(net.flops),
    }


def _save_latent(m: train.FloatMLP, path: Path) -> None:
    doc = {
        "weights": [w.tolist() for w in m.weights],
        "activations": m.activations,
        "a_scales": m.a_scales,
        "masks": None if m.masks is None else [mk.tolist() for mk in m.masks],
    }
    path.write_text(json.dumps(doc) + "\n")


def _load_latent(path: Path) -> train.FloatMLP:
    import numpy as np

    doc = json.loads(path.read_text())
    return train.FloatMLP(
        weights=[np.array(w, dtype=np.float64) for w in doc["weights"]],
        activations=list(doc["activations"]),
        a_scales=[float(v) for v in doc["a_scales"]],
        masks=None
        if doc["masks"] is None
        else [np.array(mk, dtype=np.float64) for mk in doc["masks"]],
    )


# ---------------------------------------------------------------------------


CANONICAL_STAGES = ("train", "hat", "compile", "verify", "report")

_STAGE_FN = {
    "train": cmd_train,
    "hat": cmd_hat,
    "compile": cmd_compile,
    "verify": cmd_verify,
    "report": cmd_report,
}


def cmd_run(cfg: PipelineConfig, stages: list) -> int:
    """Run several pipeline stages in order; the list must be a valid
    subsequence of train, hat, compile, verify, report."""
    unknown = [s for s in stages if s not in CANONICAL_STAGES]
    if unknown:
        raise ConfigError(f"unknown stages: {unknown}")
    order = [CANONICAL_STAGES.index(s) for s in stages]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ConfigError(
            f"stages must be a subsequence of {', '.join(CANONICAL_STAGES)}"
        )
    if not stages:
        raise ConfigError("no stages to run (set run_stages or --stages)")
    for stage in stages:
        code = _STAGE_FN[stage](cfg)
        if code != EXIT_OK:
            return code
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnlogic",
        description="Compile quantized MLPs into weight-embedded logic circuits",
    )
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out-dir", help="override output directory")
    parser.add_argument(
        "--stages", help="comma-separated stage list for the run subcommand"
    )
    parser.add_argument("--jobs", type=int, help="worker count hint")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="quantization-aware training")
    sub.add_parser("hat", help="hardware-aware training")
    pc = sub.add_parser("compile", help="flatten a model into a netlist")
    pc.add_argument("--model", help="model JSON (default: out_dir/model_qat.json)")
    sub.add_parser("verify", help="check netlist against the reference model")
    sub.add_parser("report", help="emit weight-area, comparison and stage CSVs")
    sub.add_parser("rank-weights", help="emit the weight area table")
    sub.add_parser("explore-stages", help="stage-count versus period table")
    sub.add_parser("run", help="run the stage list from config or --stages")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "jobs": args.jobs,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "hat":
            return cmd_hat(cfg)
        if args.command == "compile":
            return cmd_compile(cfg, model_file=args.model)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        if args.command == "rank-weights":
            return cmd_rank_weights(cfg)
        if args.command == "explore-stages":
            return cmd_explore_stages(cfg)
        if args.command == "run":
            stages = (
                [s.strip() for s in args.stages.split(",") if s.strip()]
                if args.stages
                else list(cfg.run_stages)
            )
            return cmd_run(cfg, stages)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, qmodel.ModelError, NetlistError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except train.TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except AssertionError as e:
        print(f"internal invariant violation: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
