"""Command-line front end driven by a declarative YAML experiment config.

Commands (exit codes: 0 success, 1 runtime failure, 2 config error):

- ``generate``            materialize the configured synthetic dataset;
- ``run``                 execute every (variant, grid cell, seed) cell,
                          resumable through the per-cell record files;
- ``analyze``             negative-transfer + uncertainty/transfer reports
                          and per-instance transfer-graph exports;
- ``inspect-checkpoint``  print a checkpoint's config and parameter inventory.

Config file layout (unknown keys anywhere are errors)::

    dataset:
      kind: imbalanced | temporal | csv
      path: DIR            # csv kind, or where generate wrote the data
      num_tasks: 5         # synthetic kinds: SyntheticSpec fields
      ...
    model:                 # ModelConfig fields except num_tasks/num_features
      hidden_size: 16
      ...
    variants:
      - family: tp_amtl
        transfer_mode: full
    train:                 # TrainConfig fields (grid, seeds included)
      learning_rate: 0.001
      seeds: [0, 1, 2, 3, 4]
    eval:
      output_dir: runs/exp1   # default under $CROSSTASK_OUTPUT_ROOT
      graph_instances: 2

The ``CROSSTASK_OUTPUT_ROOT`` environment variable prefixes relative output
directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import data as dt
from . import evaluate as ev
from .errors import ConfigError, CrosstaskError, ExperimentError
from .model import ModelConfig
from .train import GRID_RANGES, RunRecord, TrainConfig, fit
from .variants import VariantSpec, build

_DATASET_KINDS = ("imbalanced", "temporal", "csv")
_DATASET_KEYS = {"kind", "path"} | {
    f.name for f in dataclass_fields(dt.SyntheticSpec)}
_MODEL_KEYS = {f.name for f in dataclass_fields(ModelConfig)} \
    - {"num_tasks", "num_features"}
_TRAIN_KEYS = {f.name for f in dataclass_fields(TrainConfig)}
_EVAL_KEYS = {"output_dir", "graph_instances", "se_slack", "runs"}
_VARIANT_KEYS = {"family", "transfer_mode", "uncertainty_mode", "label"}


def _check_keys(section: str, payload: dict, allowed: set) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {unknown}")


class ExperimentConfig:
    """Fully validated view of the YAML file; nothing runs before this."""

    def __init__(self, payload: dict, base_dir: Path):
        if not isinstance(payload, dict):
            raise ConfigError("config root must be a mapping")
        _check_keys("config", payload,
                    {"dataset", "model", "variants", "train", "eval"})
        self.base_dir = base_dir

        dataset = payload.get("dataset") or {}
        _check_keys("dataset", dataset, _DATASET_KEYS)
        kind = dataset.get("kind")
        if kind not in _DATASET_KINDS:
            raise ConfigError(
                f"dataset.kind must be one of {_DATASET_KINDS}, got {kind!r}")
        self.dataset_kind = kind
        self.dataset_path = dataset.get("path")
        if kind == "csv" and not self.dataset_path:
            raise ConfigError("dataset.kind=csv requires dataset.path")
        spec_fields = {k: v for k, v in dataset.items()
                       if k not in ("kind", "path")}
        self.synthetic_spec = None
        if kind != "csv":
            if "relations" in spec_fields:
                spec_fields["relations"] = tuple(
                    dt.TransferRelation(**r) for r in spec_fields["relations"])
            for key in ("samples_per_task", "label_noise", "split_fractions"):
                if key in spec_fields:
                    spec_fields[key] = tuple(spec_fields[key])
            try:
                self.synthetic_spec = dt.SyntheticSpec(**spec_fields)
            except TypeError as exc:
                raise ConfigError(f"dataset: {exc}")

        model = payload.get("model") or {}
        _check_keys("model", model, _MODEL_KEYS)
        self.model_overrides = model

        variants = payload.get("variants")
        if not variants:
            raise ConfigError("variants must list at least one family")
        self.variants = []
        for i, entry in enumerate(variants):
            _check_keys(f"variants[{i}]", entry, _VARIANT_KEYS)
            self.variants.append(VariantSpec(**entry))
        names = [v.name for v in self.variants]
        if len(names) != len(set(names)):
            raise ConfigError(f"duplicate variant names: {names}")

        train = payload.get("train") or {}
        _check_keys("train", train, _TRAIN_KEYS)
        self.train_config = TrainConfig.from_dict(train)
        if self.train_config.grid:
            for key, values in self.train_config.grid.items():
                bad = [v for v in values if v not in GRID_RANGES[key]]
                if bad:
                    raise ConfigError(
                        f"train.grid.{key} values {bad} outside the "
                        f"documented ranges {GRID_RANGES[key]}")

        eval_section = payload.get("eval") or {}
        _check_keys("eval", eval_section, _EVAL_KEYS)
        self.output_dir = eval_section.get("output_dir", "crosstask-exp")
        self.graph_instances = int(eval_section.get("graph_instances", 2))
        self.se_slack = float(eval_section.get("se_slack", 0.0))
        runs = eval_section.get("runs")
        if runs is not None and int(runs) != len(self.train_config.seeds):
            raise ConfigError(
                f"eval.runs={runs} disagrees with train.seeds "
                f"({len(self.train_config.seeds)} seeds)")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with open(path) as fh:
            payload = yaml.safe_load(fh)
        return cls(payload, path.parent)

    def resolve_output(self, override=None) -> Path:
        out = Path(override) if override else Path(self.output_dir)
        if not out.is_absolute():
            root = os.environ.get("CROSSTASK_OUTPUT_ROOT", ".")
            out = Path(root) / out
        return out

    def load_dataset(self) -> dt.DatasetSplit:
        if self.dataset_kind == "csv" or self.dataset_path:
            path = Path(self.dataset_path)
            if not path.is_absolute():
                path = self.base_dir / path
            if path.exists():
                return dt.ingest_csv(path)
            if self.dataset_kind == "csv":
                raise ConfigError(f"dataset.path does not exist: {path}")
        if self.dataset_kind == "imbalanced":
            return dt.generate_imbalanced_tasks(self.synthetic_spec)
        return dt.generate_temporal_tasks(self.synthetic_spec)


# -- generate -----------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, out_dir) -> int:
    if config.dataset_kind == "csv":
        raise ConfigError("dataset.kind=csv: nothing to generate")
    split = (dt.generate_imbalanced_tasks(config.synthetic_spec)
             if config.dataset_kind == "imbalanced"
             else dt.generate_temporal_tasks(config.synthetic_spec))
    out = Path(out_dir) if out_dir else config.resolve_output() / "dataset"
    manifest = dt.export_dataset(split, out)
    print(f"wrote dataset under {out}")
    print(f"manifest: {manifest}")
    return 0


# -- run -----------------------------------------------------------------


def _cell_name(variant: VariantSpec, cell_id: str, seed: int) -> str:
    return f"{variant.name}__{cell_id}__seed{seed}"


def _grid_cells_with_ids(grid: dict | None):
    if not grid:
        return [({}, "base")]
    from .train import _grid_cells
    cells = []
    for cell in _grid_cells(grid):
        tag = "-".join(f"{k}={cell[k]}" for k in sorted(cell)) or "base"
        cells.append((cell, tag))
    return cells


def _run_cell(payload: dict) -> dict:
    """One (variant, cell, seed) execution; a pure function of its payload."""
    from dataclasses import replace

    config = ExperimentConfig(payload["config"], Path(payload["base_dir"]))
    split = config.load_dataset()
    variant = VariantSpec.from_dict(payload["variant"])
    seed = payload["seed"]
    cell = payload["cell"]
    model_over = {k: v for k, v in cell.items() if k in _MODEL_KEYS}
    train_over = {k: v for k, v in cell.items() if k not in _MODEL_KEYS}
    model_config = ModelConfig(
        num_tasks=split.num_tasks,
        num_features=split.train.inputs.shape[2],
        **{**config.model_overrides, **model_over})
    train_config = replace(config.train_config, grid=None,
                           seeds=(seed,), **train_over)
    if train_config.dropout_rate is not None and "dropout_rate" not in model_over:
        model_config = replace(model_config,
                               dropout_rate=train_config.dropout_rate)
    model = build(variant, model_config, seed=seed)
    record = fit(model, split, train_config, seed=seed,
                 checkpoint_path=payload["checkpoint_path"])
    record.variant_name = variant.name
    record.variant = variant.to_dict()
    return record.to_dict()


def cmd_run(config: ExperimentConfig, payload: dict, out_dir=None,
            workers: int = 1) -> int:
    out = config.resolve_output(out_dir)
    cells_dir = out / "cells"
    ckpt_dir = out / "checkpoints"
    results_dir = out / "results"
    for sub in (cells_dir, ckpt_dir, results_dir):
        sub.mkdir(parents=True, exist_ok=True)

    jobs = []
    for variant in config.variants:
        for cell, tag in _grid_cells_with_ids(config.train_config.grid):
            for seed in config.train_config.seeds:
                name = _cell_name(variant, tag, seed)
                record_path = cells_dir / f"{name}.json"
                if record_path.exists():
                    continue
                jobs.append({
                    "name": name,
                    "record_path": record_path,
                    "payload": {
                        "config": payload,
                        "base_dir": str(config.base_dir),
                        "variant": variant.to_dict(),
                        "cell": cell,
                        "seed": seed,
                        "checkpoint_path": str(ckpt_dir / f"{name}.ckpt"),
                    }})

    failures = []
    if workers > 1 and jobs:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = pool.map(_run_cell_safe,
                                [job["payload"] for job in jobs])
            for job, outcome in zip(jobs, outcomes):
                _store_outcome(job, outcome, failures)
    else:
        for job in jobs:
            _store_outcome(job, _run_cell_safe(job["payload"]), failures)

    records = []
    for record_file in sorted(cells_dir.glob("*.json")):
        with open(record_file) as fh:
            records.append(RunRecord.from_dict(json.load(fh)))
    if records:
        by_variant = {}
        for record in records:
            by_variant.setdefault(record.variant_name, []).append(record)
        counts = {len(v) for v in by_variant.values()}
        expected = len(counts) == 1
        try:
            table = ev.aggregate(records, n_runs=None if not expected
                                 else counts.pop())
            (results_dir / "table.txt").write_text(table.to_text())
            with open(results_dir / "table.json", "w") as fh:
                json.dump(table.to_records(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            print(table.to_text())
        except ConfigError as exc:
            print(f"result table deferred: {exc}", file=sys.stderr)

    manifest = {"completed": sorted(p.stem for p in cells_dir.glob("*.json")),
                "failed": failures}
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failures:
        print(f"{len(failures)} cell(s) failed", file=sys.stderr)
        return 1
    print(f"experiment complete under {out}")
    return 0


def _run_cell_safe(payload: dict) -> dict:
    try:
        return {"ok": True, "record": _run_cell(payload)}
    except Exception as exc:  # recorded per cell, surfaced via exit code
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}",
                "trace": traceback.format_exc()}


def _store_outcome(job, outcome, failures) -> None:
    if outcome["ok"]:
        with open(job["record_path"], "w") as fh:
            json.dump(outcome["record"], fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        failure_path = job["record_path"].with_suffix(".failed.json")
        with open(failure_path, "w") as fh:
            json.dump(outcome, fh, indent=2)
            fh.write("\n")
        failures.append({"cell": job["name"], "error": outcome["error"]})


# -- analyze -------------------------------------------------------------


def _load_records(out: Path) -> list[RunRecord]:
    cells_dir = out / "cells"
    records = []
    for record_file in sorted(cells_dir.glob("*.json")):
        with open(record_file) as fh:
            records.append(RunRecord.from_dict(json.load(fh)))
    if not records:
        raise ExperimentError(f"no completed cells under {cells_dir}")
    return records


def cmd_analyze(config: ExperimentConfig, out_dir=None) -> int:
    out = config.resolve_output(out_dir)
    records = _load_records(out)
    analysis_dir = out / "analysis"
    graphs_dir = analysis_dir / "graphs"
    graphs_dir.mkdir(parents=True, exist_ok=True)

    expected = {_cell_name(v, tag, seed)
                for v in config.variants
                for _, tag in _grid_cells_with_ids(config.train_config.grid)
                for seed in config.train_config.seeds}
    have = {p.stem for p in (out / "cells").glob("*.json")}
    missing = sorted(expected - have)
    if missing:
        print("incomplete experiment; missing cells:", file=sys.stderr)
        for name in missing:
            print(f"  {name}", file=sys.stderr)
        return 1

    by_variant = {}
    for record in records:
        by_variant.setdefault(record.variant_name, []).append(record)
    table = ev.aggregate(records, n_runs=None)

    report = {}
    if "stl" in by_variant:
        stl_row = table.row("stl")
        stl_err = table.stderr["stl"]
        others = {name: table.row(name) for name in table.variants
                  if name != "stl"}
        report = ev.negative_transfer_report(
            stl_row, others, se_slack=config.se_slack, stl_stderr=stl_err)
        with open(analysis_dir / "negative_transfer.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"negative-transfer flags: {report['counts_per_variant']}")
    else:
        print("no 'stl' variant: negative-transfer report skipped")

    split = config.load_dataset()
    correlations = {}
    direction_checks = {}
    for name, runs in by_variant.items():
        graphs_written = 0
        stats_per_seed = []
        direction_per_seed = []
        for record in sorted(runs, key=lambda r: r.seed):
            if not record.checkpoint_path \
                    or not Path(record.checkpoint_path).exists():
                continue
            model = ckpt.load_model(record.checkpoint_path)
            take = min(config.graph_instances, split.test.num_instances)
            batch = split.test.select(np.arange(take))
            graphs = model.export_transfer_graph(batch)
            if not graphs:
                note = analysis_dir / f"{name}_no_transfer.txt"
                note.write_text(
                    f"variant {name!r} performs no gated transfer; "
                    "the transfer-graph export is empty by construction.\n")
                break
            traces = []
            for i, graph in enumerate(graphs):
                graph.write_csv(graphs_dir /
                                f"{name}__seed{record.seed}__instance{i}.csv")
                graphs_written += 1
                traces.extend(ev.traces_from_graph(graph))
            try:
                stats_per_seed.append(
                    ev.uncertainty_transfer_correlation(traces))
            except CrosstaskError:
                pass
            relations = split.info.get("relations") or []
            if relations:
                direction_per_seed.append(
                    _direction_check(graphs, relations))
        if stats_per_seed:
            correlations[name] = {
                "outgoing_rho_mean": float(np.mean(
                    [s["outgoing"]["rho"] for s in stats_per_seed])),
                "incoming_rho_mean": float(np.mean(
                    [s["incoming"]["rho"] for s in stats_per_seed])),
                "per_seed": stats_per_seed,
            }
        if direction_per_seed:
            direction_checks[name] = direction_per_seed
        if graphs_written:
            print(f"{name}: wrote {graphs_written} transfer graph file(s)")

    if correlations:
        with open(analysis_dir / "uncertainty_correlation.json", "w") as fh:
            json.dump(correlations, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, stats in correlations.items():
            print(f"{name}: mean Spearman rho outgoing="
                  f"{stats['outgoing_rho_mean']:+.3f} "
                  f"incoming={stats['incoming_rho_mean']:+.3f}")
    if direction_checks:
        with open(analysis_dir / "direction_check.json", "w") as fh:
            json.dump(direction_checks, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"analysis written under {analysis_dir}")
    return 0


def _direction_check(graphs, relations) -> dict:
    """Mean transfer weight along the true (i, i+lag) pairs vs reversed."""
    out = {}
    for rel in relations:
        rel = rel if isinstance(rel, dt.TransferRelation) \
            else dt.TransferRelation(**rel)
        forward, reverse = [], []
        for graph in graphs:
            steps = graph.valid_steps
            for i in range(steps - rel.lag):
                forward.append(graph.alpha[rel.source, rel.target,
                                           i, i + rel.lag])
                reverse.append(graph.alpha[rel.target, rel.source,
                                           i, i + rel.lag])
        out[f"{rel.source}->{rel.target}@lag{rel.lag}"] = {
            "forward_mean": float(np.mean(forward)),
            "reverse_mean": float(np.mean(reverse)),
        }
    return out


# -- inspect -------------------------------------------------------------


def cmd_inspect_checkpoint(path) -> int:
    info = ckpt.describe(path)
    print(json.dumps(info["meta"], indent=2, sort_keys=True))
    print(f"parameters: {info['parameter_count']} values")
    for entry in info["parameters"]:
        print(f"  {entry['name']:<28} {str(entry['shape']):<14} "
              f"|w|={entry['norm']:.6g}")
    return 0


# -- entry point ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosstask",
        description="multi-task time-series prediction with uncertainty-gated "
                    "asymmetric transfer")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="materialize the synthetic dataset")
    gen.add_argument("-c", "--config", required=True)
    gen.add_argument("-o", "--out", default=None)

    run = sub.add_parser("run", help="execute all experiment cells")
    run.add_argument("-c", "--config", required=True)
    run.add_argument("-o", "--out", default=None)
    run.add_argument("--workers", type=int, default=1,
                     help="parallel cells (each cell stays single-threaded)")

    ana = sub.add_parser("analyze", help="reports + transfer-graph exports")
    ana.add_argument("-c", "--config", required=True)
    ana.add_argument("-o", "--out", default=None,
                     help="experiment directory (defaults to eval.output_dir)")

    ins = sub.add_parser("inspect-checkpoint", help="describe a checkpoint")
    ins.add_argument("path")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "inspect-checkpoint":
            return cmd_inspect_checkpoint(args.path)
        with open(args.config) as fh:
            payload = yaml.safe_load(fh)
        config = ExperimentConfig(payload, Path(args.config).parent)
        if args.command == "generate":
            return cmd_generate(config, args.out)
        if args.command == "run":
            return cmd_run(config, payload, args.out, workers=args.workers)
        return cmd_analyze(config, args.out)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CrosstaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
