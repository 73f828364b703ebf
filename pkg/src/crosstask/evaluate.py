"""Metrics, multi-run aggregation and transfer/uncertainty analyses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import (ConfigError, UndefinedCorrelationError,
                     UndefinedMetricError)
from .transfer import TransferGraph


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Rank-based (Mann-Whitney) with ties counted one half.  Invariant under
    strictly increasing transforms of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be equal-length vectors")
    positives = labels == 1
    n_pos = int(positives.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            "AUROC undefined: labels contain a single class")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks across tied score groups
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    groups = np.split(np.arange(scores.size), boundaries)
    for group in groups:
        if group.size > 1:
            ranks[order[group]] = ranks[order[group]].mean()
    rank_sum = ranks[positives].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def masked_task_aurocs(probs: np.ndarray, labels: np.ndarray,
                       mask: np.ndarray) -> dict[int, float]:
    """Per-task AUROC over labeled instances; tasks lacking both classes
    are omitted."""
    out: dict[int, float] = {}
    for d in range(labels.shape[1]):
        keep = mask[:, d]
        if keep.sum() == 0:
            continue
        y = labels[keep, d]
        if y.min() == y.max():
            continue
        out[d] = auroc(probs[keep, d], y)
    return out


def macro_auroc(probs, labels, mask) -> float:
    per_task = masked_task_aurocs(probs, labels, mask)
    if not per_task:
        raise UndefinedMetricError("no task has both classes labeled")
    return float(np.mean(list(per_task.values())))


# -- result tables ------------------------------------------------------------


@dataclass
class ResultTable:
    """Per-variant, per-task mean AUROC with standard errors over runs.

    The macro column averages tasks within each run first, then averages
    runs.  ``from_cells`` admits transcribed external rows (e.g. published
    numbers) alongside computed ones.
    """

    tasks: list
    variants: list
    mean: dict = field(default_factory=dict)    # variant -> task -> float
    stderr: dict = field(default_factory=dict)  # variant -> task -> float
    macro: dict = field(default_factory=dict)   # variant -> (mean, stderr)
    n_runs: dict = field(default_factory=dict)

    @classmethod
    def from_cells(cls, cells: dict, tasks=None) -> "ResultTable":
        """Build from {variant: {task: (mean, stderr)}} transcriptions."""
        variants = list(cells)
        tasks = list(tasks) if tasks is not None else \
            sorted({t for row in cells.values() for t in row})
        table = cls(tasks=tasks, variants=variants)
        for variant, row in cells.items():
            table.mean[variant] = {t: float(row[t][0]) for t in row}
            table.stderr[variant] = {t: float(row[t][1]) for t in row}
            means = [table.mean[variant][t] for t in tasks if t in row]
            table.macro[variant] = (float(np.mean(means)), float("nan"))
            table.n_runs[variant] = 0
        return table

    def row(self, variant) -> dict:
        return dict(self.mean[variant])

    def macro_mean(self, variant) -> float:
        return self.macro[variant][0]

    def to_records(self) -> list[dict]:
        rows = []
        for variant in self.variants:
            for task in self.tasks:
                if task not in self.mean[variant]:
                    continue
                rows.append({
                    "variant": str(variant), "task": task,
                    "mean_auroc": self.mean[variant][task],
                    "stderr": self.stderr[variant][task],
                    "n_runs": self.n_runs.get(variant, 0),
                })
            rows.append({
                "variant": str(variant), "task": "__macro__",
                "mean_auroc": self.macro[variant][0],
                "stderr": self.macro[variant][1],
                "n_runs": self.n_runs.get(variant, 0),
            })
        return rows

    def to_text(self) -> str:
        headers = ["variant"] + [str(t) for t in self.tasks] + ["macro"]
        lines = []
        best = {}
        for task in self.tasks:
            values = [self.mean[v][task] for v in self.variants
                      if task in self.mean[v]]
            if values:
                best[task] = max(values)
        macro_best = max(self.macro[v][0] for v in self.variants)
        for variant in self.variants:
            cells = [str(variant)]
            for task in self.tasks:
                if task not in self.mean[variant]:
                    cells.append("-")
                    continue
                m, s = self.mean[variant][task], self.stderr[variant][task]
                mark = "*" if m == best.get(task) else " "
                cells.append(f"{m:.4f}±{s:.4f}{mark}")
            m, s = self.macro[variant]
            mark = "*" if m == macro_best else " "
            stext = "" if np.isnan(s) else f"±{s:.4f}"
            cells.append(f"{m:.4f}{stext}{mark}")
            lines.append(cells)
        widths = [max(len(row[i]) for row in [headers] + lines)
                  for i in range(len(headers))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [fmt.format(*headers)]
        out += [fmt.format(*row) for row in lines]
        return "\n".join(out) + "\n"


def aggregate(records, n_runs: int = 5) -> ResultTable:
    """Mean and standard error (sample stddev / sqrt(n)) per (variant, task).

    ``records`` is an iterable of RunRecord-like objects carrying
    ``variant_name``, ``seed`` and ``test_auroc`` (task -> value).  Every
    (variant, task) cell needs at least two runs.  Permutation-invariant in
    record order.
    """
    by_variant: dict[str, list] = {}
    for record in records:
        by_variant.setdefault(record.variant_name, []).append(record)
    tasks = sorted({task for runs in by_variant.values()
                    for r in runs for task in r.test_auroc})
    table = ResultTable(tasks=tasks, variants=sorted(by_variant))
    for variant, runs in sorted(by_variant.items()):
        runs = sorted(runs, key=lambda r: r.seed)
        if len(runs) < 2:
            raise ConfigError(
                f"variant {variant!r} has {len(runs)} run(s); need >= 2")
        if n_runs is not None and len(runs) != n_runs:
            raise ConfigError(
                f"variant {variant!r} has {len(runs)} runs, expected {n_runs}")
        table.mean[variant] = {}
        table.stderr[variant] = {}
        per_run_macro = []
        for task in tasks:
            values = [r.test_auroc[task] for r in runs if task in r.test_auroc]
            if len(values) != len(runs):
                raise ConfigError(
                    f"variant {variant!r} missing task {task!r} in some runs")
            values = np.asarray(values)
            table.mean[variant][task] = float(values.mean())
            spread = 0.0 if np.all(values == values[0]) \
                else float(values.std(ddof=1) / np.sqrt(len(values)))
            table.stderr[variant][task] = spread
        for r in runs:
            per_run_macro.append(float(np.mean(list(r.test_auroc.values()))))
        per_run_macro = np.asarray(per_run_macro)
        table.macro[variant] = (
            float(per_run_macro.mean()),
            float(per_run_macro.std(ddof=1) / np.sqrt(len(per_run_macro))))
        table.n_runs[variant] = len(runs)
    return table


# -- negative transfer ---------------------------------------------------


def negative_transfer_report(stl_row, mtl_table, se_slack: float = 0.0,
                             stl_stderr=None) -> dict:
    """Flag every (variant, task) whose mean AUROC falls below the single-task
    counterpart.

    ``stl_row`` maps task -> mean AUROC for the single-task baseline;
    ``mtl_table`` is either a ResultTable or {variant: {task: mean}}.  With
    ``se_slack`` > 0, a flag needs the drop to exceed
    ``se_slack * sqrt(se_stl^2 + se_variant^2)``.
    """
    if isinstance(mtl_table, ResultTable):
        variants = [v for v in mtl_table.variants]
        rows = {v: mtl_table.mean[v] for v in variants}
        errs = {v: mtl_table.stderr[v] for v in variants}
    else:
        rows = {v: dict(row) for v, row in mtl_table.items()}
        errs = {v: {t: 0.0 for t in row} for v, row in mtl_table.items()}
    stl_row = dict(stl_row)
    stl_stderr = dict(stl_stderr) if stl_stderr else {t: 0.0 for t in stl_row}

    flags = []
    for variant, row in rows.items():
        if set(row) != set(stl_row):
            raise ConfigError(
                f"task sets differ: {sorted(row)} vs {sorted(stl_row)}")
        for task in sorted(row, key=str):
            margin = se_slack * float(np.hypot(stl_stderr.get(task, 0.0),
                                               errs[variant].get(task, 0.0)))
            if row[task] < stl_row[task] - margin:
                flags.append({"variant": str(variant), "task": task,
                              "mtl_auroc": float(row[task]),
                              "stl_auroc": float(stl_row[task])})
    summary = {}
    for flag in flags:
        summary[flag["variant"]] = summary.get(flag["variant"], 0) + 1
    for variant in rows:
        summary.setdefault(str(variant), 0)
    return {"flags": flags, "counts_per_variant": summary,
            "se_slack": se_slack}


# -- uncertainty / transfer analyses ------------------------------------------


@dataclass
class UncertaintyTrace:
    """Per-(task, timestep) mean feature variance with the paired normalized
    transfer series (lengths equal the valid step count)."""

    task: int
    epistemic: np.ndarray
    aleatoric: np.ndarray
    outgoing: np.ndarray
    incoming: np.ndarray

    def __post_init__(self):
        n = len(self.epistemic)
        for name in ("aleatoric", "outgoing", "incoming"):
            if len(getattr(self, name)) != n:
                raise ConfigError("trace series lengths differ")
        if np.any(self.epistemic < 0) or np.any(self.aleatoric < 0):
            raise ConfigError("variances must be non-negative")

    @property
    def total_variance(self) -> np.ndarray:
        return self.epistemic + self.aleatoric

    def to_records(self) -> list[dict]:
        return [{"task": self.task, "timestep": t,
                 "epistemic_var": float(self.epistemic[t]),
                 "aleatoric_var": float(self.aleatoric[t]),
                 "outgoing": float(self.outgoing[t]),
                 "incoming": float(self.incoming[t])}
                for t in range(len(self.epistemic))]


def traces_from_graph(graph: TransferGraph,
                      include_self: bool = False) -> list[UncertaintyTrace]:
    """Aggregate one instance's graph into per-task series.

    Outgoing at (j, t) averages the normalized outgoing quantity over the
    counterpart targets; incoming at (d, t) averages the normalized incoming
    quantity over the counterpart sources.  The analysis concerns transfer
    between tasks, so the self-loop is excluded unless ``include_self`` is
    set (single-task graphs always keep it).
    """
    steps = graph.valid_steps
    traces = []
    for task in range(graph.num_tasks):
        others = [d for d in range(graph.num_tasks)
                  if include_self or graph.num_tasks == 1 or d != task]
        outgoing = np.array([
            np.mean([graph.outgoing(task, t, d) for d in others])
            for t in range(steps)])
        incoming = np.array([
            np.mean([graph.incoming(task, t, j) for j in others])
            for t in range(steps)])
        traces.append(UncertaintyTrace(
            task=task,
            epistemic=graph.epistemic[task, :steps].copy(),
            aleatoric=graph.aleatoric[task, :steps].copy(),
            outgoing=outgoing, incoming=incoming))
    return traces


def uncertainty_transfer_correlation(traces, min_points: int = 20) -> dict:
    """Spearman rank correlations between variance and transfer quantities.

    Pools all (task, timestep) points: sources pair total variance with
    normalized outgoing transfer, targets with normalized incoming transfer.
    Reported, not asserted: trained models tend toward negative outgoing
    and positive incoming correlation, but per-run values vary.
    """
    variance, outgoing, incoming = [], [], []
    for trace in traces:
        variance.extend(trace.total_variance.tolist())
        outgoing.extend(trace.outgoing.tolist())
        incoming.extend(trace.incoming.tolist())
    variance = np.asarray(variance)
    if variance.size < min_points:
        raise ConfigError(
            f"need >= {min_points} (task, timestep) points, got {variance.size}")
    out = {}
    for name, series in (("outgoing", np.asarray(outgoing)),
                         ("incoming", np.asarray(incoming))):
        if np.allclose(variance, variance[0]) or np.allclose(series, series[0]):
            raise UndefinedCorrelationError(
                f"constant series: correlation with {name} transfer undefined")
        rho, pvalue = stats.spearmanr(variance, series)
        out[name] = {"rho": float(rho), "p_value": float(pvalue)}
    out["n_points"] = int(variance.size)
    return out
