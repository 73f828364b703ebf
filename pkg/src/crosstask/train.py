"""Optimization harness: Adam, early stopping on validation AUROC, grids.

Determinism: a run is a pure function of (model seed, fit seed, data).  The
epoch shuffle and every forward's noise come from child streams keyed by the
epoch/step index, and validation always replays one fixed stream, so two runs
with identical seeds produce identical traces.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NonFiniteError
from .evaluate import macro_auroc, masked_task_aurocs
from .model import EpisodeBatch, SequenceModel
from .rng import RngStream
from .variants import TaskLossTracker

# Appendix search ranges; grid_search defaults to subsets of these.
GRID_RANGES = {
    "hidden_size": [8, 16, 32, 64],
    "embed_layers": [2, 3, 6],
    "batch_size": [32, 64, 128, 256],
    "learning_rate": [0.01, 0.001, 0.0001],
    "l2_coefficient": [0.02, 0.002, 0.0002],
    "dropout_rate": [0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5],
}

_MODEL_KEYS = ("hidden_size", "embed_layers", "dropout_rate", "mc_samples",
               "uncertainty_mode", "transfer_mode")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_iterations: int = 100_000
    l2_coefficient: float = 0.0002
    dropout_rate: float | None = None  # applied to the model config by runners
    patience: int = 10
    max_epochs: int | None = None
    grid: dict | None = None
    seeds: tuple = (0,)

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate >= 0 and batch_size >= 1 required")
        if self.max_iterations < 1 or self.patience < 0:
            raise ConfigError("max_iterations >= 1 and patience >= 0 required")
        if self.grid is not None:
            unknown = set(self.grid) - set(GRID_RANGES)
            if unknown:
                raise ConfigError(f"unknown grid keys: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate,
                "batch_size": self.batch_size,
                "max_iterations": self.max_iterations,
                "l2_coefficient": self.l2_coefficient,
                "dropout_rate": self.dropout_rate,
                "patience": self.patience,
                "max_epochs": self.max_epochs,
                "grid": self.grid,
                "seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "seeds" in payload:
            payload["seeds"] = tuple(payload["seeds"])
        return cls(**payload)


@dataclass
class RunRecord:
    """Everything one training run produced.

    ``epochs`` is strictly increasing and indexes both traces.
    """

    variant_name: str
    variant: dict
    model_config: dict
    train_config: dict
    seed: int
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_auroc: list = field(default_factory=list)
    test_auroc: dict = field(default_factory=dict)
    best_val_auroc: float = float("nan")
    best_epoch: int = -1
    wall_clock: float = 0.0
    checkpoint_path: str | None = None
    aborted: bool = False

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ConfigError("epoch indices must be strictly increasing")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "variant_name", "variant", "model_config", "train_config", "seed",
            "epochs", "train_loss", "val_auroc", "test_auroc",
            "best_val_auroc", "best_epoch", "wall_clock", "checkpoint_path",
            "aborted")}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunRecord":
        payload = dict(payload)
        payload["test_auroc"] = {int(k): v
                                 for k, v in payload["test_auroc"].items()}
        return cls(**payload)


# -- Adam ----------------------------------------------------------------


class AdamState:
    """First/second moment accumulators, zero-initialized at step 0."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over named parameters.

    ``params`` yields (name, Tensor) pairs; a missing gradient counts as
    zero.  Non-finite gradients abort the run.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    items = params.items() if hasattr(params, "items") else params
    for name, tensor in items:
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient in {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * grad
        state.v[name] = b2 * state.v[name] + (1 - b2) * grad * grad
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# -- fitting -------------------------------------------------------------


def _iter_batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_probs(model: SequenceModel, batch: EpisodeBatch,
                   stream: RngStream) -> np.ndarray:
    with ad.no_grad():
        probs, _ = model.forward(batch, stream, train=False)
    return probs.data


def fit(model: SequenceModel, split, config: TrainConfig, seed: int = 0,
        checkpoint_path=None) -> RunRecord:
    """Mini-batch training with early stopping on validation macro-AUROC.

    Restores the best-validation parameters before returning; with a
    non-finite loss the run aborts and the last best checkpoint is kept.
    """
    start = time.perf_counter()
    stream = RngStream(seed).child(f"fit.{model.family}")
    eval_seed = stream.child("eval").seed
    train_batchset: EpisodeBatch = split.train
    n = train_batchset.num_instances
    steps_per_epoch = max(1, int(np.ceil(n / config.batch_size)))
    max_epochs = config.max_epochs
    if max_epochs is None:
        max_epochs = max(1, int(np.ceil(config.max_iterations / steps_per_epoch)))

    tracker = None
    loss_gated = getattr(model, "gate_kind", None) == "loss"
    if loss_gated:
        tracker = TaskLossTracker(model.config.num_tasks)
        first = train_batchset.select(np.arange(min(n, config.batch_size)))
        with ad.no_grad():
            _, aux = model.loss_on_batch(
                first, stream.child("warmup"), train=False,
                task_losses=np.full(model.config.num_tasks,
                                    float(np.log(2.0))))
        tracker.update(aux["per_task_bce"], aux["per_task_counts"])
        model.static_gate_inputs = tracker.values()

    state = AdamState()
    record = RunRecord(
        variant_name=getattr(model, "family", "model"),
        variant={"family": getattr(model, "family", "model")},
        model_config=model.config.to_dict(),
        train_config=config.to_dict(), seed=seed)
    best_state = model.state_dict()
    best_metric = -np.inf
    best_epoch = -1
    epochs_since_best = 0
    total_steps = 0
    aborted = False

    for epoch in range(max_epochs):
        order = stream.child(f"shuffle.{epoch}").permutation(n)
        epoch_loss = 0.0
        try:
            for rows in _iter_batches(n, config.batch_size, order):
                batch = train_batchset.select(rows)
                kwargs = {}
                if loss_gated:
                    kwargs["task_losses"] = tracker.values()
                model.params.zero_grad()
                value, aux = model.loss_on_batch(
                    batch, stream.child(f"step.{total_steps}"), train=True,
                    l2_coefficient=config.l2_coefficient, **kwargs)
                if not np.isfinite(value.data):
                    raise NonFiniteError(
                        f"non-finite loss at step {total_steps}")
                if config.learning_rate > 0.0:
                    value.backward()
                    adam_step(model.params, state, config.learning_rate)
                if loss_gated:
                    tracker.update(aux["per_task_bce"], aux["per_task_counts"])
                    model.static_gate_inputs = tracker.values()
                epoch_loss += float(value.data)
                total_steps += 1
                if total_steps >= config.max_iterations:
                    break
        except NonFiniteError:
            aborted = True
            break  # keep the last good (best-so-far) parameters

        probs = evaluate_probs(model, split.valid, RngStream(eval_seed))
        metric = macro_auroc(probs, split.valid.labels, split.valid.label_mask)
        record.epochs.append(epoch)
        record.train_loss.append(epoch_loss / n)
        record.val_auroc.append(float(metric))
        if metric > best_metric:
            best_metric = float(metric)
            best_state = model.state_dict()
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if total_steps >= config.max_iterations \
                or epochs_since_best > config.patience:
            break

    model.load_state_dict(best_state)
    if loss_gated:
        model.static_gate_inputs = tracker.values()
    record.best_val_auroc = best_metric
    record.best_epoch = best_epoch
    record.aborted = aborted

    test_probs = evaluate_probs(model, split.test, RngStream(eval_seed))
    record.test_auroc = {
        int(d): float(v) for d, v in masked_task_aurocs(
            test_probs, split.test.labels, split.test.label_mask).items()}
    record.wall_clock = time.perf_counter() - start
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(checkpoint_path, model)
        record.checkpoint_path = str(checkpoint_path)
    return record


# -- grid search ---------------------------------------------------------


def _grid_cells(grid: dict) -> list[dict]:
    keys = sorted(grid)
    cells = [{}]
    for key in keys:
        cells = [dict(cell, **{key: value})
                 for cell in cells for value in grid[key]]
    return cells


def grid_search(variant, grid: dict, split, seeds, base_model_config,
                base_train_config: TrainConfig, builder=None):
    """Pick the cell with the best mean validation macro-AUROC across seeds.

    Ties break toward smaller hidden size, then smaller learning rate, then
    the canonical cell repr, so the outcome never depends on enumeration
    order.  Returns ``(best, records)`` where ``best`` carries the winning
    cell and its resolved configs.
    """
    from dataclasses import replace
    from .variants import build as build_variant

    if not grid:
        raise ConfigError("grid must contain at least one key with values")
    builder = builder or build_variant
    cells = _grid_cells(grid)
    results = []
    all_records = []
    for cell in cells:
        model_over = {k: v for k, v in cell.items() if k in _MODEL_KEYS}
        train_over = {k: v for k, v in cell.items() if k not in _MODEL_KEYS}
        model_config = replace(base_model_config, **model_over)
        if "dropout_rate" not in model_over \
                and base_train_config.dropout_rate is not None:
            model_config = replace(
                model_config, dropout_rate=base_train_config.dropout_rate)
        train_config = replace(base_train_config, grid=None, **train_over)
        scores = []
        cell_records = []
        for seed in seeds:
            model = builder(variant, model_config, seed=seed)
            rec = fit(model, split, train_config, seed=seed)
            scores.append(rec.best_val_auroc)
            cell_records.append(rec)
        results.append({
            "cell": cell,
            "mean_val_auroc": float(np.mean(scores)),
            "model_config": model_config.to_dict(),
            "train_config": train_config.to_dict(),
        })
        all_records.extend(cell_records)

    def sort_key(entry):
        cfg = entry["model_config"]
        return (-entry["mean_val_auroc"], cfg["hidden_size"],
                entry["train_config"]["learning_rate"], repr(sorted(
                    entry["cell"].items())))

    best = sorted(results, key=sort_key)[0]
    return best, all_records
