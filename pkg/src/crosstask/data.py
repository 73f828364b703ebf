"""Synthetic multi-task datasets and EHR-shaped CSV ingestion.

Two generators cover the experiment suite:

- :func:`generate_imbalanced_tasks` builds non-temporal tasks over shared
  inputs with controllable per-task sample counts and label noise.  Labels
  come from linear + interaction functions of latent factors, so the exact
  generating score is available as a Bayes oracle.  Two task groups use
  opposing interaction signs, which makes naive hard sharing pay a price
  while leaving plenty of shareable structure.
- :func:`generate_temporal_tasks` plants an event at a uniform random step;
  a source task's channels show it crisply at the event time while a target
  task's channels carry only a weak echo ``lag`` steps later.  Sequence
  labels flag early events, so evidence always appears in the source's
  channels first and the generating transfer direction is recorded.

CSV schema (one file per split, documented bit-exactly):

    # crosstask-dataset-v1 features=<m> tasks=<D>
    instance_id,timestep,feature_1..feature_m,label_task_1..label_task_D,
    mask_task_1..mask_task_D

Rows are grouped by instance and ordered by timestep (consecutive from 0).
Labels are 0/1 and constant within an instance; a mask of 0 removes the task
from the instance's label set (its label cell may be empty).  Empty feature
cells are imputed as 0.0 and counted in the ingestion report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError
from .model import EpisodeBatch
from .rng import RngStream

SCHEMA_VERSION = "crosstask-dataset-v1"


@dataclass(frozen=True)
class TransferRelation:
    """Ground-truth dependency: the target's label evidence appears in the
    source's channels ``lag`` steps earlier."""

    source: int
    target: int
    lag: int


@dataclass(frozen=True)
class SyntheticSpec:
    num_tasks: int
    num_features: int
    samples_per_task: tuple
    timesteps: int = 1
    label_noise: tuple = ()
    latent_dim: int = 4
    relations: tuple = ()
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    feature_noise: float = 0.25
    interaction_strength: float | tuple = 1.0
    event_amplitude: float = 3.0
    echo_amplitude: float = 0.6
    channel_noise: float | tuple = 1.0
    source_noise_profile: str = "flat"
    target_noise_scale: float = 1.0

    def __post_init__(self):
        if self.num_tasks < 1 or self.num_features < 1 or self.timesteps < 1:
            raise ConfigError("tasks, features and timesteps must be positive")
        if len(self.samples_per_task) != self.num_tasks:
            raise ConfigError("samples_per_task must list one count per task")
        if any(int(c) < 1 for c in self.samples_per_task):
            raise ConfigError("samples_per_task entries must be >= 1")
        noise = self.noise_rates()
        if any(not 0.0 <= r < 0.5 for r in noise):
            raise ConfigError("label_noise rates must lie in [0, 0.5)")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 \
                or any(f <= 0 for f in self.split_fractions) \
                or len(self.split_fractions) != 3:
            raise ConfigError("split_fractions must be three positives summing to 1")
        if self.source_noise_profile not in ("flat", "decaying"):
            raise ConfigError("source_noise_profile must be flat or decaying")
        for rel in self.relations:
            if not 0 <= rel.lag < self.timesteps:
                raise ConfigError(f"lag {rel.lag} must be < timesteps")
            for task in (rel.source, rel.target):
                if not 0 <= task < self.num_tasks:
                    raise ConfigError(f"relation task {task} out of range")

    def interaction_strengths(self) -> tuple:
        if np.isscalar(self.interaction_strength):
            return tuple(float(self.interaction_strength)
                         for _ in range(self.num_tasks))
        if len(self.interaction_strength) != self.num_tasks:
            raise ConfigError(
                "interaction_strength must be scalar or one value per task")
        return tuple(float(v) for v in self.interaction_strength)

    def noise_rates(self) -> tuple:
        if not self.label_noise:
            return tuple(0.0 for _ in range(self.num_tasks))
        if np.isscalar(self.label_noise):
            return tuple(float(self.label_noise) for _ in range(self.num_tasks))
        if len(self.label_noise) != self.num_tasks:
            raise ConfigError("label_noise must be scalar or one rate per task")
        return tuple(float(r) for r in self.label_noise)


@dataclass
class DatasetSplit:
    train: EpisodeBatch
    valid: EpisodeBatch
    test: EpisodeBatch
    fractions: tuple
    seed: int
    info: dict = field(default_factory=dict)

    def batches(self) -> dict:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    @property
    def num_tasks(self) -> int:
        return self.train.num_tasks


def _cut(indices: np.ndarray, fractions) -> list[np.ndarray]:
    n = len(indices)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_valid = min(max(n_valid, 1), n - n_train - 1)
    return [indices[:n_train], indices[n_train:n_train + n_valid],
            indices[n_train + n_valid:]]


def _assemble_split(spec, inputs, labels, mask, counts, bayes, per_task_pools,
                    info) -> DatasetSplit:
    stream = RngStream(spec.seed).child("split")
    parts = [[], [], []]
    for pool_id, pool in enumerate(per_task_pools):
        order = stream.child(f"shuffle.{pool_id}").permutation(len(pool))
        for i, piece in enumerate(_cut(pool[order], spec.split_fractions)):
            parts[i].append(piece)
    batches = []
    bayes_by_split = {}
    names = ("train", "valid", "test")
    for name, chunks in zip(names, parts):
        rows = np.concatenate(chunks)
        rows = rows[stream.child(f"order.{name}").permutation(len(rows))]
        batches.append(EpisodeBatch(inputs[rows], labels[rows], mask[rows],
                                    counts[rows]))
        bayes_by_split[name] = bayes[rows]
    info = dict(info)
    info["bayes_scores"] = bayes_by_split
    return DatasetSplit(batches[0], batches[1], batches[2],
                        tuple(spec.split_fractions), spec.seed, info)


def generate_imbalanced_tasks(spec: SyntheticSpec) -> DatasetSplit:
    """Non-temporal tasks over shared inputs with per-task pools.

    Every instance carries exactly one task's label.  Tasks alternate
    between two groups whose latent directions are nearly orthogonal and
    whose interaction terms have opposite signs; within a group directions
    overlap strongly, so selective transfer helps while indiscriminate
    sharing conflicts.
    """
    if spec.timesteps != 1:
        raise ConfigError("imbalanced-task generation is non-temporal (T=1)")
    d_all = spec.num_tasks
    q = max(spec.latent_dim, 6)
    counts = [int(c) for c in spec.samples_per_task]
    total = sum(counts)
    stream = RngStream(spec.seed).child("imbalanced")

    latents = stream.child("latents").normal((total, q))
    mixing = stream.child("mixing").normal((q, spec.num_features)) / np.sqrt(q)
    inputs = latents @ mixing \
        + spec.feature_noise * stream.child("obs").normal((total, spec.num_features))

    # group A tasks (even) lean on latent axis 0, group B (odd) on axis 1;
    # each task adds its own bilinear feature with a group-dependent sign,
    # so one shared representation must host many distinct nonlinear terms
    angles = {0: 0.0, 2: 0.35, 4: 0.4, 1: 0.0, 3: 0.35, 5: 0.55}
    # four distinct bilinear features; task 4 reuses task 0's so knowledge
    # can actually flow to the smallest pool
    pairs = [(2, 3), (4, 5), (2, 4), (3, 5)]
    directions = np.zeros((d_all, q))
    signs = np.zeros(d_all)
    for d in range(d_all):
        base = 0 if d % 2 == 0 else 1
        angle = angles.get(d, 0.3 * d)
        directions[d, base] = np.cos(angle)
        directions[d, 1 - base] = np.sin(angle) * 0.3
        directions[d, 2] = 0.2
        signs[d] = 1.0 if d % 2 == 0 else -1.0

    strengths = np.asarray(spec.interaction_strengths())
    interactions = np.stack(
        [latents[:, pairs[d % len(pairs)][0]]
         * latents[:, pairs[d % len(pairs)][1]] for d in range(d_all)],
        axis=1)
    scores = latents @ directions.T + (strengths * signs)[None, :] * interactions

    labels = np.zeros((total, d_all))
    mask = np.zeros((total, d_all), dtype=bool)
    pools = []
    start = 0
    noise = spec.noise_rates()
    for d in range(d_all):
        rows = np.arange(start, start + counts[d])
        start += counts[d]
        pools.append(rows)
        mask[rows, d] = True
        threshold = np.median(scores[rows, d])
        y = (scores[rows, d] > threshold).astype(float)
        if noise[d] > 0:
            flips = stream.child(f"noise.{d}").uniform(len(rows)) < noise[d]
            y = np.where(flips, 1.0 - y, y)
        labels[rows, d] = y

    counts_arr = np.ones(total, dtype=np.int64)
    inputs3 = inputs[:, None, :]
    info = {"generator": "imbalanced", "per_task_counts": counts,
            "relations": [], "label_noise": list(noise)}
    return _assemble_split(spec, inputs3, labels, mask, counts_arr, scores,
                           pools, info)


def _temporal_channel_blocks(num_tasks: int, num_features: int):
    width = num_features // num_tasks
    if width < 1:
        raise ConfigError("need at least one feature channel per task")
    return [np.arange(d * width, (d + 1) * width) for d in range(num_tasks)]


def temporal_bayes_scores(spec: SyntheticSpec, inputs: np.ndarray,
                          task: int) -> np.ndarray:
    """Generating-rule score for the early-event label: the (negated)
    estimated event time read off the evidence channels.

    Targets of a relation read the source's channels (evidence appears
    there first); other tasks read their own block.
    """
    blocks = _temporal_channel_blocks(spec.num_tasks, spec.num_features)
    evidence_task = task
    for rel in spec.relations:
        if rel.target == task:
            evidence_task = rel.source
    signal = inputs[:, :, blocks[evidence_task]].mean(axis=2)
    return -np.argmax(signal, axis=1).astype(float)


def generate_temporal_tasks(spec: SyntheticSpec) -> DatasetSplit:
    """Event-driven sequences with a known cross-task transfer direction.

    One event per instance at a uniform step; the label (shared by related
    tasks) flags events in the first half of the window.  Source channels
    carry the event at full amplitude at its true time; target channels get
    a weak echo ``lag`` steps later, so a target-side predictor profits from
    source features at earlier steps.  Labeled subsets follow
    ``samples_per_task``.
    """
    if spec.timesteps < 2:
        raise ConfigError("temporal generation needs timesteps >= 2")
    if not spec.relations:
        raise ConfigError("temporal generation needs at least one relation")
    d_all, t_all, m = spec.num_tasks, spec.timesteps, spec.num_features
    total = max(int(c) for c in spec.samples_per_task)
    stream = RngStream(spec.seed).child("temporal")
    blocks = _temporal_channel_blocks(d_all, m)

    source_tasks_early = {rel.source for rel in spec.relations}
    if np.isscalar(spec.channel_noise):
        noise_std = np.full(total, float(spec.channel_noise))
        base_std = float(spec.channel_noise)
    else:
        # per-instance mixture on the source channels: half the instances
        # observe their sources cleanly, half noisily, so source reliability
        # is a real, learnable instance property; other channels stay clean
        low, high = (float(v) for v in spec.channel_noise)
        noisy = stream.child("noise_level").uniform((total,)) < 0.5
        noise_std = np.where(noisy, high, low)
        base_std = low
    inputs = base_std * stream.child("noise").normal((total, t_all, m))
    if not np.isscalar(spec.channel_noise):
        for d in sorted(source_tasks_early):
            block = _temporal_channel_blocks(d_all, m)[d]
            inputs[:, :, block[0]:block[-1] + 1] = \
                noise_std[:, None, None] * stream.child(
                    f"source_noise.{d}").normal((total, t_all, len(block)))
    if spec.target_noise_scale != 1.0:
        # the target's own channels are inherently harder to observe
        for rel in spec.relations:
            block = _temporal_channel_blocks(d_all, m)[rel.target]
            inputs[:, :, block[0]:block[-1] + 1] *= spec.target_noise_scale
    if spec.source_noise_profile == "decaying":
        # source observations stabilize over the window: early steps are
        # noisy, late steps clean (monitoring settles after admission)
        profile = np.linspace(1.6, 0.3, t_all)[None, :, None]
        for d in sorted(source_tasks_early):
            block = _temporal_channel_blocks(d_all, m)[d]
            inputs[:, :, block[0]:block[-1] + 1] *= profile
    event_time = stream.child("event").integers(0, t_all, (total,))
    cut = t_all // 2
    base_label = (event_time < cut).astype(float)

    source_tasks = {rel.source for rel in spec.relations}
    target_tasks = {rel.target for rel in spec.relations}
    rows = np.arange(total)
    for d in sorted(source_tasks):
        inputs[rows, event_time, blocks[d][0]:blocks[d][-1] + 1] \
            += spec.event_amplitude
    for rel in spec.relations:
        echo_time = np.minimum(event_time + rel.lag, t_all - 1)
        late = event_time + rel.lag >= t_all
        block = blocks[rel.target]
        amp = np.where(late, 0.0, spec.echo_amplitude)
        inputs[rows, echo_time, block[0]:block[-1] + 1] += amp[:, None]

    labels = np.zeros((total, d_all))
    mask = np.zeros((total, d_all), dtype=bool)
    noise = spec.noise_rates()
    for d in range(d_all):
        labeled = stream.child(f"labelset.{d}").permutation(total)[
            :int(spec.samples_per_task[d])]
        mask[labeled, d] = True
        y = base_label.copy()
        if noise[d] > 0:
            flips = stream.child(f"noise.{d}").uniform(total) < noise[d]
            y = np.where(flips, 1.0 - y, y)
        labels[:, d] = y

    bayes = np.stack([temporal_bayes_scores(spec, inputs, d)
                      for d in range(d_all)], axis=1)
    counts_arr = np.full(total, t_all, dtype=np.int64)
    info = {"generator": "temporal",
            "per_task_counts": [int(c) for c in spec.samples_per_task],
            "relations": [{"source": r.source, "target": r.target,
                           "lag": r.lag} for r in spec.relations],
            "label_noise": list(noise), "label_cut": cut,
            "event_time": event_time, "noise_std": noise_std,
            "source_tasks": sorted(source_tasks),
            "target_tasks": sorted(target_tasks)}
    pools = [np.arange(total)]
    return _assemble_split(spec, inputs, labels, mask, counts_arr, bayes,
                           pools, info)


# -- CSV export / ingestion ----------------------------------------------


def _columns(m: int, d: int) -> list[str]:
    return (["instance_id", "timestep"]
            + [f"feature_{i + 1}" for i in range(m)]
            + [f"label_task_{i + 1}" for i in range(d)]
            + [f"mask_task_{i + 1}" for i in range(d)])


def write_episodes_csv(path, batch: EpisodeBatch) -> None:
    m, d = batch.inputs.shape[2], batch.num_tasks
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA_VERSION} features={m} tasks={d}\n")
        writer = csv.writer(fh)
        writer.writerow(_columns(m, d))
        for b in range(batch.num_instances):
            for t in range(int(batch.timestep_counts[b])):
                row = [str(b), str(t)]
                row += [repr(float(x)) for x in batch.inputs[b, t]]
                row += [str(int(batch.labels[b, i])) if batch.label_mask[b, i]
                        else "" for i in range(d)]
                row += [str(int(batch.label_mask[b, i])) for i in range(d)]
                writer.writerow(row)


def read_episodes_csv(path) -> tuple[EpisodeBatch, dict]:
    """Parse one split file; returns the batch and an ingestion report.

    Errors carry the absolute line number of the offending row.  No row is
    ever silently dropped: the report's row count equals the file's data
    rows.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith(f"# {SCHEMA_VERSION}"):
            raise IngestionError(
                f"{path}: missing schema header '# {SCHEMA_VERSION} ...'")
        declared = dict(part.split("=", 1)
                        for part in first.strip().split()[2:] if "=" in part)
        try:
            m = int(declared["features"])
            d = int(declared["tasks"])
        except (KeyError, ValueError):
            raise IngestionError(
                f"{path}: schema header must declare features=<m> tasks=<D>")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file")
        expected = _columns(m, d)
        if header != expected:
            missing = sorted(set(expected) - set(header))
            raise IngestionError(
                f"{path}: malformed header; missing columns {missing}")

        instances: list[dict] = []
        index: dict[str, int] = {}
        imputed = 0
        rows_read = 0
        line = 2
        for row in reader:
            line += 1
            rows_read += 1
            if len(row) != len(expected):
                raise IngestionError(
                    f"{path}:{line}: expected {len(expected)} cells, "
                    f"got {len(row)}")
            inst_id, step_text = row[0], row[1]
            try:
                step = int(step_text)
            except ValueError:
                raise IngestionError(
                    f"{path}:{line}: timestep {step_text!r} is not an integer")
            if inst_id not in index:
                if instances and instances[-1]["id"] != inst_id \
                        and any(rec["id"] == inst_id for rec in instances):
                    raise IngestionError(
                        f"{path}:{line}: rows for instance {inst_id!r} are "
                        "not contiguous")
                index[inst_id] = len(instances)
                instances.append({"id": inst_id, "steps": [], "labels": None,
                                  "mask": None})
            rec = instances[index[inst_id]]
            if rec is not instances[-1]:
                if step < len(rec["steps"]):
                    raise IngestionError(
                        f"{path}:{line}: duplicate (instance, timestep) "
                        f"({inst_id!r}, {step})")
                raise IngestionError(
                    f"{path}:{line}: rows for instance {inst_id!r} are "
                    "not contiguous")
            if step != len(rec["steps"]):
                if step < len(rec["steps"]):
                    raise IngestionError(
                        f"{path}:{line}: duplicate (instance, timestep) "
                        f"({inst_id!r}, {step})")
                raise IngestionError(
                    f"{path}:{line}: non-monotone or gapped timestep {step}; "
                    f"expected {len(rec['steps'])}")
            feats = np.zeros(m)
            for i, cell in enumerate(row[2:2 + m]):
                if cell == "":
                    imputed += 1
                else:
                    feats[i] = float(cell)
            rec["steps"].append(feats)

            mask_vals = []
            for i, cell in enumerate(row[2 + m + d:2 + m + 2 * d]):
                if cell not in ("0", "1"):
                    raise IngestionError(
                        f"{path}:{line}: mask cell must be 0/1, got {cell!r}")
                mask_vals.append(cell == "1")
            label_vals = []
            for i, cell in enumerate(row[2 + m:2 + m + d]):
                if mask_vals[i]:
                    if cell == "":
                        raise IngestionError(
                            f"{path}:{line}: masked-in label_task_{i + 1} "
                            "is empty")
                    value = float(cell)
                    if value not in (0.0, 1.0):
                        raise IngestionError(
                            f"{path}:{line}: label must be 0/1, got {cell!r}")
                    label_vals.append(value)
                else:
                    label_vals.append(0.0)
            if rec["labels"] is None:
                rec["labels"] = label_vals
                rec["mask"] = mask_vals
            elif rec["labels"] != label_vals or rec["mask"] != mask_vals:
                raise IngestionError(
                    f"{path}:{line}: labels/masks differ across an "
                    "instance's rows")

    if not instances:
        raise IngestionError(f"{path}: no data rows")
    t_max = max(len(rec["steps"]) for rec in instances)
    n = len(instances)
    inputs = np.zeros((n, t_max, m))
    labels = np.zeros((n, d))
    mask = np.zeros((n, d), dtype=bool)
    counts = np.zeros(n, dtype=np.int64)
    for i, rec in enumerate(instances):
        counts[i] = len(rec["steps"])
        inputs[i, :counts[i]] = np.asarray(rec["steps"])
        labels[i] = rec["labels"]
        mask[i] = rec["mask"]
    report = {"rows_read": rows_read, "instances": n,
              "imputed_cells": imputed,
              "rows_accounted": int(counts.sum())}
    return EpisodeBatch(inputs, labels, mask, counts), report


def export_dataset(split: DatasetSplit, out_dir) -> Path:
    """Write train/valid/test CSVs plus the manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, batch in split.batches().items():
        filename = f"{name}.csv"
        write_episodes_csv(out_dir / filename, batch)
        files[name] = filename
    manifest = {
        "schema": SCHEMA_VERSION,
        "files": files,
        "seed": split.seed,
        "fractions": list(split.fractions),
        "num_tasks": split.num_tasks,
        "num_features": split.train.inputs.shape[2],
        "split_sizes": {name: batch.num_instances
                        for name, batch in split.batches().items()},
        "generator": split.info.get("generator"),
        "per_task_counts": split.info.get("per_task_counts"),
        "relations": split.info.get("relations", []),
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def ingest_csv(path, schema: dict | None = None) -> DatasetSplit:
    """Load a dataset directory (or its manifest path) into memory.

    ``schema`` may pin ``num_tasks``/``num_features``; a mismatch raises.
    The ingestion reports are kept in ``split.info['reports']``.
    """
    path = Path(path)
    manifest_path = path if path.is_file() else path / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != SCHEMA_VERSION:
        raise IngestionError(
            f"unsupported dataset schema {manifest.get('schema')!r}")
    base = manifest_path.parent
    batches = {}
    reports = {}
    for name in ("train", "valid", "test"):
        if name not in manifest["files"]:
            raise IngestionError(f"manifest lists no {name!r} file")
        batches[name], reports[name] = read_episodes_csv(
            base / manifest["files"][name])
    if schema:
        for key in ("num_tasks", "num_features"):
            if key in schema and schema[key] != manifest.get(key):
                raise IngestionError(
                    f"dataset {key}={manifest.get(key)} does not match "
                    f"required {schema[key]}")
    info = {"generator": manifest.get("generator"),
            "per_task_counts": manifest.get("per_task_counts"),
            "relations": [TransferRelation(**r) if isinstance(r, dict) else r
                          for r in manifest.get("relations", [])],
            "reports": reports}
    return DatasetSplit(batches["train"], batches["valid"], batches["test"],
                        tuple(manifest.get("fractions", (0.6, 0.2, 0.2))),
                        manifest.get("seed", 0), info)
