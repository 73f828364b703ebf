"""Uncertainty-gated asymmetric knowledge transfer between tasks and timesteps.

Each ordered task pair (source j, target d) owns a small gate network that
maps source/target features plus their per-feature variances to a transfer
weight in (0, 1).  The combined feature map adds adapter-projected source
features, weighted by those gates, to the target's own features:

- ``full``           sums source timesteps i <= t (past-to-future constraint),
                      wrapping the sum in the target's output adapter;
- ``unconstrained``  sums all source timesteps i in 1..T (same adapter shape);
- ``samestep``       uses only i == t and omits the output adapter;
- ``intratask``      restricts sources to j == d (i <= t), no output adapter;
- ``none``           disables transfer entirely (combined = own features).

Normalization note: the per-(task, timestep) incoming quantity divides by the
number of source timesteps t, following the displayed formula; prose
describing it as "the number of sources" is ambiguous and not used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

TRANSFER_MODES = ("full", "intratask", "samestep", "none", "unconstrained")

# Modes whose combined map applies the output adapter around the sum.
OUTER_ADAPTER_MODES = ("full", "unconstrained")
# Modes compatible with online left-to-right inference.
CAUSAL_MODES = ("full", "intratask", "samestep", "none")


def allowed_mask(timesteps: int, mode: str) -> np.ndarray:
    """[i, t] mask of permitted (source step, target step) cells."""
    if mode not in TRANSFER_MODES:
        raise ConfigError(f"unknown transfer mode {mode!r}")
    if mode == "none":
        return np.zeros((timesteps, timesteps))
    if mode == "samestep":
        return np.eye(timesteps)
    if mode == "unconstrained":
        return np.ones((timesteps, timesteps))
    # full / intratask: source step must not be later than target step
    return np.triu(np.ones((timesteps, timesteps)))


@dataclass
class GateWeights:
    """Two-layer perceptron for one ordered (source, target) pair.

    Input rows of ``w1`` follow the concatenation order
    [source features, target features, source variance, target variance]
    (variance rows absent for feature-only gating).
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def transfer_weight(f_src: Tensor, f_tgt: Tensor, var_src: Tensor | None,
                    var_tgt: Tensor | None, gate: GateWeights,
                    slope: float = 0.2) -> Tensor:
    """Transfer weight for one (source step, target step) feature pair.

    All inputs are rank-1 with the hidden extent k.  Output is a length-1
    tensor in (0, 1); gradient flows into every input branch.
    """
    parts = [f_src, f_tgt]
    if var_src is not None or var_tgt is not None:
        if var_src is None or var_tgt is None:
            raise ConfigError("provide both variances or neither")
        parts += [var_src, var_tgt]
    extents = {p.data.shape[-1] for p in parts}
    if len(extents) != 1:
        raise DimensionError(f"gate inputs disagree on extent: {extents}")
    x = ad.concat(parts, axis=-1)
    if x.data.shape[-1] != gate.w1.data.shape[0]:
        raise DimensionError(
            f"gate expects input extent {gate.w1.data.shape[0]}, "
            f"got {x.data.shape[-1]}")
    hidden = ad.leaky_relu(ad.add(ad.matmul(x, gate.w1), gate.b1), slope)
    return ad.sigmoid(ad.add(ad.matmul(hidden, gate.w2), gate.b2))


def pairwise_gate_logits(f_src: Tensor, f_tgt: Tensor, var_src: Tensor | None,
                         var_tgt: Tensor | None, gate: GateWeights,
                         slope: float) -> Tensor:
    """Gate pre-activations for every (i, t) cell at once.

    ``f_src``/``f_tgt`` are [B, T, k]; the result is [B, T, T] indexed
    [batch, source step, target step].  Splitting ``w1`` into row blocks is
    algebraically identical to concatenating the four inputs.
    """
    k = f_src.data.shape[-1]
    b, t = f_src.data.shape[0], f_src.data.shape[1]
    src_rows = ad.matmul(f_src, gate.w1[0:k, :])
    tgt_rows = ad.matmul(f_tgt, gate.w1[k:2 * k, :])
    pre = ad.add(src_rows.reshape((b, t, 1, -1)), tgt_rows.reshape((b, 1, t, -1)))
    if var_src is not None:
        sv = ad.matmul(var_src, gate.w1[2 * k:3 * k, :])
        tv = ad.matmul(var_tgt, gate.w1[3 * k:4 * k, :])
        pre = ad.add(pre, ad.add(sv.reshape((b, t, 1, -1)),
                                 tv.reshape((b, 1, t, -1))))
    hidden = ad.leaky_relu(ad.add(pre, gate.b1), slope)
    logits = ad.add(ad.matmul(hidden, gate.w2), gate.b2)
    return logits.reshape((b, t, t))


def pair_iter(num_tasks: int, mode: str):
    for d in range(num_tasks):
        for j in range(num_tasks):
            if mode == "intratask" and j != d:
                continue
            yield j, d


def combine(features: list[Tensor], gating_vars: list[Tensor] | None,
            gates: dict[tuple[int, int], GateWeights] | None,
            adapters_in: dict[tuple[int, int], tuple[Tensor, Tensor]],
            adapters_out: list[tuple[Tensor, Tensor]] | None,
            mode: str,
            step_mask: np.ndarray | None = None,
            slope: float = 0.2,
            static_alphas: dict[tuple[int, int], Tensor] | None = None,
            gate_output: str = "sigmoid",
            capture: bool = False):
    """Combined feature maps for every task.

    ``features[d]`` is [B, T, k].  ``adapters_in`` holds the projection
    applied to source features per ordered pair; callers model per-source
    adapters (the full/unconstrained formula) by passing the same tensors
    for every target of a source.  Returns ``(combined, alphas)`` where
    ``alphas`` maps (source, target) to the masked [B, T, T] weight array
    (populated only when ``capture`` is set; empty dict for mode "none").
    ``static_alphas`` supplies scalar per-pair weights for loss-gated
    variants instead of the pairwise gate networks.
    """
    if mode not in TRANSFER_MODES:
        raise ConfigError(f"unknown transfer mode {mode!r}")
    num_tasks = len(features)
    captured: dict[tuple[int, int], np.ndarray] = {}
    if mode == "none":
        return list(features), captured

    b, t, k = features[0].data.shape
    mask = allowed_mask(t, mode)[None, :, :]
    if step_mask is not None:
        mask = mask * (step_mask[:, :, None] * step_mask[:, None, :])
    mask = np.broadcast_to(mask, (b, t, t))
    mask_tensor = Tensor(mask)

    projected = {}
    proj_cache: dict[tuple[int, int], Tensor] = {}
    for (j, d), (w, bias) in adapters_in.items():
        key = (j, id(w), id(bias))
        if key not in proj_cache:
            proj_cache[key] = ad.leaky_relu(
                ad.add(ad.matmul(features[j], w), bias), slope)
        projected[(j, d)] = proj_cache[key]

    def pair_alpha_raw(j: int, d: int) -> Tensor:
        if static_alphas is not None:
            return ad.broadcast_to(static_alphas[(j, d)].reshape((1, 1, 1)),
                                   (b, t, t))
        vs = gating_vars[j] if gating_vars is not None else None
        vt = gating_vars[d] if gating_vars is not None else None
        logits = pairwise_gate_logits(features[j], features[d], vs, vt,
                                      gates[(j, d)], slope)
        return logits if gate_output == "softmax" else ad.sigmoid(logits)

    combined: list[Tensor] = []
    for d in range(num_tasks):
        sources = [j for j, dd in pair_iter(num_tasks, mode) if dd == d]
        if gate_output == "softmax" and static_alphas is None:
            raw = ad.stack([pair_alpha_raw(j, d) for j in sources], axis=0)
            weight = ad.mul(ad.exp(raw), Tensor(np.broadcast_to(mask, raw.data.shape)))
            denom = ad.add(weight.sum(axis=(0, 2), keepdims=True), Tensor(1e-30))
            alphas = [weight[i] / denom[0] for i in range(len(sources))]
        else:
            alphas = [ad.mul(pair_alpha_raw(j, d), mask_tensor) for j in sources]

        total = None
        for j, alpha in zip(sources, alphas):
            if capture:
                captured[(j, d)] = alpha.data.copy()
            term = ad.mul(alpha.reshape((b, t, t, 1)),
                          projected[(j, d)].reshape((b, t, 1, k)))
            term = term.sum(axis=1)
            total = term if total is None else ad.add(total, term)
        if adapters_out is not None and mode in OUTER_ADAPTER_MODES:
            w, bias = adapters_out[d]
            total = ad.add(ad.matmul(total, w), bias)
        combined.append(ad.add(features[d], total))
    return combined, captured


# -- transfer graph ----------------------------------------------------------

EXPORT_COLUMNS = (
    "source_task", "target_task", "source_t", "target_t", "alpha",
    "source_epistemic_var", "source_aleatoric_var",
    "target_epistemic_var", "target_aleatoric_var",
)


@dataclass
class TransferGraph:
    """Transfer weights of one forward pass on one instance.

    ``alpha[j, d, i, t]`` is the weight from task j's step i into task d's
    step t; cells outside the mode's allowed region are exactly zero.
    ``epistemic``/``aleatoric`` hold per-(task, step) mean feature variances.
    """

    alpha: np.ndarray
    mode: str
    epistemic: np.ndarray
    aleatoric: np.ndarray
    valid_steps: int
    _norm_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 4 or self.alpha.shape[0] != self.alpha.shape[1] \
                or self.alpha.shape[2] != self.alpha.shape[3]:
            raise DimensionError(f"alpha must be [D,D,T,T], got {self.alpha.shape}")
        if not np.isfinite(self.alpha).all():
            raise ValueError("transfer weights must be finite")
        self.check_mode_mask()

    @property
    def num_tasks(self) -> int:
        return self.alpha.shape[0]

    @property
    def timesteps(self) -> int:
        return self.alpha.shape[2]

    def check_mode_mask(self) -> None:
        t = self.timesteps
        disallowed = 1.0 - allowed_mask(t, self.mode)
        if np.any(self.alpha * disallowed[None, None] != 0.0):
            raise ValueError(f"alpha violates {self.mode!r} mask")
        if self.mode == "intratask":
            off = ~np.eye(self.num_tasks, dtype=bool)
            if np.any(self.alpha[off] != 0.0):
                raise ValueError("intratask alpha has cross-task entries")

    def outgoing(self, j: int, t: int, d: int) -> float:
        """Mean transfer out of (task j, step t) into task d's steps t..T-1."""
        key = ("out", j, t, d)
        if key not in self._norm_cache:
            self._check_index(j, t, d)
            row = self.alpha[j, d, t, t:self.valid_steps]
            self._norm_cache[key] = float(row.mean())
        return self._norm_cache[key]

    def incoming(self, d: int, t: int, j: int) -> float:
        """Mean transfer into (task d, step t) from task j's steps 0..t."""
        key = ("in", d, t, j)
        if key not in self._norm_cache:
            self._check_index(j, t, d)
            col = self.alpha[j, d, 0:t + 1, t]
            self._norm_cache[key] = float(col.mean())
        return self._norm_cache[key]

    def _check_index(self, j, t, d):
        if not (0 <= j < self.num_tasks and 0 <= d < self.num_tasks):
            raise IndexError(f"task index out of range: {j}, {d}")
        if not 0 <= t < self.valid_steps:
            raise IndexError(f"timestep {t} out of range [0, {self.valid_steps})")

    def to_records(self) -> list[dict]:
        rows = []
        mask = allowed_mask(self.timesteps, self.mode)
        for j in range(self.num_tasks):
            for d in range(self.num_tasks):
                if self.mode == "intratask" and j != d:
                    continue
                for i in range(self.valid_steps):
                    for t in range(self.valid_steps):
                        if mask[i, t] == 0.0:
                            continue
                        rows.append({
                            "source_task": j, "target_task": d,
                            "source_t": i, "target_t": t,
                            "alpha": float(self.alpha[j, d, i, t]),
                            "source_epistemic_var": float(self.epistemic[j, i]),
                            "source_aleatoric_var": float(self.aleatoric[j, i]),
                            "target_epistemic_var": float(self.epistemic[d, t]),
                            "target_aleatoric_var": float(self.aleatoric[d, t]),
                        })
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=EXPORT_COLUMNS)
            writer.writeheader()
            for row in self.to_records():
                writer.writerow(row)


def read_transfer_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            rows.append({key: (int(row[key]) if key.endswith(("task", "_t"))
                               else float(row[key]))
                         for key in EXPORT_COLUMNS})
        return rows


def normalized_outgoing(graph: TransferGraph, j: int, t: int, d: int) -> float:
    return graph.outgoing(j, t, d)


def normalized_incoming(graph: TransferGraph, d: int, t: int, j: int) -> float:
    return graph.incoming(d, t, j)


# -- online (incremental) inference -------------------------------------

@dataclass
class PairGateView:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class TransferWeightsView:
    """Plain-array view of a model's transfer parameters for inference."""

    mode: str
    slope: float
    num_tasks: int
    gates: dict[tuple[int, int], PairGateView]
    adapters_in: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    adapters_out: list[tuple[np.ndarray, np.ndarray]] | None
    uses_variance: bool
    gate_output: str = "sigmoid"
    static_alphas: np.ndarray | None = None  # [D, D] for loss-gated variants


class TransferCache:
    """Per-instance cache of past features and adapter projections."""

    def __init__(self, num_tasks: int):
        self.features: list[list[np.ndarray]] = [[] for _ in range(num_tasks)]
        self.variances: list[list[np.ndarray]] = [[] for _ in range(num_tasks)]
        self.projected: dict[tuple[int, int], list[np.ndarray]] = {}

    @property
    def steps(self) -> int:
        return len(self.features[0])


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _gate_logits_rows(view: TransferWeightsView, gate: PairGateView,
                      f_rows: np.ndarray, v_rows: np.ndarray | None,
                      f_tgt: np.ndarray, v_tgt: np.ndarray | None) -> np.ndarray:
    """Logits for several source rows against one target vector."""
    n = f_rows.shape[0]
    if view.uses_variance:
        x = np.concatenate([
            f_rows, np.tile(f_tgt, (n, 1)),
            v_rows, np.tile(v_tgt, (n, 1))], axis=1)
    else:
        x = np.concatenate([f_rows, np.tile(f_tgt, (n, 1))], axis=1)
    hidden = _leaky(x @ gate.w1 + gate.b1, view.slope)
    return (hidden @ gate.w2 + gate.b2)[:, 0]


def incremental_step(view: TransferWeightsView, cache: TransferCache,
                     new_features: np.ndarray,
                     new_variances: np.ndarray | None):
    """Advance one timestep; cost grows linearly with the steps seen so far.

    ``new_features`` is [D, k] (one step per task).  Returns
    ``(combined, alpha_cols)`` where ``combined`` is [D, k] and
    ``alpha_cols[j, d]`` holds the new column alpha[j, d, 0..t, t].
    Numerically identical to recomputing the full combined map.
    """
    if view.mode not in CAUSAL_MODES:
        raise ConfigError(
            f"online inference requires a causal mode, not {view.mode!r}")
    num_tasks = view.num_tasks
    width = next(iter(view.adapters_in.values()))[0].shape[0] \
        if view.adapters_in else new_features.shape[1]
    if new_features.shape != (num_tasks, width):
        raise DimensionError(
            f"expected features [D={num_tasks}, k], got {new_features.shape}")
    if view.uses_variance:
        if new_variances is None or new_variances.shape != new_features.shape:
            raise DimensionError("variance block must match feature block")

    for j in range(num_tasks):
        cache.features[j].append(new_features[j])
        if new_variances is not None:
            cache.variances[j].append(new_variances[j])
    for (j, d), (w, bias) in view.adapters_in.items():
        cache.projected.setdefault((j, d), []).append(
            _leaky(new_features[j] @ w + bias, view.slope))

    t = cache.steps - 1
    combined = np.empty_like(new_features)
    alpha_cols = np.zeros((num_tasks, num_tasks, t + 1))
    if view.mode == "none":
        return new_features.copy(), alpha_cols

    lo = t if view.mode == "samestep" else 0
    for d in range(num_tasks):
        sources = [j for j, dd in pair_iter(num_tasks, view.mode) if dd == d]
        logits = {}
        for j in sources:
            if view.static_alphas is not None:
                continue
            f_rows = np.asarray(cache.features[j][lo:t + 1])
            v_rows = (np.asarray(cache.variances[j][lo:t + 1])
                      if view.uses_variance else None)
            v_tgt = new_variances[d] if view.uses_variance else None
            logits[j] = _gate_logits_rows(view, view.gates[(j, d)], f_rows,
                                          v_rows, new_features[d], v_tgt)
        if view.static_alphas is not None:
            weights = {j: np.full(t + 1 - lo, view.static_alphas[j, d])
                       for j in sources}
        elif view.gate_output == "softmax":
            denom = sum(np.exp(logits[j]).sum() for j in sources) + 1e-30
            weights = {j: np.exp(logits[j]) / denom for j in sources}
        else:
            weights = {j: _sigmoid(logits[j]) for j in sources}

        total = np.zeros(new_features.shape[1])
        for j in sources:
            proj_rows = np.asarray(cache.projected[(j, d)][lo:t + 1])
            total = total + weights[j] @ proj_rows
            alpha_cols[j, d, lo:t + 1] = weights[j]
        if view.adapters_out is not None and view.mode in OUTER_ADAPTER_MODES:
            w, bias = view.adapters_out[d]
            total = total @ w + bias
        combined[d] = new_features[d] + total
    return combined, alpha_cols


def reference_combine(view: TransferWeightsView, features: np.ndarray,
                      variances: np.ndarray | None):
    """Straightforward full recomputation used as the equivalence oracle.

    ``features`` is [D, T, k].  Returns (combined [D, T, k],
    alpha [D, D, T, T]).  Loops per target step so it shares no code path
    with :func:`incremental_step` beyond the weight arrays.
    """
    num_tasks, total_steps, width = features.shape
    combined = np.zeros_like(features)
    alpha = np.zeros((num_tasks, num_tasks, total_steps, total_steps))
    mask = allowed_mask(total_steps, view.mode)
    projected = {
        (j, d): _leaky(features[j] @ w + bias, view.slope)
        for (j, d), (w, bias) in view.adapters_in.items()}
    for d in range(num_tasks):
        sources = [j for j, dd in pair_iter(num_tasks, view.mode) if dd == d]
        for t in range(total_steps):
            rows_idx = np.nonzero(mask[:, t])[0]
            per_source = {}
            for j in sources:
                if view.static_alphas is not None:
                    per_source[j] = np.full(rows_idx.size,
                                            view.static_alphas[j, d])
                    continue
                f_rows = features[j][rows_idx]
                v_rows = variances[j][rows_idx] if view.uses_variance else None
                v_tgt = variances[d][t] if view.uses_variance else None
                logits = _gate_logits_rows(view, view.gates[(j, d)], f_rows,
                                           v_rows, features[d][t], v_tgt)
                per_source[j] = logits
            if view.static_alphas is None:
                if view.gate_output == "softmax":
                    denom = sum(np.exp(per_source[j]).sum()
                                for j in sources) + 1e-30
                    per_source = {j: np.exp(v) / denom
                                  for j, v in per_source.items()}
                else:
                    per_source = {j: _sigmoid(v)
                                  for j, v in per_source.items()}
            total = np.zeros(width)
            for j in sources:
                total = total + per_source[j] @ projected[(j, d)][rows_idx]
                alpha[j, d, rows_idx, t] = per_source[j]
            if view.adapters_out is not None and view.mode in OUTER_ADAPTER_MODES:
                w, bias = view.adapters_out[d]
                total = total @ w + bias
            combined[d, t] = features[d, t] + (total if view.mode != "none"
                                               else 0.0)
    if view.mode == "none":
        return features.copy(), alpha
    return combined, alpha
