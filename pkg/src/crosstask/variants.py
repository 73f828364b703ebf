"""Model families sharing one substrate and one training surface.

Families
--------
``stl``          one independent recurrent predictor per task (disjoint
                 parameters: per-task embedding, LSTM and output head);
``mtl``          hard sharing: one embedding + LSTM trunk for all tasks,
                 task-specific output heads only;
``mtl_kendall``  the hard-sharing model trained with the uncertainty-based
                 loss weighting sum_d[(1/sigma_d^2) L_d + log(sigma_d)] over
                 learnable per-task sigmas;
``amtl_loss``    transfer gated by running mean task losses: each ordered
                 pair's gate reads (mean loss of source, mean loss of target)
                 and outputs one static weight reused at every timestep;
``p_amtl``       the probabilistic transfer model restricted to same-step
                 transfer (its T=1 instantiation is the non-temporal model);
``td_amtl``      deterministic ablation: gates read features only, no
                 stochastic channels anywhere (forward is RNG-independent);
``tp_amtl``      the full temporal probabilistic transfer model.

Every built model exposes ``fit`` / ``predict_proba`` /
``export_transfer_graph`` (the export is empty for non-transfer families).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .model import (EpisodeBatch, ModelConfig, SequenceModel, TransferModel,
                    ParamStore, attend_and_predict, embed, loss, shared_encode)
from .rng import RngStream
from .transfer import GateWeights

FAMILIES = ("stl", "mtl", "amtl_loss", "mtl_kendall", "p_amtl", "td_amtl",
            "tp_amtl")
# Families never recomputed here; the names exist so externally reported
# numbers can sit alongside computed rows in result tables.
PLACEHOLDER_FAMILIES = ("stl_transformer", "mtl_transformer", "stl_retain",
                        "mtl_retain", "stl_ua", "mtl_ua", "stl_sand",
                        "mtl_sand", "stl_adacare", "mtl_adacare")

NEUTRAL_BCE = float(np.log(2.0))  # chance-level binary cross-entropy


@dataclass(frozen=True)
class VariantSpec:
    """Declarative selection of a model family plus config overrides."""

    family: str
    transfer_mode: str | None = None
    uncertainty_mode: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown variant family {self.family!r}")
        if self.family == "td_amtl" and self.uncertainty_mode not in (None, "none"):
            raise ConfigError(
                "td_amtl is the deterministic ablation; it cannot run with "
                f"uncertainty_mode={self.uncertainty_mode!r}")
        if self.family in ("p_amtl", "amtl_loss") \
                and self.transfer_mode not in (None, "samestep"):
            raise ConfigError(
                f"{self.family} uses same-step transfer; "
                f"got transfer_mode={self.transfer_mode!r}")

    @property
    def name(self) -> str:
        return self.label or self.family

    def to_dict(self) -> dict:
        return {"family": self.family, "transfer_mode": self.transfer_mode,
                "uncertainty_mode": self.uncertainty_mode, "label": self.label}

    @classmethod
    def from_dict(cls, payload: dict) -> "VariantSpec":
        return cls(**payload)


class TaskLossTracker:
    """Exponential moving average of per-task training losses.

    Feeds the loss-gated transfer baseline; the first recorded value for a
    task seeds its mean directly, later batches blend with decay 0.99.
    Tasks never seen report the chance-level BCE.
    """

    def __init__(self, num_tasks: int, decay: float = 0.99):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.means = np.full(num_tasks, NEUTRAL_BCE)
        self.batches_seen = np.zeros(num_tasks, dtype=np.int64)

    @property
    def total_batches(self) -> int:
        return int(self.batches_seen.sum())

    def update(self, per_task_losses: np.ndarray,
               per_task_counts: np.ndarray) -> None:
        per_task_losses = np.asarray(per_task_losses, dtype=np.float64)
        if not np.isfinite(per_task_losses[per_task_counts > 0]).all():
            raise ConfigError("tracker update with non-finite loss")
        for d in np.nonzero(per_task_counts > 0)[0]:
            if self.batches_seen[d] == 0:
                self.means[d] = per_task_losses[d]
            else:
                self.means[d] = (self.decay * self.means[d]
                                 + (1.0 - self.decay) * per_task_losses[d])
            self.batches_seen[d] += 1

    def values(self) -> np.ndarray:
        if self.total_batches == 0:
            raise ConfigError("loss tracker has no recorded batches")
        return self.means.copy()


def loss_gate_weight(gate: GateWeights, loss_src: float, loss_tgt: float,
                     slope: float = 0.2) -> Tensor:
    """Static transfer weight from two scalar mean losses; output in (0, 1)."""
    x = Tensor(np.array([loss_src, loss_tgt]))
    hidden = ad.leaky_relu(ad.add(ad.matmul(x, gate.w1), gate.b1), slope)
    return ad.sigmoid(ad.add(ad.matmul(hidden, gate.w2), gate.b2))


def amtl_loss_weight(model: TransferModel, tracker: TaskLossTracker,
                     j: int, d: int) -> Tensor:
    """Transfer weight of the loss-gated baseline for pair (source j, target d)."""
    values = tracker.values()
    return loss_gate_weight(model.gate_weights(j, d), float(values[j]),
                            float(values[d]), model.config.leaky_relu_slope)


def kendall_weighted_loss(per_task_losses, log_sigmas: Tensor) -> Tensor:
    """sum_d [(1 / sigma_d^2) L_d + log(sigma_d)] with sigma_d = exp(s_d).

    Gradients flow both into the loss producers and the log-sigma weights;
    for a fixed loss L the minimizing sigma is sqrt(2 L).
    """
    if isinstance(per_task_losses, (list, tuple)):
        per_task_losses = ad.stack(list(per_task_losses), axis=0)
    inv_var = ad.exp(ad.mul(Tensor(-2.0), log_sigmas))
    return ad.add(ad.mul(inv_var, per_task_losses).sum(), log_sigmas.sum())


class RecurrentBaseline(SequenceModel):
    """Single-task and hard-sharing recurrent baselines.

    Per task d the prediction is
    ``sigmoid(mean_t[tanh(h^(t)) * v^(t)] W_d + b_d)`` where h is the LSTM
    output and v the linear embedding; ``stl`` gives every task its own
    embedding + LSTM, ``mtl`` shares them across tasks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, kind: str = "mtl",
                 kendall: bool = False):
        if kind not in ("stl", "mtl"):
            raise ConfigError(f"unknown baseline kind {kind!r}")
        self.config = config
        self.seed = seed
        self.kind = kind
        self.kendall = kendall
        self.family = ("mtl_kendall" if kendall else kind)
        self.params = ParamStore(RngStream(seed).child("init"))
        k, m = config.hidden_size, config.num_features
        if kind == "mtl":
            self.params.uniform("embed.W", (m, k), m)
            self.params.lstm("lstm", k, k)
        for d in range(config.num_tasks):
            if kind == "stl":
                self.params.uniform(f"task{d}.embed.W", (m, k), m)
                self.params.lstm(f"task{d}.lstm", k, k)
            self.params.affine(f"task{d}.out", k, 1)
        if kendall:
            self.params.zeros("kendall.log_sigma", (config.num_tasks,))

    def forward(self, batch: EpisodeBatch, stream: RngStream, train: bool,
                capture: bool = False, **kwargs):
        cfg = self.config
        p = self.params
        x = Tensor(batch.inputs)
        step_mask = batch.step_mask()
        rate = cfg.dropout_rate
        probs = []
        shared_v = shared_h = None
        if self.kind == "mtl":
            shared_v = embed(x, p["embed.W"])
            shared_h = shared_encode(shared_v, p["lstm.Wx"], p["lstm.Wh"],
                                     p["lstm.b"])
            shared_h = ad.dropout(shared_h, rate, stream.child("drop"),
                                  active=train and rate > 0.0)
        for d in range(cfg.num_tasks):
            if self.kind == "stl":
                v = embed(x, p[f"task{d}.embed.W"])
                h = shared_encode(v, p[f"task{d}.lstm.Wx"],
                                  p[f"task{d}.lstm.Wh"], p[f"task{d}.lstm.b"])
                h = ad.dropout(h, rate, stream.child(f"drop.{d}"),
                               active=train and rate > 0.0)
            else:
                v, h = shared_v, shared_h
            beta = ad.tanh(h)
            prod = ad.mul(ad.mul(beta, v), Tensor(step_mask[:, :, None]))
            pooled = ad.div(prod.sum(axis=1),
                            Tensor(batch.timestep_counts[:, None].astype(float)))
            logits = ad.add(ad.matmul(pooled, p[f"task{d}.out.W"]),
                            p[f"task{d}.out.b"])
            probs.append(ad.sigmoid(logits))
        return ad.concat(probs, axis=1), {"alphas": {}}

    def loss_on_batch(self, batch, stream, train, l2_coefficient=0.0,
                      **forward_kwargs):
        if not self.kendall:
            return super().loss_on_batch(batch, stream, train, l2_coefficient,
                                         **forward_kwargs)
        probs, aux = self.forward(batch, stream, train, **forward_kwargs)
        from .model import LOG_CLAMP
        p = ad.clip(probs, LOG_CLAMP, 1.0 - LOG_CLAMP)
        y = Tensor(batch.labels)
        one = Tensor(1.0)
        bce = ad.neg(ad.add(ad.mul(y, ad.log(p)),
                            ad.mul(ad.sub(one, y), ad.log(ad.sub(one, p)))))
        masked = ad.mul(bce, Tensor(batch.label_mask.astype(np.float64)))
        per_task = [masked[:, d].sum() for d in range(self.config.num_tasks)]
        total = kendall_weighted_loss(per_task, self.params["kendall.log_sigma"])
        if l2_coefficient:
            penalty = None
            for tensor in self.params.tensors():
                term = ad.square(tensor).sum()
                penalty = term if penalty is None else ad.add(penalty, term)
            total = ad.add(total, ad.mul(Tensor(float(l2_coefficient)), penalty))
        with ad.no_grad():
            counts = batch.label_mask.sum(axis=0)
            sums = np.array([float(t.data) for t in per_task])
            means = np.divide(sums, counts, out=np.zeros_like(sums),
                              where=counts > 0)
        aux["per_task_bce"] = means
        aux["per_task_counts"] = counts
        return total, aux


def build(spec: VariantSpec, config: ModelConfig, seed: int = 0) -> SequenceModel:
    """Instantiate a trainable model for the requested family.

    Raises :class:`ConfigError` on inconsistent spec/config combinations
    (e.g. the deterministic ablation with an uncertainty channel enabled).
    """
    from dataclasses import replace

    family = spec.family
    if family in ("stl", "mtl", "mtl_kendall"):
        return RecurrentBaseline(config, seed=seed,
                                 kind=("stl" if family == "stl" else "mtl"),
                                 kendall=(family == "mtl_kendall"))

    transfer_mode = spec.transfer_mode or config.transfer_mode
    uncertainty_mode = spec.uncertainty_mode or config.uncertainty_mode
    if family in ("p_amtl", "amtl_loss"):
        transfer_mode = "samestep"
    if family == "td_amtl":
        uncertainty_mode = "none"
    cfg = replace(config, transfer_mode=transfer_mode,
                  uncertainty_mode=uncertainty_mode)

    if family == "td_amtl":
        return TransferModel(cfg, seed=seed, gate_kind="features",
                             family=family)
    if family == "amtl_loss":
        return TransferModel(cfg, seed=seed, gate_kind="loss", family=family)
    if uncertainty_mode == "none":
        raise ConfigError(
            f"{family} requires an uncertainty channel; use td_amtl for the "
            "deterministic model")
    return TransferModel(cfg, seed=seed, gate_kind="uncertainty", family=family)
