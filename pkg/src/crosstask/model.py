"""Multi-task recurrent network with probabilistic task features and
uncertainty-gated cross-task transfer.

Architecture (all tasks share the lowest layers):

1. linear input embedding shared by every task;
2. one unidirectional LSTM over the embedded sequence (shared);
3. per-task stacks of leaky-relu feed-forward layers producing task- and
   timestep-specific embeddings;
4. per-task probabilistic feature heads: a mean head, a softplus scale head
   (aleatoric channel), and Monte-Carlo dropout replays of the mean head
   (epistemic channel, sample variance over K perturbed passes);
5. gated transfer combining features across tasks and timesteps
   (see :mod:`crosstask.transfer`);
6. per-task attention over combined features; the attention vector multiplies
   the shared embedding elementwise, is averaged over valid timesteps, and a
   per-task affine head plus logistic link yields the event probability.

The training objective is masked binary cross-entropy summed over instances
and labeled tasks, plus an L2 penalty on all parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import transfer as tr
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .rng import RngStream

UNCERTAINTY_MODES = ("both", "epistemic", "aleatoric", "none")
MEAN_ACTIVATIONS = ("leaky_relu", "identity", "tanh")
GATE_OUTPUTS = ("sigmoid", "softmax")
LOG_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters with validity constraints."""

    num_tasks: int
    num_features: int
    hidden_size: int = 16
    embed_layers: int = 2
    dropout_rate: float = 0.1
    mc_samples: int = 8
    uncertainty_mode: str = "both"
    transfer_mode: str = "full"
    leaky_relu_slope: float = 0.2
    mean_activation: str = "leaky_relu"
    gate_output: str = "sigmoid"

    def __post_init__(self):
        for name in ("num_tasks", "num_features", "hidden_size", "embed_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise ConfigError(f"unknown uncertainty_mode {self.uncertainty_mode!r}")
        if self.transfer_mode not in tr.TRANSFER_MODES:
            raise ConfigError(f"unknown transfer_mode {self.transfer_mode!r}")
        if self.mean_activation not in MEAN_ACTIVATIONS:
            raise ConfigError(f"unknown mean_activation {self.mean_activation!r}")
        if self.gate_output not in GATE_OUTPUTS:
            raise ConfigError(f"unknown gate_output {self.gate_output!r}")
        if self.uses_epistemic and self.mc_samples < 2:
            raise ConfigError(
                "mc_samples must be >= 2 with epistemic uncertainty on "
                "(the variance of one sample is undefined)")

    @property
    def uses_epistemic(self) -> bool:
        return self.uncertainty_mode in ("both", "epistemic")

    @property
    def uses_aleatoric(self) -> bool:
        return self.uncertainty_mode in ("both", "aleatoric")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


@dataclass
class EpisodeBatch:
    """Batch of multi-task time-series instances with per-task label masks."""

    inputs: np.ndarray          # [B, T, m]
    labels: np.ndarray          # [B, D] in {0, 1}
    label_mask: np.ndarray      # [B, D] bool; False excludes the task's loss
    timestep_counts: np.ndarray  # [B] valid steps per instance (<= T)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        self.timestep_counts = np.asarray(self.timestep_counts, dtype=np.int64)
        if self.inputs.ndim != 3:
            raise DimensionError(f"inputs must be [B,T,m], got {self.inputs.shape}")
        b, t, _ = self.inputs.shape
        if self.labels.shape != self.label_mask.shape or self.labels.ndim != 2 \
                or self.labels.shape[0] != b:
            raise DimensionError("labels/label_mask must be [B, D]")
        if self.timestep_counts.shape != (b,):
            raise DimensionError("timestep_counts must be [B]")
        if np.any(self.timestep_counts < 1) or np.any(self.timestep_counts > t):
            raise ConfigError("timestep counts must lie in [1, T]")
        if not np.isin(self.labels[self.label_mask], (0.0, 1.0)).all():
            raise ConfigError("labels must be binary where masked in")

    @property
    def num_instances(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_timesteps(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_tasks(self) -> int:
        return self.labels.shape[1]

    def step_mask(self) -> np.ndarray:
        """[B, T] validity of each timestep (1.0 inside the instance)."""
        t = np.arange(self.num_timesteps)
        return (t[None, :] < self.timestep_counts[:, None]).astype(np.float64)

    def select(self, indices) -> "EpisodeBatch":
        return EpisodeBatch(self.inputs[indices], self.labels[indices],
                            self.label_mask[indices],
                            self.timestep_counts[indices])

    @classmethod
    def from_inputs(cls, inputs, num_tasks: int) -> "EpisodeBatch":
        """Unlabeled batch for prediction paths."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim == 2:
            inputs = inputs[:, None, :]
        b, t, _ = inputs.shape
        return cls(inputs, np.zeros((b, num_tasks)),
                   np.zeros((b, num_tasks), dtype=bool), np.full(b, t))


@dataclass
class LatentDistribution:
    """Per-task probabilistic features for one forward pass."""

    mean: Tensor                 # [B, T, k]
    scale: Tensor | None         # softplus output, strictly positive
    mc_variance: Tensor | None   # sample variance over K dropout replays
    features: Tensor             # realization used downstream

    def feature_step(self, t: int) -> Tensor:
        return self.features[:, t, :]

    def gating_variance(self) -> Tensor | None:
        """Total variance fed to the transfer gates (epistemic + aleatoric)."""
        parts = []
        if self.mc_variance is not None:
            parts.append(self.mc_variance)
        if self.scale is not None:
            parts.append(ad.square(self.scale))
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])


# -- parameter registry -------------------------------------------------------


class ParamStore:
    """Named trainable tensors with fan-in-scaled initialization.

    Each parameter draws its initial values from a child stream keyed by its
    own name, so adding parameters never perturbs the initialization of
    existing ones.
    """

    def __init__(self, stream: RngStream):
        self._stream = stream
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor = ad.parameter(np.asarray(values, dtype=ad.default_dtype()))
        self._params[name] = tensor
        return tensor

    def uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        limit = 1.0 / np.sqrt(fan_in)
        values = (self._stream.child(name).uniform(shape) * 2.0 - 1.0) * limit
        return self.create(name, values)

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self.create(name, np.zeros(shape))

    def affine(self, name: str, fan_in: int, fan_out: int,
               zero: bool = False) -> tuple[Tensor, Tensor]:
        if zero:
            w = self.zeros(f"{name}.W", (fan_in, fan_out))
        else:
            w = self.uniform(f"{name}.W", (fan_in, fan_out), fan_in)
        b = self.zeros(f"{name}.b", (fan_out,))
        return w, b

    def lstm(self, name: str, in_dim: int, k: int):
        wx = self.uniform(f"{name}.Wx", (in_dim, 4 * k), in_dim)
        wh = self.uniform(f"{name}.Wh", (k, 4 * k), k)
        b = np.zeros(4 * k)
        b[k:2 * k] = 1.0  # forget-gate bias starts open
        return wx, wh, self.create(f"{name}.b", b)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch; missing={sorted(missing)}, "
                f"unexpected={sorted(extra)}")
        for name, tensor in self._params.items():
            values = np.asarray(state[name], dtype=tensor.data.dtype)
            if values.shape != tensor.data.shape:
                raise DimensionError(
                    f"{name}: stored shape {values.shape} != {tensor.data.shape}")
            tensor.data = values.copy()


# -- architecture operations ---------------------------------------------


def embed(x: Tensor, w_embed: Tensor) -> Tensor:
    """Shared linear embedding of raw features, applied per timestep."""
    if x.data.shape[-1] != w_embed.data.shape[0]:
        raise DimensionError(
            f"embedding expects {w_embed.data.shape[0]} features, "
            f"got {x.data.shape}")
    return ad.matmul(x, w_embed)


def shared_encode(v: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Unidirectional LSTM over the embedded sequence.

    Output step t depends only on inputs 1..t (causal); accepts [T, k] or
    [B, T, k] and returns the same leading shape.
    """
    single = v.data.ndim == 2
    seq = v.reshape((1,) + v.data.shape) if single else v
    batch, steps, _ = seq.data.shape
    k = wh.data.shape[0]
    h = Tensor(np.zeros((batch, k)))
    c = Tensor(np.zeros((batch, k)))
    state = (h, c)
    outputs = []
    for t in range(steps):
        out, state = ad.lstm_step(seq[:, t, :], state, wx, wh, b)
        outputs.append(out)
    stacked = ad.stack(outputs, axis=1)
    return stacked[0] if single else stacked


def task_embed(r: Tensor, layers: list[tuple[Tensor, Tensor]],
               slope: float) -> Tensor:
    """Task-private feed-forward stack applied independently per timestep."""
    h = r
    for w, b in layers:
        h = ad.leaky_relu(ad.add(ad.matmul(h, w), b), slope)
    return h


def _mean_activation(x: Tensor, kind: str, slope: float) -> Tensor:
    if kind == "identity":
        return x
    if kind == "tanh":
        return ad.tanh(x)
    return ad.leaky_relu(x, slope)


def latent(h: Tensor, mean_head: tuple[Tensor, Tensor] | None,
           scale_head: tuple[Tensor, Tensor] | None, *,
           uncertainty_mode: str, dropout_rate: float, mc_samples: int,
           stream: RngStream, train: bool, slope: float,
           mean_activation: str = "leaky_relu") -> LatentDistribution:
    """Probabilistic task features with epistemic/aleatoric channels.

    Draw order per call is fixed (main-path mask, K replay masks, Gaussian
    noise), so a replayed stream reproduces the pass exactly.  With
    uncertainty off the embedding itself is the feature (no heads).
    """
    if uncertainty_mode == "none":
        return LatentDistribution(mean=h, scale=None, mc_variance=None,
                                  features=h)
    uses_epistemic = uncertainty_mode in ("both", "epistemic")
    uses_aleatoric = uncertainty_mode in ("both", "aleatoric")
    if uses_epistemic and mc_samples < 2:
        raise ConfigError("epistemic variance needs mc_samples >= 2")

    w_mu, b_mu = mean_head
    h_main = ad.dropout(h, dropout_rate, stream,
                        active=train and dropout_rate > 0.0)
    mu = _mean_activation(ad.add(ad.matmul(h_main, w_mu), b_mu),
                          mean_activation, slope)

    scale = None
    if uses_aleatoric:
        w_s, b_s = scale_head
        scale = ad.softplus(ad.add(ad.matmul(h_main, w_s), b_s))

    mc_variance = None
    if uses_epistemic:
        if dropout_rate == 0.0:
            mc_variance = Tensor(np.zeros(mu.data.shape))
        else:
            samples = []
            for _ in range(mc_samples):
                perturbed = ad.dropout(h, dropout_rate, stream, active=True)
                samples.append(_mean_activation(
                    ad.add(ad.matmul(perturbed, w_mu), b_mu),
                    mean_activation, slope))
            stacked = ad.stack(samples, axis=0)
            centered = ad.sub(stacked, stacked.mean(axis=0, keepdims=True))
            mc_variance = ad.square(centered).sum(axis=0) / float(mc_samples - 1)

    if uses_aleatoric and train:
        features = ad.gaussian_sample(mu, scale, stream)
    else:
        features = mu
    return LatentDistribution(mean=mu, scale=scale, mc_variance=mc_variance,
                              features=features)


def attend_and_predict(combined: Tensor, v: Tensor,
                       attn: tuple[Tensor, Tensor],
                       out: tuple[Tensor, Tensor],
                       step_mask: np.ndarray | None = None,
                       step_counts: np.ndarray | None = None) -> Tensor:
    """Attention over combined features -> event probability in (0, 1).

    The tanh attention vector multiplies the shared embedding elementwise;
    padded timesteps are excluded from the average, which divides by each
    instance's own step count.
    """
    w_a, b_a = attn
    w_o, b_o = out
    beta = ad.tanh(ad.add(ad.matmul(combined, w_a), b_a))
    prod = ad.mul(beta, v)
    if step_mask is not None:
        prod = ad.mul(prod, Tensor(step_mask[:, :, None]))
    pooled = prod.sum(axis=1)
    steps = (step_counts if step_counts is not None
             else np.full(v.data.shape[0], v.data.shape[1]))
    pooled = ad.div(pooled, Tensor(steps[:, None].astype(np.float64)))
    logits = ad.add(ad.matmul(pooled, w_o), b_o)
    return ad.sigmoid(logits)


def loss(batch: EpisodeBatch, predictions: Tensor, parameters=(),
         l2_coefficient: float = 0.0) -> Tensor:
    """Masked binary cross-entropy plus L2 weight decay.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; tasks
    outside an instance's label set contribute exactly zero loss and zero
    gradient.
    """
    if predictions.data.shape != batch.labels.shape:
        raise DimensionError(
            f"predictions {predictions.data.shape} vs labels {batch.labels.shape}")
    p = ad.clip(predictions, LOG_CLAMP, 1.0 - LOG_CLAMP)
    y = Tensor(batch.labels)
    one = Tensor(1.0)
    bce = ad.neg(ad.add(ad.mul(y, ad.log(p)),
                        ad.mul(ad.sub(one, y), ad.log(ad.sub(one, p)))))
    total = ad.mul(bce, Tensor(batch.label_mask.astype(np.float64))).sum()
    if l2_coefficient:
        penalty = None
        for tensor in parameters:
            term = ad.square(tensor).sum()
            penalty = term if penalty is None else ad.add(penalty, term)
        if penalty is not None:
            total = ad.add(total, ad.mul(Tensor(float(l2_coefficient)), penalty))
    return total


# -- the model -----------------------------------------------------------


class SequenceModel:
    """Shared surface of every trainable model in the package."""

    config: ModelConfig
    params: ParamStore
    family: str = "base"

    def forward(self, batch: EpisodeBatch, stream: RngStream, train: bool,
                capture: bool = False, **kwargs):
        raise NotImplementedError

    def loss_on_batch(self, batch: EpisodeBatch, stream: RngStream,
                      train: bool, l2_coefficient: float = 0.0, **forward_kwargs):
        probs, aux = self.forward(batch, stream, train, **forward_kwargs)
        value = loss(batch, probs, self.params.tensors(), l2_coefficient)
        mask = batch.label_mask
        with ad.no_grad():
            p = np.clip(probs.data, LOG_CLAMP, 1.0 - LOG_CLAMP)
            bce = -(batch.labels * np.log(p)
                    + (1.0 - batch.labels) * np.log(1.0 - p))
            counts = mask.sum(axis=0)
            sums = (bce * mask).sum(axis=0)
            per_task = np.divide(sums, counts, out=np.zeros_like(sums),
                                 where=counts > 0)
        aux["per_task_bce"] = per_task
        aux["per_task_counts"] = counts
        return value, aux

    def predict_proba(self, inputs, stream: RngStream | None = None) -> np.ndarray:
        batch = (inputs if isinstance(inputs, EpisodeBatch)
                 else EpisodeBatch.from_inputs(inputs, self.config.num_tasks))
        if stream is None:
            stream = RngStream(self._eval_seed())
        with ad.no_grad():
            probs, _ = self.forward(batch, stream, train=False)
        return probs.data.copy()

    def export_transfer_graph(self, inputs,
                              stream: RngStream | None = None) -> list:
        return []

    def fit(self, split, train_config, seed: int = 0):
        from .train import fit as _fit
        return _fit(self, split, train_config, seed=seed)

    def _eval_seed(self) -> int:
        return getattr(self, "seed", 0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, state) -> None:
        self.params.load_state_dict(state)


class TransferModel(SequenceModel):
    """The probabilistic cross-task, cross-timestep transfer network.

    ``gate_kind`` selects the transfer-weight inputs:

    - ``"uncertainty"``: source/target features and their total variances
      (the main model);
    - ``"features"``: features only (deterministic ablation; forces
      uncertainty off and dropout to zero so forwards are RNG-independent);
    - ``"loss"``: a per-pair gate fed the two running mean task losses,
      static across timesteps and instances.
    """

    def __init__(self, config: ModelConfig, seed: int = 0,
                 gate_kind: str = "uncertainty", family: str = "tp_amtl"):
        if gate_kind not in ("uncertainty", "features", "loss"):
            raise ConfigError(f"unknown gate_kind {gate_kind!r}")
        if gate_kind == "features":
            if config.uncertainty_mode != "none":
                raise ConfigError(
                    "feature-only gating is the deterministic ablation; "
                    "set uncertainty_mode='none'")
            if config.dropout_rate != 0.0:
                config = replace(config, dropout_rate=0.0)
        if gate_kind == "uncertainty" and config.uncertainty_mode == "none":
            raise ConfigError(
                "uncertainty gating needs an uncertainty channel; use "
                "gate_kind='features' for the deterministic variant")
        self.config = config
        self.seed = seed
        self.gate_kind = gate_kind
        self.family = family
        self.static_gate_inputs: np.ndarray | None = None  # [D] task losses
        self.params = ParamStore(RngStream(seed).child("init"))
        self._build_params()

    # -- construction ------------------------------------------------------

    def _build_params(self):
        cfg = self.config
        k, m, d_all = cfg.hidden_size, cfg.num_features, cfg.num_tasks
        p = self.params
        p.uniform("embed.W", (m, k), m)
        p.lstm("lstm", k, k)
        for d in range(d_all):
            for layer in range(cfg.embed_layers):
                p.affine(f"task{d}.embed{layer}", k, k)
            if cfg.uncertainty_mode != "none":
                p.affine(f"task{d}.mean", k, k)
                if cfg.uses_aleatoric:
                    p.affine(f"task{d}.scale", k, k)
            p.affine(f"task{d}.attn", k, k)
            p.affine(f"task{d}.out", k, 1)
        if cfg.transfer_mode != "none":
            gate_in = self._gate_input_extent()
            for j, d in tr.pair_iter(d_all, cfg.transfer_mode):
                p.affine(f"gate.{j}.{d}.l1", gate_in, k)
                p.affine(f"gate.{j}.{d}.l2", k, 1)
            # training starts at the no-transfer model: the adapter feeding
            # the residual sum is zero at init (the outer one where the mode
            # has it, else the per-pair projection).  Modes with the outer
            # adapter share one inner projection per source task; the
            # same-step/intratask formulas use one adapter per ordered pair.
            has_outer = cfg.transfer_mode in tr.OUTER_ADAPTER_MODES
            if has_outer:
                for j in range(d_all):
                    p.affine(f"adapt_in.{j}", k, k)
                for d in range(d_all):
                    p.affine(f"adapt_out.{d}", k, k, zero=True)
            else:
                for j, d in tr.pair_iter(d_all, cfg.transfer_mode):
                    p.affine(f"adapt_pair.{j}.{d}", k, k, zero=True)

    def _gate_input_extent(self) -> int:
        if self.gate_kind == "loss":
            return 2
        if self.gate_kind == "features":
            return 2 * self.config.hidden_size
        return 4 * self.config.hidden_size

    def gate_weights(self, j: int, d: int) -> tr.GateWeights:
        p = self.params
        return tr.GateWeights(p[f"gate.{j}.{d}.l1.W"], p[f"gate.{j}.{d}.l1.b"],
                              p[f"gate.{j}.{d}.l2.W"], p[f"gate.{j}.{d}.l2.b"])

    # -- forward -------------------------------------------------------------

    def forward(self, batch: EpisodeBatch, stream: RngStream, train: bool,
                capture: bool = False, task_losses: np.ndarray | None = None):
        cfg = self.config
        if batch.inputs.shape[2] != cfg.num_features:
            raise DimensionError(
                f"batch has {batch.inputs.shape[2]} features, "
                f"model expects {cfg.num_features}")
        if batch.num_tasks != cfg.num_tasks:
            raise DimensionError(
                f"batch has {batch.num_tasks} tasks, model expects {cfg.num_tasks}")
        p = self.params
        x = Tensor(batch.inputs)
        v = embed(x, p["embed.W"])
        r = shared_encode(v, p["lstm.Wx"], p["lstm.Wh"], p["lstm.b"])

        latents: list[LatentDistribution] = []
        for d in range(cfg.num_tasks):
            layers = [(p[f"task{d}.embed{i}.W"], p[f"task{d}.embed{i}.b"])
                      for i in range(cfg.embed_layers)]
            h_d = task_embed(r, layers, cfg.leaky_relu_slope)
            mean_head = ((p[f"task{d}.mean.W"], p[f"task{d}.mean.b"])
                         if cfg.uncertainty_mode != "none" else None)
            scale_head = ((p[f"task{d}.scale.W"], p[f"task{d}.scale.b"])
                          if cfg.uses_aleatoric else None)
            # Per-task child streams: draws for one task never shift another's.
            # Callers must pass a distinct stream per forward (e.g. keyed by
            # the optimization step) so masks differ across batches.
            latents.append(latent(
                h_d, mean_head, scale_head,
                uncertainty_mode=cfg.uncertainty_mode,
                dropout_rate=cfg.dropout_rate, mc_samples=cfg.mc_samples,
                stream=stream.child(f"latent.{d}"),
                train=train, slope=cfg.leaky_relu_slope,
                mean_activation=cfg.mean_activation))

        features = [lat.features for lat in latents]
        combined, alphas = self._combine(batch, features, latents, capture,
                                         task_losses)

        probs = []
        step_mask = batch.step_mask()
        for d in range(cfg.num_tasks):
            probs.append(attend_and_predict(
                combined[d], v,
                (p[f"task{d}.attn.W"], p[f"task{d}.attn.b"]),
                (p[f"task{d}.out.W"], p[f"task{d}.out.b"]),
                step_mask=step_mask,
                step_counts=batch.timestep_counts))
        stacked = ad.concat(probs, axis=1)
        aux = {"latents": latents, "alphas": alphas}
        return stacked, aux

    def _combine(self, batch, features, latents, capture, task_losses):
        cfg = self.config
        if cfg.transfer_mode == "none":
            return list(features), {}
        gates = None
        static = None
        gating_vars = None
        if self.gate_kind == "loss":
            static = self._static_alphas(task_losses)
        else:
            gates = {pair: self.gate_weights(*pair)
                     for pair in tr.pair_iter(cfg.num_tasks, cfg.transfer_mode)}
            if self.gate_kind == "uncertainty":
                gating_vars = [lat.gating_variance() for lat in latents]
        adapters_in = self._inner_adapters()
        adapters_out = None
        if cfg.transfer_mode in tr.OUTER_ADAPTER_MODES:
            adapters_out = [(self.params[f"adapt_out.{d}.W"],
                             self.params[f"adapt_out.{d}.b"])
                            for d in range(cfg.num_tasks)]
        return tr.combine(
            features, gating_vars, gates, adapters_in, adapters_out,
            cfg.transfer_mode, step_mask=batch.step_mask(),
            slope=cfg.leaky_relu_slope, static_alphas=static,
            gate_output=cfg.gate_output, capture=capture)

    def _inner_adapters(self):
        cfg = self.config
        adapters = {}
        shared = cfg.transfer_mode in tr.OUTER_ADAPTER_MODES
        for j, d in tr.pair_iter(cfg.num_tasks, cfg.transfer_mode):
            name = f"adapt_in.{j}" if shared else f"adapt_pair.{j}.{d}"
            adapters[(j, d)] = (self.params[f"{name}.W"],
                                self.params[f"{name}.b"])
        return adapters

    def _static_alphas(self, task_losses) -> dict[tuple[int, int], Tensor]:
        if task_losses is None:
            task_losses = self.static_gate_inputs
        if task_losses is None:
            raise ConfigError(
                "loss-gated transfer needs recorded task losses "
                "(train first or pass task_losses)")
        from .variants import loss_gate_weight
        return {pair: loss_gate_weight(self.gate_weights(*pair),
                                       float(task_losses[pair[0]]),
                                       float(task_losses[pair[1]]))
                for pair in tr.pair_iter(self.config.num_tasks,
                                          self.config.transfer_mode)}

    # -- inference-side views -------------------------------------------------

    def export_transfer_graph(self, inputs, stream=None) -> list[tr.TransferGraph]:
        cfg = self.config
        if cfg.transfer_mode == "none":
            return []
        batch = (inputs if isinstance(inputs, EpisodeBatch)
                 else EpisodeBatch.from_inputs(inputs, cfg.num_tasks))
        if stream is None:
            stream = RngStream(self.seed).child("graph")
        with ad.no_grad():
            _, aux = self.forward(batch, stream, train=False, capture=True)
        d_all, t = cfg.num_tasks, batch.num_timesteps
        epistemic = np.zeros((batch.num_instances, d_all, t))
        aleatoric = np.zeros((batch.num_instances, d_all, t))
        for d, lat in enumerate(aux["latents"]):
            if lat.mc_variance is not None:
                epistemic[:, d, :] = lat.mc_variance.data.mean(axis=-1)
            if lat.scale is not None:
                aleatoric[:, d, :] = (lat.scale.data ** 2).mean(axis=-1)
        graphs = []
        for b in range(batch.num_instances):
            alpha = np.zeros((d_all, d_all, t, t))
            for (j, d), arr in aux["alphas"].items():
                alpha[j, d] = arr[b]
            graphs.append(tr.TransferGraph(
                alpha=alpha, mode=cfg.transfer_mode,
                epistemic=epistemic[b], aleatoric=aleatoric[b],
                valid_steps=int(batch.timestep_counts[b])))
        return graphs

    def transfer_view(self) -> tr.TransferWeightsView:
        """Plain-array weights for online/incremental inference."""
        cfg = self.config
        p = self.params
        gates = {}
        if self.gate_kind != "loss" and cfg.transfer_mode != "none":
            for pair in tr.pair_iter(cfg.num_tasks, cfg.transfer_mode):
                j, d = pair
                gates[pair] = tr.PairGateView(
                    p[f"gate.{j}.{d}.l1.W"].data, p[f"gate.{j}.{d}.l1.b"].data,
                    p[f"gate.{j}.{d}.l2.W"].data, p[f"gate.{j}.{d}.l2.b"].data)
        static = None
        if self.gate_kind == "loss":
            if self.static_gate_inputs is None:
                raise ConfigError("loss-gated model has no recorded task losses")
            static = np.zeros((cfg.num_tasks, cfg.num_tasks))
            with ad.no_grad():
                for pair in tr.pair_iter(cfg.num_tasks, cfg.transfer_mode):
                    static[pair] = float(self._static_alphas(None)[pair].data)
        adapters_in = {}
        if cfg.transfer_mode != "none":
            adapters_in = {pair: (w.data, b.data)
                           for pair, (w, b) in self._inner_adapters().items()}
        adapters_out = None
        if cfg.transfer_mode in tr.OUTER_ADAPTER_MODES:
            adapters_out = [(p[f"adapt_out.{d}.W"].data,
                             p[f"adapt_out.{d}.b"].data)
                            for d in range(cfg.num_tasks)]
        return tr.TransferWeightsView(
            mode=cfg.transfer_mode, slope=cfg.leaky_relu_slope,
            num_tasks=cfg.num_tasks, gates=gates, adapters_in=adapters_in,
            adapters_out=adapters_out,
            uses_variance=(self.gate_kind == "uncertainty"),
            gate_output=cfg.gate_output, static_alphas=static)
