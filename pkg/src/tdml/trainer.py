"""Training loop: PK batches, batch-all triplet loss, Adam updates.

One integer seed drives everything (init, batch order, flip bits), so a
given (dataset, model config, train config) always produces bit-identical
parameters and history. Wall time is tracked per epoch for humans but is
deliberately left out of the CSV serialization to keep that guarantee.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import Dataset, save_checkpoint
from .errors import InvalidArgumentError, NoValidTripletsError, NonFiniteGradientError
from .loss import NORMALIZATIONS, TripletBatchView, batch_all_loss
from .model import ModelConfig, ParamSet, backward, forward, init_params
from .sampler import PkBatchPlanner, augment_flip

_FLIP_SALT = 0xF11B


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 30
    p: int = 10
    k: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    normalization: str = "sum"
    seed: int = 0
    augment_flips: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidArgumentError(f"margin must be >= 0, got {self.margin}")
        if self.learning_rate <= 0:
            raise InvalidArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.p < 2 or self.k < 2:
            raise InvalidArgumentError(f"need P >= 2 and K >= 2, got P={self.p} K={self.k}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgumentError("beta1 and beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise InvalidArgumentError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidArgumentError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            t=0,
        )


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with eps added
    outside the square root.
    """
    if list(params.keys()) != list(grads.keys()):
        raise InvalidArgumentError("params and grads disagree on parameter names")
    if set(state.m.keys()) != set(params.keys()):
        raise InvalidArgumentError("Adam state does not match the parameter set")
    t = state.t + 1
    new_params: dict = {}
    new_m: dict = {}
    new_v: dict = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InvalidArgumentError(f"gradient {name} has shape {g.shape}, want {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"gradient {name} contains non-finite entries")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return ParamSet(params.config, new_params), AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    active_fraction: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        """Deterministic columns only; wall time stays in memory."""
        lines = ["epoch,mean_loss,active_fraction"]
        for row in self.epochs:
            lines.append(f"{row.epoch},{row.mean_loss!r},{row.active_fraction!r}")
        return "\n".join(lines) + "\n"


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    *,
    initial_params: ParamSet | None = None,
    checkpoint_path=None,
    per_epoch_checkpoints: bool = False,
    progress=sys.stderr,
) -> tuple[ParamSet, TrainHistory]:
    """Train a model on the dataset; returns final params and history.

    ``initial_params`` warm-starts from existing weights instead of seeded
    init. A checkpoint path adds a final checkpoint (and per-epoch ones
    when requested, suffixed ``.ep<n>``). ``progress=None`` silences the
    per-epoch stderr lines.
    """
    labels = dataset.labels()
    if len(set(labels)) < 2:
        raise NoValidTripletsError(
            "dataset has a single class; no triplet can be formed"
        )
    if initial_params is not None:
        if initial_params.config != model_config:
            raise InvalidArgumentError("initial_params were built for a different model config")
        params = initial_params.copy()
    else:
        params = init_params(model_config, seed=config.seed)

    planner = PkBatchPlanner(labels, config.p, config.k, config.seed)
    flip_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _FLIP_SALT)))
    adam = AdamState.zeros(params)
    history = TrainHistory()
    is_map = dataset.records[0].payload.ndim == 3
    do_flips = config.augment_flips and is_map

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        plan = planner.next_epoch()
        losses = []
        valid_total = 0
        active_total = 0
        for batch_no, batch_idx in enumerate(plan.batches):
            records = [dataset.records[i] for i in batch_idx]
            if do_flips:
                bits = flip_rng.integers(0, 2, size=(len(records), 2))
                records = [
                    replace(r, payload=augment_flip(r.payload, bool(b[0]), bool(b[1])))
                    if b.any()
                    else r
                    for r, b in zip(records, bits)
                ]
            embeddings, trace = forward(params, records)
            view = TripletBatchView(embeddings, np.array([r.label for r in records]))
            result = batch_all_loss(view, config.margin, config.normalization)
            if not np.isfinite(result.total_loss):
                raise NonFiniteGradientError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            param_grads, _ = backward(trace, result.grad)
            params, adam = adam_step(
                params,
                param_grads,
                adam,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.adam_eps,
            )
            losses.append(result.total_loss)
            valid_total += result.valid_triplets
            active_total += result.active_triplets

        mean_loss = float(np.mean(losses))
        active_fraction = active_total / valid_total if valid_total else 0.0
        history.epochs.append(
            EpochStats(epoch, mean_loss, active_fraction, time.perf_counter() - t0)
        )
        if progress is not None:
            print(f"epoch={epoch} loss={mean_loss:.6g} active={active_fraction:.4f}", file=progress)
        if per_epoch_checkpoints and checkpoint_path is not None:
            save_checkpoint(f"{checkpoint_path}.ep{epoch:03d}", model_config, params)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model_config, params)
    return params, history
