"""Bayes-by-Backprop training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .errors import ConfigurationError, NumericalError, TrainingDiverged
from .objective import ElboEstimate, elbo_graph
from .rng import split

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum")
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    clip_norm: float | None = None
    kl_weight: float | None = None  # None: 1 / train_size
    mc_samples: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and mc_samples >= 1 required")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; expected {OPTIMIZERS}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be positive")


class SGD:
    """``p <- p - lr * v`` with ``v <- momentum * v + g`` (plain SGD when momentum is 0)."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, config: TrainConfig) -> SGD:
        beta = config.momentum if config.optimizer == "momentum" else 0.0
        return cls(config.learning_rate, beta)

    def step(self, model, grads: dict[str, np.ndarray]) -> None:
        params = model.parameters()
        updated = {}
        for name, g in grads.items():
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
            else:
                v = g
            updated[name] = params[name] - self.learning_rate * v
        model.set_parameters(updated)


def gradients(model, x, y, kl_weight: float, noises: Sequence):
    """Negative-ELBO estimate and its gradient for frozen ``noises``."""
    tape = Tape()
    bound = model.bind(tape)
    graph = elbo_graph(model, x, y, kl_weight, noises, bound=bound)
    raw = tape.backward(graph.total)
    grads = {t.name: g for t, g in raw.items()}
    return graph.estimate(), grads


def objective_value(model, x, y, kl_weight: float, noises: Sequence) -> float:
    return elbo_graph(model, x, y, kl_weight, noises).total.item()


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def bbb_step(model, x, y, config: TrainConfig, rng: np.random.Generator,
             optimizer: SGD | None = None, train_size: int | None = None,
             noises: Sequence | None = None) -> ElboEstimate:
    """One Bayes-by-Backprop iteration; returns the pre-update loss estimate.

    Draws weight noise (unless frozen ``noises`` are given), evaluates the
    negative ELBO on the reparametrised sample, backpropagates to every
    parameter and applies the optimizer update. A non-finite gradient aborts
    the step before any parameter is touched.
    """
    n = len(np.asarray(y)) if train_size is None else train_size
    kw = 1.0 / n if config.kl_weight is None else config.kl_weight
    if noises is None:
        noises = [model.draw_noise(rng) for _ in range(config.mc_samples)]
    estimate, grads = gradients(model, x, y, kw, noises)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    if config.clip_norm is not None:
        grads = clip_by_global_norm(grads, config.clip_norm)
    if optimizer is None:
        optimizer = SGD.from_config(config)
    optimizer.step(model, grads)
    return estimate


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    total: float
    nll: float
    kl: float
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        # wall time is left out so trace files are reproducible byte for byte
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d)


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def to_lines(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_lines())


def train(model, x, y, config: TrainConfig) -> TrainTrace:
    """Run ``config.epochs`` epochs of minibatch BBB on ``(x, y)`` in place.

    Each epoch reshuffles the data with a stream derived from ``config.seed``;
    the final short minibatch is kept. The KL weight defaults to
    ``1 / len(x)`` regardless of batch size.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise ConfigurationError("training set is empty")
    if x.ndim != 2 or x.shape[1] != model.spec.input_width:
        raise ConfigurationError(f"features of shape {x.shape} do not match model input width "
                                 f"{model.spec.input_width}")
    shuffle_rng, noise_rng = split(config.seed, 2)
    optimizer = SGD.from_config(config)
    trace = TrainTrace()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            try:
                est = bbb_step(model, x[idx], y[idx], config, noise_rng, optimizer, train_size=n)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", trace) from exc
            if not math.isfinite(est.total) or abs(est.total) > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"epoch {epoch}: loss {est.total} diverged", trace)
            sums += len(idx) * np.array([est.total, est.nll, est.kl])
        total, nll, kl = (sums / n).tolist()
        trace.records.append(EpochRecord(epoch, total, nll, kl, time.perf_counter() - start))
        logger.debug("epoch %d total=%.6f nll=%.6f kl=%.6f", epoch, total, nll, kl)
    return trace
