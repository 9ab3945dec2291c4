"""Likelihood heads and the negative-ELBO objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DataError, NumericalError, ShapeError

SCALE_FLOOR = 1e-6
PROB_FLOOR = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ElboConfig:
    """``kl_weight`` scales the KL term; ``None`` means ``1 / train_size``."""

    kl_weight: float | None = None
    n_mc_samples: int = 1

    def __post_init__(self):
        if self.kl_weight is not None and not self.kl_weight >= 0:
            raise ConfigurationError(f"kl_weight must be non-negative, got {self.kl_weight}")
        if self.n_mc_samples < 1:
            raise ConfigurationError(f"n_mc_samples must be >= 1, got {self.n_mc_samples}")

    def resolved_kl_weight(self, train_size: int) -> float:
        return 1.0 / train_size if self.kl_weight is None else float(self.kl_weight)


@dataclass(frozen=True)
class ElboEstimate:
    nll: float
    kl: float
    kl_weight: float
    total: float


@dataclass
class ElboGraph:
    """Tensors behind an :class:`ElboEstimate`, still attached to their tape."""

    nll: Tensor
    kl: Tensor
    total: Tensor
    kl_weight: float

    def estimate(self) -> ElboEstimate:
        return ElboEstimate(self.nll.item(), self.kl.item(), self.kl_weight, self.total.item())


def gaussian_head_params(raw) -> tuple[Tensor, Tensor]:
    """Split ``(batch, 2)`` raw outputs into mean and floored scale."""
    raw = ad.as_tensor(raw)
    if raw.ndim != 2 or raw.shape[1] != 2:
        raise ShapeError(f"gaussian head expects (batch, 2) outputs, got {raw.shape}")
    return ad.column(raw, 0), ad.softplus(ad.column(raw, 1)) + SCALE_FLOOR


def gaussian_nll_head(raw, targets) -> Tensor:
    """Mean over the batch of ``-log N(target; mean, softplus(raw_scale) + 1e-6)``."""
    raw = ad.as_tensor(raw)
    if not np.all(np.isfinite(raw.data)):
        raise NumericalError("gaussian head received non-finite outputs")
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    mean, scale = gaussian_head_params(raw)
    if y.shape != mean.shape:
        raise ShapeError(f"{y.size} targets for a batch of {mean.shape[0]}")
    per_example = HALF_LOG_2PI + ad.log(scale) + ad.square(y - mean) / (2.0 * ad.square(scale))
    return per_example.mean()


def categorical_nll(probabilities, labels: Sequence[int]) -> Tensor:
    """Mean of ``-log p[label]`` with the probability floored at 1e-12."""
    probs = ad.as_tensor(probabilities)
    if probs.ndim != 2:
        raise ShapeError(f"probabilities must be (batch, classes), got {probs.shape}")
    if not np.allclose(probs.data.sum(axis=1), 1.0, rtol=0.0, atol=1e-8):
        raise DataError("probability rows must sum to 1")
    picked = ad.pick(probs, np.asarray(labels, dtype=np.int64).reshape(-1))
    return -ad.log(ad.maximum(picked, PROB_FLOOR)).mean()


def head_nll(model, out: Tensor, targets) -> Tensor:
    if model.spec.head == "gaussian":
        return gaussian_nll_head(out, targets)
    return categorical_nll(out, targets)


def elbo_graph(model, x, y, kl_weight: float, noises: Sequence, bound=None) -> ElboGraph:
    """Negative ELBO averaged over one forward pass per entry of ``noises``."""
    if len(noises) < 1:
        raise ConfigurationError("at least one Monte Carlo sample is required")
    x = ad.as_tensor(x)
    if x.shape[0] == 0:
        raise DataError("empty batch")
    nll_sum = kl_sum = None
    for s, noise in enumerate(noises):
        try:
            out, kl = model.forward(x, noise=noise, bound=bound)
            nll = head_nll(model, out, y)
        except NumericalError as exc:
            raise NumericalError(f"MC sample {s}: {exc}") from exc
        nll_sum = nll if nll_sum is None else nll_sum + nll
        kl_sum = kl if kl_sum is None else kl_sum + kl
    n = float(len(noises))
    nll_t, kl_t = nll_sum / n, kl_sum / n
    total = nll_t + kl_weight * kl_t
    if not np.isfinite(total.item()):
        raise NumericalError("negative ELBO is not finite")
    return ElboGraph(nll_t, kl_t, total, kl_weight)


def negative_elbo(model, x, y, config: ElboConfig, rng: np.random.Generator,
                  train_size: int | None = None) -> ElboEstimate:
    """Monte Carlo estimate of ``nll + kl_weight * kl`` for one batch.

    ``train_size`` resolves the default ``kl_weight = 1 / train_size``; it
    defaults to the batch size.
    """
    n = len(np.asarray(y)) if train_size is None else train_size
    kw = config.resolved_kl_weight(n)
    noises = [model.draw_noise(rng) for _ in range(config.n_mc_samples)]
    return elbo_graph(model, x, y, kw, noises).estimate()
