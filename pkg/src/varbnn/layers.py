"""Deterministic and variational dense layers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    DEFAULT_INIT_MU_STD,
    DEFAULT_INIT_SIGMA,
    DiagonalGaussian,
    IsotropicGaussianPrior,
    NoiseDraw,
    RadialPosterior,
    draw_noise,
    inverse_softplus,
    kl_term,
    sample,
)
from .errors import ConfigurationError, NumericalError, ShapeError

FAMILIES = ("mean-field", "radial")


def _check_width(h: Tensor, in_features: int, index) -> None:
    if h.ndim != 2 or h.shape[1] != in_features:
        where = "" if index is None else f"layer {index}: "
        raise ShapeError(f"{where}expected input of shape (batch, {in_features}), got {h.shape}")


def _bind(params: dict[str, np.ndarray], bound: dict[str, Tensor] | None) -> dict[str, Tensor]:
    if bound is not None:
        return bound
    return {k: Tensor(v) for k, v in params.items()}


class DenseDeterministic:
    """``A(h W^T + b)`` with point-estimate weights."""

    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "identity",
                 index: int | None = None):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"weight {weight.shape} and bias {bias.shape} are inconsistent")
        if activation not in ad.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.params = {"weight": weight, "bias": bias}
        self.activation = activation
        self.index = index

    @classmethod
    def init(cls, in_features: int, out_features: int, activation: str,
             rng: np.random.Generator, index: int | None = None):
        # Glorot-uniform weights, zero bias
        limit = np.sqrt(6.0 / (in_features + out_features))
        w = rng.uniform(-limit, limit, size=(out_features, in_features))
        return cls(w, np.zeros(out_features), activation, index)

    @property
    def in_features(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def out_features(self) -> int:
        return self.params["weight"].shape[0]

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def variational(self) -> bool:
        return False

    def forward(self, h, bound: dict[str, Tensor] | None = None) -> Tensor:
        h = ad.as_tensor(h)
        _check_width(h, self.in_features, self.index)
        p = _bind(self.params, bound)
        return ad.activation(h @ p["weight"].T + p["bias"], self.activation)


@dataclass(frozen=True)
class LayerNoise:
    weight: NoiseDraw
    bias: NoiseDraw


class DenseVariational:
    """Dense layer with a factorised posterior over its weights and biases.

    Weights and biases each get their own posterior of the same family
    (``mean-field`` or ``radial``) and the same isotropic prior. One weight
    sample is drawn per forward call and shared by every row of the batch.
    """

    kind = "dense-variational"

    def __init__(self, weight_mu, weight_rho, bias_mu, bias_rho, activation: str = "identity",
                 family: str = "mean-field", prior_sigma: float = 1.0, index: int | None = None):
        params = {
            "weight_mu": np.asarray(weight_mu, dtype=np.float64),
            "weight_rho": np.asarray(weight_rho, dtype=np.float64),
            "bias_mu": np.asarray(bias_mu, dtype=np.float64),
            "bias_rho": np.asarray(bias_rho, dtype=np.float64),
        }
        w = params["weight_mu"]
        if (w.ndim != 2 or params["weight_rho"].shape != w.shape
                or params["bias_mu"].shape != (w.shape[0],)
                or params["bias_rho"].shape != (w.shape[0],)):
            raise ShapeError("variational parameter shapes are inconsistent")
        if family not in FAMILIES:
            raise ConfigurationError(f"unknown posterior family {family!r}; expected {FAMILIES}")
        if activation not in ad.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.params = params
        self.activation = activation
        self.family = family
        self.prior_sigma = float(prior_sigma)
        self.index = index
        self.weight_prior = IsotropicGaussianPrior(self.prior_sigma, w.size)
        self.bias_prior = IsotropicGaussianPrior(self.prior_sigma, w.shape[0])

    @classmethod
    def init(cls, in_features: int, out_features: int, activation: str, rng: np.random.Generator,
             family: str = "mean-field", prior_sigma: float = 1.0, index: int | None = None,
             init_sigma: float = DEFAULT_INIT_SIGMA):
        rho0 = float(inverse_softplus(init_sigma))
        return cls(
            rng.normal(0.0, DEFAULT_INIT_MU_STD, size=(out_features, in_features)),
            np.full((out_features, in_features), rho0),
            rng.normal(0.0, DEFAULT_INIT_MU_STD, size=out_features),
            np.full(out_features, rho0),
            activation, family, prior_sigma, index,
        )

    @property
    def in_features(self) -> int:
        return self.params["weight_mu"].shape[1]

    @property
    def out_features(self) -> int:
        return self.params["weight_mu"].shape[0]

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def variational(self) -> bool:
        return True

    def posteriors(self, bound: dict[str, Tensor] | None = None):
        p = _bind(self.params, bound)
        cls = RadialPosterior if self.family == "radial" else DiagonalGaussian
        qw = cls(p["weight_mu"].reshape(-1), p["weight_rho"].reshape(-1))
        qb = cls(p["bias_mu"], p["bias_rho"])
        return qw, qb

    def draw_noise(self, rng: np.random.Generator) -> LayerNoise:
        qw, qb = self.posteriors()
        return LayerNoise(draw_noise(qw, rng), draw_noise(qb, rng))

    def forward(self, h, bound: dict[str, Tensor] | None = None,
                noise: LayerNoise | None = None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Sample ``(W, b)``, apply the layer, and return ``(output, kl)``."""
        h = ad.as_tensor(h)
        _check_width(h, self.in_features, self.index)
        if noise is None:
            if rng is None:
                raise ConfigurationError("variational forward needs noise or an rng stream")
            noise = self.draw_noise(rng)
        qw, qb = self.posteriors(bound)
        w_flat = sample(qw, noise.weight)
        b = sample(qb, noise.bias)
        if not (np.all(np.isfinite(w_flat.data)) and np.all(np.isfinite(b.data))):
            raise NumericalError(f"layer {self.index}: sampled weights are not finite")
        w = w_flat.reshape(self.out_features, self.in_features)
        out = ad.activation(h @ w.T + b, self.activation)
        kl = kl_term(qw, self.weight_prior, w_flat) + kl_term(qb, self.bias_prior, b)
        return out, kl


def dense_forward(layer: DenseDeterministic, h) -> Tensor:
    return layer.forward(h)


def variational_forward(layer: DenseVariational, h, rng: np.random.Generator):
    return layer.forward(h, rng=rng)


@dataclass
class PriorDiagnostic:
    """Per-layer statistics of prior-induced pre-activations (layer 1 first)."""

    excess_kurtosis: list[float]
    means: list[float]
    stds: list[float]
    n_samples: int


def prior_unit_diagnostic(spec, n_samples: int, rng: np.random.Generator,
                          depth: int | None = None, probe: np.ndarray | None = None,
                          chunk: int = 10_000) -> PriorDiagnostic:
    """Sample whole networks from the weight prior and measure unit tails.

    For a fixed probe input (drawn once from ``N(0, I)`` unless given),
    ``n_samples`` networks are drawn with every weight and bias from
    ``N(0, prior_sigma^2)``. The pre-activations of the first ``depth`` layers
    are pooled over units and summarised by their unbiased excess kurtosis.
    Layers without a declared prior use a unit prior.
    """
    if n_samples < 1000:
        warnings.warn(f"{n_samples} prior samples give unreliable kurtosis estimates",
                      RuntimeWarning, stacklevel=2)
    layer_specs = list(spec.layers)
    if depth is None:
        depth = max(len(layer_specs) - 1, 1)
    if not 1 <= depth <= len(layer_specs):
        raise ConfigurationError(f"depth {depth} outside 1..{len(layer_specs)}")
    if probe is None:
        probe = rng.standard_normal(spec.input_width)
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != (spec.input_width,):
        raise ShapeError(f"probe has shape {probe.shape}, model input width is {spec.input_width}")

    collected: list[list[np.ndarray]] = [[] for _ in range(depth)]
    done = 0
    while done < n_samples:
        c = min(chunk, n_samples - done)
        h = np.broadcast_to(probe, (c, probe.size))
        for i, ls in enumerate(layer_specs[:depth]):
            s = ls.prior_sigma if ls.prior_sigma is not None else 1.0
            w = rng.normal(0.0, s, size=(c, ls.units, h.shape[1]))
            b = rng.normal(0.0, s, size=(c, ls.units))
            pre = np.einsum("cij,cj->ci", w, h) + b
            collected[i].append(pre)
            h = ad.activation(pre, ls.activation).data
        done += c

    kurt, means, stds = [], [], []
    for parts in collected:
        values = np.concatenate(parts).reshape(-1)
        kurt.append(float(stats.kurtosis(values, fisher=True, bias=False)))
        means.append(float(values.mean()))
        stds.append(float(values.std(ddof=1)))
    return PriorDiagnostic(kurt, means, stds, n_samples)
