"""Priors, variational posteriors, reparametrised samplers and KL terms.

Scales are always parametrised as ``sigma = softplus(rho)``. Posterior
parameters may be plain arrays or tracked :class:`~varbnn.autodiff.Tensor`
objects; every function here is built from autodiff ops so gradients flow
back to ``mu`` and ``rho`` when they live on a tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, SamplingError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_INIT_SIGMA = 0.05
DEFAULT_INIT_MU_STD = 0.1


def inverse_softplus(y):
    """Return ``rho`` such that ``softplus(rho) == y`` (``y > 0``)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("inverse_softplus is only defined for positive values")
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class IsotropicGaussianPrior:
    """Zero-mean prior ``N(0, sigma^2 I)`` over ``dimension`` parameters."""

    sigma: float = 1.0
    dimension: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"prior sigma must be positive, got {self.sigma}")
        if self.dimension < 1:
            raise DomainError(f"prior dimension must be positive, got {self.dimension}")


@dataclass(frozen=True)
class DiagonalGaussian:
    """Fully factorised Gaussian ``N(mu_i, softplus(rho_i)^2)``."""

    mu: Tensor
    rho: Tensor
    family: str = field(default="mean-field", init=False)

    def __post_init__(self):
        mu, rho = ad.as_tensor(self.mu), ad.as_tensor(self.rho)
        if mu.ndim != 1 or mu.shape != rho.shape:
            raise ShapeError(f"mu and rho must be matching vectors, got {mu.shape} and {rho.shape}")
        if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(rho.data))):
            raise DomainError("variational parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_sigma(cls, mu, sigma):
        return cls(np.asarray(mu, dtype=np.float64), inverse_softplus(sigma))

    @property
    def dimension(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> Tensor:
        return ad.softplus(self.rho)


@dataclass(frozen=True)
class RadialPosterior(DiagonalGaussian):
    """Radial posterior: ``mu + sigma * direction * r`` with a uniform direction
    on the unit sphere and a half-normal radius ``r``."""

    family: str = field(default="radial", init=False)

    def __post_init__(self):
        super().__post_init__()
        if self.dimension < 2:
            raise DomainError("radial posterior needs at least 2 parameters")


@dataclass(frozen=True)
class NoiseDraw:
    """Frozen noise for one reparametrised sample; replaying it replays the sample."""

    epsilon: np.ndarray
    radius: float | None = None

    @property
    def dimension(self) -> int:
        return self.epsilon.shape[0]


def draw_gaussian_noise(n: int, rng: np.random.Generator) -> NoiseDraw:
    return NoiseDraw(rng.standard_normal(n))


def draw_radial_noise(n: int, rng: np.random.Generator, max_tries: int = 100) -> NoiseDraw:
    radius = abs(float(rng.standard_normal()))
    for _ in range(max_tries):
        eps = rng.standard_normal(n)
        if np.linalg.norm(eps) > 0:
            return NoiseDraw(eps, radius)
    raise SamplingError(f"could not draw a non-zero direction in {max_tries} tries")


def draw_noise(q: DiagonalGaussian, rng: np.random.Generator) -> NoiseDraw:
    if isinstance(q, RadialPosterior):
        return draw_radial_noise(q.dimension, rng)
    return draw_gaussian_noise(q.dimension, rng)


def _check_noise(q: DiagonalGaussian, noise: NoiseDraw) -> None:
    if noise.epsilon.shape != (q.dimension,):
        raise ShapeError(f"noise of shape {noise.epsilon.shape} for a "
                         f"{q.dimension}-dimensional posterior")


def gaussian_sample_reparam(q: DiagonalGaussian, noise: NoiseDraw) -> Tensor:
    """``theta = mu + softplus(rho) * epsilon``."""
    _check_noise(q, noise)
    return q.mu + q.sigma * noise.epsilon


def radial_sample(q: RadialPosterior, noise: NoiseDraw) -> Tensor:
    """``theta = mu + softplus(rho) * (epsilon / ||epsilon||) * r``."""
    _check_noise(q, noise)
    if noise.radius is None:
        raise DomainError("radial sampling needs a radius in the noise draw")
    norm = np.linalg.norm(noise.epsilon)
    if norm == 0:
        raise SamplingError("zero-norm noise direction; redraw the noise")
    return q.mu + q.sigma * (noise.epsilon / norm * noise.radius)


def sample(q: DiagonalGaussian, noise: NoiseDraw) -> Tensor:
    if isinstance(q, RadialPosterior):
        return radial_sample(q, noise)
    return gaussian_sample_reparam(q, noise)


def gaussian_log_prob(x, mu, sigma) -> Tensor:
    """Sum of independent normal log-densities."""
    x, mu, sigma = ad.as_tensor(x), ad.as_tensor(mu), ad.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("sigma must be strictly positive")
    n = x.size
    z = ad.square(x - mu) / (2.0 * ad.square(sigma))
    log_sigma = ad.log(sigma).sum()
    if sigma.size == 1 and n > 1:
        log_sigma = log_sigma * float(n)
    return -0.5 * LOG_2PI * n - log_sigma - z.sum()


def kl_diag_vs_isotropic(q: DiagonalGaussian, p: IsotropicGaussianPrior) -> Tensor:
    """Closed-form ``KL(q || N(0, s^2 I))``."""
    if q.dimension != p.dimension:
        raise ShapeError(f"posterior has {q.dimension} parameters, prior {p.dimension}")
    s = p.sigma
    sigma = q.sigma
    terms = (math.log(s) - ad.log(sigma)
             + (ad.square(sigma) + ad.square(q.mu)) / (2.0 * s * s) - 0.5)
    return terms.sum()


def unit_prior_kl_terms(q: DiagonalGaussian) -> tuple[Tensor, Tensor]:
    """Cross-entropy and entropy pieces of the unit-prior mean-field KL.

    Returns ``(sum((mu^2 + sigma^2) / 2), sum(log sigma))``. The exact KL
    against ``N(0, I)`` is ``first - second - N/2``.
    """
    sigma = q.sigma
    return ((ad.square(q.mu) + ad.square(sigma)).sum() / 2.0, ad.log(sigma).sum())


def radial_neg_entropy(q: RadialPosterior) -> Tensor:
    """``-sum(log sigma)``: the radial negative entropy up to a constant."""
    return -ad.log(q.sigma).sum()


def radial_kl_estimate(q: RadialPosterior, p: IsotropicGaussianPrior, sample: Tensor) -> Tensor:
    """Single-sample KL surrogate, exact up to an additive constant.

    The scale parameters enter the radial density only through
    ``prod(sigma_i)``, so its entropy is ``sum(log sigma) + const``; the
    cross-entropy against the prior is estimated from ``sample``.
    """
    if q.dimension != p.dimension or sample.shape != (q.dimension,):
        raise ShapeError(f"dimension mismatch: posterior {q.dimension}, prior {p.dimension}, "
                         f"sample {sample.shape}")
    return radial_neg_entropy(q) - gaussian_log_prob(sample, np.zeros(q.dimension), p.sigma)


def kl_term(q: DiagonalGaussian, p: IsotropicGaussianPrior, sample: Tensor) -> Tensor:
    if isinstance(q, RadialPosterior):
        return radial_kl_estimate(q, p, sample)
    return kl_diag_vs_isotropic(q, p)
