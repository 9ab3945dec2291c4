"""Monte Carlo posterior predictive, prediction reports and calibration metrics."""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import ConfigurationError, NumericalError, ShapeError
from .objective import PROB_FLOOR, gaussian_head_params

Z95 = 1.96
INTERVALS = ("gaussian", "quantile")


@dataclass(frozen=True)
class PredictiveSummary:
    mean: float
    stddev: float
    ci_low: float
    ci_high: float
    n_samples: int
    epistemic_var: float = 0.0
    aleatoric_var: float = 0.0


@dataclass(frozen=True)
class ClassPrediction:
    probabilities: tuple[float, ...]
    label: int
    entropy: float
    n_samples: int


def sample_head_outputs(model, x, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Raw head outputs of shape ``(n_samples, batch, units)``, one weight draw per slice.

    A model without variational layers is evaluated once.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != model.spec.input_width:
        raise ShapeError(f"input width {x.shape[1]} does not match model width "
                         f"{model.spec.input_width}")
    if n_samples < 2:
        raise ConfigurationError("posterior predictive needs at least 2 samples")
    if not all(np.all(np.isfinite(v)) for v in model.parameters().values()):
        raise NumericalError("model parameters are not finite")
    draws = 1 if model.n_variational == 0 else n_samples
    out = np.stack([model.forward(x, rng=rng)[0].data for _ in range(draws)])
    if not np.all(np.isfinite(out)):
        raise NumericalError("model produced non-finite outputs")
    return out


def _mixture_quantile(q: float, means: np.ndarray, scales: np.ndarray) -> float:
    def cdf_gap(t):
        return float(np.mean(norm.cdf((t - means) / scales))) - q
    lo = float(np.min(means - 10 * scales))
    hi = float(np.max(means + 10 * scales))
    return brentq(cdf_gap, lo, hi, xtol=1e-12)


def summarize_gaussian(means: np.ndarray, scales: np.ndarray, n_samples: int,
                       interval: str = "gaussian") -> PredictiveSummary:
    """Combine per-draw ``(mean, scale)`` pairs into one predictive summary.

    Total variance is the variance of the draw means (epistemic, population
    form) plus the mean of the draw variances (aleatoric).
    """
    mean = float(np.mean(means))
    epistemic = float(np.var(means)) if means.size > 1 else 0.0
    aleatoric = float(np.mean(scales * scales))
    std = math.sqrt(epistemic + aleatoric)
    if interval == "gaussian":
        lo, hi = mean - Z95 * std, mean + Z95 * std
    elif interval == "quantile":
        lo = _mixture_quantile(0.025, means, scales)
        hi = _mixture_quantile(0.975, means, scales)
    else:
        raise ConfigurationError(f"unknown interval {interval!r}; expected {INTERVALS}")
    return PredictiveSummary(mean, std, lo, hi, n_samples, epistemic, aleatoric)


def predict_batch(model, x, n_samples: int, rng: np.random.Generator,
                  interval: str = "gaussian") -> list[PredictiveSummary]:
    """Gaussian-head posterior predictive for every row of ``x``."""
    if model.spec.head != "gaussian":
        raise ConfigurationError("predict_batch needs a gaussian head; use predict_classes")
    raw = sample_head_outputs(model, x, n_samples, rng)
    means = raw[:, :, 0]
    scales = np.stack([gaussian_head_params(r)[1].data for r in raw])
    return [summarize_gaussian(means[:, i], scales[:, i], n_samples, interval)
            for i in range(raw.shape[1])]


def posterior_predictive(model, x, n_samples: int, rng: np.random.Generator,
                         interval: str = "gaussian") -> PredictiveSummary:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return predict_batch(model, x, n_samples, rng, interval)[0]


def predict_classes(model, x, n_samples: int, rng: np.random.Generator) -> list[ClassPrediction]:
    """Average the sampled class-probability vectors, then take argmax and entropy."""
    if model.spec.head != "categorical":
        raise ConfigurationError("predict_classes needs a categorical head")
    probs = sample_head_outputs(model, x, n_samples, rng).mean(axis=0)
    out = []
    for p in probs:
        ent = float(-np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)))
        out.append(ClassPrediction(tuple(p.tolist()), int(np.argmax(p)), ent, n_samples))
    return out


# -- report format -----------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(round(float(v), 2) + 0.0)  # + 0.0 folds -0.0 into 0.0


def format_prediction_line(s: PredictiveSummary, actual: float) -> str:
    return (f"Prediction mean: {_fmt(s.mean)}, stddev: {_fmt(s.stddev)}, "
            f"95% CI: [{_fmt(s.ci_high)} - {_fmt(s.ci_low)}] - Actual: {_fmt(actual)}")


def format_prediction_report(summaries: Sequence[PredictiveSummary],
                             actuals: Sequence[float]) -> str:
    """One line per example, upper interval bound first."""
    if len(summaries) != len(actuals):
        raise ShapeError(f"{len(summaries)} summaries for {len(actuals)} actual values")
    return "".join(format_prediction_line(s, a) + "\n" for s, a in zip(summaries, actuals))


_NUM = r"(-?(?:\d+(?:\.\d*)?(?:e[+-]?\d+)?|inf|nan))"
_LINE_RE = re.compile(
    rf"^Prediction mean: {_NUM}, stddev: {_NUM}, 95% CI: \[{_NUM} - {_NUM}\] - Actual: {_NUM}$")


def parse_prediction_line(line: str) -> dict[str, float]:
    m = _LINE_RE.match(line.strip())
    if m is None:
        raise ValueError(f"not a prediction line: {line!r}")
    keys = ("mean", "stddev", "ci_high", "ci_low", "actual")
    return {k: float(v) for k, v in zip(keys, m.groups())}


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationMetrics:
    rmse: float
    nll: float
    coverage95: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def calibration_metrics(summaries: Sequence[PredictiveSummary],
                        actuals: Sequence[float]) -> CalibrationMetrics:
    """RMSE of the predictive means, mean Gaussian NLL, and 95% interval coverage.

    A zero predictive stddev with a missed target makes the NLL ``inf``.
    """
    if len(summaries) == 0 or len(summaries) != len(actuals):
        raise ShapeError(f"need matching non-empty inputs, got {len(summaries)} summaries "
                         f"and {len(actuals)} actuals")
    a = np.asarray(actuals, dtype=np.float64)
    m = np.array([s.mean for s in summaries])
    sd = np.array([s.stddev for s in summaries])
    lo = np.array([s.ci_low for s in summaries])
    hi = np.array([s.ci_high for s in summaries])
    resid = a - m
    rmse = float(np.sqrt(np.mean(resid * resid)))
    coverage = float(np.mean((a >= lo) & (a <= hi)))

    zero = sd == 0
    if np.any(zero & (resid != 0)):
        nll = math.inf
    else:
        with np.errstate(divide="ignore"):
            per = np.where(zero, -np.inf,
                           0.5 * math.log(2 * math.pi) + np.log(np.where(zero, 1.0, sd))
                           + resid ** 2 / (2 * np.where(zero, 1.0, sd) ** 2))
        nll = float(np.mean(per))
    return CalibrationMetrics(rmse, nll, coverage)


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    nll: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def classification_metrics(predictions: Sequence[ClassPrediction],
                           labels: Sequence[int]) -> ClassificationMetrics:
    """Accuracy of the argmax labels and mean NLL of the averaged probabilities."""
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise ShapeError(f"need matching non-empty inputs, got {len(predictions)} predictions "
                         f"and {len(labels)} labels")
    labels = np.asarray(labels, dtype=np.int64)
    hits = np.array([p.label for p in predictions]) == labels
    picked = np.array([p.probabilities[k] for p, k in zip(predictions, labels)])
    nll = float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))
    return ClassificationMetrics(float(np.mean(hits)), nll)
