import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def model_fd_gradients(model, x, y, kl_weight, noises):
    """Central differences of the objective for every parameter block, with frozen noise."""
    from varbnn.trainer import objective_value

    base = {k: v.copy() for k, v in model.parameters().items()}
    out = {}
    for name, value in base.items():
        def f(v, name=name):
            model.set_parameters({name: v})
            return objective_value(model, x, y, kl_weight, noises)
        out[name] = central_diff(f, value)
        model.set_parameters({name: value})
    return out


def linear_task(n=512, noise=0.1, seed=1):
    """``y = 2x + 1 + N(0, noise^2)`` with ``x ~ U(-1, 1)`` and its least-squares fit."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 1))
    y = 2.0 * x[:, 0] + 1.0 + rng.normal(0.0, noise, size=n)
    design = np.column_stack([x[:, 0], np.ones(n)])
    slope, intercept = np.linalg.lstsq(design, y, rcond=None)[0]
    return x, y, float(slope), float(intercept)


# plain SGD slow enough that the loss is still falling at the last epoch
TREND_CONFIG = dict(learning_rate=0.001, epochs=200, batch_size=16, seed=0, optimizer="sgd")


def loss_trend(totals, window=10, start=20):
    """Fraction of increasing steps of the rolling-mean loss after ``start`` epochs,
    and the largest relative increase."""
    totals = np.asarray(totals, dtype=np.float64)
    smooth = np.convolve(totals, np.ones(window) / window, mode="valid")
    tail = smooth[start:]
    diffs = np.diff(tail)
    rel = diffs / np.abs(tail[:-1])
    up = diffs > 0
    return float(np.mean(up)), float(rel[up].max()) if up.any() else 0.0
