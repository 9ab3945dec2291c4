"""Declarative model specs, model construction and checkpoints.

A spec file is JSON::

    {
      "input_width": 1,
      "head": {"type": "gaussian"},
      "layers": [
        {"kind": "dense", "units": 8, "activation": "sigmoid"},
        {"kind": "dense-variational", "units": 2, "activation": "identity",
         "posterior_family": "mean-field", "prior_sigma": 1.0}
      ]
    }

Missing activations default to ``sigmoid`` for hidden layers and to
``identity`` (gaussian head) or ``softmax`` (categorical head) for the output
layer. Variational layers default to the mean-field family and a unit prior.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import BuildError, ConfigurationError
from .layers import FAMILIES, DenseDeterministic, DenseVariational
from .rng import split

CHECKPOINT_FORMAT = "varbnn-checkpoint"
CHECKPOINT_VERSION = 1
LAYER_KINDS = ("dense", "dense-variational")
HEADS = ("gaussian", "categorical")
BUILTIN_SPECS = ("case1", "case2", "all-variational", "all-dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int
    activation: str = "sigmoid"
    posterior_family: str | None = None
    prior_sigma: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if not isinstance(self.units, int) or self.units < 1:
            raise ConfigurationError(f"units must be a positive integer, got {self.units!r}")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if self.posterior_family is not None or self.prior_sigma is not None:
                raise ConfigurationError("posterior_family/prior_sigma only apply to "
                                         "dense-variational layers")
        else:
            if self.posterior_family is None:
                object.__setattr__(self, "posterior_family", "mean-field")
            if self.prior_sigma is None:
                object.__setattr__(self, "prior_sigma", 1.0)
            if self.posterior_family not in FAMILIES:
                raise ConfigurationError(f"unknown posterior family {self.posterior_family!r}")
            if not self.prior_sigma > 0:
                raise ConfigurationError(f"prior_sigma must be positive, got {self.prior_sigma}")

    @property
    def variational(self) -> bool:
        return self.kind == "dense-variational"

    def as_dense(self) -> LayerSpec:
        return LayerSpec("dense", self.units, self.activation)

    def as_variational(self, family: str = "mean-field", prior_sigma: float = 1.0) -> LayerSpec:
        if self.variational:
            return self
        return LayerSpec("dense-variational", self.units, self.activation, family, prior_sigma)


@dataclass(frozen=True)
class ModelSpec:
    input_width: int
    layers: tuple[LayerSpec, ...]
    head: str = "gaussian"
    n_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not isinstance(self.input_width, int) or self.input_width < 1:
            raise ConfigurationError(f"input_width must be a positive integer, "
                                     f"got {self.input_width!r}")
        if not self.layers:
            raise ConfigurationError("a model needs at least one layer")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; expected {HEADS}")
        last = self.layers[-1]
        if self.head == "gaussian":
            if last.units != 2:
                raise ConfigurationError("gaussian head needs 2 output units (mean, raw scale), "
                                         f"got {last.units}")
        else:
            if self.n_classes is None or self.n_classes < 2:
                raise ConfigurationError("categorical head needs n_classes >= 2")
            if last.units != self.n_classes or last.activation != "softmax":
                raise ConfigurationError("categorical head needs a softmax output layer with "
                                         "n_classes units")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def with_layers(self, layers) -> ModelSpec:
        return replace(self, layers=tuple(layers))


# -- spec (de)serialisation --------------------------------------------------

def _layer_from_dict(d: dict, is_last: bool, head: str) -> LayerSpec:
    unknown = set(d) - {"kind", "units", "activation", "posterior_family", "prior_sigma"}
    if unknown:
        raise ConfigurationError(f"unknown layer keys: {sorted(unknown)}")
    if "activation" in d:
        act = d["activation"]
    elif is_last:
        act = "softmax" if head == "categorical" else "identity"
    else:
        act = "sigmoid"
    prior = d.get("prior_sigma")
    return LayerSpec(d.get("kind", "dense"), d.get("units"), act,
                     d.get("posterior_family"), None if prior is None else float(prior))


def spec_from_dict(d: dict) -> ModelSpec:
    head = d.get("head", {"type": "gaussian"})
    if isinstance(head, str):
        head = {"type": head}
    kind = head.get("type", "gaussian")
    raw_layers = d.get("layers") or []
    layers = [_layer_from_dict(ld, i == len(raw_layers) - 1, kind)
              for i, ld in enumerate(raw_layers)]
    return ModelSpec(d.get("input_width"), tuple(layers), kind, head.get("classes"))


def spec_to_dict(spec: ModelSpec) -> dict:
    head = {"type": spec.head}
    if spec.head == "categorical":
        head["classes"] = spec.n_classes
    layers = []
    for ls in spec.layers:
        d = {"kind": ls.kind, "units": ls.units, "activation": ls.activation}
        if ls.variational:
            d["posterior_family"] = ls.posterior_family
            d["prior_sigma"] = ls.prior_sigma
        layers.append(d)
    return {"input_width": spec.input_width, "head": head, "layers": layers}


def parse_spec(text: str) -> ModelSpec:
    try:
        return spec_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"spec is not valid JSON: {exc}") from exc


def dump_spec(spec: ModelSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2) + "\n"


def load_spec(path_or_name) -> ModelSpec:
    """Load a spec file, or one of the shipped specs by name (see ``BUILTIN_SPECS``)."""
    if str(path_or_name) in BUILTIN_SPECS:
        text = resources.files("varbnn.specs").joinpath(f"{path_or_name}.json").read_text()
    else:
        text = Path(path_or_name).read_text()
    return parse_spec(text)


# -- hybrid layouts ----------------------------------------------------------

@dataclass(frozen=True)
class HybridSplit:
    deterministic_depth: int
    probabilistic_depth: int
    canonical: bool

    def __iter__(self):
        return iter((self.deterministic_depth, self.probabilistic_depth))


def hybrid_split(spec: ModelSpec) -> HybridSplit:
    """Return ``(L - P, P)``; ``canonical`` is False unless the P variational
    layers form a contiguous suffix."""
    flags = [ls.variational for ls in spec.layers]
    p = sum(flags)
    canonical = not any(flags[: len(flags) - p]) if p else True
    return HybridSplit(len(flags) - p, p, canonical)


def place_variational(spec: ModelSpec, positions, family: str = "mean-field",
                      prior_sigma: float = 1.0) -> ModelSpec:
    """Make the layers at 1-based ``positions`` variational and all others dense."""
    positions = set(positions)
    bad = [p for p in positions if not 1 <= p <= spec.depth]
    if bad:
        raise ConfigurationError(f"positions {bad} outside 1..{spec.depth}")
    layers = []
    for i, ls in enumerate(spec.layers, start=1):
        if i in positions:
            fam = ls.posterior_family or family
            prior = ls.prior_sigma if ls.prior_sigma is not None else prior_sigma
            layers.append(ls.as_dense().as_variational(fam, prior))
        else:
            layers.append(ls.as_dense())
    return spec.with_layers(layers)


# -- models ------------------------------------------------------------------

class Model:
    """A stack of dense layers plus a likelihood head."""

    def __init__(self, spec: ModelSpec, layers: list, seed: int | None = None):
        self.spec = spec
        self.layers = layers
        self.seed = seed

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def n_variational(self) -> int:
        return sum(layer.variational for layer in self.layers)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out[f"layer{i}.{name}"] = value
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for key, value in values.items():
            i, name = _split_key(key)
            old = self.layers[i].params[name]
            value = np.array(value, dtype=np.float64).reshape(old.shape)
            self.layers[i].params[name] = value

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def bind(self, tape: Tape) -> list[dict[str, Tensor]]:
        return [{name: tape.watch(v, f"layer{i}.{name}") for name, v in layer.params.items()}
                for i, layer in enumerate(self.layers)]

    def draw_noise(self, rng: np.random.Generator) -> list:
        return [layer.draw_noise(rng) if layer.variational else None for layer in self.layers]

    def forward(self, x, rng: np.random.Generator | None = None, noise: list | None = None,
                bound: list | None = None) -> tuple[Tensor, Tensor]:
        """Run one sampled network on ``x``; returns ``(outputs, total_kl)``."""
        if noise is None:
            if rng is None and self.n_variational:
                raise ConfigurationError("model has variational layers: pass rng or noise")
            noise = self.draw_noise(rng) if self.n_variational else [None] * len(self.layers)
        h = ad.as_tensor(x)
        kl = Tensor(0.0)
        for i, layer in enumerate(self.layers):
            b = None if bound is None else bound[i]
            if layer.variational:
                h, k = layer.forward(h, bound=b, noise=noise[i])
                kl = kl + k
            else:
                h = layer.forward(h, bound=b)
        return h, kl


def _split_key(key: str) -> tuple[int, str]:
    head, name = key.split(".", 1)
    return int(head.removeprefix("layer")), name


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate ``spec``; each layer draws its initial values from its own
    child stream of ``seed``."""
    streams = split(seed, len(spec.layers))
    layers = []
    width = spec.input_width
    for i, (ls, stream) in enumerate(zip(spec.layers, streams)):
        if ls.variational:
            if ls.posterior_family == "radial" and min(ls.units, ls.units * width) < 2:
                raise BuildError(f"layer {i}: radial posterior over a single parameter "
                                 f"({ls.units} units)")
            layer = DenseVariational.init(width, ls.units, ls.activation, stream,
                                          ls.posterior_family, ls.prior_sigma, index=i)
        else:
            layer = DenseDeterministic.init(width, ls.units, ls.activation, stream, index=i)
        layers.append(layer)
        width = ls.units
    return Model(spec, layers, seed)


# -- checkpoints -------------------------------------------------------------

def checkpoint_dict(model: Model, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "spec": spec_to_dict(model.spec),
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in model.parameters().items()},
        "meta": meta or {},
    }


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, meta), separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[Model, dict]:
    d = json.loads(Path(path).read_text())
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {d.get('version')}")
    spec = spec_from_dict(d["spec"])
    model = build_model(spec, d.get("seed") or 0)
    model.seed = d.get("seed")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in d["params"].items()}
    if set(params) != set(model.parameters()):
        raise ConfigurationError("checkpoint parameters do not match its spec")
    model.set_parameters(params)
    return model, d.get("meta", {})
