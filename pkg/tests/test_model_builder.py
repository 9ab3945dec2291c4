import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varbnn.errors import BuildError, ConfigurationError, ShapeError
from varbnn.model_builder import (
    BUILTIN_SPECS,
    LayerSpec,
    ModelSpec,
    build_model,
    dump_spec,
    hybrid_split,
    load_checkpoint,
    load_spec,
    parse_spec,
    place_variational,
    save_checkpoint,
    spec_to_dict,
)


def kinds(spec):
    return [ls.kind for ls in spec.layers]


class TestBuiltinSpecs:
    def test_case1_topology(self):
        spec = load_spec("case1")
        assert kinds(spec) == ["dense-variational", "dense-variational", "dense"]
        assert [ls.activation for ls in spec.layers] == ["sigmoid", "sigmoid", "identity"]
        assert spec.layers[-1].units == 2

    def test_case2_topology(self):
        spec = load_spec("case2")
        assert kinds(spec) == ["dense", "dense", "dense-variational"]
        assert tuple(hybrid_split(spec)) == (2, 1)
        assert hybrid_split(spec).canonical

    def test_all_dense_split(self):
        spec = load_spec("all-dense")
        assert tuple(hybrid_split(spec)) == (spec.depth, 0)

    def test_all_variational_doubles_all_dense(self):
        assert (build_model(load_spec("all-variational")).n_params
                == 2 * build_model(load_spec("all-dense")).n_params)

    @pytest.mark.parametrize("name", BUILTIN_SPECS)
    def test_builtins_round_trip(self, name):
        text = dump_spec(load_spec(name))
        assert dump_spec(parse_spec(text)) == text

    def test_variational_first_is_non_canonical(self):
        split = hybrid_split(load_spec("case1"))
        assert not split.canonical
        assert tuple(split) == (1, 2)


class TestSpecParsing:
    def test_defaults(self):
        spec = parse_spec(json.dumps({"input_width": 3, "layers": [
            {"kind": "dense-variational", "units": 4}, {"kind": "dense", "units": 2}]}))
        assert spec.head == "gaussian"
        assert spec.layers[0].activation == "sigmoid"
        assert spec.layers[0].posterior_family == "mean-field"
        assert spec.layers[0].prior_sigma == 1.0
        assert spec.layers[1].activation == "identity"

    def test_categorical_default_softmax(self):
        spec = parse_spec(json.dumps({"input_width": 2, "head": {"type": "categorical",
                                                                 "classes": 3},
                                      "layers": [{"kind": "dense", "units": 3}]}))
        assert spec.layers[-1].activation == "softmax"

    @pytest.mark.parametrize("doc", [
        {"input_width": 1, "layers": []},
        {"input_width": 0, "layers": [{"kind": "dense", "units": 2}]},
        {"input_width": 1, "layers": [{"kind": "dense", "units": 3}]},
        {"input_width": 1, "layers": [{"kind": "conv", "units": 2}]},
        {"input_width": 1, "layers": [{"kind": "dense", "units": 2, "prior_sigma": 1.0}]},
        {"input_width": 1, "layers": [{"kind": "dense-variational", "units": 2,
                                       "posterior_family": "flow"}]},
        {"input_width": 1, "layers": [{"kind": "dense-variational", "units": 2,
                                       "prior_sigma": -1}]},
        {"input_width": 1, "layers": [{"kind": "dense", "units": 2, "dropout": 0.1}]},
        {"input_width": 1, "head": "categorical", "layers": [{"kind": "dense", "units": 2}]},
    ])
    def test_invalid(self, doc):
        with pytest.raises(ConfigurationError):
            parse_spec(json.dumps(doc))

    def test_not_json(self):
        with pytest.raises(ConfigurationError):
            parse_spec("input_width: 1")

    @settings(max_examples=60, deadline=None)
    @given(
        widths=st.lists(st.integers(2, 6), min_size=0, max_size=3),
        flags=st.lists(st.booleans(), min_size=4, max_size=4),
        acts=st.lists(st.sampled_from(["relu", "sigmoid", "softplus", "identity"]),
                      min_size=4, max_size=4),
        family=st.sampled_from(["mean-field", "radial"]),
        input_width=st.integers(1, 4),
    )
    def test_round_trip_idempotent(self, widths, flags, acts, family, input_width):
        layers = []
        for i, units in enumerate(widths + [2]):
            ls = LayerSpec("dense", units, acts[i])
            layers.append(ls.as_variational(family, 0.5 + i) if flags[i] else ls)
        spec = ModelSpec(input_width, layers)
        text = dump_spec(spec)
        assert parse_spec(text) == spec
        assert dump_spec(parse_spec(text)) == text


class TestBuild:
    def test_deterministic_given_seed(self):
        a = build_model(load_spec("case1"), 5).parameters()
        b = build_model(load_spec("case1"), 5).parameters()
        c = build_model(load_spec("case1"), 6).parameters()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert any(a[k].tobytes() != c[k].tobytes() for k in a)

    def test_layer_shapes_chain(self):
        model = build_model(load_spec("case2"), 0)
        widths = [(layer.in_features, layer.out_features) for layer in model.layers]
        assert widths == [(1, 8), (8, 8), (8, 2)]

    @pytest.mark.parametrize("position", [1, 2, 3])
    def test_conversion_doubles_layer_count(self, position):
        base = load_spec("all-dense")
        dense = build_model(base, 0)
        hybrid = build_model(place_variational(base, [position]), 0)
        i = position - 1
        assert hybrid.layers[i].n_params == 2 * dense.layers[i].n_params
        assert hybrid.n_params - dense.n_params == dense.layers[i].n_params

    def test_radial_single_parameter_rejected(self):
        spec = ModelSpec(1, [LayerSpec("dense-variational", 1, "identity", "radial", 1.0),
                             LayerSpec("dense", 2, "identity")])
        with pytest.raises(BuildError, match="layer 0"):
            build_model(spec, 0)

    def test_forward_width_error_names_layer(self):
        model = build_model(load_spec("case2"), 0)
        with pytest.raises(ShapeError, match="layer 0"):
            model.forward(np.zeros((3, 4)), rng=np.random.default_rng(0))

    def test_place_variational_positions(self):
        spec = place_variational(load_spec("all-dense"), [2], "radial", 0.3)
        assert kinds(spec) == ["dense", "dense-variational", "dense"]
        assert spec.layers[1].posterior_family == "radial"
        assert spec.layers[1].prior_sigma == 0.3
        with pytest.raises(ConfigurationError):
            place_variational(spec, [4])


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = build_model(load_spec("case1"), 3)
        model.set_parameters({k: v + rng.normal(size=v.shape)
                              for k, v in model.parameters().items()})
        path = tmp_path / "ckpt.json"
        save_checkpoint(model, path, {"note": "x"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"note": "x"}
        assert loaded.seed == 3
        assert spec_to_dict(loaded.spec) == spec_to_dict(model.spec)
        for k, v in model.parameters().items():
            assert loaded.parameters()[k].tobytes() == v.tobytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_rejects_mismatched_parameters(self, tmp_path):
        model = build_model(load_spec("case2"), 0)
        path = tmp_path / "c.json"
        save_checkpoint(model, path)
        doc = json.loads(path.read_text())
        doc["params"].pop("layer0.weight")
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)
