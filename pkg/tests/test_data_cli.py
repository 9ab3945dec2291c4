import json
import math

import numpy as np
import pytest

from varbnn.cli import main
from varbnn.data import (
    Standardization,
    ingest_csv,
    make_linear,
    make_sine,
    split_dataset,
    write_csv,
)
from varbnn.distributions import inverse_softplus
from varbnn.errors import ConfigurationError, DataError
from varbnn.model_builder import (
    LayerSpec,
    ModelSpec,
    build_model,
    dump_spec,
    save_checkpoint,
)
from varbnn.predictive import parse_prediction_line


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


@pytest.fixture
def linear_csv(tmp_path):
    path = tmp_path / "linear.csv"
    assert main(["gen-data", "--kind", "linear", "--n", "512", "--seed", "3",
                 "--out", str(path)]) == 0
    return path


class TestIngest:
    def test_toy_csv(self, tmp_path):
        path = tmp_path / "toy.csv"
        path.write_text("a,y,b\n1,10,4\n2,20,5\n3,30,9\n")
        ds = ingest_csv(path, "y")
        assert ds.columns == ("a", "b")
        assert ds.targets.tolist() == [10.0, 20.0, 30.0]
        assert ds.standardization.mean == (2.0, 6.0)
        assert np.allclose(ds.raw_features, [[1, 4], [2, 5], [3, 9]], rtol=0, atol=1e-12)
        assert np.allclose(ds.features[:, 0], np.array([-1, 0, 1]) / math.sqrt(2 / 3))

    def test_standardised_moments(self, tmp_path, rng):
        path = tmp_path / "d.csv"
        write_csv(path, rng.normal(5.0, 3.0, size=(200, 3)), rng.normal(size=200))
        x = ingest_csv(path, "y").features
        assert np.all(np.abs(x.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(x.std(axis=0) - 1) < 1e-10)

    def test_constant_column_is_centred(self):
        st = Standardization.fit(np.array([[1.0, 2.0], [1.0, 4.0]]))
        assert st.std == (1.0, 1.0)

    def test_missing_value_names_row(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("x,y\n1,2\n,3\n")
        with pytest.raises(DataError, match="row 3"):
            ingest_csv(path, "y")

    def test_non_numeric_names_column(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text("x,colour,y\n1,red,2\n")
        with pytest.raises(DataError, match="'colour'"):
            ingest_csv(path, "y")

    def test_missing_target_and_file(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(DataError):
            ingest_csv(path, "z")
        with pytest.raises(DataError):
            ingest_csv(tmp_path / "absent.csv", "y")

    def test_classification_labels(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("x,label\n0.5,0\n1.5,2\n")
        assert ingest_csv(path, "label", "classification").targets.dtype == np.int64
        path.write_text("x,label\n0.5,0.5\n")
        with pytest.raises(DataError):
            ingest_csv(path, "label", "classification")


class TestSplit:
    @pytest.mark.parametrize("n", [1, 7, 10, 101, 512])
    def test_sizes_disjoint_reproducible(self, tmp_path, n):
        path = tmp_path / "s.csv"
        x = np.arange(n, dtype=float).reshape(-1, 1)
        write_csv(path, x, x[:, 0])
        ds = ingest_csv(path, "y")
        tr, te = split_dataset(ds, 0.8, seed=4)
        assert len(tr) == math.ceil(0.8 * n) and len(te) == n - math.ceil(0.8 * n)
        a, b = set(tr.targets.tolist()), set(te.targets.tolist())
        assert not a & b and a | b == set(range(n))
        tr2, _ = split_dataset(ds, 0.8, seed=4)
        assert np.array_equal(tr.targets, tr2.targets)

    def test_bad_fraction(self, linear_csv):
        with pytest.raises(ConfigurationError):
            split_dataset(ingest_csv(linear_csv, "y"), 0.0, 0)


class TestGenerators:
    def test_linear_and_sine_are_seeded(self):
        assert np.array_equal(make_linear(20, 1)[1], make_linear(20, 1)[1])
        x, y = make_sine(2000, 2, noise=0.0)
        assert np.allclose(y, np.sin(x[:, 0]))
        x, y = make_linear(5000, 3, noise=0.1)
        resid = y - (2 * x[:, 0] + 1)
        assert abs(resid.std() - 0.1) < 0.005


class TestTrainCommand:
    def run_train(self, tmp_path, data, name, *extra):
        out = tmp_path / name
        code = main(["train", "--spec", "case2", "--data", str(data), "--out-dir", str(out),
                     "--epochs", "3", "--seed", "11", *extra])
        assert code == 0
        return out

    def test_outputs_and_byte_identical_rerun(self, tmp_path, linear_csv, capsys):
        a = self.run_train(tmp_path, linear_csv, "a", "--train-fraction", "0.8")
        b = self.run_train(tmp_path, linear_csv, "b", "--train-fraction", "0.8")
        assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
        assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
        records = [json.loads(line) for line in (a / "trace.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in records] == [1, 2, 3]
        assert set(records[0]) == {"epoch", "total", "nll", "kl"}
        out = json_lines(capsys.readouterr().out)
        assert out[0]["record"] == "train" and out[1]["record"] == "metrics"
        assert out[1]["n"] == 512 - math.ceil(0.8 * 512)

    def test_all_dense_zero_kl_weight(self, tmp_path, linear_csv):
        out = tmp_path / "dense"
        assert main(["train", "--spec", "all-dense", "--data", str(linear_csv), "--out-dir",
                     str(out), "--epochs", "4", "--kl-weight", "0"]) == 0
        records = [json.loads(line) for line in (out / "trace.jsonl").read_text().splitlines()]
        assert all(r["kl"] == 0.0 and r["total"] == r["nll"] for r in records)

    def test_case2_rmse_close_to_least_squares(self, tmp_path, linear_csv, capsys):
        out = tmp_path / "c2"
        assert main(["train", "--spec", "case2", "--data", str(linear_csv), "--out-dir", str(out),
                     "--epochs", "800", "--batch-size", "16", "--optimizer", "momentum",
                     "--lr", "0.001", "--train-fraction", "0.8", "--seed", "0"]) == 0
        rmse = json_lines(capsys.readouterr().out)[-1]["rmse"]

        ds = ingest_csv(linear_csv, "y")
        tr, te = split_dataset(ds, 0.8, 0)
        design = np.column_stack([tr.features, np.ones(len(tr))])
        coef = np.linalg.lstsq(design, tr.targets, rcond=None)[0]
        ls_pred = np.column_stack([te.features, np.ones(len(te))]) @ coef
        ls_rmse = np.sqrt(np.mean((te.targets - ls_pred) ** 2))
        assert rmse <= 1.15 * ls_rmse

    def test_classification_round_trip(self, tmp_path, rng, capsys):
        x = rng.normal(size=(120, 2))
        labels = (x[:, 0] + x[:, 1] > 0).astype(int)
        data = tmp_path / "cls.csv"
        write_csv(data, x, labels, "label")
        spec = tmp_path / "cls.json"
        spec.write_text(dump_spec(ModelSpec(2, [LayerSpec("dense", 4, "sigmoid"),
                                                LayerSpec("dense-variational", 2, "softmax")],
                                            head="categorical", n_classes=2)))
        out = tmp_path / "cls"
        assert main(["train", "--spec", str(spec), "--data", str(data), "--target", "label",
                     "--out-dir", str(out), "--epochs", "40", "--optimizer", "momentum",
                     "--train-fraction", "0.75"]) == 0
        capsys.readouterr()
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"),
                     "--data", str(data), "--n-samples", "20", "--limit", "3"]) == 0
        records = json_lines(capsys.readouterr().out)
        assert [r["record"] for r in records] == ["prediction"] * 3 + ["metrics"]
        assert records[-1]["accuracy"] > 0.8


def exact_linear_checkpoint(tmp_path, data_path, sigma=0.1):
    """A deterministic 1 -> 2 model equal to the generator ``y = 2x + 1 + N(0, sigma^2)``."""
    ds = ingest_csv(data_path, "y")
    (m,), (s,) = ds.standardization.mean, ds.standardization.std
    model = build_model(ModelSpec(1, [LayerSpec("dense", 2, "identity")]), 0)
    model.set_parameters({"layer0.weight": np.array([[2 * s], [0.0]]),
                          "layer0.bias": np.array([2 * m + 1,
                                                   float(inverse_softplus(sigma - 1e-6))])})
    path = tmp_path / "exact.json"
    save_checkpoint(model, path, {"target": "y", "standardization": ds.standardization.to_dict()})
    return path


class TestPredictCommand:
    def test_self_consistent_coverage_and_head_sigma(self, tmp_path, capsys):
        data = tmp_path / "big.csv"
        assert main(["gen-data", "--n", "10000", "--seed", "21", "--out", str(data)]) == 0
        ckpt = exact_linear_checkpoint(tmp_path, data)
        report = tmp_path / "report.txt"
        assert main(["predict", "--checkpoint", str(ckpt), "--data", str(data),
                     "--report", str(report)]) == 0
        metrics = json_lines(capsys.readouterr().out)[0]
        assert 0.94 <= metrics["coverage95"] <= 0.96
        lines = report.read_text().splitlines()
        assert len(lines) == 10_000
        assert all(parse_prediction_line(line)["stddev"] == 0.1 for line in lines[:50])

    def test_outputs_are_byte_identical(self, tmp_path, linear_csv):
        out = tmp_path / "m"
        assert main(["train", "--spec", "case1", "--data", str(linear_csv), "--out-dir", str(out),
                     "--epochs", "2"]) == 0
        texts = []
        for name in ("r1", "r2"):
            assert main(["predict", "--checkpoint", str(out / "checkpoint.json"), "--data",
                         str(linear_csv), "--n-samples", "10", "--seed", "5",
                         "--report", str(tmp_path / f"{name}.txt"),
                         "--metrics", str(tmp_path / f"{name}.jsonl")]) == 0
            texts.append(((tmp_path / f"{name}.txt").read_bytes(),
                          (tmp_path / f"{name}.jsonl").read_bytes()))
        assert texts[0] == texts[1]
        first = (tmp_path / "r1.txt").read_text().splitlines()[0]
        assert first.startswith("Prediction mean: ")
        parse_prediction_line(first)

    def test_width_mismatch_is_an_ingest_error(self, tmp_path, linear_csv, capsys):
        out = tmp_path / "m"
        assert main(["train", "--spec", "case2", "--data", str(linear_csv), "--out-dir", str(out),
                     "--epochs", "1"]) == 0
        wide = tmp_path / "wide.csv"
        write_csv(wide, np.zeros((3, 2)), np.zeros(3))
        capsys.readouterr()
        assert main(["predict", "--checkpoint", str(out / "checkpoint.json"),
                     "--data", str(wide)]) == 1
        assert "error in stage ingest" in capsys.readouterr().err


class TestOtherCommands:
    def test_diagnose_prior(self, tmp_path, capsys):
        spec = tmp_path / "relu.json"
        spec.write_text(dump_spec(ModelSpec(4, [LayerSpec("dense-variational", 16, "relu")] * 3
                                            + [LayerSpec("dense", 2, "identity")])))
        assert main(["diagnose-prior", "--spec", str(spec), "--samples", "100000"]) == 0
        rows = json_lines(capsys.readouterr().out)
        k = [r["excess_kurtosis"] for r in rows]
        assert [r["layer"] for r in rows] == [1, 2, 3]
        assert abs(k[0]) < 0.15
        assert k[1] > 0 and k[2] > 0
        assert k[1] >= k[0] - 0.1 and k[2] >= k[1] - 0.1

    def test_diagnose_prior_needs_two_hidden_layers(self, tmp_path, capsys):
        spec = tmp_path / "shallow.json"
        spec.write_text(dump_spec(ModelSpec(1, [LayerSpec("dense", 4, "relu"),
                                                LayerSpec("dense", 2, "identity")])))
        assert main(["diagnose-prior", "--spec", str(spec)]) == 1
        assert "error in stage spec" in capsys.readouterr().err

    def test_sweep_rows(self, tmp_path, linear_csv, capsys):
        assert main(["sweep-position", "--spec", "all-dense", "--data", str(linear_csv),
                     "--epochs", "2", "--seed", "9", "--n-samples", "5"]) == 0
        header, *rows = json_lines(capsys.readouterr().out)
        assert header["record"] == "header" and header["seed"] == 9
        assert header["train_config"]["seed"] == 9
        assert [r["label"] for r in rows] == ["position-1", "position-2", "position-3",
                                              "case1", "case2"]
        assert [r["position"] for r in rows[:3]] == [1, 2, 3]
        assert all(r["status"] == "ok" and r["probabilistic"] >= 1 for r in rows)
        assert rows[4]["nll"] == rows[2]["nll"]  # case 2 is position L

    def test_missing_data_file(self, tmp_path, capsys):
        assert main(["train", "--spec", "case1", "--data", str(tmp_path / "none.csv"),
                     "--out-dir", str(tmp_path / "o")]) == 1
        assert "error in stage ingest" in capsys.readouterr().err

    def test_bad_spec(self, tmp_path, linear_csv, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert main(["train", "--spec", str(bad), "--data", str(linear_csv),
                     "--out-dir", str(tmp_path / "o")]) == 1
        assert "error in stage spec" in capsys.readouterr().err

    def test_radial_override(self, tmp_path, linear_csv):
        out = tmp_path / "rad"
        assert main(["train", "--spec", "case1", "--data", str(linear_csv), "--out-dir", str(out),
                     "--epochs", "1", "--posterior-family", "radial"]) == 0
        doc = json.loads((out / "checkpoint.json").read_text())
        fams = [ls.get("posterior_family") for ls in doc["spec"]["layers"]]
        assert fams == ["radial", "radial", None]
