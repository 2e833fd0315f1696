import csv
import json
import warnings

import numpy as np
import pytest

from pertpinn.cli import (
    COMPARE_SCHEMA,
    SWEEP_EPS_COLUMNS,
    SWEEP_P_COLUMNS,
    ConfigError,
    check_schema,
    dedupe_eps,
    main,
    parse_p_range,
)
from pertpinn.export import read_field_csv
from pertpinn.network import load_checkpoint

SMALL = ["--width", "8", "--layers", "2", "--heads", "3", "--iterations", "10"]
FAST = ["--grid-nx", "21", "--grid-nt", "11", "--ref-nx", "41"]


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--preset", "kpp-1", "--out", str(out), "--seed", "3", *SMALL]) == 0
    return out


@pytest.fixture
def cache(tmp_path):
    return ["--cache-dir", str(tmp_path / "cache")]


class TestParsing:
    def test_p_range(self):
        assert parse_p_range("0:3") == [0, 1, 2, 3]
        assert parse_p_range("3") == [3]
        assert parse_p_range("5,0,2,2") == [0, 2, 5]
        for bad in ("", "a:b", "-1", "2:x"):
            with pytest.raises(ConfigError):
                parse_p_range(bad)

    def test_dedupe_warns(self):
        with pytest.warns(UserWarning, match="duplicate"):
            assert dedupe_eps([0.5, 0.1, 0.5]) == [0.1, 0.5]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert dedupe_eps([0.2, 0.1]) == [0.1, 0.2]

    def test_schema_checker(self):
        with pytest.raises(ValueError, match="missing"):
            check_schema({"schema_version": 1}, COMPARE_SCHEMA)
        with pytest.raises(ValueError, match="expected"):
            check_schema({"a": "x"}, {"a": int})


class TestTrain:
    def test_outputs(self, trained):
        ck = load_checkpoint(trained / "checkpoint.json")
        assert ck.heads.shape == (8, 3)
        loss = rows(trained / "loss.csv")
        assert loss[0] == ["iteration", "total", "pde", "ic", "bc"] and len(loss) == 11
        meta = json.loads((trained / "train_meta.json").read_text())
        assert meta["status"] == "ok" and meta["seed"] == 3
        assert meta["checkpoint_digest"] == ck.digest()
        assert meta["final_loss"] == pytest.approx(float(loss[-1][1]))

    def test_same_seed_byte_identical(self, trained, tmp_path):
        assert main(["train", "--preset", "kpp-1", "--out", str(tmp_path), "--seed", "3", *SMALL]) == 0
        assert (tmp_path / "checkpoint.json").read_bytes() == (trained / "checkpoint.json").read_bytes()

    def test_divergence_exit_1(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"training": {"lr": 1e6, "iterations": 200,
                                                "architecture": {"width": 8, "layers": 2}}}))
        code = main(["train", "--preset", "kpp-1", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        meta = json.loads((tmp_path / "o" / "train_meta.json").read_text())
        assert meta["status"] == "diverged"
        assert (tmp_path / "o" / "loss.csv").exists()


class TestUsageErrors:
    def test_missing_checkpoint(self, tmp_path):
        out = tmp_path / "never"
        assert main(["solve", "--preset", "kpp-1", "--checkpoint", str(tmp_path / "nope.json"),
                     "--out", str(out)]) == 2
        assert not out.exists()

    def test_operator_mismatch(self, trained, tmp_path):
        assert main(["solve", "--preset", "wave-1", "--checkpoint", str(trained / "checkpoint.json"),
                     "--out", str(tmp_path), *FAST]) == 2

    @pytest.mark.parametrize("argv", [
        ["solve", "--preset", "nope"],
        ["reference", "--preset", "kpp-1", "--epsilon", "1.5"],
        ["reference"],
        ["sweep-p", "--preset", "kpp-1", "--p-range", "x"],
        ["frobnicate"],
        ["solve", "--p", "notanint"],
    ])
    def test_exit_2(self, argv, tmp_path):
        assert main(argv + ["--out", str(tmp_path / "o")] if argv[0] != "frobnicate" else argv) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert main(["reference", "--preset", "kpp-1", "--config", str(cfg)]) == 2


class TestCommands:
    def test_solve(self, trained, tmp_path, cache):
        ck = str(trained / "checkpoint.json")
        assert main(["solve", "--preset", "kpp-1", "--checkpoint", ck, "--p", "2", "--out", str(tmp_path),
                     *FAST, *cache]) == 0
        err = json.loads((tmp_path / "error.json").read_text())
        assert err["schema_version"] == 1 and err["p"] == 2 and err["relative_l2"] >= 0
        field, orders = read_field_csv(tmp_path / "solution.csv")
        assert field.values.shape == (21, 11) and len(orders) == 3
        assert np.allclose(field.values, orders[0].values + 0.5 * orders[1].values + 0.25 * orders[2].values)

    def test_solve_deterministic(self, trained, tmp_path, cache):
        ck = str(trained / "checkpoint.json")
        for name in ("a", "b"):
            assert main(["solve", "--preset", "kpp-1", "--checkpoint", ck, "--p", "3", "--no-cache",
                         "--out", str(tmp_path / name), *FAST]) == 0
        assert (tmp_path / "a" / "solution.csv").read_bytes() == (tmp_path / "b" / "solution.csv").read_bytes()
        ea, eb = (json.loads((tmp_path / n / "error.json").read_text()) for n in "ab")
        assert ea["relative_l2"] == eb["relative_l2"]

    def test_sweep_p_single_row(self, trained, tmp_path, cache):
        ck = str(trained / "checkpoint.json")
        assert main(["sweep-p", "--preset", "kpp-1", "--checkpoint", ck, "--p-range", "3",
                     "--out", str(tmp_path), *FAST, *cache]) == 0
        r = rows(tmp_path / "sweep_p.csv")
        assert r[0] == SWEEP_P_COLUMNS and len(r) == 2 and r[1][0] == "3"

    def test_sweep_eps(self, trained, tmp_path, cache):
        ck = str(trained / "checkpoint.json")
        with pytest.warns(UserWarning, match="duplicate"):
            code = main(["sweep-eps", "--checkpoint", ck, "--eps", "0.1,0,0.1", "--p", "2", "--workers", "2",
                         "--out", str(tmp_path), *FAST, *cache])
        assert code == 0
        r = rows(tmp_path / "sweep_eps.csv")
        assert r[0] == SWEEP_EPS_COLUMNS
        assert [(x[0], float(x[1])) for x in r[1:]] == [("eps-f0", 0.0), ("eps-f0", 0.1),
                                                        ("eps-f1", 0.0), ("eps-f1", 0.1)]
        # at epsilon 0 the sweep reproduces the linear (p = 0) baseline
        assert main(["solve", "--preset", "eps-f0", "--checkpoint", ck, "--p", "0", "--epsilon", "0",
                     "--out", str(tmp_path / "lin"), *FAST, *cache]) == 0
        lin = json.loads((tmp_path / "lin" / "error.json").read_text())
        assert float(r[1][3]) == lin["relative_l2"]

    def test_compare_schema_and_cache(self, trained, tmp_path, cache):
        ck = str(trained / "checkpoint.json")
        argv = ["compare", "--preset", "kpp-1", "--checkpoint", ck, "--repeats", "2", "--hires-nx", "81",
                *FAST, *cache]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        a, b = (json.loads((tmp_path / n / "compare.json").read_text()) for n in "ab")
        check_schema(a)
        check_schema(b)
        assert (a["one_time"]["cache_hit"], b["one_time"]["cache_hit"]) == (False, True)
        assert b["per_task"]["adapt_seconds"] < 1.0
        assert a["accuracy"]["perturbative"] == b["accuracy"]["perturbative"]
        assert "perturbative" in (tmp_path / "a" / "compare.txt").read_text()

    def test_reference(self, tmp_path):
        assert main(["reference", "--preset", "kpp-4", "--out", str(tmp_path), *FAST]) == 0
        field, orders = read_field_csv(tmp_path / "reference.csv")
        assert orders == [] and np.all(np.isfinite(field.values))
        meta = json.loads((tmp_path / "reference.json").read_text())
        assert meta["n_x"] == 41

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"preset": "kpp-1", "grid_nx": 11, "grid_nt": 6, "ref_nx": 41}))
        assert main(["reference", "--config", str(cfg), "--grid-nx", "13", "--out", str(tmp_path)]) == 0
        field, _ = read_field_csv(tmp_path / "reference.csv")
        assert field.values.shape == (13, 6)
