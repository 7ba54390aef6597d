import csv
import json

import jsonschema
import numpy as np
import pytest

from mixedim import cli

from conftest import make_grouped_y


@pytest.fixture(scope="module")
def exact_csv(tmp_path_factory):
    """Design-A-shaped CSV whose REML fit is exactly (1, 1) with ybar = 0."""
    t = np.sqrt(7.0 / 3.0)
    s = np.sqrt(25.0 / 30.0)
    y = make_grouped_y([t, -t, 0.0, 0.0, 0.0],
                       s * np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0]))
    path = tmp_path_factory.mktemp("data") / "design_a.csv"
    rows = ["response,group"]
    for i in range(5):
        for j in range(6):
            rows.append(f"{float(y[6 * i + j])!r},farm{i}")
    path.write_text("\n".join(rows) + "\n")
    return path


def run(args):
    return cli.main([str(a) for a in args])


class TestFit:
    def test_fit_json(self, exact_csv, tmp_path, capsys):
        assert run(["fit", "--data", exact_csv, "--out", tmp_path]) == 0
        payload = json.loads((tmp_path / "fit.json").read_text())
        jsonschema.validate(payload, cli.SCHEMAS["fit"])
        assert payload["n"] == 30 and payload["N"] == 5 and payload["L"] == 2
        assert abs(payload["reml"]["sigma_alpha2"] - 1.0) < 1e-9
        assert abs(payload["reml"]["sigma_eps2"] - 1.0) < 1e-9
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        jsonschema.validate(manifest, cli.SCHEMAS["manifest"])
        assert manifest["command"] == "fit"


class TestPredict:
    def test_student_t_example(self, exact_csv, tmp_path, capsys):
        code = run(["predict", "--data", exact_csv, "--method", "student-t",
                    "--level", "0.95", "--out", tmp_path])
        assert code == 0
        payload = json.loads((tmp_path / "interval.json").read_text())
        jsonschema.validate(payload, cli.SCHEMAS["interval"])
        assert abs(payload["upper"] - 3.5342829823631168) < 1e-6
        assert abs(payload["lower"] + 3.5342829823631168) < 1e-6
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["method"] == "student-t"

    def test_oracle_needs_truth(self, exact_csv, tmp_path, capsys):
        code = run(["predict", "--data", exact_csv, "--method", "oracle",
                    "--out", tmp_path])
        assert code == cli.EXIT_DOMAIN
        err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert err["error"] == "UsageError"

    def test_joint_im_runs(self, exact_csv, tmp_path):
        code = run(["predict", "--data", exact_csv, "--method", "joint-im",
                    "--m", "1000", "--rho-grid", "20", "--seed", "3",
                    "--out", tmp_path])
        assert code == 0
        payload = json.loads((tmp_path / "interval.json").read_text())
        assert payload["lower"] < 0 < payload["upper"]

    def test_seed_reproducibility(self, exact_csv, tmp_path):
        outs = []
        for sub in ("r1", "r2"):
            d = tmp_path / sub
            assert run(["predict", "--data", exact_csv, "--method", "param-boot",
                        "--seed", "11", "--out", d]) == 0
            outs.append((d / "interval.json").read_bytes())
        assert outs[0] == outs[1]


class TestContour:
    def test_gen_contour_peak(self, exact_csv, tmp_path):
        code = run(["contour", "--data", exact_csv, "--method", "gen",
                    "--points", "101", "--out", tmp_path])
        assert code == 0
        with (tmp_path / "contour.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 101
        best = max(rows, key=lambda r: float(r["plausibility"]))
        assert abs(float(best["theta"])) < 1e-9          # center is ybar = 0
        assert float(best["plausibility"]) == 1.0
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        jsonschema.validate(diag, cli.SCHEMAS["diagnostics"])
        assert diag["mode"] == "sup"

    def test_joint_contour_diagnostics(self, exact_csv, tmp_path):
        code = run(["contour", "--data", exact_csv, "--method", "joint",
                    "--m", "1000", "--rho-grid", "10", "--points", "41",
                    "--seed", "2", "--out", tmp_path])
        assert code == 0
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        jsonschema.validate(diag, cli.SCHEMAS["diagnostics"])
        assert len(diag["acceptance"]) == 10
        assert all(0 < a < 1 for a in diag["acceptance"])
        with (tmp_path / "contour.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 41
        assert all(0.0 <= float(r["plausibility"]) <= 1.0 for r in rows)
        assert all(0.0 < float(r["argmax_rho"]) < 1.0 for r in rows)

    def test_contour_seed_reproducibility(self, exact_csv, tmp_path):
        outs = []
        for sub in ("c1", "c2"):
            d = tmp_path / sub
            assert run(["contour", "--data", exact_csv, "--method", "joint",
                        "--m", "1000", "--rho-grid", "10", "--seed", "5",
                        "--out", d]) == 0
            outs.append((d / "contour.csv").read_bytes())
        assert outs[0] == outs[1]


class TestSimulate:
    def test_small_study(self, tmp_path):
        config = {"design": "A", "sigma_alpha2": 0.5, "sigma_eps2": 0.5,
                  "methods": ["oracle", "student-t"], "replications": 40,
                  "alphas": [0.05], "seed": 1}
        cpath = tmp_path / "study.json"
        cpath.write_text(json.dumps(config))
        code = run(["simulate", "--config", cpath, "--out", tmp_path])
        assert code == 0
        payload = json.loads((tmp_path / "simreport.json").read_text())
        jsonschema.validate(payload, cli.SCHEMAS["simreport"])
        with (tmp_path / "simreport.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert {r["method"] for r in rows} == {"oracle", "student-t"}


class TestErrorMapping:
    def test_missing_file(self, tmp_path, capsys):
        code = run(["fit", "--data", tmp_path / "absent.csv", "--out", tmp_path])
        assert code == cli.EXIT_PARSE
        err = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert err["exit_code"] == cli.EXIT_PARSE

    def test_rank_deficient(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        lines = ["response,group,c"] + [f"{i}.0,g{i % 2},1.0" for i in range(8)]
        path.write_text("\n".join(lines) + "\n")
        code = run(["fit", "--data", path, "--covariates", "c",
                    "--out", tmp_path])
        assert code == cli.EXIT_VALIDATION

    def test_unknown_method_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["predict", "--data", "x.csv", "--method", "nope"])
        assert exc.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["--version"])
        assert exc.value.code == 0
