"""End-to-end CLI tests: exit codes, artifacts, determinism, config."""

import json
import math
from importlib import resources

import jsonschema
import numpy as np
import pytest
from scipy import stats

from countsynth.cli import _mix_counts, main, simulate_dataset
from countsynth.evidence import (
    ArmRecord,
    StudyRecord,
    TreatmentClass,
    parse_dataset,
    serialize_dataset,
)

P = TreatmentClass.PLACEBO
A = TreatmentClass.ACTIVE

CSV_HEADER = "study,group,arm,patients,duration_yr,rate,std_err,total,zeroes"


def load_schema(name):
    ref = resources.files("countsynth") / "schema" / name
    return json.loads(ref.read_text(encoding="utf-8"))


def check_schema(payload, schema_name):
    jsonschema.validate(payload, load_schema(schema_name))


def write_csv(tmp_path, studies, name="data.csv"):
    path = tmp_path / name
    path.write_text(serialize_dataset(studies), encoding="utf-8")
    return path


def se_study(i, rate_p=1.3, rate_a=1.0):
    return StudyRecord(
        f"Study {i:02d}",
        1.0,
        (
            ArmRecord(P, 100, rate_est=rate_p, std_err=0.12),
            ArmRecord(A, 100, rate_est=rate_a, std_err=0.11),
        ),
    )


class TestValidate:
    def test_packaged_dataset_clean(self, capsys):
        assert main(["validate"]) == 0
        out = capsys.readouterr().out
        assert "studies: 24, arms: 50" in out
        assert "A=4 B=12 C=24" in out
        assert "rate-and-SE studies=4" in out
        assert "total-only=3" in out
        assert "zero-only=9" in out
        assert "both=8" in out
        assert "violations: none" in out

    def test_empty_file(self, tmp_path, capsys):
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")
        assert main(["validate", "--input", str(path)]) == 1
        assert "no studies" in capsys.readouterr().err

    def test_header_only_file(self, tmp_path, capsys):
        path = tmp_path / "header.csv"
        path.write_text(CSV_HEADER + "\n", encoding="utf-8")
        assert main(["validate", "--input", str(path)]) == 1
        assert "no studies" in capsys.readouterr().err

    def test_zeroes_exceed_patients_names_row(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text(
            CSV_HEADER + "\n"
            "Oops (2020),,P,100,1.0,,,,200\n"
            "Oops (2020),,L,100,1.0,,,40,30\n",
            encoding="utf-8",
        )
        assert main(["validate", "--input", str(path)]) == 1
        assert "row 2" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["validate", "--input", "/nonexistent/x.csv"]) == 1

    def test_impossible_count_pair_flagged(self, tmp_path, capsys):
        path = tmp_path / "impossible.csv"
        path.write_text(
            CSV_HEADER + "\n"
            "Odd (2021),,P,50,1.0,,,,10\n"
            "Odd (2021),,L,50,1.0,,,5,50\n",
            encoding="utf-8",
        )
        assert main(["validate", "--input", str(path)]) == 1
        out = capsys.readouterr().out
        assert "violations:" in out
        assert "every patient event-free" in out

    def test_reference_mismatch_notes_are_informational(self, capsys):
        main(["validate"])
        out = capsys.readouterr().out
        assert "derived totals: 23 of 27" in out
        assert "Cooper (2010)" in out
        assert "Powrie (2007)" in out


class TestClassic:
    def test_packaged_subset_a_reml(self, capsys):
        assert main(["classic"]) == 0
        out = capsys.readouterr().out
        payload = json.loads(out.strip().splitlines()[-1])
        check_schema(payload, "classic.schema.json")
        assert payload["method"] == "reml"
        assert payload["subset"] == "A"
        assert len(payload["estimates"]) == 4
        # Study order enters the REML objective's float summation, so the
        # optimizer wobbles in the last couple of digits vs the library test.
        assert payload["pooled"]["effect"] == pytest.approx(0.6927619110826644, rel=1e-7)
        lo, hi = payload["pooled"]["ci95"]
        assert lo == pytest.approx(0.5185643106006558, rel=1e-7)
        assert hi == pytest.approx(0.9254764657656689, rel=1e-7)

    def test_dl_method(self, capsys):
        assert main(["classic", "--method", "dl"]) == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["pooled"]["effect"] == pytest.approx(0.7270268388499317, rel=1e-9)

    def test_single_study_returns_its_ratio(self, tmp_path, capsys):
        path = write_csv(tmp_path, [se_study(1, rate_p=1.5, rate_a=1.2)])
        assert main(["classic", "--input", str(path)]) == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["pooled"]["effect"] == pytest.approx(1.2 / 1.5, rel=1e-9)
        assert payload["pooled"]["tau_sq"] == 0.0

    def test_duplicated_study_shrinks_se(self, tmp_path, capsys):
        one = write_csv(tmp_path, [se_study(1)], "one.csv")
        assert main(["classic", "--input", str(one)]) == 0
        single = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        two = write_csv(tmp_path, [se_study(1), se_study(2)], "two.csv")
        assert main(["classic", "--input", str(two)]) == 0
        double = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert double["pooled"]["effect"] == pytest.approx(
            single["pooled"]["effect"], rel=1e-9
        )
        assert double["pooled"]["std_err"] < single["pooled"]["std_err"]

    def test_no_eligible_studies(self, tmp_path, capsys):
        zero_only = StudyRecord(
            "Z", 1.0, (ArmRecord(P, 40, zeroes=10), ArmRecord(A, 40, zeroes=14))
        )
        path = write_csv(tmp_path, [zero_only])
        assert main(["classic", "--input", str(path), "--subset", "C"]) == 1
        assert "rate-and-SE" in capsys.readouterr().err

    def test_out_dir_written(self, tmp_path, capsys):
        out = tmp_path / "cls"
        assert main(["classic", "--out", str(out)]) == 0
        capsys.readouterr()
        payload = json.loads((out / "classic.json").read_text())
        check_schema(payload, "classic.schema.json")


@pytest.fixture(scope="module")
def fit_run(tmp_path_factory):
    """One small subset-A fit reused by the artifact tests."""
    out = tmp_path_factory.mktemp("fit") / "run1"
    argv = [
        "fit",
        "--subset",
        "A",
        "--chains",
        "2",
        "--iters",
        "6000",
        "--thin",
        "20",
        "--seed",
        "5",
        "--out",
        str(out),
    ]
    code = main(argv)
    return code, out, argv


class TestFit:
    def test_exit_code_and_summary_schema(self, fit_run):
        code, out, _ = fit_run
        assert code == 0
        payload = json.loads((out / "summary.json").read_text())
        check_schema(payload, "summary.schema.json")
        assert payload["subset"] == "A"
        assert payload["n_studies"] == 4
        assert payload["config"]["iterations"] == 6000
        assert payload["config"]["seed"] == 5

    def test_artifact_layout(self, fit_run):
        _, out, _ = fit_run
        assert (out / "summary.json").is_file()
        assert (out / "report.txt").is_file()
        assert (out / "predictive.tsv").is_file()
        chains = sorted(p.name for p in (out / "chains").iterdir())
        assert chains == ["chain-1.tsv", "chain-2.tsv"]
        names = (out / "chains" / "chain-1.tsv").read_text().splitlines()[0].split("\t")
        draws = np.loadtxt(out / "chains" / "chain-1.tsv", skiprows=1)
        # 4 studies: 2*4 study sites + 4 psi + theta + 5 hypers.
        assert draws.shape == (151, 18)
        assert len(names) == 18
        assert "log_theta" in names
        report = (out / "report.txt").read_text()
        assert "convergence:" in report
        assert "acceptance rates" in report

    def test_density_grids_normalized(self, fit_run):
        _, out, _ = fit_run
        for name in ("theta", "log_theta", "mu_phi", "log_lambda_star", "log_phi_star"):
            grid, dens = np.loadtxt(out / "density" / f"{name}.tsv").T
            assert np.all(np.isfinite(grid)) and np.all(dens >= 0)
            assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)

    def test_summary_matches_chain_dumps(self, fit_run):
        _, out, _ = fit_run
        payload = json.loads((out / "summary.json").read_text())
        names = (out / "chains" / "chain-1.tsv").read_text().splitlines()[0].split("\t")
        j = names.index("log_theta")
        pooled = np.concatenate(
            [
                np.loadtxt(out / "chains" / f"chain-{k}.tsv", skiprows=1)[:, j]
                for k in (1, 2)
            ]
        )
        assert math.exp(float(np.percentile(pooled, 50.0))) == pytest.approx(
            payload["theta"]["median"], rel=1e-12
        )

    def test_predictive_positive(self, fit_run):
        _, out, _ = fit_run
        draws = np.loadtxt(out / "predictive.tsv", skiprows=1)
        assert draws.shape[1] == 2
        assert np.all(draws > 0)

    def test_identical_seed_rerun_byte_identical(self, fit_run, tmp_path):
        _, out, argv = fit_run
        rerun = tmp_path / "run2"
        argv2 = argv[:-1] + [str(rerun)]
        assert main(argv2) == 0
        for rel in (
            "summary.json",
            "chains/chain-1.tsv",
            "chains/chain-2.tsv",
            "predictive.tsv",
            "density/theta.tsv",
        ):
            assert (out / rel).read_bytes() == (rerun / rel).read_bytes(), rel

    def test_different_seed_differs(self, fit_run, tmp_path):
        _, out, argv = fit_run
        other = tmp_path / "run3"
        argv3 = [
            arg if arg != "5" else "6" for arg in argv[:-1]
        ] + [str(other)]
        assert main(argv3) == 0
        assert (out / "summary.json").read_bytes() != (
            other / "summary.json"
        ).read_bytes()

    def test_retention_floor_enforced(self, capsys):
        code = main(
            ["fit", "--subset", "A", "--chains", "2", "--iters", "1000", "--thin", "20"]
        )
        assert code == 1
        assert "retains only" in capsys.readouterr().err

    def test_model_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "impossible.csv"
        path.write_text(
            CSV_HEADER + "\n"
            "Odd (2021),,P,50,1.0,,,,10\n"
            "Odd (2021),,L,50,1.0,,,5,50\n",
            encoding="utf-8",
        )
        code = main(
            [
                "fit",
                "--input",
                str(path),
                "--chains",
                "2",
                "--iters",
                "4000",
                "--thin",
                "20",
            ]
        )
        assert code == 2
        assert "model error" in capsys.readouterr().err

    def test_parse_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("not,a,real,header\n1,2,3,4\n", encoding="utf-8")
        assert main(["fit", "--input", str(path)]) == 1

    def test_empty_subset_rejected(self, tmp_path, capsys):
        zero_only = StudyRecord(
            "Z", 1.0, (ArmRecord(P, 40, zeroes=10), ArmRecord(A, 40, zeroes=14))
        )
        path = write_csv(tmp_path, [zero_only])
        code = main(["fit", "--input", str(path), "--subset", "A"])
        assert code == 1
        assert "selects no studies" in capsys.readouterr().err


class TestStrictMode:
    def test_short_run_warns_then_strict_fails(self, tmp_path, capsys):
        base = [
            "fit",
            "--subset",
            "C",
            "--chains",
            "2",
            "--iters",
            "2000",
            "--thin",
            "10",
            "--seed",
            "1",
        ]
        loose_out = tmp_path / "loose"
        code = main(base + ["--out", str(loose_out)])
        err = capsys.readouterr().err
        assert code == 0
        assert "PSRF" in err
        payload = json.loads((loose_out / "summary.json").read_text())
        assert payload["converged"] is False
        assert payload["warnings"]
        check_schema(payload, "summary.schema.json")

        strict_out = tmp_path / "strict"
        code = main(base + ["--strict", "--out", str(strict_out)])
        capsys.readouterr()
        assert code == 2


class TestPriorsOnly:
    def test_theta_samples_match_prior(self, tmp_path, capsys):
        out = tmp_path / "prior"
        code = main(
            [
                "fit",
                "--subset",
                "A",
                "--priors-only",
                "--chains",
                "2",
                "--iters",
                "50000",
                "--thin",
                "10",
                "--seed",
                "2",
                "--out",
                str(out),
            ]
        )
        capsys.readouterr()
        assert code == 0
        payload = json.loads((out / "summary.json").read_text())
        assert payload["config"]["priors_only"] is True
        names = (out / "chains" / "chain-1.tsv").read_text().splitlines()[0].split("\t")
        j = names.index("log_theta")
        pooled = np.concatenate(
            [
                np.loadtxt(out / "chains" / f"chain-{k}.tsv", skiprows=1)[:, j]
                for k in (1, 2)
            ]
        )
        ks = stats.kstest(pooled, stats.norm(0.0, math.log(4.0)).cdf)
        assert ks.statistic < 0.02


class TestConfigFile:
    def test_precedence_flags_over_file_over_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# comment line\n"
            "n-studies = 5\n"
            "seed = 9\n"
            "theta = 0.9  # inline comment\n",
            encoding="utf-8",
        )
        out = tmp_path / "sim"
        code = main(
            [
                "simulate",
                "--config",
                str(cfg),
                "--seed",
                "3",
                "--out",
                str(out),
            ]
        )
        capsys.readouterr()
        assert code == 0
        truth = json.loads((out / "truth.json").read_text())
        check_schema(truth, "truth.schema.json")
        assert truth["n_studies"] == 5  # from config file
        assert truth["seed"] == 3  # flag beat the config file
        assert truth["truth"]["theta"] == 0.9
        assert truth["mix"] == "0.167,0.333,0.125,0.375"  # default

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("walrus = 7\n", encoding="utf-8")
        assert main(["simulate", "--config", str(cfg)]) == 1
        assert "not recognized" in capsys.readouterr().err

    def test_bad_value_types_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("n-studies = many\n", encoding="utf-8")
        assert main(["simulate", "--config", str(cfg)]) == 1
        cfg.write_text("strict = perhaps\n", encoding="utf-8")
        assert main(["fit", "--config", str(cfg)]) == 1
        cfg.write_text("just a bare line\n", encoding="utf-8")
        assert main(["simulate", "--config", str(cfg)]) == 1
        capsys.readouterr()

    def test_missing_config_file(self, capsys):
        assert main(["simulate", "--config", "/nonexistent.cfg"]) == 1


class TestSimulate:
    def test_mix_counts_largest_remainder(self):
        assert _mix_counts("1,1,1,1", 6) == {"se": 2, "both": 2, "total": 1, "zero": 1}
        counts = _mix_counts("0.167,0.333,0.125,0.375", 20)
        assert sum(counts.values()) == 20
        assert _mix_counts("0,0,0,1", 3) == {"se": 0, "both": 0, "total": 0, "zero": 3}

    def test_mix_validation(self):
        from countsynth.cli import _UsageError

        with pytest.raises(_UsageError):
            _mix_counts("1,1,1", 5)
        with pytest.raises(_UsageError):
            _mix_counts("1,-1,1,1", 5)
        with pytest.raises(_UsageError):
            _mix_counts("a,b,c,d", 5)
        with pytest.raises(_UsageError):
            _mix_counts("0,0,0,0", 5)

    def test_bookkeeping_exact(self):
        studies, truth, raw = simulate_dataset(0.8, 8, "0.25,0.25,0.25,0.25", seed=11)
        assert truth["theta"] == 0.8
        assert len(studies) == 8
        arms = [arm for s in studies for arm in s.arms]
        assert len(raw) == len(arms)
        for arm, counts in zip(arms, raw):
            assert counts.size == arm.n_patients
            if arm.total is not None:
                assert arm.total == int(counts.sum())
            if arm.zeroes is not None:
                assert arm.zeroes == int(np.count_nonzero(counts == 0))
            if arm.rate_est is not None and arm.std_err is not None:
                assert arm.rate_est > 0

    def test_csv_round_trips(self, tmp_path):
        studies, _, _ = simulate_dataset(0.75, 6, "1,1,1,1", seed=4)
        path = write_csv(tmp_path, studies)
        assert parse_dataset(path) == list(studies)

    def test_cli_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "sim"
        code = main(
            [
                "simulate",
                "--theta",
                "0.8",
                "--n-studies",
                "6",
                "--seed",
                "3",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        assert "wrote" in capsys.readouterr().out
        studies = parse_dataset(out / "simulated.csv")
        assert len(studies) == 6
        truth = json.loads((out / "truth.json").read_text())
        check_schema(truth, "truth.schema.json")
        assert truth["truth"]["theta"] == 0.8

    def test_invalid_parameters(self, capsys):
        assert main(["simulate", "--theta", "0"]) == 1
        assert main(["simulate", "--n-studies", "0"]) == 1
        capsys.readouterr()

    def test_fit_writes_recovery(self, tmp_path, capsys):
        out = tmp_path / "simfit"
        code = main(
            [
                "simulate",
                "--theta",
                "0.75",
                "--n-studies",
                "4",
                "--seed",
                "1",
                "--fit",
                "--chains",
                "2",
                "--iters",
                "4000",
                "--thin",
                "20",
                "--out",
                str(out),
            ]
        )
        capsys.readouterr()
        assert code == 0
        recovery = json.loads((out / "recovery.json").read_text())
        check_schema(recovery, "recovery.schema.json")
        assert recovery["theta_true"] == 0.75
        lo, hi = recovery["theta_ci95"]
        assert recovery["covered"] == (lo <= 0.75 <= hi)
        payload = json.loads((out / "summary.json").read_text())
        check_schema(payload, "summary.schema.json")

    def test_null_effect_recovered(self, tmp_path, capsys):
        # True rate ratio 1: the interval straddles 1.
        out = tmp_path / "null"
        code = main(
            [
                "simulate",
                "--theta",
                "1.0",
                "--n-studies",
                "12",
                "--seed",
                "0",
                "--fit",
                "--chains",
                "2",
                "--iters",
                "20000",
                "--thin",
                "10",
                "--out",
                str(out),
            ]
        )
        capsys.readouterr()
        assert code == 0
        recovery = json.loads((out / "recovery.json").read_text())
        lo, hi = recovery["theta_ci95"]
        assert lo < 1.0 < hi


class TestTopLevel:
    def test_missing_command(self, capsys):
        assert main([]) == 1

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag(self, capsys):
        assert main(["validate", "--bogus"]) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "countsynth" in capsys.readouterr().out
