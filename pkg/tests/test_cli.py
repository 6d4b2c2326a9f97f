import hashlib
import json
from textwrap import dedent

import numpy as np
import pytest

from tdcg import cli


def write(path, text):
    path.write_text(dedent(text))
    return str(path)


GLE_SMALL = """
    [gle]
    alpha = 0.1
    eta = 0.1
    tau = 0.5
    beta = 10.0
    q0 = 0.0
    p0 = 0.1
    dt = 0.002
    n_steps = 60
    record_stride = 3
    record_forces = true
    n_paths = 2
"""


class TestConfigValidation:
    def test_unknown_section(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "[nope]\nx = 1\n")
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "unknown section [nope]" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "[gle]\nfoo = 1\n")
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "unknown key 'foo'" in capsys.readouterr().err

    def test_wrong_type(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "[gle]\nalpha = 'x'\n")
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "must be a number" in capsys.readouterr().err

    def test_missing_required_keys(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml",
                    "[gle]\nalpha = 0.1\neta = 0.1\nbeta = 1.0\n"
                    "dt = 0.01\nn_steps = 5\n")
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "missing required keys: tau" in capsys.readouterr().err

    def test_invalid_toml(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "[gle\n")
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "not valid TOML" in capsys.readouterr().err

    def test_two_simulation_kinds(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", GLE_SMALL + """
            [langevin]
            beta = 1.0
            dt = 0.01
            n_steps = 5
            force = "zero"
            zeta0 = 1.0
        """)
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "exactly one" in capsys.readouterr().err

    def test_missing_out_dir(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", GLE_SMALL)
        assert cli.main(["simulate", "--config", cfg]) == 2
        assert "output directory" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "[friction]\nmode = 'qv'\n")
        assert cli.main(["friction", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "no input data" in capsys.readouterr().err

    def test_data_path_must_exist(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "[friction]\nmode = 'qv'\n")
        assert cli.main(["friction", "--config", cfg, "--out",
                         str(tmp_path / "o"), "--data",
                         str(tmp_path / "gone")]) == 2
        assert "does not exist" in capsys.readouterr().err

    def test_fit_needs_mode(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.toml", "")
        assert cli.main(["fit", "--config", cfg, "--out", str(tmp_path / "o"),
                         "--data", str(tmp_path)]) == 2
        assert "fit mode must be" in capsys.readouterr().err


class TestSimulate:
    def test_gle_ensemble_and_manifest(self, tmp_path):
        cfg = write(tmp_path / "c.toml", GLE_SMALL)
        out = tmp_path / "run"
        assert cli.main(["simulate", "--config", cfg, "--out", str(out),
                         "--seed", "42"]) == 0
        meta = json.loads((out / "ensemble.json").read_text())
        assert meta["kind"] == "gle"
        assert meta["n_paths"] == 2
        assert meta["beta"] == 10.0
        assert (out / "path_00000.trj").is_file()
        assert (out / "path_00001.trj").is_file()
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "simulate"
        assert man["seed"] == 42
        assert man["workers"] == 1
        assert man["config_sha256"] == hashlib.sha256(
            (tmp_path / "c.toml").read_bytes()).hexdigest()
        assert man["version"].startswith("tdcg-")
        assert "--seed" in man["argv"]

    def test_seed_controls_the_draws(self, tmp_path):
        cfg = write(tmp_path / "c.toml", GLE_SMALL)
        for seed in ("7", "7", "8"):
            cli.main(["simulate", "--config", cfg, "--out",
                      str(tmp_path / f"o{seed}_{len(list(tmp_path.iterdir()))}"),
                      "--seed", seed])
        dirs = sorted(d for d in tmp_path.iterdir() if d.is_dir())
        b = [(d / "path_00000.trj").read_bytes() for d in dirs]
        assert b[0] == b[1]
        assert b[0] != b[2]

    def test_threads_do_not_change_bytes(self, tmp_path):
        cfg = write(tmp_path / "c.toml", GLE_SMALL.replace("n_paths = 2",
                                                           "n_paths = 5"))
        for tag, threads in (("a", "1"), ("b", "3")):
            assert cli.main(["simulate", "--config", cfg, "--out",
                             str(tmp_path / tag), "--seed", "3",
                             "--threads", threads]) == 0
        for k in range(5):
            name = f"path_{k:05d}.trj"
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "ensemble.json").read_text() == \
            (tmp_path / "b" / "ensemble.json").read_text()

    def test_md_with_grouping(self, tmp_path):
        cfg = write(tmp_path / "c.toml", """
            [md]
            beta = 5.0
            dt = 0.002
            n_steps = 20
            record_stride = 5
            n_cells = [1, 1, 1]
            lattice_constant = 1.6
            boundary = "periodic"
            field = "lj"
            cutoff = 1.5
            cap = 30.0
            zeta0 = 0.5
            group_size = 2

            [basis_r]
            lo = 0.5
            hi = 1.6
            n_basis = 23
            degree = 1
        """)
        out = tmp_path / "md"
        assert cli.main(["simulate", "--config", cfg, "--out", str(out),
                         "--seed", "1"]) == 0
        meta = json.loads((out / "ensemble.json").read_text())
        assert meta["kind"] == "md"
        assert meta["group_size"] == 2
        assert meta["boundary"] == "periodic"
        assert meta["box"] == [1.6, 1.6, 1.6]
        assert meta["zeta0"] == 0.5


class TestFrictionAndObs:
    def simulate(self, tmp_path, seed="11"):
        cfg = write(tmp_path / "sim.toml", GLE_SMALL)
        out = tmp_path / "data"
        assert cli.main(["simulate", "--config", cfg, "--out", str(out),
                         "--seed", seed]) == 0
        return out

    def test_qv_report(self, tmp_path):
        data = self.simulate(tmp_path)
        cfg = write(tmp_path / "qv.toml", "[friction]\nmode = 'qv'\n")
        out = tmp_path / "qv"
        assert cli.main(["friction", "--config", cfg, "--out", str(out),
                         "--data", str(data)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["mode"] == "qv"
        assert rep["sigma0"] > 0.0
        assert rep["spacing"] == pytest.approx(0.006)
        assert rep["zeta0"] == pytest.approx(10.0 * rep["sigma0"] ** 2 / 2.0)

    def test_equilibrium_friction_writes_correlations(self, tmp_path):
        data = self.simulate(tmp_path)
        cfg = write(tmp_path / "gk.toml", """
            [friction]
            mode = "equilibrium"
            model = "harmonic"
            k = 0.1
            max_lag = 10
        """)
        out = tmp_path / "gk"
        assert cli.main(["friction", "--config", cfg, "--out", str(out),
                         "--data", str(data)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert "zeta0" in rep and rep["origin"] == "sliding"
        head = (out / "cvv.csv").read_text().splitlines()[0]
        assert head == "lag,value,n_samples"
        assert (out / "cfv.csv").is_file()

    def test_moments_csv(self, tmp_path):
        data = self.simulate(tmp_path)
        cfg = write(tmp_path / "m.toml", "[observables]\nwhich = 'moments'\n")
        out = tmp_path / "m"
        assert cli.main(["obs", "--config", cfg, "--out", str(out),
                         "--data", str(data)]) == 0
        head = (out / "moments.csv").read_text().splitlines()[0]
        assert head == "t,mean_q,var_q,mean_p,var_p"


class TestFitAndModel:
    def fit_separable(self, tmp_path):
        sim = write(tmp_path / "sim.toml", GLE_SMALL.replace("n_paths = 2",
                                                             "n_paths = 6"))
        data = tmp_path / "data"
        assert cli.main(["simulate", "--config", sim, "--out", str(data),
                         "--seed", "21"]) == 0
        fit_cfg = write(tmp_path / "fit.toml", """
            [fit]
            mode = "separable"

            [basis_t]
            lo = 0.0
            hi = 0.12
            n_basis = 4
            degree = 3

            [basis_r]
            lo = -3.0
            hi = 3.0
            n_basis = 5
            degree = 3
        """)
        out = tmp_path / "fit"
        assert cli.main(["fit", "--config", fit_cfg, "--out", str(out),
                         "--data", str(data)]) == 0
        return data, out

    def test_separable_fit_artifacts(self, tmp_path):
        _, out = self.fit_separable(tmp_path)
        doc = json.loads((out / "fit.json").read_text())
        assert doc["mode"] == "separable"
        assert len(doc["theta_time"]) == 4
        assert len(doc["theta_space"]) == 5
        assert np.linalg.norm(doc["theta_space"]) == pytest.approx(1.0)
        lines = (out / "coeffs.csv").read_text().splitlines()
        assert lines[0] == "block,index,value"
        assert sum(1 for ln in lines if ln.startswith("time,")) == 4
        assert (out / "field.csv").read_text().startswith("t,q,f")

    def test_model_from_fitted_force(self, tmp_path):
        _, fit_out = self.fit_separable(tmp_path)
        model_cfg = write(tmp_path / "model.toml", f"""
            [langevin]
            beta = 10.0
            dt = 0.002
            n_steps = 60
            record_stride = 3
            n_paths = 2
            q0 = 0.0
            p0 = 0.1
            force = "file"
            force_file = "{fit_out / 'fit.json'}"
            sigma0 = 0.05
        """)
        out = tmp_path / "model"
        assert cli.main(["simulate", "--config", model_cfg, "--out", str(out),
                         "--seed", "31"]) == 0
        meta = json.loads((out / "ensemble.json").read_text())
        assert meta["kind"] == "langevin"
        assert meta["zeta0"] == pytest.approx(10.0 * 0.05 ** 2 / 2.0)

    def test_pair_fit_rejected_as_scalar_model(self, tmp_path, capsys):
        doc = {"mode": "equilibrium", "cutoff": 1.5,
               "basis_r": {"lo": 0.5, "hi": 1.6, "n_basis": 23, "degree": 1},
               "coeffs": [0.0] * 23}
        (tmp_path / "fit.json").write_text(json.dumps(doc))
        cfg = write(tmp_path / "m.toml", f"""
            [langevin]
            beta = 1.0
            dt = 0.01
            n_steps = 5
            force = "file"
            force_file = "{tmp_path / 'fit.json'}"
            zeta0 = 1.0
        """)
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "separable" in capsys.readouterr().err

    def test_noise_pair_conflicts(self, tmp_path, capsys):
        rep = tmp_path / "rep"
        rep.mkdir()
        (rep / "report.json").write_text(json.dumps({"sigma0": 0.05}))
        cfg = write(tmp_path / "c.toml", f"""
            [langevin]
            beta = 1.0
            dt = 0.01
            n_steps = 5
            force = "zero"
            sigma0 = 0.1
            sigma0_file = "{rep / 'report.json'}"
        """)
        assert cli.main(["simulate", "--config", cfg, "--out",
                         str(tmp_path / "o")]) == 2
        assert "not both" in capsys.readouterr().err

    def test_sigma0_file_indirection(self, tmp_path):
        rep = tmp_path / "rep"
        rep.mkdir()
        (rep / "report.json").write_text(json.dumps({"sigma0": 0.05}))
        cfg = write(tmp_path / "c.toml", f"""
            [langevin]
            beta = 10.0
            dt = 0.01
            n_steps = 5
            force = "zero"
            sigma0_file = "{rep / 'report.json'}"
        """)
        out = tmp_path / "o"
        assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        meta = json.loads((out / "ensemble.json").read_text())
        assert meta["sigma0"] == 0.05
        assert meta["zeta0"] == pytest.approx(10.0 * 0.05 ** 2 / 2.0)


def bench_config_dir(root, qv_expected, qv_tol):
    """A miniature bench pipeline; tolerances come in from the caller."""
    root.mkdir(parents=True, exist_ok=True)
    gle = """
        [gle]
        alpha = 0.1
        eta = 0.1
        tau = 0.5
        beta = 10.0
        q0 = 0.0
        p0 = 0.1
        dt = 0.002
        n_steps = 100
        record_stride = 2
        record_forces = true
    """
    write(root / "data.toml", gle + "n_paths = 6\n\n[io]\nseed = 100\n")
    write(root / "qvpath.toml", gle.replace("record_stride = 2",
                                            "record_stride = 10")
          + "n_paths = 1\ninit = 'gibbs'\n\n[io]\nseed = 101\n")
    write(root / "qv.toml", f"""
        [friction]
        mode = "qv"
        expected = {qv_expected}
        tol_abs = {qv_tol}

        [io]
        data = "{{run}}/qvpath"
    """)
    write(root / "gk_data.toml", gle + "n_paths = 4\ninit = 'gibbs'\n\n"
          "[io]\nseed = 102\n")
    write(root / "gk.toml", """
        [friction]
        mode = "equilibrium"
        model = "harmonic"
        k = 0.1
        max_lag = 12
        expected = 0.005
        tol_rel = 1e6

        [io]
        data = "{run}/gk_data"
    """)
    write(root / "fit.toml", """
        [fit]
        mode = "separable"
        mean_l2_tol = 1e6

        [basis_t]
        lo = 0.0
        hi = 0.2
        n_basis = 4
        degree = 3

        [basis_r]
        lo = -3.0
        hi = 3.0
        n_basis = 5
        degree = 3

        [io]
        data = "{run}/data"
    """)
    write(root / "model.toml", """
        [langevin]
        beta = 10.0
        dt = 0.002
        n_steps = 100
        record_stride = 2
        n_paths = 6
        q0 = 0.0
        p0 = 0.1
        force = "file"
        force_file = "{run}/fit/fit.json"
        sigma0_file = "{run}/qv/report.json"

        [io]
        seed = 103
    """)
    write(root / "moments_ref.toml", """
        [observables]
        which = "moments"

        [io]
        data = "{run}/data"
    """)
    write(root / "moments_model.toml", """
        [observables]
        which = "moments"

        [io]
        data = "{run}/model"
    """)
    return root


class TestReproduce:
    def test_missing_stage_config(self, tmp_path, capsys):
        empty = tmp_path / "cfg"
        empty.mkdir()
        assert cli.main(["reproduce", "bench-tau05", "--config", str(empty),
                         "--out", str(tmp_path / "run")]) == 2
        assert "missing stage config" in capsys.readouterr().err

    def test_passing_pipeline(self, tmp_path, capsys):
        cfg = bench_config_dir(tmp_path / "cfg", qv_expected=0.05, qv_tol=10.0)
        run = tmp_path / "run"
        assert cli.main(["reproduce", "bench-tau05", "--config", str(cfg),
                         "--out", str(run)]) == 0
        text = (run / "summary.csv").read_text()
        lines = text.splitlines()
        assert lines[0] == "check,value,target,pass"
        assert len(lines) == 5
        assert all(ln.endswith(",True") for ln in lines[1:])
        assert json.loads((run / "manifest.json").read_text())["passed"] is True
        printed = capsys.readouterr().out
        for name in ("A1 qv-sigma0", "A2 mean-q-rel-l2", "A2 mean-p-rel-l2",
                     "A3 gk-kernel-integral"):
            assert f"{name}:" in printed
        assert (run / "summary.txt").read_text().count("PASS") == 4

    def test_failing_check_gives_exit_3(self, tmp_path):
        cfg = bench_config_dir(tmp_path / "cfg", qv_expected=99.0,
                               qv_tol=1e-6)
        run = tmp_path / "run"
        assert cli.main(["reproduce", "bench-tau05", "--config", str(cfg),
                         "--out", str(run)]) == 3
        text = (run / "summary.csv").read_text()
        assert "A1 qv-sigma0" in text and ",False" in text
        assert json.loads((run / "manifest.json").read_text())["passed"] is False
