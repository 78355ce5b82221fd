import numpy as np
import pytest

from msdtn import experiments as ex
from msdtn import fem
from msdtn.cli import main as cli_main
from msdtn.mesh import build_fine_mesh, build_partition


def test_case_presets_match_defaults():
    pme = ex.case_config("pme1d")
    assert pme.flux == fem.PorousMedia(4.0)
    assert pme.a == 20.0
    assert pme.n_sub == 5 and pme.fine_cells == 40
    assert pme.widths == (64, 64)
    assert pme.u_max == 4.0
    assert (pme.loss.c0, pme.loss.c1, pme.loss.c_mon) == (1.0, 0.1, 4.0)
    assert pme.loss.mon_variant == "full_sign" and pme.loss.mon_grid == 40

    plap = ex.case_config("plap1d")
    assert plap.flux == fem.PLaplace(2.0)
    assert plap.a == 5.0

    pme2 = ex.case_config("pme2d")
    assert pme2.n_sub == 5 and pme2.widths == (20, 20)
    assert pme2.u_max == 1.2
    assert pme2.loss.c_mon == 10.0
    assert pme2.loss.mon_variant == "diagonal" and pme2.loss.mon_mc_points == 200
    assert pme2.a == 1.0


def test_case_config_rejects_unknown_case():
    with pytest.raises(ex.ConfigError):
        ex.case_config("heat3d")


def test_case_config_rejects_bad_ns():
    with pytest.raises(ex.ConfigError):
        ex.case_config("pme1d", ns=10)
    with pytest.raises(ex.ConfigError):
        ex.case_config("pme2d", ns=100)


def test_config_file_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("ns = 16\nepochs=50\nc_mon = 0.5\n# comment\nseed=3\n")
    cfg = ex.apply_config_file(ex.case_config("pme1d"), str(path))
    assert cfg.ns == 16
    assert cfg.loss.epochs == 50
    assert cfg.loss.c_mon == 0.5
    assert cfg.seed == 3 and cfg.loss.seed == 3


def test_config_file_rejects_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("wobble = 3\n")
    with pytest.raises(ex.ConfigError):
        ex.apply_config_file(ex.case_config("pme1d"), str(path))


def test_error_l2_trivial_cases():
    part = build_partition(1, 2)
    mesh = build_fine_mesh(part, 10)
    ones = np.ones(mesh.n_vertices)
    assert ex.error_l2(ones, ones, mesh) == 0.0
    assert ex.error_l2(1.01 * ones, ones, mesh) == pytest.approx(0.01, rel=1e-12)
    with pytest.raises(ValueError):
        ex.error_l2(ones, np.zeros_like(ones), mesh)


def test_error_l2_against_trapezoid_oracle():
    part = build_partition(1, 5)
    mesh = build_fine_mesh(part, 40)
    x = mesh.vertices[:, 0]
    a = np.sin(2 * np.pi * x) + 2.0
    b = np.cos(3 * x) + 2.0
    lumped = ex.error_l2(a, b, mesh)
    num = np.trapezoid((a - b) ** 2, x)
    den = np.trapezoid(b**2, x)
    trap = np.sqrt(num / den)
    assert abs(lumped - trap) / trap <= 1e-3


def _tiny_1d_config(tmp_path, **kw):
    # miniature resolution keeps the pipeline test fast while touching
    # every stage
    return ex.case_config(
        "pme1d", ns=4, seed=1,
        fine_cells=8, widths=(8, 8), u0_values=(4.0,),
        epochs=60, mon_grid=8,
        out_dir=str(tmp_path), **kw,
    )


def test_run_case_pipeline_tiny(tmp_path):
    cfg = _tiny_1d_config(tmp_path / "run")
    report = ex.run_case(cfg)
    report.validate()
    assert report.interpolation_error > 0
    assert "u0=4" in report.solution_errors
    assert report.newton_iterations["exact[u0=4]"] >= 1
    out = tmp_path / "run"
    for name in ("dataset.csv", "models.json", "errors.csv", "metadata.json",
                 "solution_u0_4.csv", "trace_exact.csv", "trace_surrogate.csv",
                 "trace_warm.csv"):
        assert (out / name).exists(), name
    # trace CSVs must not contain wall-clock columns
    header = (out / "trace_exact.csv").read_text().splitlines()[0]
    assert "seconds" not in header


def test_run_case_stage_error_labeled(tmp_path):
    cfg = _tiny_1d_config(tmp_path)
    cfg.loss.learning_rate = 1e60
    with pytest.raises(ex.StageError) as err:
        ex.run_case(cfg)
    assert err.value.stage == "train"


def test_cli_exit_codes(tmp_path):
    assert cli_main(["generate-data", "pme1d", "--ns", "10",
                     "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        cli_main(["reproduce", "unknown-case"])
    assert cli_main(["solve", "pme1d", "--backend", "surrogate",
                     "--out", str(tmp_path)]) == 2


def test_cli_generate_train_solve_evaluate(tmp_path, capsys):
    out = str(tmp_path)
    base = ["--ns", "4", "--out", out, "--seed", "1", "--config",
            str(tmp_path / "tiny.cfg")]
    (tmp_path / "tiny.cfg").write_text("fine_cells = 8\nepochs = 40\nmon_grid = 8\n")
    assert cli_main(["generate-data", "pme1d"] + base) == 0
    assert (tmp_path / "dataset.csv").exists()
    assert cli_main(["train", "pme1d", "--data", str(tmp_path / "dataset.csv")] + base) == 0
    assert (tmp_path / "models.json").exists()
    assert cli_main(["solve", "pme1d", "--backend", "exact", "--dump-mesh"] + base) == 0
    assert (tmp_path / "mesh" / "vertices.csv").exists()
    assert cli_main(["solve", "pme1d", "--backend", "warmstart",
                     "--model", str(tmp_path / "models.json")] + base) == 0
    assert cli_main(["evaluate", "pme1d", "--model", str(tmp_path / "models.json")] + base) == 0
    assert (tmp_path / "evaluate.json").exists()
    capsys.readouterr()
