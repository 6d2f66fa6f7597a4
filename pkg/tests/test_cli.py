import csv
import warnings

import pytest
import yaml

from sparsesem.cli import main
from sparsesem.hps import InterfaceResidualWarning
from sparsesem.mesh import make_polygon, read_mesh, write_mesh


def run(tmp_path, *argv, config=None):
    args = list(argv) + ["--out", str(tmp_path), "--quiet"]
    if config is not None:
        path = tmp_path / "problem.yaml"
        path.write_text(config)
        args += ["--config", str(path)]
    return main(args)


def report(tmp_path, command):
    return yaml.safe_load((tmp_path / f"{command}_report.yaml").read_text())


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


# -- exit codes -----------------------------------------------------------------------


@pytest.mark.parametrize("text", ["mesh: {type: blob}", "mesh: {type: rectangle}\nsolver: {storage: tiny}"])
def test_config_error_exit_code(tmp_path, text, capsys):
    assert run(tmp_path, "solve", config=text) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_grid_is_a_config_error(tmp_path):
    assert run(tmp_path, "solve", "--grid", "1x4", config="mesh: {type: rectangle}\np: 4\nboundary: 1") == 2


def test_missing_mesh_file(tmp_path):
    assert run(tmp_path, "solve", "--mesh", str(tmp_path / "none.mesh")) == 2


def test_resonant_leaf_exit_code(tmp_path, capsys):
    # b = pi^2 / 2 is the lowest Dirichlet eigenvalue of the square [-1, 1]^2
    text = "mesh: {type: rectangle, bounds: [-1, 1, -1, 1]}\np: 24\npdo: {uxx: 1, uyy: 1, b: 4.934802200544679}\n" \
           "rhs: 1\nboundary: 0\n"
    assert run(tmp_path, "solve", config=text) == 3
    err = capsys.readouterr().err
    assert "solver error" in err and "element 0" in err


# -- solve -------------------------------------------------------------------------------


def test_dof_count(tmp_path):
    text = "mesh: {type: rectangle, nx: 2, ny: 2}\np: {default: 4, elements: {1: 7, 3: 2}}\nboundary: 0\n"
    assert run(tmp_path, "solve", config=text) == 0
    rep = report(tmp_path, "solve")
    assert rep["n_dof"] == 25 + 64 + 25 + 9
    assert rep["n_elem"] == 4
    assert set(rep["times"]) >= {"local", "global", "solve"}


def test_linear_exact_on_pentagon(tmp_path):
    text = "mesh: {type: polygon, n: 5, side: 1.0}\np: 6\nboundary: exact\nexact: {name: linear}\n" \
           "sample: {grid: [31, 31]}\n"
    assert run(tmp_path, "solve", config=text) == 0
    assert report(tmp_path, "solve")["errors"]["max_abs_sampled"] <= 1e-12


def test_coefficient_dump_is_deterministic(tmp_path):
    dumps = []
    for k in range(2):
        out = tmp_path / str(k)
        assert run(out, "solve", "--config", "builtin:helmholtz", "--p", "6", "--threads", "1") == 0
        dumps.append((out / "coefficients.txt").read_bytes())
    assert dumps[0] == dumps[1]
    lines = dumps[0].decode().splitlines()
    assert lines[1] == "element 0 order 6"
    # full precision: 17 significant digits per entry
    assert all(len(v.split("e")[0].replace("-", "").replace(".", "")) == 17 for v in lines[2].split())


def test_solution_csv_format(tmp_path):
    text = "mesh: {type: rectangle}\np: 3\nboundary: {poly: [[0, 1], [1]]}\n"
    assert run(tmp_path, "solve", "--grid", "3x4", config=text) == 0
    raw = (tmp_path / "solution.csv").read_bytes()
    assert raw.startswith(b"x,y,u\r\n") and raw.count(b"\r\n") == 13
    header, rows = read_table(tmp_path / "solution.csv")
    assert header == ["x", "y", "u"] and len(rows) == 12
    for x, y, u in rows:
        assert u == pytest.approx(x + y, abs=1e-13)


@pytest.mark.slow
def test_pentagon_gravity_symmetric(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("error", InterfaceResidualWarning)
        assert run(tmp_path, "solve", "--config", "builtin:pentagon", "--grid", "41x41") == 0
    _, rows = read_table(tmp_path / "solution.csv")
    vals = {(round(x, 12), round(y, 12)): u for x, y, u in rows}
    scale = max(abs(u) for u in vals.values())
    gaps = [abs(u - vals[(round(-x, 12) + 0.0, y)]) for (x, y), u in vals.items() if (round(-x, 12) + 0.0, y) in vals]
    assert len(gaps) > 0.9 * len(vals)
    assert max(gaps) <= 1e-6 * scale


# -- sweeps -----------------------------------------------------------------------------


def test_p_sweep_reproduces_polynomial(tmp_path):
    text = "mesh: {type: rectangle, bounds: [-1, 1, -1, 1], nx: 2, ny: 2}\np: 2\nrhs: exact\nboundary: exact\n" \
           "exact: {name: polynomial, args: [6]}\nsweep: {kind: p, values: [2, 3, 4, 5, 6, 7, 8]}\n"
    assert run(tmp_path, "converge", config=text) == 0
    header, rows = read_table(tmp_path / "convergence.csv")
    assert header[:3] == ["p", "N", "l2_relative_error"]
    errs = {int(r[0]): r[2] for r in rows}
    assert all(errs[p] <= 1e-12 for p in (6, 7, 8))
    assert all(errs[p] > 1e-6 for p in (2, 3, 4))


def test_h_sweep_reports_slope(tmp_path):
    text = "mesh: {type: rectangle, bounds: [-1, 1, -1, 1]}\np: 4\nrhs: exact\nboundary: exact\n" \
           "exact: {name: polynomial, args: [6]}\nsweep: {kind: h, values: [2, 4, 8]}\n"
    assert run(tmp_path, "converge", config=text) == 0
    assert 3.0 < report(tmp_path, "converge")["extra"]["slope"] < 5.5


def test_converge_needs_exact(tmp_path):
    assert run(tmp_path, "converge", config="mesh: {type: rectangle}\nboundary: 0\n") == 2


def test_lshape_first_tolerance(tmp_path):
    assert run(tmp_path, "lshape", "--tol", "1e-2") == 0
    _, met = read_table(tmp_path / "lshape.csv")
    assert len(met) == 1 and met[0][2] <= 1e-2 and met[0][1] < 1000
    _, hist = read_table(tmp_path / "lshape_history.csv")
    errs = [r[2] for r in hist]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_lshape_unreachable_tolerance(tmp_path):
    text = "mesh: {type: lshape}\nboundary: exact\nexact: {name: lshape_corner}\n" \
           "lshape: {tolerances: [1.0e-6], p0: 3, p_max: 4, max_levels: 2}\n"
    assert run(tmp_path, "lshape", config=text) == 3


def test_bench_table(tmp_path):
    text = "mesh: {type: rectangle, bounds: [-1, 1, -1, 1]}\np: 4\npdo: {uxx: 1, uyy: 1, b: {builtin: sin_xy}}\n" \
           "rhs: {builtin: bench_rhs}\nboundary: {builtin: bench_boundary}\nsweep: {kind: h, values: [1, 2, 4]}\n"
    assert run(tmp_path, "bench", config=text) == 0
    header, rows = read_table(tmp_path / "bench.csv")
    assert header == ["n", "N", "t_local", "t_global", "t_solve"]
    assert [r[1] for r in rows] == [25, 100, 400]
    # the single-cell run reports every stage with a nonzero solve time
    assert rows[0][4] > 0 and all(v >= 0 for v in rows[0][2:])


# -- time stepping ------------------------------------------------------------------------


TIMESTEP = """mesh: {type: rectangle, bounds: [-1, 1, -1, 1], nx: 2, ny: 1}
p: 8
timestep:
  kappa: KAPPA
  velocity: [0, 0]
  dt: 0.1
  t_final: 0.3
  u0: {poly: [[1, 0, -1], [0], [-1, 0, 1]]}
  snapshots: [0.1, 0.3]
"""


def test_timestep_identity(tmp_path):
    assert run(tmp_path, "timestep", "--grid", "9x9", config=TIMESTEP.replace("KAPPA", "0")) == 0
    for name in ("snapshot_t0.1.csv", "snapshot_t0.3.csv", "final.csv"):
        _, rows = read_table(tmp_path / name)
        for x, y, u in rows:
            assert u == pytest.approx((1 - x * x) * (1 - y * y), abs=1e-13)


def test_timestep_compare_and_mass(tmp_path):
    assert run(tmp_path, "timestep", "--compare", config=TIMESTEP.replace("KAPPA", "0.5")) == 0
    rep = report(tmp_path, "timestep")
    assert set(rep["times"]) == {"update", "rebuild"} and rep["extra"]["steps"] == 3
    assert 0 < rep["extra"]["mass_final"] < 16 / 9
    header = (tmp_path / "timing.csv").read_text().splitlines()[0]
    assert header == "mode,seconds"


def test_timestep_no_update(tmp_path):
    assert run(tmp_path, "timestep", "--no-update", config=TIMESTEP.replace("KAPPA", "0.5")) == 0
    assert set(report(tmp_path, "timestep")["times"]) == {"rebuild"}


# -- mesh and config -----------------------------------------------------------------------


def test_mesh_command_round_trip(tmp_path):
    src = tmp_path / "in.mesh"
    write_mesh(make_polygon(5, 1.0, 3), src)
    assert run(tmp_path, "mesh", "--mesh", str(src), "--refine", "1", "--write", "out.mesh") == 0
    rep = report(tmp_path, "mesh")
    assert rep["n_elem"] == 20 and rep["extra"]["quads"] == 20
    assert rep["n_dof"] == 20 * 16
    assert read_mesh(tmp_path / "out.mesh").n_elem == 20


def test_config_command_prints_normalized(tmp_path, capsys):
    assert main(["config", "--config", "builtin:lshape"]) == 0
    out = capsys.readouterr().out
    assert yaml.safe_load(out)["exact"]["name"] == "lshape_corner"
