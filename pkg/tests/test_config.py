import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesem.config import (BUILTIN_CONFIGS, ConfigError, ProblemConfig, builtin_config, dump_config, load_config,
                              make_field, parse_config)
from sparsesem.geometry import CallableField


@pytest.mark.parametrize("name", sorted(BUILTIN_CONFIGS))
def test_builtin_round_trip(name):
    cfg = builtin_config(name)
    text = dump_config(cfg)
    again = parse_config(text)
    assert again.to_dict() == cfg.to_dict()
    assert dump_config(again) == text


fields = st.one_of(
    st.floats(-1e6, 1e6, allow_nan=False),
    st.sampled_from(["sin_xy", "bench_rhs", "bench_boundary"]),
    st.builds(lambda g: {"builtin": "gravity", "args": [g]}, st.floats(1, 1e5)),
    st.lists(st.lists(st.floats(-10, 10), min_size=1, max_size=3), min_size=1, max_size=3).map(lambda t: {"poly": t}),
)


@settings(max_examples=60, deadline=None)
@given(
    nx=st.integers(1, 9), ny=st.integers(1, 9), p=st.integers(1, 30), uxx=fields, b=fields, rhs=fields,
    storage=st.sampled_from(["full", "lean"]), grid=st.tuples(st.integers(2, 300), st.integers(2, 300)),
    elements=st.dictionaries(st.integers(0, 8), st.integers(1, 20), max_size=3),
)
def test_config_round_trip(nx, ny, p, uxx, b, rhs, storage, grid, elements):
    cfg = ProblemConfig(mesh={"type": "rectangle", "bounds": [0, 2, -1, 1], "nx": nx, "ny": ny},
                        p={"default": p, "elements": elements} if elements else p,
                        pdo={"uxx": uxx, "uyy": 1.0, "b": b}, rhs=rhs,
                        solver={"storage": storage, "threads": 1, "strict": False, "residual_tol": 1e-8,
                                "max_rank": 30},
                        sample={"grid": list(grid)})
    text = dump_config(cfg)
    again = parse_config(text)
    assert again.to_dict() == cfg.to_dict()
    assert dump_config(again) == text


@pytest.mark.parametrize("text", [
    "mesh: {type: blob}",
    "p: 4",
    "mesh: {type: rectangle, nx: 0}",
    "mesh: {type: rectangle}\np: 0",
    "mesh: {type: rectangle}\npdo: {uzz: 1}",
    "mesh: {type: rectangle}\npdo: {b: nonsense_builtin}",
    "mesh: {type: rectangle}\nboundary: exact",
    "mesh: {type: rectangle}\nexact: {name: nope}",
    "mesh: {type: rectangle}\nsolver: {storage: tiny}",
    "mesh: {type: rectangle}\nsample: {grid: [1, 4]}",
    "mesh: {type: lshape}\nsweep: {kind: h, values: [2]}",
    "mesh: {type: rectangle}\nsurprise: 1",
    "mesh: {type: quad, vertices: [[0, 0], [1, 0]]}",
    "mesh: [unbalanced",
    "- just a list",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file_and_unknown_builtin(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "none.yaml"))
    with pytest.raises(ConfigError):
        load_config("builtin:nothing")


def test_load_from_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(BUILTIN_CONFIGS["helmholtz"])
    assert load_config(str(path)).to_dict() == builtin_config("helmholtz").to_dict()


def test_poly_field():
    f = make_field({"poly": [[1, 2], [3]]})  # 1 + 2 y + 3 x
    assert isinstance(f, CallableField)
    assert f(np.array(0.5), np.array(-1.0)) == pytest.approx(1 - 2 + 1.5)


def test_orders():
    cfg = parse_config("mesh: {type: rectangle, nx: 2, ny: 2}\np: {default: 4, elements: {1: 7}}")
    mesh = cfg.build_mesh()
    assert list(mesh.orders) == [4, 7, 4, 4]
    assert list(cfg.build_mesh(3).orders) == [3, 3, 3, 3]
    with pytest.raises(ConfigError):
        parse_config("mesh: {type: rectangle, nx: 2}\np: [1, 2, 3]").build_mesh()


def test_builders():
    cfg = builtin_config("convection_diffusion")
    (b1, b2), div = cfg.velocity()
    assert b1(np.array(0.0), np.array(0.0)) == pytest.approx(0.0)
    assert cfg.build_mesh().n_elem == 80
    assert cfg.timestep_options()["snapshots"] == [1.0, 2.5, 5.0]
    ex = builtin_config("helmholtz").exact_solution()
    assert ex.u(0.0, 0.0) == 1.0
    pdo = builtin_config("pentagon").build_pdo()
    assert pdo.b(np.array(0.0), np.array(0.5)) == pytest.approx(25000.0)
