import numpy as np
import pytest

from sptsae.predict import McConfig
from sptsae.simstudy import (SimScenario, generate_scenario_data, run_sim1,
                             run_sim2)
from sptsae.spatial import build_seven_diagonal


@pytest.fixture(scope="module")
def tiny_sim1():
    s = SimScenario(d=20, t=2, rho=0.3, nu=50, k=8, seed=3)
    return s, run_sim1(s, build_seven_diagonal(20))


def test_scenario_validation():
    with pytest.raises(ValueError):
        SimScenario(d=0)
    with pytest.raises(ValueError):
        SimScenario(rho=1.0)
    th = SimScenario().true_theta()
    assert np.array_equal(th.as_array(), [-3.0, 0.8, 0.5, 0.5, 0.3])


def test_generate_scenario_data_shapes():
    s = SimScenario(d=10, t=3, k=1)
    w = build_seven_diagonal(10)
    data, v1, v2, p = generate_scenario_data(s, w, np.random.default_rng(0))
    assert data.y.shape == (10, 3)
    assert v1.shape == (10,) and v2.shape == (10, 3) and p.shape == (10, 3)
    assert (data.nu == s.nu).all()
    assert np.allclose(data.x[:, :, 0], 1.0)


def test_sim1_table_structure(tiny_sim1):
    s, table = tiny_sim1
    assert table.study == "sim1"
    groups = {r["group"] for r in table.rows}
    assert groups == {"opt1", "opt2"}
    names = [r["quantity"] for r in table.rows if r["group"] == "opt2"]
    assert names == ["beta0", "beta1", "phi1", "phi2", "rho"]
    for row in table.rows:
        assert row["rmse"] >= abs(row["bias"]) - 1e-12
        assert np.isfinite(row["rmse"])
    assert table.failures["opt1"] + table.failures["opt2"] <= 2 * s.k


def test_sim1_reproducible(tiny_sim1):
    s, table = tiny_sim1
    again = run_sim1(s, build_seven_diagonal(s.d))
    for a, b in zip(table.rows, again.rows):
        assert a["bias"] == b["bias"] and a["rmse"] == b["rmse"]


def test_sim1_parallel_matches_serial():
    s = SimScenario(d=20, t=2, rho=0.3, nu=50, k=4, seed=9)
    w = build_seven_diagonal(s.d)
    a = run_sim1(s, w, n_jobs=1)
    b = run_sim1(s, w, n_jobs=2)
    for ra, rb in zip(a.rows, b.rows):
        assert ra["bias"] == rb["bias"] and ra["rmse"] == rb["rmse"]


def test_sim2_small_run():
    s = SimScenario(d=20, t=2, rho=0.3, nu=50, k=3, seed=5)
    table = run_sim2(s, build_seven_diagonal(s.d), mc=McConfig(s1=60, s2=60))
    groups = [r["group"] for r in table.rows]
    assert groups == ["bp_plug_in", "bp", "plug_in", "ebp"]
    for row in table.rows:
        assert row["rmse"] > 0.0
        assert row["rmse"] >= row["bias"] - 1e-12  # bias column is |bias|-averaged


def test_table_csv(tmp_path, tiny_sim1):
    _, table = tiny_sim1
    path = tmp_path / "table.csv"
    table.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "group,quantity,bias,rmse"
    assert len(lines) == 1 + len(table.rows)
    assert table.cell("opt2", "rho")["rmse"] == pytest.approx(
        float(lines[-1].split(",")[-1]))
