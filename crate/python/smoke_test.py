"""Smoke test for the pyrve extension.

Build first:  cd crates/python && maturin develop --release
Run:          python python/smoke_test.py
"""

import math
import pathlib

import pyrve

ROOT = pathlib.Path(__file__).resolve().parent.parent
SYNTH = ROOT / "crates" / "core" / "tests" / "data" / "synth.csv"

SIM_CONFIG = """
model = corr
m = 20
k = 3
beta = 0.2, 0.4
tau_sq = 0.05
rho = 0.8
replications = 50
seed = 11
"""


def main():
    ds = pyrve.Dataset.from_csv(str(SYNTH))
    assert len(ds) == 15 and ds.study_count == 6, repr(ds)

    res = pyrve.fit(ds, "es ~ x + g", model="corr", rho=0.8)
    names = [c.name for c in res.coefficients]
    assert names == ["intercept", "x", "g"], names
    assert res.m == 6 and res.n == 15
    assert res.tau_sq is not None and res.tau_sq >= 0
    for c in res.coefficients:
        assert c.std_err > 0 and c.df > 0
        assert c.ci_lower < c.estimate < c.ci_upper
        assert math.isclose(c.std_err ** 2, res.covariance[names.index(c.name)][names.index(c.name)], rel_tol=1e-12)
    assert str(res).startswith("RVE: Correlated Effects Model with Small-Sample Corrections")

    hier = pyrve.fit(ds, "es ~ x", model="hier", small=False)
    assert hier.omega_sq is not None

    user = pyrve.Dataset.from_csv(str(SYNTH), userweights="uw")
    assert len(pyrve.fit(user, "es ~ x", model="user").coefficients) == 2

    cols = pyrve.Dataset.from_columns(
        [("study", ["a", "a", "b", "c"]), ("es", [0.1, 0.3, 0.2, 0.5]), ("v", [0.04, 0.05, 0.03, 0.06])],
        study="study",
        effect="es",
        var="v",
    )
    assert cols.study_count == 3

    table = pyrve.sensitivity(ds, "es ~ x")
    assert table.rhos == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert len(table.tau_sq) == 6
    assert "rho=0.8" in str(table)

    svg = pyrve.forest_svg(ds, "es ~ 1", extra=["Effect Size", "Weight"])
    assert svg.startswith("<?xml") and svg.count('class="box"') == 15

    try:
        pyrve.fit(ds, "es ~ nope")
    except pyrve.RveError as e:
        assert "nope" in str(e)
    else:
        raise AssertionError("expected RveError")

    rows = pyrve.simulate(SIM_CONFIG)
    assert {r["variant"] for r in rows} == {"large", "small"}
    assert all(0.0 <= r["coverage"] <= 1.0 for r in rows)
    assert rows == pyrve.simulate(SIM_CONFIG)
    assert len(pyrve.simulate_dataset(SIM_CONFIG, 0)) == 60

    print("pyrve smoke test passed")


if __name__ == "__main__":
    main()
