import csv
import io
import math
import os
import random
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxer.planner import (NO_SAVING, DEFAULT_PARAMS, CostParams, EmptyTraceError, TraceError, TraceSeries,
                           capacity_percentile, deployment_cost, load_trace, savings_table, sweep,
                           synthetic_trace)
from boxer.planner import cli, model
from boxer.planner._fallback import cost_curve as numpy_curve


def brute_cost(loads, beta, p):
    """The cost formula evaluated term by term in plain Python."""
    total = 0.0
    for d in loads:
        vm = beta / p.alpha
        fn = max(0.0, p.lambda_multiplier * (d - beta) / p.gamma)
        if p.ceil_cores:
            vm, fn = math.ceil(vm), math.ceil(fn)
        total += vm * p.price_vm + fn * p.price_fn
    return total


def random_instance(rng):
    n = rng.randint(1, 60)
    base = rng.uniform(0, 500)
    loads = [max(0.0, round(base + rng.gauss(0, base / 3 + 1))) for _ in range(n)]
    for _ in range(rng.randint(0, 3)):
        loads[rng.randrange(n)] *= rng.uniform(2, 20)
    p = CostParams(rng.uniform(0.1, 10), rng.uniform(0.1, 10), rng.uniform(0, 5), rng.uniform(0, 5),
                   rng.choice([1, 2, 4, 8]), rng.random() < 0.2)
    beta = rng.uniform(0, max(loads) * 1.2)
    return loads, beta, p


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(b))


def test_oracle_equivalence_1000_instances():
    rng = random.Random(2024)
    for _ in range(1000):
        loads, beta, p = random_instance(rng)
        assert rel_err(deployment_cost(loads, beta, p), brute_cost(loads, beta, p)) <= 1e-9
        res = sweep(loads, p, grid_steps=rng.randint(2, 40))
        costs = [brute_cost(loads, b, p) for b in res.betas.tolist()]
        best = min(costs)
        # first index within rounding of the true minimum: ties go to the smaller beta
        expect = next(i for i, c in enumerate(costs) if rel_err(c, best) <= 1e-12)
        assert res.best_beta == res.betas[expect]
        assert rel_err(res.best_cost, best) <= 1e-9


@pytest.mark.parametrize("loads,beta,params,want", [
    ([10, 10], 10, CostParams(1, 1, 1, 2), 20.0),
    ([10], 0, CostParams(1, 1, 1, 2), 20.0),
    ([4, 12], 6, CostParams(2, 3, 1, 5, 2), 26.0),
])
def test_worked_examples(loads, beta, params, want):
    assert deployment_cost(loads, beta, params) == pytest.approx(want, rel=1e-12)


def test_boundary_identities():
    p = CostParams(2, 3, 1.5, 2.5, 4)
    loads = [3, 9, 1, 27]
    # beta = 0: no VM term
    assert deployment_cost(loads, 0, p) == pytest.approx(sum(4 * d / 3 * 2.5 for d in loads))
    # beta >= max: no function term
    assert deployment_cost(loads, 27, p) == pytest.approx(4 * 27 / 2 * 1.5)


def test_negative_beta_and_empty_trace():
    with pytest.raises(ValueError):
        deployment_cost([1], -1, DEFAULT_PARAMS)
    with pytest.raises(EmptyTraceError):
        sweep([], DEFAULT_PARAMS)
    with pytest.raises(EmptyTraceError):
        capacity_percentile([], 50)
    with pytest.raises(ValueError):
        sweep([1, 2], DEFAULT_PARAMS, grid_steps=1)


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(gamma=-1), dict(price_vm=-0.1), dict(lambda_multiplier=0.5)])
def test_cost_params_invariants(kw):
    base = dict(alpha=1, gamma=1, price_vm=1, price_fn=1)
    base.update(kw)
    with pytest.raises(ValueError):
        CostParams(**base)


def test_constant_trace_prefers_pure_vm():
    res = sweep([250.0] * 50, CostParams(1, 1, 0.35, 1.0))
    assert res.best_beta == 250.0 and res.beta_as_fraction_of_peak == 1.0


def test_spiky_trace_has_interior_argmin():
    loads = [100.0] * 99 + [1000.0]
    loads = loads * 10
    res = sweep(loads, DEFAULT_PARAMS)
    assert 0 < res.best_beta < max(loads)


def test_capacity_percentiles():
    loads = list(range(1, 101))
    assert capacity_percentile(loads, 100) == 100
    assert capacity_percentile(loads, 90) == 90
    assert capacity_percentile(loads, 99.5) == 100
    assert capacity_percentile([7], 33) == 7
    with pytest.raises(ValueError):
        capacity_percentile(loads, 0)
    rng = random.Random(5)
    for _ in range(200):
        xs = [rng.randint(0, 50) for _ in range(rng.randint(1, 40))]
        p = rng.choice([100, 99, 95, 90, 50, 12.5])
        # sort-and-index oracle
        k = max(1, math.ceil(p * len(xs) / 100))
        assert capacity_percentile(xs, p) == sorted(xs)[k - 1]


def test_savings_table_structure():
    trace = synthetic_trace(seconds=20000, seed=3)
    table = savings_table(trace, DEFAULT_PARAMS, [100, 99, 95, 90], [1, 2, 4, 8])
    assert [[c.multiplier for c in row] for row in table] == [[m] * 4 for m in (1, 2, 4, 8)]
    numeric = lambda c: -math.inf if c.saving == NO_SAVING else c.saving
    for col in range(4):
        column = [numeric(row[col]) for row in table]
        assert column == sorted(column, reverse=True)
    first = [numeric(c) for c in table[0]]
    assert first == sorted(first, reverse=True) and len(set(first)) == 4
    assert table[-1][-1].formatted() == NO_SAVING
    assert table[0][0].formatted().endswith("%")


def test_zero_variance_trace_has_zero_saving_at_c100():
    cell = savings_table([300.0] * 40, DEFAULT_PARAMS, [100], [1])[0][0]
    assert cell.saving == NO_SAVING or cell.saving == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=40), st.floats(0.01, 100))
def test_price_scaling_is_equivariant(loads, k):
    p = CostParams(1.5, 0.7, 0.35, 1.0, 2)
    q = CostParams(1.5, 0.7, 0.35 * k, 1.0 * k, 2)
    a, b = sweep(loads, p, 30), sweep(loads, q, 30)
    np.testing.assert_allclose(b.costs, a.costs * k, rtol=1e-9, atol=1e-9)
    assert a.best_beta == b.best_beta or a.costs[np.flatnonzero(a.betas == b.best_beta)[0]] == \
        pytest.approx(a.best_cost, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=40), st.sampled_from([90, 95, 99, 100]))
def test_savings_non_increasing_in_multiplier(loads, p):
    table = savings_table(loads, DEFAULT_PARAMS, [p], [1, 2, 4, 8], grid_steps=30)
    hybrid = [row[0].hybrid for row in table]
    assert all(b >= a - 1e-9 * max(1, abs(a)) for a, b in zip(hybrid, hybrid[1:]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e5), min_size=1, max_size=200), st.integers(2, 50),
       st.floats(0.1, 10), st.floats(0.1, 10), st.sampled_from([1.0, 2.0, 8.0]), st.booleans())
def test_compiled_kernel_matches_fallback(loads, steps, alpha, gamma, mult, ceil):
    if model._compiled_curve is None:
        pytest.skip("compiled kernel not built")
    loads = np.array(loads)
    betas = np.linspace(0, loads.max(), steps)
    a = model._compiled_curve(loads, betas, alpha, gamma, 0.35, 1.0, mult, ceil)
    b = numpy_curve(loads, betas, alpha, gamma, 0.35, 1.0, mult, ceil)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-6)


def test_kernel_selection_at_import():
    code = "from boxer.planner import KERNEL; print(KERNEL)"
    env = dict(os.environ, BOXER_KERNEL="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("compiled" if model._compiled_curve is not None else "numpy")


# -- traces ------------------------------------------------------------------

def test_load_three_line_file():
    t = load_trace(io.StringIO("0,10\n1,20\n2,30\n"))
    assert len(t) == 3 and t.loads.tolist() == [10, 20, 30]


def test_gap_is_zero_filled_and_header_tolerated():
    t = load_trace(io.StringIO("timestamp,requests\n0,10\n1,20\n3,30\n"))
    assert t.loads.tolist() == [10, 20, 0, 30]


@pytest.mark.parametrize("text,line", [("0,1\n1,-4\n", 2), ("0,1\n5,1\n5,2\n", 3), ("0,1\n1,x\n", 2)])
def test_trace_errors_carry_line_numbers(text, line):
    with pytest.raises(TraceError, match=f"line {line}"):
        load_trace(io.StringIO(text))


def test_trace_series_invariants():
    with pytest.raises(TraceError):
        TraceSeries(np.array([0, 0]), np.array([1.0, 2.0]))
    with pytest.raises(TraceError):
        TraceSeries.from_loads([1, -1])


def test_synthetic_trace_is_bursty_and_reproducible():
    a, b = synthetic_trace(seconds=5000, seed=1), synthetic_trace(seconds=5000, seed=1)
    assert np.array_equal(a.loads, b.loads)
    assert a.peak > 5 * np.median(a.loads)


# -- CLI ---------------------------------------------------------------------

def test_cli_table_and_curve(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text("timestamp,requests\n" + "".join(f"{i},{100 if i % 50 else 3000}\n" for i in range(500)))
    out, curve = tmp_path / "table.csv", tmp_path / "curve.csv"
    rc = cli.main(["--trace", str(trace), "--mult", "1,8", "--percentiles", "100,90", "--steps", "50",
                   "--out", str(out), "--curve-out", str(curve)])
    assert rc == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["config", "c100", "c90"]
    assert rows[1][0] == "EC2 + 1xLambda" and rows[2][0] == "EC2 + 8xLambda"
    for cell in rows[1][1:] + rows[2][1:]:
        assert cell == NO_SAVING or (cell.endswith("%") and len(cell.split(".")[1]) == 3)
    assert capsys.readouterr().out.splitlines()[0] == "config,c100,c90"
    pts = list(csv.DictReader(curve.open()))
    assert len(pts) == 50 and float(pts[0]["beta"]) == 0


def test_cli_reports_parse_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1\n1,-2\n")
    assert cli.main(["--trace", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
