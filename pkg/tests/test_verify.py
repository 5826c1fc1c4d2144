import json
import math
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from wideformer.arch_plan import ScalingStrategy
from wideformer.verify import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    CheckResult,
    Suite,
    _trend,
    check_plan_tables,
    combine,
    criterion_verdict,
    expected_grad_ratio,
    report_json,
    run_suite,
)


def small_suite(n_inits):
    s = Suite(widths=(16, 32, 64))
    return replace(s, inits={k: n_inits for k in s.inits})


verdicts = st.sampled_from([PASS, FAIL, INCONCLUSIVE])


@given(st.lists(verdicts, min_size=1))
def test_combine_precedence(vs):
    got = combine(vs)
    if FAIL in vs:
        assert got == FAIL
    elif INCONCLUSIVE in vs:
        assert got == INCONCLUSIVE
    else:
        assert got == PASS


def test_non_gating_rows_do_not_decide():
    rows = [
        CheckResult(2, "a", 0.1, 0.6, PASS),
        CheckResult(2, "b", 9.0, 1.0, FAIL, gating=False),
    ]
    assert criterion_verdict(rows) == PASS
    assert criterion_verdict(rows[1:]) == INCONCLUSIVE


def test_trend_band_mode():
    assert _trend(1.0, 0.01, 0.5, 0.01, 0.5, 2.0)[0] == PASS
    assert _trend(1.0, 0.01, 0.1, 0.01, 0.5, 2.0)[0] == FAIL
    assert _trend(1.0, 0.01, 2.0, 0.01, 0.5, 2.0)[0] == FAIL


def test_trend_unresolved_falls_back_to_bound():
    verdict, detail, _ = _trend(0.01, 0.05, 0.02, 0.03, 0.5, 2.0)
    assert verdict == PASS and "unresolved" in detail
    assert _trend(0.01, 0.05, 1.0, 0.03, 0.5, 2.0)[0] == FAIL


def test_trend_nonfinite_is_inconclusive():
    assert _trend(1.0, math.inf, 0.5, 0.1, 0.5, 2.0)[0] == INCONCLUSIVE
    assert _trend(1.0, 0.1, 0.5, math.nan, 0.5, 2.0)[0] == INCONCLUSIVE


@pytest.mark.parametrize(
    "group,ratio",
    [("Q", 0.5), ("W", 0.5), ("HeadW", 1.0), ("HeadB", 1.0)],
)
def test_expected_grad_ratio_neural_tangent(group, ratio):
    assert expected_grad_ratio(group, 64, 256, ScalingStrategy.from_dict({"preset": "neural-tangent"})) == pytest.approx(ratio)


def test_plan_tables_pass():
    rows = check_plan_tables()
    assert rows and all(r.verdict == PASS for r in rows)


def test_one_init_is_inconclusive_not_fail():
    results = run_suite(small_suite(1), [2, 3, 4, 5, 7, 8])
    by = {}
    for r in results:
        by.setdefault(r.criterion, []).append(r)
    for c, rows in by.items():
        assert criterion_verdict(rows) == INCONCLUSIVE, (c, [(r.name, r.verdict) for r in rows])


def test_gradient_check_passes_quickly():
    results = run_suite(small_suite(1), [1])
    assert all(r.verdict == PASS for r in results)
    assert max(r.value for r in results) < 1e-6


def test_report_json_round_trip():
    rows = [CheckResult(1, "fd:vision", 1e-10, 1e-6, PASS), CheckResult(3, "x", math.nan, 3.0, INCONCLUSIVE)]
    doc = json.loads(report_json(rows, {"seed": 0}))
    assert doc["verdict"] == INCONCLUSIVE
    assert doc["criteria"]["1"]["verdict"] == PASS
    assert doc["meta"]["seed"] == 0
