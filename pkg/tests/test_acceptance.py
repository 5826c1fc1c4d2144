"""Acceptance suite: all ten criteria at their stated tolerances and default sample sizes.

Run alone with ``pytest -m acceptance -s`` to see the per-criterion lines.
Takes roughly ten minutes on one core.
"""
import pytest

from wideformer.verify import CRITERIA, FAIL, Suite, by_criterion, criterion_verdict, run_suite, summary_line

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def outcome():
    results = run_suite(Suite())
    grouped = by_criterion(results)
    print()
    for c in sorted(grouped):
        print(summary_line(c, grouped[c]))
        for r in grouped[c]:
            if r.verdict != "pass":
                print(f"    {r.name}: {r.verdict} value={r.value:.4g} tol={r.tolerance:.4g} {r.detail}")
    return grouped


@pytest.mark.parametrize("criterion", sorted(CRITERIA))
def test_criterion(outcome, criterion):
    rows = outcome[criterion]
    verdict = criterion_verdict(rows)
    failing = [(r.name, r.value, r.tolerance, r.detail) for r in rows if r.gating and r.verdict == FAIL]
    assert verdict == "pass", failing or [(r.name, r.verdict, r.detail) for r in rows if r.gating]
