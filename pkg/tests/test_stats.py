from __future__ import annotations

import json
import math
from fractions import Fraction

import pytest

from memsearch.matrix import load_matrix_config, run_matrix
from memsearch.stats import (
    MissingBaselineError,
    PairingError,
    analyze_run,
    bh_fdr,
    efficiency,
    emit_matrix_report,
    load_verdicts,
    mcnemar_exact,
    pair_verdicts,
    significance_marker,
)

from conftest import write_mini_config

# the 23 discordant-pair rows with their printed 3-decimal p-values
GOLDEN = [
    (5, 2, "0.453"), (2, 3, "1.000"), (8, 2, "0.109"), (6, 0, "0.031"),
    (0, 1, "1.000"), (2, 3, "1.000"), (6, 2, "0.289"),
    (4, 1, "0.375"), (0, 3, "0.250"), (3, 1, "0.625"), (5, 2, "0.453"),
    (2, 2, "1.000"), (2, 3, "1.000"), (1, 2, "1.000"),
    (5, 4, "1.000"), (4, 4, "1.000"), (17, 3, "0.003"), (10, 2, "0.039"),
    (10, 2, "0.039"), (6, 5, "1.000"), (1, 1, "1.000"),
    (8, 6, "0.791"), (5, 3, "0.727"),
]


def _row(task_id, verdicts, selected=None, lengths=None, skipped=None, telemetry=None):
    return {
        "task_id": task_id,
        "verdicts": verdicts,
        "selected_verdict": verdicts[0] if selected is None else selected,
        "trajectory_lengths": lengths or [1 for _ in verdicts],
        "discovery_skipped": skipped,
        "telemetry": telemetry
        or {
            "policy_calls": 0,
            "policy_tokens_in": 0,
            "policy_tokens_out": 0,
            "supervisor_calls": 0,
            "supervisor_tokens_in": 0,
            "supervisor_tokens_out": 0,
        },
    }


def test_pair_verdicts_counts_rescues_and_regressions():
    base = [_row("a", [False]), _row("b", [True]), _row("c", [False]), _row("d", [True])]
    treat = [_row("a", [True]), _row("b", [False]), _row("c", [False]), _row("d", [True])]
    counts = pair_verdicts(base, treat)
    assert (counts.n, counts.b, counts.c, counts.dropped) == (4, 1, 1, 0)


def test_pair_verdicts_pass_at_n_vs_selected():
    base = [_row("a", [False, False], selected=False)]
    treat = [_row("a", [False, True], selected=False)]
    assert pair_verdicts(base, treat, "pass_at_n").b == 1
    assert pair_verdicts(base, treat, "selected").b == 0
    with pytest.raises(ValueError):
        pair_verdicts(base, treat, "majority")


def test_pair_verdicts_strict_and_partial():
    base = [_row("a", [True]), _row("b", [False])]
    treat = [_row("b", [True]), _row("c", [False])]
    with pytest.raises(PairingError, match=r"\['a', 'c'\]"):
        pair_verdicts(base, treat)
    counts = pair_verdicts(base, treat, allow_partial=True)
    assert (counts.n, counts.b, counts.dropped) == (1, 1, 2)


def test_mcnemar_exact_golden_rows():
    for b, c, printed in GOLDEN:
        assert f"{mcnemar_exact(b, c):.3f}" == printed


def test_mcnemar_exact_edge_cases_and_symmetry():
    assert mcnemar_exact(0, 0) == 1.0
    assert mcnemar_exact(3, 3) == 1.0  # doubled tail capped at 1
    for b, c in [(5, 2), (17, 3), (0, 1)]:
        assert mcnemar_exact(b, c) == mcnemar_exact(c, b)
    with pytest.raises(ValueError):
        mcnemar_exact(-1, 0)
    # exact arithmetic: 6,0 is 2 / 2**6 precisely
    assert mcnemar_exact(6, 0) == float(Fraction(2, 64))


def test_mcnemar_matches_binomial_reference():
    scipy_stats = pytest.importorskip("scipy.stats")
    for b in range(0, 12):
        for c in range(0, 12):
            if b + c == 0:
                continue
            ours = mcnemar_exact(b, c)
            ref = scipy_stats.binomtest(min(b, c), b + c, 0.5, alternative="two-sided").pvalue
            # the doubled-tail convention differs from the minlike two-sided
            # convention only by counting the opposite tail; for b == c both
            # give 1.0, otherwise doubling is an upper bound within 2x
            if b == c:
                assert ours == 1.0
            assert ours >= ref - 1e-12
            assert ours <= min(1.0, 2 * ref) + 1e-12
    # one-sided tail doubled is the textbook exact McNemar; spot check
    assert mcnemar_exact(8, 2) == pytest.approx(
        2 * scipy_stats.binom.cdf(2, 10, 0.5), abs=1e-12
    )


def test_significance_markers():
    assert significance_marker(0.0099) == "**"
    assert significance_marker(0.01) == "*"
    assert significance_marker(0.049) == "*"
    assert significance_marker(0.05) == "†"
    assert significance_marker(0.0999) == "†"
    assert significance_marker(0.10) == ""
    # the four pinned examples
    assert significance_marker(mcnemar_exact(17, 3)) == "**"
    assert significance_marker(mcnemar_exact(6, 0)) == "*"
    assert significance_marker(mcnemar_exact(10, 2)) == "*"
    assert significance_marker(mcnemar_exact(8, 2)) == ""


def test_bh_fdr_on_golden_table():
    ps = [mcnemar_exact(b, c) for b, c, _ in GOLDEN]
    at_05 = bh_fdr(ps, q=0.05)
    assert at_05.n_rejected == 0
    at_10 = bh_fdr(ps, q=0.10)
    assert at_10.n_rejected == 1
    assert [i for i, r in enumerate(at_10.rejected) if r] == [16]  # the 17,3 row
    assert at_10.qvalues[16] == pytest.approx(mcnemar_exact(17, 3) * 23, rel=1e-12)


def test_bh_fdr_step_up_and_tie_consistency():
    # p_(1) misses its threshold but p_(2) passes; both ties get rejected
    res = bh_fdr([0.02, 0.02, 1.0], q=0.05)
    assert res.rejected == (True, True, False)
    assert res.n_rejected == 2
    res = bh_fdr([], q=0.05)
    assert res.n_rejected == 0
    with pytest.raises(ValueError):
        bh_fdr([0.5, 1.2])


def test_bh_fdr_qvalues_monotone_in_rank():
    ps = [0.001, 0.01, 0.02, 0.8, 0.04, 0.6]
    res = bh_fdr(ps, q=0.05)
    ranked = sorted(range(len(ps)), key=lambda i: ps[i])
    qs = [res.qvalues[i] for i in ranked]
    assert qs == sorted(qs)
    assert all(q <= 1.0 for q in qs)
    # thresholds follow rank * q / m
    m = len(ps)
    for rank, idx in enumerate(ranked, start=1):
        assert res.thresholds[idx] == pytest.approx(rank * 0.05 / m)


def test_efficiency_example():
    """One discovery attempt of 8 steps then four short attempts that skip."""
    telemetry = {
        "policy_calls": 5,
        "policy_tokens_in": 1000,
        "policy_tokens_out": 100,
        "supervisor_calls": 5,
        "supervisor_tokens_in": 2000,
        "supervisor_tokens_out": 5,
    }
    rows = [
        _row(
            "a",
            [True] * 5,
            lengths=[8, 4, 3, 3, 3],
            skipped=[False, True, True, True, True],
            telemetry=telemetry,
        )
    ]
    summary = efficiency(rows)
    assert summary.mean_steps == pytest.approx(4.2)
    assert summary.skip_rate == pytest.approx(1.0)
    assert summary.policy_calls == 5
    assert summary.policy_cost == pytest.approx((1000 * 0.80 + 100 * 4.00) / 1e6)
    assert summary.supervisor_cost == pytest.approx((2000 * 3.00 + 5 * 15.00) / 1e6)
    # partial skips count per attempt
    rows[0]["discovery_skipped"] = [False, True, False, True, False]
    assert efficiency(rows).skip_rate == pytest.approx(0.5)


def test_efficiency_skip_rate_absent_cases():
    rows = [_row("a", [True], lengths=[3], skipped=None)]
    assert efficiency(rows).skip_rate is None
    rows = [_row("a", [True], lengths=[3], skipped=[True])]  # single attempt
    assert efficiency(rows).skip_rate is None
    with pytest.raises(ValueError):
        efficiency([])


def test_load_verdicts_skips_blank_lines(tmp_path):
    path = tmp_path / "v.jsonl"
    path.write_text('{"task_id": "a"}\n\n{"task_id": "b"}\n')
    assert [r["task_id"] for r in load_verdicts(path)] == ["a", "b"]


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("mini")
    cells = [
        {
            "id": "toy_sql_demo__best_of_n__none",
            "benchmark": "toy_sql_demo",
            "memory": [],
            "search": {"method": "best_of_n", "n_budget": 3},
            "seed": 11,
        },
        {
            "id": "toy_sql_demo__best_of_n__fact",
            "benchmark": "toy_sql_demo",
            "memory": ["fact"],
            "search": {"method": "best_of_n", "n_budget": 3},
            "seed": 11,
        },
        {
            "id": "toy_sql_demo__beam__none",
            "benchmark": "toy_sql_demo",
            "memory": [],
            "search": {"method": "beam"},
            "seed": 11,
        },
        {
            "id": "toy_sql_demo__mcts__none",
            "benchmark": "toy_sql_demo",
            "memory": [],
            "search": {"method": "mcts", "n_iters": 3},
            "seed": 11,
        },
        {
            "id": "toy_sql_demo__mcts__reflection",
            "benchmark": "toy_sql_demo",
            "memory": ["reflection"],
            "search": {"method": "mcts", "n_iters": 3},
            "seed": 11,
        },
    ]
    cfg = load_matrix_config(write_mini_config(tmp, cells))
    out = tmp / "out"
    run_matrix(cfg, out)
    return out


def test_analyze_run_aggregates(mini_run):
    analysis = analyze_run(mini_run)
    cells = analysis["cells"]
    assert cells["toy_sql_demo__best_of_n__fact"]["accuracy"] == 1.0
    assert cells["toy_sql_demo__best_of_n__none"]["accuracy"] == pytest.approx(0.7)
    fact_eff = cells["toy_sql_demo__best_of_n__fact"]["efficiency"]
    none_eff = cells["toy_sql_demo__best_of_n__none"]["efficiency"]
    assert fact_eff["mean_steps"] < none_eff["mean_steps"]
    comps = analysis["comparisons"]
    assert all("p" in c and "q_value" in c and "marker" in c for c in comps)
    by_mem = {c["memory"]: c for c in comps if c["method"] == "best_of_n"}
    assert by_mem["fact"]["b"] == 3
    assert by_mem["fact"]["c"] == 0


def test_analyze_run_missing_baseline(mini_run):
    with pytest.raises(MissingBaselineError, match="toy_sql_demo__beam__nothing"):
        analyze_run(mini_run, baseline="nothing")


def test_emit_matrix_report_shape(mini_run):
    analysis = analyze_run(mini_run)
    report = emit_matrix_report(analysis)
    assert "EXPERIMENT MATRIX" in report
    assert "PAIRED TESTS" in report
    assert "EFFICIENCY" in report
    assert "[100.0]" in report  # best cell in its group is bracketed
    # deterministic text
    assert report == emit_matrix_report(analyze_run(mini_run))


def test_analyze_run_selected_rule(mini_run):
    analysis = analyze_run(mini_run, rule="selected")
    assert analysis["rule"] == "selected"
    for comp in analysis["comparisons"]:
        assert 0.0 <= comp["p"] <= 1.0
