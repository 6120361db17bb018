from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_csr, naive_tsr

from memarena.metrics import (
    CSV_COLUMNS,
    category_tsr,
    csr,
    memory_ratio,
    open_counts,
    premature_placement,
    revisit_loop,
    suite_stats,
    tsr,
)

OUTCOMES = st.lists(st.lists(st.booleans(), min_size=1, max_size=9), min_size=1, max_size=30)


@settings(max_examples=300, deadline=None)
@given(OUTCOMES)
def test_match_naive_oracles(results):
    assert tsr(results) == naive_tsr(results)
    assert csr(results) == pytest.approx(naive_csr(results), abs=1e-15)
    assert csr(results) >= tsr(results)


def test_simple_cases():
    assert tsr([[True, True], [True, False]]) == 0.5
    assert csr([[True, True], [True, False]]) == 0.75
    with pytest.raises(ValueError):
        tsr([])
    with pytest.raises(ValueError):
        csr([[]])


def test_memory_ratio_is_exact(suite):
    r = memory_ratio(suite)
    assert r.total == Fraction(104, 151)
    assert r.percent() == "68.9%"
    assert sum(f * t.n for f, t in zip(r.per_task.values(), suite)) == 104


def test_suite_stats_and_missing_tasks(suite):
    reps = [{"task_id": 1, "stage_outcomes": [True] * 4, "steps": 800},
            {"task_id": 1, "stage_outcomes": [True, False, True, True], "steps": 900}]
    with pytest.warns(UserWarning):
        st_ = suite_stats(suite, reps)
    assert st_.missing_tasks == list(range(2, 27))
    row = st_.rows[0]
    assert row["tsr"] == 0.5 and row["csr"] == 0.875 and row["mean_steps"] == 850.0
    lines = st_.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 27
    pd = st_.plot_data()
    assert pd["composition"] == {"transferring": 4, "occlusion": 11, "counting": 7, "sequence": 4}
    assert pd["memory_ratio"] == [104, 151]
    assert st_.k_median == 6.0


def test_category_tsr(suite):
    reps = [{"task_id": 5, "stage_outcomes": [True]}, {"task_id": 6, "stage_outcomes": [False]},
            {"task_id": 1, "stage_outcomes": [True]}]
    assert category_tsr(reps, suite) == {"occlusion": 0.5, "transferring": 1.0}


def test_revisit_loop_detector():
    ev = [(10, ["open", "drawer_top", None]), (50, ["close", "drawer_top", None])] * 3
    assert open_counts(ev)["drawer_top"] == 3
    assert revisit_loop({"termination": "budget"}, ev)
    assert not revisit_loop({"termination": "success"}, ev)
    assert not revisit_loop({"termination": "budget"}, ev[:4])


def test_premature_placement_detector(by_id):
    t = by_id[5]
    required = [s.target for s in t.subtasks if s.planner_primitive == "Open" and not s.target.startswith("$")]
    role = t.roles[0]
    ok = [(i, ["open", c, None]) for i, c in enumerate(required)] + [(99, ["release_into", role.among[0], None])]
    assert not premature_placement(t, ok)
    early = [(1, ["release_into", role.among[0], None])] + ok
    assert premature_placement(t, early)
    # a task without roles never triggers
    assert not premature_placement(by_id[1], early)
