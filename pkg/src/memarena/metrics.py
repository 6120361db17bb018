"""TSR, CSR, memory ratio and suite statistics."""

from __future__ import annotations

import csv
import io
import statistics
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .tasks import CATEGORIES, TaskSpec

CSV_COLUMNS = ("task_id", "category", "tsr", "csr", "mean_steps", "k_i", "n_i", "m_i")
CSV_VERSION = 1

StageOutcomes = Sequence[bool]


def _check(results: Sequence[StageOutcomes]) -> None:
    if len(results) == 0:
        raise ValueError("no results")
    for r in results:
        if len(r) == 0:
            raise ValueError("a task has no stage outcomes")


def tsr(results: Sequence[StageOutcomes]) -> float:
    _check(results)
    return sum(1.0 if all(r) else 0.0 for r in results) / len(results)


def csr(results: Sequence[StageOutcomes]) -> float:
    _check(results)
    return sum(sum(bool(x) for x in r) / len(r) for r in results) / len(results)


@dataclass(frozen=True)
class MemoryRatio:
    total: Fraction
    per_task: dict[int, Fraction]

    def percent(self, digits: int = 1) -> str:
        return f"{float(self.total) * 100:.{digits}f}%"


def memory_ratio(suite: Sequence[TaskSpec]) -> MemoryRatio:
    if not suite:
        raise ValueError("empty suite")
    n = sum(t.n for t in suite)
    m = sum(t.m for t in suite)
    return MemoryRatio(Fraction(m, n), {t.task_id: Fraction(t.m, t.n) for t in suite})


@dataclass
class StatsReport:
    rows: list[dict]
    composition: tuple[int, ...]
    memory_ratio: Fraction
    k_histogram: dict[int, int]
    k_median: float
    mean_steps: float
    segment_count: int = 0
    missing_tasks: list[int] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})
        return buf.getvalue()

    def plot_data(self) -> dict:
        return {
            "csv_version": CSV_VERSION,
            "composition": dict(zip(CATEGORIES, self.composition)),
            "memory_ratio": [self.memory_ratio.numerator, self.memory_ratio.denominator],
            "k_histogram": {str(k): v for k, v in sorted(self.k_histogram.items())},
            "k_median": self.k_median,
            "mean_steps_per_task": {str(r["task_id"]): r["mean_steps"] for r in self.rows},
            "suite_mean_steps": self.mean_steps,
            "segment_count": self.segment_count,
            "missing_tasks": self.missing_tasks,
        }


def suite_stats(
    suite: Sequence[TaskSpec],
    episode_reports: Sequence[Mapping],
    segment_counts: Mapping[int, int] | None = None,
) -> StatsReport:
    """``episode_reports`` are EpisodeReport dicts (task_id, stage_outcomes, steps)."""
    by_task: dict[int, list[Mapping]] = defaultdict(list)
    for r in episode_reports:
        by_task[int(r["task_id"])].append(r)
    missing = [t.task_id for t in suite if t.task_id not in by_task]
    if missing:
        warnings.warn(f"partial report: no episodes for tasks {missing}")
    rows = []
    for t in suite:
        eps = by_task.get(t.task_id, [])
        outs = [e["stage_outcomes"] for e in eps]
        rows.append(
            {
                "task_id": t.task_id,
                "category": t.category,
                "tsr": round(tsr(outs), 6) if outs else "",
                "csr": round(csr(outs), 6) if outs else "",
                "mean_steps": round(statistics.fmean(e["steps"] for e in eps), 3) if eps else "",
                "k_i": t.k,
                "n_i": t.n,
                "m_i": t.m,
            }
        )
    means = [r["mean_steps"] for r in rows if r["mean_steps"] != ""]
    ks = Counter(t.k for t in suite)
    return StatsReport(
        rows=rows,
        composition=tuple(sum(t.category == c for t in suite) for c in CATEGORIES),
        memory_ratio=memory_ratio(suite).total,
        k_histogram=dict(ks),
        k_median=float(statistics.median(t.k for t in suite)),
        mean_steps=statistics.fmean(means) if means else 0.0,
        segment_count=sum((segment_counts or {}).values()),
        missing_tasks=missing,
    )


def category_tsr(reports: Sequence[Mapping], suite: Sequence[TaskSpec]) -> dict[str, float]:
    cat = {t.task_id: t.category for t in suite}
    groups: dict[str, list] = defaultdict(list)
    for r in reports:
        groups[cat[int(r["task_id"])]].append(r["stage_outcomes"])
    return {c: tsr(v) for c, v in groups.items()}


# --------------------------------------------------------------------------
# Failure-mode detectors over episode logs


def open_counts(events: Sequence) -> Counter:
    return Counter(e[1] for _, e in events if e[0] == "open")


def revisit_loop(report: Mapping, events: Sequence, min_opens: int = 3) -> bool:
    """Some container opened at least ``min_opens`` times and the episode ran out of budget."""
    return report.get("termination") == "budget" and any(n >= min_opens for n in open_counts(events).values())


def premature_placement(task: TaskSpec, events: Sequence) -> bool:
    """An object released into a role candidate before every container the
    script inspects ahead of that placement had been opened."""
    roles = {"$" + r.var: set(r.among) for r in task.roles}
    required: set[str] = set()
    candidates: set[str] = set()
    for s in task.subtasks:
        if s.planner_primitive == "Place" and s.dest in roles:
            candidates = roles[s.dest]
            break
        if s.planner_primitive == "Open" and not s.target.startswith("$"):
            required.add(s.target)
    if not candidates or not required:
        return False
    opened: set[str] = set()
    for _, e in events:
        if e[0] == "open":
            opened.add(e[1])
        elif e[0] == "release_into" and e[1] in candidates and not required <= opened:
            return True
    return False
