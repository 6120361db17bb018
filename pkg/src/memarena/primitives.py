"""Scripted skill executors: subtask -> waypoint path + world events.

Each plan is a straight-line approach to a contact point, a dwell at the
contact (where the gripper or container event fires), a vertical lift to a
safe height and a hover that soaks up the rest of the step budget. Grasp
pose estimation is abstracted into a seeded success draw plus contact
jitter; a failed grasp leaves the gripper empty and triggers a replan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .tasks import PRIMITIVES, SubtaskSpec, TaskSpec, decompose
from .trajectory import Episode, TrajectoryFrame
from .world import (
    GRIPPER,
    TABLE,
    Close,
    ConfigError,
    Grasp,
    Open,
    Pour,
    ReleaseInto,
    Upright,
    WorldEvent,
    WorldState,
    advance,
    apply_event,
    check_predicate,
    init_scene,
)

HOME = (9.0, 10.0, 12.0)
SAFE_Z = 12.0
DWELL_STEPS = 4
TILT_STEPS = 16
LIFT_SPEED = 1.0
TRAVEL_SPEED = 0.2
MIN_HOVER = 2
HANDLE_OFFSET = np.array([0.0, -1.5, 0.0])
POUR_OFFSET = np.array([0.0, 0.0, 2.0])
DEFAULT_BUDGET = 100
BASE_WEIGHTS = {"Move": 1.0, "Place": 1.0, "Pour": 1.2, "Open": 1.1, "Close": 0.9}


class PlanError(ConfigError):
    pass


class CalibrationError(ConfigError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    grasp_fail: float = 0.1
    jitter: float = 0.05
    max_retries: int = 3

    def __post_init__(self):
        if not 0.0 <= self.grasp_fail <= 1.0:
            raise ConfigError("grasp_fail must be a probability")
        if self.jitter < 0 or self.max_retries < 0:
            raise ConfigError("jitter and max_retries must be nonnegative")

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 3)


@dataclass(frozen=True)
class PrimitivePlan:
    subtask: SubtaskSpec
    waypoints: tuple[tuple[float, float, float], ...]  # start, contact, lifted
    path: tuple[tuple[float, float, float], ...]  # one position per step
    events: tuple[tuple[int, WorldEvent], ...]  # (0-based step offset, event)
    seed: tuple[int, ...] = ()
    budget: int = DEFAULT_BUDGET

    @property
    def duration(self) -> int:
        return len(self.path)

    @property
    def start(self) -> tuple[float, float, float]:
        return self.waypoints[0]

    def event_at(self, offset: int) -> list[WorldEvent]:
        return [e for k, e in self.events if k == offset]


@dataclass
class ExecutionOutcome:
    frames: list[TrajectoryFrame]
    success: bool
    retries_used: int
    diagnostic: str = ""


def _seed_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def min_budget(primitive: str) -> int:
    lift = math.ceil(SAFE_Z / LIFT_SPEED)
    extra = TILT_STEPS if primitive == "Pour" else 0
    return 1 + DWELL_STEPS + extra + lift + MIN_HOVER


def _reachable(state: WorldState, obj: str) -> bool:
    loc = state.location(obj)
    if loc in (TABLE, GRIPPER):
        return True
    return state.is_open(loc)


def contact_point(subtask: SubtaskSpec, state: WorldState) -> np.ndarray:
    scene = state.scene
    p, t, d = subtask.planner_primitive, subtask.target, subtask.dest
    if p == "Move":
        loc = state.location(t)
        return scene.position(t) if loc in (TABLE, GRIPPER) else scene.position(loc)
    if p == "Place":
        return scene.position(t) if d == TABLE else scene.position(d)
    if p == "Pour":
        return scene.position(d) + POUR_OFFSET
    return scene.position(t) + HANDLE_OFFSET


def _check_preconditions(subtask: SubtaskSpec, state: WorldState) -> None:
    p, t, d = subtask.planner_primitive, subtask.target, subtask.dest
    scene = state.scene
    for name in subtask.entities():
        if name != TABLE and not scene.has(name):
            raise PlanError(f"{subtask.instruction}: {name!r} is not in the scene")
    if p == "Move":
        if scene.entity(t).is_container:
            raise PlanError(f"cannot grasp container {t!r}")
        if not _reachable(state, t):
            raise PlanError(f"{t!r} is inside closed {state.location(t)!r}")
        if state.held is not None:
            raise PlanError(f"gripper already holds {state.held!r}")
    elif p == "Place":
        if state.held != t:
            raise PlanError(f"not holding {t!r}")
        if d != TABLE:
            if not scene.entity(d).is_container:
                raise PlanError(f"{d!r} is not a container")
            if not state.is_open(d):
                raise PlanError(f"{d!r} is closed")
    elif p == "Pour":
        if state.held != t:
            raise PlanError(f"not holding {t!r}")
        if scene.entity(t).kind != "bottle":
            raise PlanError(f"{t!r} cannot be poured")
    else:
        e = scene.entity(t)
        if not e.openable:
            raise PlanError(f"{t!r} cannot be opened or closed")


def _events_for(subtask: SubtaskSpec, k: int, grasp_ok: bool) -> list[tuple[int, WorldEvent]]:
    p, t, d = subtask.planner_primitive, subtask.target, subtask.dest
    if p == "Move":
        return [(k, Grasp(t))] if grasp_ok else []
    if p == "Place":
        return [(k, ReleaseInto(d))]
    if p == "Pour":
        return [(k, Pour(t, d)), (k + TILT_STEPS, Upright(t))]
    if p == "Open":
        return [(k, Open(t))]
    return [(k, Close(t))]


def plan_primitive(
    subtask: SubtaskSpec,
    state: WorldState,
    noise: NoiseConfig = NoiseConfig(),
    seed=0,
    *,
    start: Sequence[float] = HOME,
    budget: int = DEFAULT_BUDGET,
) -> PrimitivePlan:
    _check_preconditions(subtask, state)
    seed_t = _seed_tuple(seed)
    rng = np.random.default_rng(list(seed_t))
    grasp_ok = bool(rng.random() >= noise.grasp_fail)
    jitter = rng.normal(size=3) * noise.jitter
    p0 = np.asarray(start, dtype=float)
    c = contact_point(subtask, state) + jitter
    lifted = np.array([c[0], c[1], SAFE_Z])

    dwell = DWELL_STEPS + (TILT_STEPS if subtask.planner_primitive == "Pour" else 0)
    n_lift = max(1, math.ceil(abs(SAFE_Z - c[2]) / LIFT_SPEED))
    room = budget - dwell - n_lift - MIN_HOVER
    if room < 1:
        raise PlanError(f"budget {budget} too small for {subtask.planner_primitive}")
    dist = float(np.linalg.norm(c - p0))
    n_travel = int(min(room, max(1, math.ceil(dist / TRAVEL_SPEED))))
    n_hover = budget - n_travel - dwell - n_lift

    path = [p0 + (c - p0) * (i / n_travel) for i in range(1, n_travel + 1)]
    path += [c.copy() for _ in range(dwell)]
    path += [c + (lifted - c) * (i / n_lift) for i in range(1, n_lift + 1)]
    path += [lifted.copy() for _ in range(n_hover)]
    return PrimitivePlan(
        subtask=subtask,
        waypoints=(tuple(p0), tuple(c), tuple(lifted)),
        path=tuple(tuple(float(x) for x in q) for q in path),
        events=tuple(_events_for(subtask, n_travel, grasp_ok)),
        seed=seed_t,
        budget=budget,
    )


class PlanRunner:
    """Steps one plan forward a frame at a time."""

    def __init__(self, plan: PrimitivePlan):
        self.plan = plan
        self.offset = 0
        self.prev = np.asarray(plan.start, dtype=float)

    @property
    def done(self) -> bool:
        return self.offset >= self.plan.duration

    def step(self, state: WorldState) -> tuple[WorldState, TrajectoryFrame]:
        state = advance(state)
        for e in self.plan.event_at(self.offset):
            state = apply_event(state, e)
        pos = np.asarray(self.plan.path[self.offset])
        v = pos - self.prev
        self.prev = pos
        self.offset += 1
        frame = TrajectoryFrame(
            t=state.step,
            g=state.g,
            v=tuple(float(x) for x in v),
            pos=tuple(float(x) for x in pos),
            state_ref=state,
            step_id=self.plan.subtask.step_id,
        )
        return state, frame


def subtask_done(subtask: SubtaskSpec, state: WorldState) -> bool:
    return check_predicate(state, subtask.postcondition())


def execute(
    plan: PrimitivePlan,
    state: WorldState,
    noise: NoiseConfig = NoiseConfig(),
    seed=None,
    on_event: Callable[[int, WorldEvent], None] | None = None,
) -> tuple[WorldState, ExecutionOutcome]:
    """Run a plan, verify the post-condition, replan with a fresh seed on failure."""
    base = _seed_tuple(seed) if seed is not None else plan.seed
    frames: list[TrajectoryFrame] = []
    attempt = 0
    while True:
        runner = PlanRunner(plan)
        while not runner.done:
            for e in plan.event_at(runner.offset):
                if on_event is not None:
                    on_event(state.step + 1, e)
            state, f = runner.step(state)
            frames.append(f)
        if subtask_done(plan.subtask, state):
            return state, ExecutionOutcome(frames, True, attempt)
        if attempt >= noise.max_retries:
            return state, ExecutionOutcome(
                frames, False, attempt, f"{plan.subtask.instruction}: post-condition failed after {attempt} retries"
            )
        attempt += 1
        plan = plan_primitive(
            plan.subtask, state, noise, base + (attempt,), start=frames[-1].pos, budget=plan.budget
        )


# --------------------------------------------------------------------------
# Durations


@dataclass
class DurationTable:
    budgets: dict[int, dict[str, int]] = field(default_factory=dict)
    default: dict[str, int] = field(default_factory=lambda: {p: DEFAULT_BUDGET for p in PRIMITIVES})

    def budget(self, task_id: int, primitive: str) -> int:
        return self.budgets.get(task_id, self.default)[primitive]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "default": self.default,
            "budgets": {str(k): v for k, v in sorted(self.budgets.items())},
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DurationTable":
        return cls(
            budgets={int(k): {p: int(n) for p, n in v.items()} for k, v in raw["budgets"].items()},
            default={p: int(n) for p, n in raw["default"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DurationTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_durations_path() -> Path:
    from importlib import resources

    return Path(str(resources.files("memarena") / "data" / "durations.json"))


def shipped_durations() -> DurationTable:
    p = default_durations_path()
    return DurationTable.load(p) if p.exists() else DurationTable()


def demo_seed(seed: int, step_id: int) -> tuple[int, int]:
    return (int(seed), int(step_id))


def run_demo(
    task: TaskSpec,
    seed: int,
    noise: NoiseConfig = NoiseConfig(),
    durations: DurationTable | None = None,
) -> Episode:
    """Sequential scripted execution of the authored decomposition."""
    durations = durations or shipped_durations()
    state = init_scene(task.scene, seed)
    ep = Episode(task.task_id, seed, "demo", task.scene, state)
    plan_steps = decompose(task, state)
    ep.subtasks = [s.to_dict() for s in plan_steps]
    pos = HOME
    ok = True
    retries = 0
    reason = "complete"
    for s in plan_steps:
        plan = plan_primitive(
            s, state, noise, demo_seed(seed, s.step_id), start=pos, budget=durations.budget(task.task_id, s.planner_primitive)
        )
        state, out = execute(plan, state, noise, on_event=lambda t, e: ep.events.append((t, e.to_list())))
        ep.frames.extend(out.frames)
        retries += out.retries_used
        pos = out.frames[-1].pos
        if not out.success:
            ok, reason = False, out.diagnostic
            break
    ep.report = {"success": ok, "steps": ep.length, "retries": retries, "termination": reason}
    return ep


def calibrate_durations(
    suite: Sequence[TaskSpec],
    noise: NoiseConfig = NoiseConfig(),
    seeds: Sequence[int] = tuple(range(10)),
    iterations: int = 6,
    tolerance: float = 0.02,
) -> DurationTable:
    """Scale per-task primitive budgets until mean demo length tracks target_steps."""
    table = DurationTable()
    for task in suite:
        steps = [s.planner_primitive for s in task.subtasks]
        weight = sum(BASE_WEIGHTS[p] for p in steps)
        scale = task.target_steps / weight
        for _ in range(iterations):
            budgets = {p: int(round(BASE_WEIGHTS[p] * scale)) for p in PRIMITIVES}
            for p in PRIMITIVES:
                if budgets[p] < min_budget(p):
                    raise CalibrationError(
                        f"task {task.task_id}: {p} budget {budgets[p]} below feasible {min_budget(p)}"
                    )
            table.budgets[task.task_id] = budgets
            lengths = [run_demo(task, s, noise, table).length for s in seeds]
            mean = float(np.mean(lengths))
            if abs(mean - task.target_steps) <= tolerance * task.target_steps:
                break
            scale *= task.target_steps / mean
    return table
