"""Rule-based high-level planners standing in for a learned S2.

* ``OraclePlanner`` sees the true state and event log.
* ``ReactivePlanner`` sees only the current observation.
* ``MemoryPlanner`` sees a memory snapshot (keyframes plus recent window)
  and reconstructs task progress from observation changes in it.

Each returns a :class:`PlannerDecision`. None of them keeps state between
calls; everything they know comes from the input they are handed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from .keyframe import KinThresholds, extract_keyframes
from .memory import MemoryEntry, MemoryView
from .tasks import Role, SubtaskSpec, TaskSpec, decompose, label
from .trajectory import TrajectoryFrame
from .world import GRIPPER, TABLE, Observation, WorldState

PLANNERS = ("oracle", "reactive", "memory")


@dataclass(frozen=True)
class PlannerDecision:
    subtask: SubtaskSpec | None
    keyframe_positions: tuple[int, ...] = ()
    halted: bool = False

    def __post_init__(self):
        if self.halted and self.subtask is not None:
            raise ValueError("a halted decision carries no subtask")

    def to_dict(self) -> dict:
        return {
            "subtask": self.subtask.instruction if self.subtask else None,
            "step_id": self.subtask.step_id if self.subtask else None,
            "keyframe_positions": list(self.keyframe_positions),
            "halted": self.halted,
        }


HALT = PlannerDecision(None, (), True)


def expected_event(s: SubtaskSpec) -> tuple[str, str, str | None]:
    """World event that marks a subtask as done, in ``WorldEvent.to_list`` form."""
    p = s.planner_primitive
    if p == "Move":
        return ("grasp", s.target, None)
    if p == "Place":
        return ("release_into", s.dest, None)
    if p == "Pour":
        return ("pour", s.target, s.dest)
    return (p.lower(), s.target, None)


def _bind(s: SubtaskSpec, bindings: dict[str, str]) -> SubtaskSpec:
    t = bindings.get(s.target, s.target)
    d = bindings.get(s.dest, s.dest) if s.dest is not None else None
    if t == s.target and d == s.dest:
        return s
    return replace(s, target=t, dest=d, instruction=label(s.planner_primitive, t, d))


def _unbound(s: SubtaskSpec) -> str | None:
    for e in s.entities():
        if e.startswith("$"):
            return e
    return None


# --------------------------------------------------------------------------
# Oracle


@dataclass(frozen=True)
class OracleView:
    initial: WorldState
    state: WorldState
    events: tuple[tuple[int, tuple], ...]  # (step, event list form)
    frames: tuple[TrajectoryFrame, ...]
    window_steps: tuple[int, ...]


@dataclass
class OraclePlanner:
    task: TaskSpec
    thresholds: KinThresholds = KinThresholds()
    nms_gap: int = 3
    chunk_steps: int = 8
    mode: str = "oracle"

    def plan(self, view: OracleView) -> PlannerDecision:
        script = decompose(self.task, view.initial)
        ptr = 0
        for _, ev in view.events:
            if ptr < len(script) and tuple(ev) == expected_event(script[ptr]):
                ptr += 1
        positions = self._keyframe_positions(view)
        if ptr >= len(script):
            return PlannerDecision(None, positions, True)
        return PlannerDecision(script[ptr], positions)

    def _keyframe_positions(self, view: OracleView) -> tuple[int, ...]:
        steps = view.window_steps
        if not steps or len(view.frames) < 2:
            return ()
        lo = steps[0] - self.chunk_steps
        # Extraction is local apart from suppression clusters; a margin before the
        # window keeps results equal to a full-trajectory pass inside it.
        margin = self.chunk_steps + 4 * max(self.nms_gap, 1)
        tail = [f for f in view.frames if f.t > lo - margin]
        if len(tail) < 2:
            return ()
        keys = set(extract_keyframes(tail, self.thresholds, self.nms_gap).indices)
        out = []
        prev = lo
        for j, s in enumerate(steps, start=1):
            if any(prev < k <= s for k in keys):
                out.append(j)
            prev = s
        return tuple(out)


# --------------------------------------------------------------------------
# Reactive


def _visible_done(s: SubtaskSpec, obs: Observation, script: Sequence[SubtaskSpec]) -> bool:
    p, t, d = s.planner_primitive, s.target, s.dest
    if p == "Open":
        return obs.is_open(t)
    if p == "Close":
        return not obs.is_open(t)
    if p == "Move":
        if obs.gripper[0] == t:
            return True
        nxt = next(
            (q for q in script if q.step_id > s.step_id and q.planner_primitive == "Place" and q.target == t),
            None,
        )
        # Anything already sitting where it is headed counts as moved; for the
        # table that is indistinguishable from "not picked yet".
        return nxt is not None and nxt.dest not in (None, TABLE) and obs.location(t) == nxt.dest
    if p == "Place":
        return obs.location(t) == d
    if p == "Pour":
        return d in obs.wet
    return False


def _role_matches(role: Role, obs: Observation, c: str, exclude: str | None = None) -> bool:
    contents = [o for o in obs.contents(c) if o != exclude]
    return bool(contents) if role.select == "nonempty" else not contents


@dataclass
class ReactivePlanner:
    """Greedy choice from the current observation only."""

    task: TaskSpec
    mode: str = "reactive"
    audit: list = field(default_factory=list)

    def plan(self, obs: Observation) -> PlannerDecision:
        if not isinstance(obs, Observation):
            raise TypeError("the reactive planner accepts a single Observation only")
        self.audit.append(type(obs).__name__)
        script = list(self.task.subtasks)
        roles = {"$" + r.var: r for r in self.task.roles}

        # Goal shortcut: a visibly open container that satisfies a placement role.
        for s in script:
            if s.planner_primitive != "Place" or s.dest not in roles:
                continue
            role = roles[s.dest]
            for c in role.among:
                if obs.is_open(c) and _role_matches(role, obs, c, exclude=s.target):
                    if obs.location(s.target) == c:
                        break
                    if obs.gripper[0] == s.target:
                        return PlannerDecision(_bind(s, {s.dest: c}))
                    if obs.gripper[0] is None and obs.location(s.target) is not None:
                        move = SubtaskSpec(
                            s.step_id, label("Move", s.target, None), "Move", s.target,
                            s.memory_dependent, s.memory_kind,
                        )
                        return PlannerDecision(move)

        for s in script:
            var = _unbound(s)
            if var is not None:
                # No evidence about the role: lowest-index candidate.
                s = _bind(s, {var: roles[var].among[0]})
            if not _visible_done(s, obs, script):
                return PlannerDecision(s)
        return HALT


# --------------------------------------------------------------------------
# Memory-augmented


def visible_events(prev: Observation, cur: Observation) -> list[tuple[str, str, str | None]]:
    """Events inferable from two observations, in a fixed causal order."""
    out: list[tuple[str, str, str | None]] = []
    before = dict(prev.container_states)
    for c, is_open in cur.container_states:
        if is_open and not before.get(c, False):
            out.append(("open", c, None))
    h0, h1 = prev.gripper[0], cur.gripper[0]
    moved = []
    for o, loc in cur.visible_objects:
        old = prev.location(o)
        if old is not None and old != loc and GRIPPER not in (old, loc):
            moved.append((o, loc))
    for o, loc in moved:
        out.append(("grasp", o, None))
        out.append(("release_into", loc, None))
    if h0 is not None and h0 != h1:
        loc = cur.location(h0)
        out.append(("release_into", loc if loc not in (None, GRIPPER) else "?", None))
    if h1 is not None and h1 != h0:
        out.append(("grasp", h1, None))
    for d in cur.wet:
        if d not in prev.wet and (cur.tilt is None or cur.tilt[1] != d) and (prev.tilt is None or prev.tilt[1] != d):
            out.append(("pour", "?", d))
    if cur.tilt is not None and cur.tilt != prev.tilt:
        out.append(("pour", cur.tilt[0], cur.tilt[1]))
    for c, is_open in cur.container_states:
        if not is_open and before.get(c, False):
            out.append(("close", c, None))
    return out


def _event_matches(ev: tuple, want: tuple) -> bool:
    if ev[0] != want[0]:
        return False
    if ev[0] == "pour":
        return (ev[1] in ("?", want[1])) and ev[2] == want[2]
    if ev[0] == "release_into":
        return ev[1] in ("?", want[1])
    return ev[1] == want[1]


def resolve_from_memory(task: TaskSpec, entries: Sequence[MemoryEntry]) -> dict[str, str]:
    """Bind roles from what was seen inside containers while they were open."""
    first_seen: dict[str, tuple[str, ...]] = {}
    placed: set[str] = set()
    for e in entries:
        if e.obs.gripper[0] is not None:
            placed.add(e.obs.gripper[0])
        for c, is_open in e.obs.container_states:
            if is_open and c not in first_seen:
                first_seen[c] = tuple(o for o in e.obs.contents(c) if o not in placed)
    out = {}
    for r in task.roles:
        want_nonempty = r.select == "nonempty"
        hits = [c for c in r.among if c in first_seen and bool(first_seen[c]) == want_nonempty]
        unseen = [c for c in r.among if c not in first_seen]
        if hits:
            out["$" + r.var] = hits[0]
        elif len(unseen) == 1:
            out["$" + r.var] = unseen[0]
    return out


@dataclass
class MemoryPlanner:
    task: TaskSpec
    mode: str = "memory"

    def plan(self, view: MemoryView) -> PlannerDecision:
        if not isinstance(view, MemoryView):
            raise TypeError("the memory planner takes a MemoryView")
        merged = view.merged()
        positions = self._keyframe_positions(view)
        if not merged:
            return PlannerDecision(self.task.subtasks[0], positions)
        bindings = resolve_from_memory(self.task, merged)
        script = [_bind(s, bindings) for s in self.task.subtasks]
        events = []
        for a, b in zip(merged, merged[1:]):
            events.extend(visible_events(a.obs, b.obs))
        ptr = 0
        for ev in events:
            if ptr >= len(script):
                break
            s = script[ptr]
            if _unbound(s) is None and _event_matches(ev, expected_event(s)):
                ptr += 1
        if ptr >= len(script):
            return PlannerDecision(None, positions, True)
        s = script[ptr]
        var = _unbound(s)
        if var is not None:
            s = self._inspect(s, var, merged)
        return PlannerDecision(s, positions)

    def _inspect(self, s: SubtaskSpec, var: str, merged: Sequence[MemoryEntry]) -> SubtaskSpec:
        role = next(r for r in self.task.roles if "$" + r.var == var)
        seen = {c for e in merged for c, o in e.obs.container_states if o}
        for c in role.among:
            if c not in seen:
                return SubtaskSpec(s.step_id, label("Open", c, None), "Open", c, s.memory_dependent, s.memory_kind)
        return _bind(s, {var: role.among[0]})

    def _keyframe_positions(self, view: MemoryView) -> tuple[int, ...]:
        recent = view.recent
        if not recent:
            return ()
        prev = None
        older = [k for k in view.keyframes if k.step < recent[0].step]
        if older:
            prev = older[-1].obs.signature()
        out = []
        for j, e in enumerate(recent, start=1):
            sig = e.obs.signature()
            if prev is None or sig != prev:
                out.append(j)
            prev = sig
        return tuple(out)


def make_planner(name: str, task: TaskSpec, **kw):
    if name == "oracle":
        return OraclePlanner(task, **kw)
    if name == "reactive":
        return ReactivePlanner(task)
    if name == "memory":
        return MemoryPlanner(task)
    raise ValueError(f"unknown planner {name!r}; choose from {PLANNERS}")
