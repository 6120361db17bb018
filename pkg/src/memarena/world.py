"""Symbolic tabletop world: scenes, immutable states, events, observations.

The world is discrete-event. Objects live on the table, inside a container,
or in the gripper. Containers of an occluding kind hide their contents while
closed. Every transition returns a fresh :class:`WorldState`; nothing here
mutates in place.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

import numpy as np

FEATURE_DIM = 32
FEATURE_SCHEMA_VERSION = 1

MAX_CONTAINERS = 8
MAX_OBJECTS = 6
MAX_WET = 4

OBJECT_KINDS = frozenset({"item", "bottle"})
CONTAINER_KINDS = frozenset(
    {"drawer", "microwave", "basket", "plate", "cabinet", "mug", "frypan", "drainer"}
)
KINDS = OBJECT_KINDS | CONTAINER_KINDS

# Kinds with a door or front panel. Only these can be opened or closed.
OPENABLE = frozenset({"drawer", "microwave", "cabinet"})
OCCLUDING = frozenset({"drawer", "microwave", "cabinet"})

TABLE = "table"
GRIPPER = "gripper"


class ConfigError(ValueError):
    """A scene, predicate or suite references something it should not."""


class RuleViolation(Exception):
    """An event was rejected; ``rule`` names the violated constraint."""

    def __init__(self, rule: str, detail: str = ""):
        self.rule = rule
        self.detail = detail
        super().__init__(f"{rule}: {detail}" if detail else rule)


@dataclass(frozen=True)
class Entity:
    name: str
    kind: str
    index: int

    @property
    def is_container(self) -> bool:
        return self.kind in CONTAINER_KINDS

    @property
    def openable(self) -> bool:
        return self.kind in OPENABLE

    @property
    def occludes_when_closed(self) -> bool:
        return self.kind in OCCLUDING


@dataclass(frozen=True)
class Scene:
    """Static part of a scenario: the entity inventory and its layout."""

    containers: tuple[Entity, ...]
    objects: tuple[Entity, ...]
    wet_targets: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "_by_name", {e.name: e for e in self.containers + self.objects}
        )

    def entity(self, name: str) -> Entity:
        try:
            return self._by_name[name]
        except KeyError:
            raise ConfigError(f"undeclared entity {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self._by_name

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.containers + self.objects)

    def position(self, name: str) -> np.ndarray:
        """Fixed workspace anchor of a container or of an object's table spot."""
        e = self.entity(name)
        if e.is_container:
            x = 6.0 * (e.index % 4)
            y = 8.0 * (e.index // 4)
            return np.array([x, y, 1.0 + 1.5 * (e.index % 3)])
        return np.array([3.0 + 4.0 * e.index, 20.0, 0.5])

    def to_dict(self) -> dict:
        return {
            "containers": {e.name: e.kind for e in self.containers},
            "objects": {e.name: e.kind for e in self.objects},
            "wet_targets": list(self.wet_targets),
        }


@dataclass(frozen=True)
class SceneDescriptor:
    """Declarative scenario: which entities exist and where they start.

    ``scatter`` entries are ``(objects, among)`` pairs: at init the seed
    draws distinct containers from ``among`` for the listed objects.
    """

    containers: tuple[tuple[str, str, bool], ...]  # (name, kind, initially open)
    objects: tuple[tuple[str, str, str], ...]  # (name, kind, initial location)
    scatter: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...] = ()
    wet_targets: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SceneDescriptor":
        containers = []
        for name, spec in (raw.get("containers") or {}).items():
            if isinstance(spec, str):
                spec = {"kind": spec}
            kind = spec["kind"]
            default_open = kind not in OPENABLE
            containers.append((name, kind, bool(spec.get("open", default_open))))
        objects = []
        for name, spec in (raw.get("objects") or {}).items():
            if isinstance(spec, str):
                spec = {"kind": spec}
            objects.append((name, spec.get("kind", "item"), spec.get("at", TABLE)))
        scatter = tuple(
            (tuple(s["objects"]), tuple(s["among"])) for s in raw.get("scatter") or ()
        )
        return cls(
            containers=tuple(containers),
            objects=tuple(objects),
            scatter=scatter,
            wet_targets=tuple(raw.get("wet_targets") or ()),
        )


@dataclass(frozen=True)
class WorldState:
    scene: Scene = field(repr=False)
    objects: tuple[tuple[str, str], ...]
    containers: tuple[tuple[str, bool], ...]
    held: str | None = None
    g: int = 0
    pour_counts: tuple[tuple[str, str, int], ...] = ()
    tilt: tuple[str, str] | None = None
    inspection_log: tuple[tuple[str, int], ...] = ()
    step: int = 0

    def location(self, obj: str) -> str:
        for name, loc in self.objects:
            if name == obj:
                return loc
        raise ConfigError(f"undeclared object {obj!r}")

    def is_open(self, container: str) -> bool:
        for name, is_open in self.containers:
            if name == container:
                return is_open
        raise ConfigError(f"undeclared container {container!r}")

    def pour_count(self, src: str, dst: str) -> int:
        for s, d, n in self.pour_counts:
            if s == src and d == dst:
                return n
        return 0

    def contents(self, container: str) -> tuple[str, ...]:
        return tuple(name for name, loc in self.objects if loc == container)

    def hidden(self, obj: str) -> bool:
        loc = self.location(obj)
        if loc in (TABLE, GRIPPER):
            return False
        c = self.scene.entity(loc)
        return c.occludes_when_closed and not self.is_open(loc)

    def to_dict(self) -> dict:
        return {
            "objects": [list(p) for p in self.objects],
            "containers": [list(p) for p in self.containers],
            "held": self.held,
            "g": self.g,
            "pour_counts": [list(p) for p in self.pour_counts],
            "tilt": list(self.tilt) if self.tilt else None,
            "inspection_log": [list(p) for p in self.inspection_log],
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, scene: Scene, raw: Mapping[str, Any]) -> "WorldState":
        return cls(
            scene=scene,
            objects=tuple((a, b) for a, b in raw["objects"]),
            containers=tuple((a, bool(b)) for a, b in raw["containers"]),
            held=raw["held"],
            g=int(raw["g"]),
            pour_counts=tuple((a, b, int(n)) for a, b, n in raw["pour_counts"]),
            tilt=tuple(raw["tilt"]) if raw["tilt"] else None,
            inspection_log=tuple((a, int(b)) for a, b in raw["inspection_log"]),
            step=int(raw["step"]),
        )


def scene_from_descriptor(desc: SceneDescriptor) -> Scene:
    seen: set[str] = set()
    for name, kind, *_ in desc.containers + desc.objects:
        if name in seen or name in (TABLE, GRIPPER):
            raise ConfigError(f"duplicate identifier {name!r}")
        seen.add(name)
        if kind not in KINDS:
            raise ConfigError(f"unknown kind {kind!r} for {name!r}")
    for name, kind, _ in desc.containers:
        if kind not in CONTAINER_KINDS:
            raise ConfigError(f"{name!r}: kind {kind!r} is not a container kind")
    for name, kind, _ in desc.objects:
        if kind not in OBJECT_KINDS:
            raise ConfigError(f"{name!r}: kind {kind!r} is not an object kind")
    if len(desc.containers) > MAX_CONTAINERS or len(desc.objects) > MAX_OBJECTS:
        raise ConfigError("scene exceeds the feature layout capacity")
    if len(desc.wet_targets) > MAX_WET:
        raise ConfigError("too many wet targets")
    for name in desc.wet_targets:
        if name not in seen:
            raise ConfigError(f"undeclared wet target {name!r}")
    return Scene(
        containers=tuple(Entity(n, k, i) for i, (n, k, _) in enumerate(desc.containers)),
        objects=tuple(Entity(n, k, i) for i, (n, k, _) in enumerate(desc.objects)),
        wet_targets=desc.wet_targets,
    )


def init_scene(desc: SceneDescriptor, seed: int) -> WorldState:
    scene = scene_from_descriptor(desc)
    locations = {name: at for name, _, at in desc.objects}
    rng = np.random.default_rng(seed)
    for objs, among in desc.scatter:
        if len(objs) > len(among):
            raise ConfigError("scatter needs at least one container per object")
        picks = rng.permutation(len(among))[: len(objs)]
        for obj, k in zip(objs, picks):
            locations[obj] = among[int(k)]
    for obj, loc in locations.items():
        if not scene.has(obj):
            raise ConfigError(f"scatter names undeclared object {obj!r}")
        if loc != TABLE:
            if loc == GRIPPER:
                raise ConfigError("objects cannot start in the gripper")
            if not scene.entity(loc).is_container:
                raise ConfigError(f"{obj!r} placed in non-container {loc!r}")
    containers = []
    for name, kind, is_open in desc.containers:
        if kind not in OPENABLE and not is_open:
            raise ConfigError(f"{name!r} cannot start closed")
        containers.append((name, is_open))
    return WorldState(
        scene=scene,
        objects=tuple((name, locations[name]) for name, _, _ in desc.objects),
        containers=tuple(containers),
    )


# --------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class WorldEvent:
    kind: str  # open | close | grasp | release_into | pour | upright
    target: str
    dest: str | None = None

    def __str__(self) -> str:
        return f"{self.kind}({self.target}{',' + self.dest if self.dest else ''})"

    def to_list(self) -> list:
        return [self.kind, self.target, self.dest]


def Open(c: str) -> WorldEvent:
    return WorldEvent("open", c)


def Close(c: str) -> WorldEvent:
    return WorldEvent("close", c)


def Grasp(o: str) -> WorldEvent:
    return WorldEvent("grasp", o)


def ReleaseInto(dest: str) -> WorldEvent:
    return WorldEvent("release_into", dest)


def Pour(src: str, dst: str) -> WorldEvent:
    return WorldEvent("pour", src, dst)


def Upright(src: str) -> WorldEvent:
    return WorldEvent("upright", src)


def _with_location(state: WorldState, obj: str, loc: str) -> tuple[tuple[str, str], ...]:
    return tuple((n, loc if n == obj else l) for n, l in state.objects)


def _with_openness(state: WorldState, c: str, value: bool) -> tuple[tuple[str, bool], ...]:
    return tuple((n, value if n == c else v) for n, v in state.containers)


def _require_container(state: WorldState, name: str) -> Entity:
    e = state.scene.entity(name)
    if not e.is_container:
        raise RuleViolation("not-a-container", name)
    return e


def apply_event(state: WorldState, event: WorldEvent) -> WorldState:
    """Return the successor state, or raise :class:`RuleViolation`."""
    kind = event.kind
    if kind in ("open", "close"):
        c = _require_container(state, event.target)
        if not c.openable:
            raise RuleViolation("not-openable", c.name)
        want = kind == "open"
        if state.is_open(c.name) == want:
            raise RuleViolation("already-open" if want else "already-closed", c.name)
        log = state.inspection_log + ((c.name, state.step),) if want else state.inspection_log
        return replace(
            state, containers=_with_openness(state, c.name, want), inspection_log=log
        )
    if kind == "grasp":
        obj = state.scene.entity(event.target)
        if obj.is_container:
            raise RuleViolation("not-graspable", obj.name)
        if state.held is not None:
            raise RuleViolation("gripper-occupied", state.held)
        if state.hidden(obj.name):
            raise RuleViolation("closed-container", state.location(obj.name))
        return replace(
            state, objects=_with_location(state, obj.name, GRIPPER), held=obj.name, g=1
        )
    if kind == "release_into":
        if state.held is None:
            raise RuleViolation("empty-gripper")
        if state.tilt is not None:
            raise RuleViolation("tilted")
        dest = event.target
        if dest != TABLE:
            c = _require_container(state, dest)
            if not state.is_open(c.name):
                raise RuleViolation("closed-container", c.name)
        return replace(
            state, objects=_with_location(state, state.held, dest), held=None, g=0
        )
    if kind == "pour":
        src, dst = event.target, event.dest
        if dst is None or not state.scene.has(dst):
            raise ConfigError(f"undeclared pour destination {dst!r}")
        if state.held is None:
            raise RuleViolation("empty-gripper")
        if state.held != src:
            raise RuleViolation("not-holding-source", src)
        if state.scene.entity(src).kind != "bottle":
            raise RuleViolation("not-pourable", src)
        if state.tilt is not None:
            raise RuleViolation("already-tilted", src)
        counts = dict(((s, d), n) for s, d, n in state.pour_counts)
        counts[(src, dst)] = counts.get((src, dst), 0) + 1
        return replace(
            state,
            pour_counts=tuple((s, d, n) for (s, d), n in sorted(counts.items())),
            tilt=(src, dst),
        )
    if kind == "upright":
        if state.tilt is None or state.tilt[0] != event.target:
            raise RuleViolation("not-tilted", event.target)
        return replace(state, tilt=None)
    raise ConfigError(f"unknown event kind {kind!r}")


def advance(state: WorldState) -> WorldState:
    return replace(state, step=state.step + 1)


# --------------------------------------------------------------------------
# Observation


@dataclass(frozen=True)
class Observation:
    visible_objects: tuple[tuple[str, str], ...]
    container_states: tuple[tuple[str, bool], ...]
    gripper: tuple[str | None, int]
    wet: tuple[str, ...]
    tilt: tuple[str, str] | None
    feature: tuple[float, ...] = field(repr=False)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.feature)

    def signature(self) -> tuple:
        return (self.visible_objects, self.container_states, self.gripper, self.wet, self.tilt)

    def location(self, obj: str) -> str | None:
        for name, loc in self.visible_objects:
            if name == obj:
                return loc
        return None

    def is_open(self, container: str) -> bool:
        return dict(self.container_states)[container]

    def contents(self, container: str) -> tuple[str, ...]:
        return tuple(n for n, loc in self.visible_objects if loc == container)


def featurize(state: WorldState) -> tuple[float, ...]:
    """Fixed 32-slot layout (see data/feature_schema.txt)."""
    scene = state.scene
    f = [0.0] * FEATURE_DIM
    for e in scene.containers:
        f[e.index] = 1.0 if state.is_open(e.name) else 0.0
    for e in scene.objects:
        base = MAX_CONTAINERS + 3 * e.index
        if state.hidden(e.name):
            continue
        loc = state.location(e.name)
        f[base] = 1.0
        if loc == GRIPPER:
            f[base + 1] = 1.0
        elif loc != TABLE:
            f[base + 2] = (scene.entity(loc).index + 1) / MAX_CONTAINERS
    f[26] = float(state.g)
    for i, target in enumerate(scene.wet_targets):
        if any(d == target and n > 0 for _, d, n in state.pour_counts):
            f[27 + i] = 1.0
    f[31] = 1.0 if state.tilt is not None else 0.0
    return tuple(f)


def observe(state: WorldState) -> Observation:
    visible = tuple((n, loc) for n, loc in state.objects if not state.hidden(n))
    wet = tuple(sorted({d for _, d, n in state.pour_counts if n > 0}))
    return Observation(
        visible_objects=visible,
        container_states=state.containers,
        gripper=(state.held, state.g),
        wet=wet,
        tilt=state.tilt,
        feature=featurize(state),
    )


# --------------------------------------------------------------------------
# Predicates


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple = ()
    op: str | None = None
    value: int | None = None

    def __str__(self) -> str:
        if self.name in ("all", "any", "not"):
            inner = ", ".join(str(a) for a in self.args)
        else:
            inner = ", ".join(self.args)
        s = f"{self.name}({inner})"
        return f"{s} {self.op} {self.value}" if self.op else s

    def entities(self) -> Iterable[str]:
        if self.name in ("all", "any", "not"):
            for a in self.args:
                yield from a.entities()
        else:
            yield from self.args

    def substitute(self, bindings: Mapping[str, str]) -> "Predicate":
        if self.name in ("all", "any", "not"):
            return replace(self, args=tuple(a.substitute(bindings) for a in self.args))
        return replace(self, args=tuple(bindings.get(a, a) for a in self.args))


_ARITY = {
    "in": 2, "on_table": 1, "held": 1, "gripper_empty": 0, "open": 1, "closed": 1,
    "visible": 1, "visited": 1, "pour_count": 2, "wet": 1,
}
_TOKEN = re.compile(r"\s*(==|>=|<=|[(),]|[A-Za-z_$][\w$]*|\d+)")


def parse_predicate(text: str) -> Predicate:
    tokens = _TOKEN.findall(text)
    if "".join(tokens) != re.sub(r"\s+", "", text):
        raise ConfigError(f"cannot tokenize predicate {text!r}")
    pos = 0

    def take(expected: str | None = None) -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise ConfigError(f"unexpected end of predicate {text!r}")
        tok = tokens[pos]
        if expected is not None and tok != expected:
            raise ConfigError(f"expected {expected!r} in {text!r}, got {tok!r}")
        pos += 1
        return tok

    def expr() -> Predicate:
        name = take()
        take("(")
        args: list = []
        if name in ("all", "any", "not"):
            while tokens[pos] != ")":
                args.append(expr())
                if tokens[pos] == ",":
                    take(",")
        else:
            while tokens[pos] != ")":
                args.append(take())
                if tokens[pos] == ",":
                    take(",")
        take(")")
        if name == "not" and len(args) != 1:
            raise ConfigError("not() takes exactly one predicate")
        if name in _ARITY and len(args) != _ARITY[name]:
            raise ConfigError(f"{name} takes {_ARITY[name]} arguments")
        if name not in _ARITY and name not in ("all", "any", "not", "visited_all"):
            raise ConfigError(f"unknown predicate {name!r}")
        op = value = None
        if pos < len(tokens) and tokens[pos] in ("==", ">=", "<="):
            op = take()
            value = int(take())
        if name == "pour_count" and op is None:
            raise ConfigError("pour_count needs a comparison")
        return Predicate(name, tuple(args), op, value)

    pred = expr()
    if pos != len(tokens):
        raise ConfigError(f"trailing tokens in predicate {text!r}")
    return pred


def _compare(lhs: int, op: str, rhs: int) -> bool:
    return {"==": lhs == rhs, ">=": lhs >= rhs, "<=": lhs <= rhs}[op]


def check_predicate(state: WorldState, pred: Predicate) -> bool:
    """Evaluate a predicate against the full state (not the observation)."""
    for name in pred.entities():
        if name != TABLE and not state.scene.has(name):
            raise ConfigError(f"predicate {pred} references undeclared {name!r}")
    return _check(state, pred)


def _check(state: WorldState, p: Predicate) -> bool:
    n, a = p.name, p.args
    if n == "all":
        return all(_check(state, q) for q in a)
    if n == "any":
        return any(_check(state, q) for q in a)
    if n == "not":
        return not _check(state, a[0])
    if n == "in":
        return state.location(a[0]) == a[1]
    if n == "on_table":
        return state.location(a[0]) == TABLE
    if n == "held":
        return state.held == a[0]
    if n == "gripper_empty":
        return state.held is None
    if n == "open":
        return state.is_open(a[0])
    if n == "closed":
        return not state.is_open(a[0])
    if n == "visible":
        return not state.hidden(a[0])
    if n == "visited":
        return any(c == a[0] for c, _ in state.inspection_log)
    if n == "visited_all":
        seen = {c for c, _ in state.inspection_log}
        return all(c in seen for c in a)
    if n == "pour_count":
        return _compare(state.pour_count(a[0], a[1]), p.op, p.value)
    if n == "wet":
        return any(d == a[0] and k > 0 for _, d, k in state.pour_counts)
    raise ConfigError(f"unknown predicate {n!r}")
