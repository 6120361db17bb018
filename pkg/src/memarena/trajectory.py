"""Trajectory frames and episode logs (JSON on disk)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .world import Scene, SceneDescriptor, WorldState, observe, scene_from_descriptor

LOG_VERSION = 1


@dataclass(frozen=True)
class TrajectoryFrame:
    t: int  # 1-based
    g: int
    v: tuple[float, float, float]
    pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    state_ref: Any = None  # WorldState in memory, index into the state table on disk
    step_id: int = 0  # executing subtask, 0 when idle


def frames_from_arrays(g: Sequence[int], v: np.ndarray) -> list[TrajectoryFrame]:
    """Bare frames for keyframe work on synthetic streams."""
    v = np.asarray(v, dtype=float)
    return [TrajectoryFrame(i + 1, int(g[i]), tuple(map(float, v[i]))) for i in range(len(g))]


@dataclass
class Episode:
    task_id: int
    seed: int
    planner: str
    scene: SceneDescriptor
    initial: WorldState
    frames: list[TrajectoryFrame] = field(default_factory=list)
    events: list[tuple[int, list]] = field(default_factory=list)  # (step, event list form)
    subtasks: list[dict] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.frames)

    def states(self) -> list[WorldState]:
        return [f.state_ref for f in self.frames]

    def final_state(self) -> WorldState:
        return self.frames[-1].state_ref if self.frames else self.initial

    def features(self) -> np.ndarray:
        return np.array([observe(f.state_ref).feature for f in self.frames])

    def to_dict(self) -> dict:
        table: list[dict] = []
        index: dict[WorldState, int] = {}
        refs = []
        for f in self.frames:
            s = f.state_ref
            if s not in index:
                index[s] = len(table)
                table.append(s.to_dict())
            refs.append(index[s])
        return {
            "version": LOG_VERSION,
            "task_id": self.task_id,
            "seed": self.seed,
            "planner": self.planner,
            "scene": _desc_to_dict(self.scene),
            "initial": self.initial.to_dict(),
            "states": table,
            "frames": [
                [f.t, f.g, list(f.v), list(f.pos), r, f.step_id] for f, r in zip(self.frames, refs)
            ],
            "events": [[t, e] for t, e in self.events],
            "subtasks": self.subtasks,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Episode":
        desc = SceneDescriptor.from_dict(raw["scene"])
        scene = scene_from_descriptor(desc)
        states = [WorldState.from_dict(scene, s) for s in raw["states"]]
        frames = [
            TrajectoryFrame(int(t), int(g), tuple(v), tuple(p), states[r], int(sid))
            for t, g, v, p, r, sid in raw["frames"]
        ]
        return cls(
            task_id=raw["task_id"],
            seed=raw["seed"],
            planner=raw["planner"],
            scene=desc,
            initial=WorldState.from_dict(scene, raw["initial"]),
            frames=frames,
            events=[(int(t), e) for t, e in raw["events"]],
            subtasks=raw.get("subtasks", []),
            report=raw.get("report", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Episode":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _desc_to_dict(desc: SceneDescriptor) -> dict:
    return {
        "containers": {n: {"kind": k, "open": o} for n, k, o in desc.containers},
        "objects": {n: {"kind": k, "at": a} for n, k, a in desc.objects},
        "wet_targets": list(desc.wet_targets),
    }


def scene_of(ep: Episode) -> Scene:
    return ep.initial.scene
