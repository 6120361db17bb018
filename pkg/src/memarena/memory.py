"""Hierarchical memory bank: recent sliding window plus a keyframe buffer."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any

from .world import Observation

RECENT = "recent"
KEYFRAME = "keyframe"


class MemoryOrderError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    window: int = 5
    capacity: int | None = None  # None = unbounded, 0 = keyframe buffer disabled
    stride: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.capacity is not None and self.capacity < 0:
            raise ValueError("capacity must be nonnegative or None")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")


@dataclass(frozen=True)
class MemoryEntry:
    step: int
    obs: Observation
    origin: str


@dataclass(frozen=True)
class MemoryView:
    keyframes: tuple[MemoryEntry, ...]
    recent: tuple[MemoryEntry, ...]

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return self.keyframes + self.recent

    def __len__(self) -> int:
        return len(self.keyframes) + len(self.recent)

    @property
    def current(self) -> MemoryEntry | None:
        return self.recent[-1] if self.recent else None

    def merged(self) -> list[MemoryEntry]:
        """Both buffers in step order, one entry per step (recent wins ties)."""
        by_step: dict[int, MemoryEntry] = {e.step: e for e in self.keyframes}
        by_step.update({e.step: e for e in self.recent})
        return [by_step[s] for s in sorted(by_step)]


class MemoryBank:
    """Single-writer mutable bank; readers get immutable snapshots."""

    def __init__(self, config: MemoryConfig = MemoryConfig()):
        self.config = config
        self._recent: deque[MemoryEntry] = deque(maxlen=config.window)
        maxlen = config.capacity if config.capacity is not None else None
        self._keys: deque[MemoryEntry] = deque(maxlen=maxlen)
        self._last_push: int | None = None
        self._last_key: int | None = None
        self._pushes = 0
        self.last_write_stored = False

    def push_frame(self, step: int, obs: Observation) -> "MemoryBank":
        if self._last_push is not None and step <= self._last_push:
            raise MemoryOrderError(f"step {step} is not after {self._last_push}")
        self._last_push = step
        self._pushes += 1
        if (self._pushes - 1) % self.config.stride == 0:
            self._recent.append(MemoryEntry(step, obs, RECENT))
        return self

    def write_keyframe(self, step: int, obs: Observation) -> "MemoryBank":
        self.last_write_stored = False
        if self._last_key is not None and step <= self._last_key:
            return self  # duplicate or stale write is a no-op
        self._last_key = step
        if self.config.capacity == 0:
            return self
        self.last_write_stored = True
        self._keys.append(MemoryEntry(step, obs, KEYFRAME))
        return self

    def snapshot(self) -> MemoryView:
        return MemoryView(tuple(self._keys), tuple(self._recent))

    @property
    def recent_steps(self) -> list[int]:
        return [e.step for e in self._recent]

    @property
    def keyframe_steps(self) -> list[int]:
        return [e.step for e in self._keys]

    def to_dict(self) -> dict[str, Any]:
        return {"recent": self.recent_steps, "keyframes": self.keyframe_steps}
