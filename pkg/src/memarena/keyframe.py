"""Keyframe extraction from gripper transitions and kinematic inflections.

A frame is a keyframe when the gripper bit flips (``phys``), when the
end-effector speed drops below ``epsilon`` (``kin-speed``), or when the
velocity direction turns by more than ``theta`` relative to the previous
frame (``kin-direction``). Frame 1 has no predecessor and is never flagged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trajectory import TrajectoryFrame
from .world import ConfigError

PHYS = "phys"
KIN_SPEED = "kin-speed"
KIN_DIRECTION = "kin-direction"


@dataclass(frozen=True)
class KinThresholds:
    epsilon: float = 0.05
    theta: float = 30.0  # degrees
    v_floor: float = 1e-9

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be a finite nonnegative number, got {self.epsilon}")
        if not 0 < self.theta < 180:
            raise ConfigError(f"theta must be in (0, 180) degrees, got {self.theta}")
        if not 0 <= self.v_floor <= self.epsilon:
            raise ConfigError("v_floor must satisfy 0 <= v_floor <= epsilon")


@dataclass(frozen=True)
class KeyframeSet:
    indices: tuple[int, ...]
    provenance: dict[int, frozenset[str]] = field(default_factory=dict)

    def __contains__(self, t: int) -> bool:
        return t in self.provenance

    def __len__(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {
            "indices": list(self.indices),
            "provenance": {str(t): sorted(self.provenance[t]) for t in self.indices},
        }


def _check_len(traj: Sequence[TrajectoryFrame]) -> None:
    if len(traj) < 2:
        raise ValueError("keyframe extraction needs at least two frames")


def extract_phys(traj: Sequence[TrajectoryFrame]) -> set[int]:
    _check_len(traj)
    return {traj[i].t for i in range(1, len(traj)) if traj[i].g != traj[i - 1].g}


def _kin_flags(traj: Sequence[TrajectoryFrame], th: KinThresholds) -> dict[int, set[str]]:
    _check_len(traj)
    v = np.array([f.v for f in traj], dtype=float)
    speed = np.linalg.norm(v, axis=1)
    cos_theta = math.cos(math.radians(th.theta))
    out: dict[int, set[str]] = {}
    for i in range(1, len(traj)):
        tags = set()
        if speed[i] < th.epsilon:
            tags.add(KIN_SPEED)
        # the cosine is undefined at zero speed, whatever the floor
        if min(speed[i], speed[i - 1]) >= th.v_floor and speed[i] > 0 and speed[i - 1] > 0:
            c = float(v[i] @ v[i - 1]) / (speed[i] * speed[i - 1])
            if c < cos_theta:
                tags.add(KIN_DIRECTION)
        if tags:
            out[traj[i].t] = tags
    return out


def extract_kin(traj: Sequence[TrajectoryFrame], thresholds: KinThresholds = KinThresholds()) -> set[int]:
    return set(_kin_flags(traj, thresholds))


def extract_keyframes(
    traj: Sequence[TrajectoryFrame],
    thresholds: KinThresholds = KinThresholds(),
    nms_gap: int = 3,
) -> KeyframeSet:
    if nms_gap < 0:
        raise ConfigError("nms_gap must be nonnegative")
    prov: dict[int, set[str]] = {t: {PHYS} for t in extract_phys(traj)}
    kin = _kin_flags(traj, thresholds)
    for t, tags in kin.items():
        prov.setdefault(t, set()).update(tags)
    if nms_gap > 0:
        speed = {f.t: float(np.linalg.norm(f.v)) for f in traj}
        kin_only = sorted(t for t, tags in prov.items() if PHYS not in tags)
        clusters: list[list[int]] = []
        for t in kin_only:
            if clusters and t - clusters[-1][-1] < nms_gap:
                clusters[-1].append(t)
            else:
                clusters.append([t])
        for c in clusters:
            keep = min(c, key=lambda t: (speed[t], t))
            for t in c:
                if t != keep:
                    del prov[t]
    idx = tuple(sorted(prov))
    return KeyframeSet(idx, {t: frozenset(prov[t]) for t in idx})
