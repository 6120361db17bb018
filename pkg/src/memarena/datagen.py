"""Training-sample export: multi-image JSONL windows and per-step feature records."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .keyframe import KeyframeSet, KinThresholds, extract_keyframes
from .primitives import NoiseConfig, run_demo
from .tasks import PRIMITIVES, TaskSpec
from .trajectory import Episode
from .world import observe

CAMERA_KEYS = ("agentview_rgb", "eye_in_hand_rgb")
IMAGE_SIZE = (256, 256)
PROMPT_STYLE = "feature_reference"
DEFAULT_WINDOW = 5

SYSTEM_PROMPT = (
    "You plan for a robot arm and must use memory of the episode so far.\n"
    "Inputs: keyframes stored earlier in this episode, followed by the last "
    "{w} timesteps ending at the current frame.\n"
    "Every timestep has two images, agentview_rgb then eye_in_hand_rgb.\n"
    "Stored keyframes always precede the current window. Base the answer mainly "
    "on the current window.\n"
    "Reply with strict JSON and nothing else, with exactly two fields:\n"
    "  current_primitive: the primitive being executed now, taken from the task's primitive set.\n"
    "  keyframe_positions: 1-indexed positions inside the current {w}-timestep window "
    "that are keyframes, or [] when there are none."
)


def user_prompt(task_instruction: str, w: int) -> str:
    tokens = " ".join(["<image>"] * (2 * w))
    return (
        f"Task: {task_instruction}\n"
        f"Camera order per timestep: {', '.join(CAMERA_KEYS)}.\n"
        f"Current window: {w} consecutive timesteps, {2 * w} images.\n"
        f"{tokens}\n"
        "Answer with strict JSON holding current_primitive and keyframe_positions."
    )


def image_ref(task_id: int, seed: int, t: int, camera: str) -> str:
    return f"feature://task{task_id}/seed{seed}/t{t}/{camera}"


def assistant_payload(primitive: str, positions: Sequence[int]) -> str:
    return json.dumps(
        {"current_primitive": primitive, "keyframe_positions": [int(p) for p in positions]},
        separators=(",", ":"),
    )


def _labels(ep: Episode) -> dict[int, str]:
    return {int(s["step_id"]): s["instruction"] for s in ep.subtasks}


def iter_samples(
    ep: Episode,
    keyframes: KeyframeSet | None = None,
    window: int = DEFAULT_WINDOW,
    instruction: str = "",
) -> Iterator[dict]:
    """Stride-1 windows; windows ending on an idle frame carry no label and are skipped."""
    if window < 1:
        raise ValueError("window must be positive")
    if ep.length < window:
        warnings.warn(f"episode of {ep.length} frames is shorter than window {window}; skipped")
        return
    if keyframes is None:
        keyframes = extract_keyframes(ep.frames)
    keys = sorted(keyframes.indices)
    labels = _labels(ep)
    order = ep.task_id - 1
    win = 0
    for end in range(window - 1, ep.length):
        frames = ep.frames[end - window + 1 : end + 1]
        last = frames[-1]
        if last.step_id == 0:
            continue
        primitive = labels[last.step_id]
        positions = [j for j, f in enumerate(frames, start=1) if f.t in keyframes]
        history = sum(1 for k in keys if k < frames[0].t)
        images = [image_ref(ep.task_id, ep.seed, f.t, cam) for f in frames for cam in CAMERA_KEYS]
        yield {
            "qid": f"seed{ep.seed}_order{order}_win{win}_r0",
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT.format(w=window)},
                {"role": "user", "content": user_prompt(instruction, window)},
                {"role": "assistant", "content": assistant_payload(primitive, positions)},
            ],
            "images": images,
            "metadata": {
                "task_id": ep.task_id,
                "prompt_style": PROMPT_STYLE,
                "current_primitive": primitive,
                "keyframe_positions": positions,
                "camera_keys": list(CAMERA_KEYS),
                "history_keyframe_count": history,
                "num_context_frames": window,
                "num_context_images": len(images),
                "image_size": list(IMAGE_SIZE),
                "window_index": win,
                "window_start_t": frames[0].t,
                "window_end_t": last.t,
                "seed": ep.seed,
                "order": order,
            },
        }
        win += 1


def export_jsonl(
    ep: Episode,
    keyframes: KeyframeSet | None,
    window: int,
    out_path: str | Path,
    instruction: str = "",
    append: bool = False,
) -> int:
    n = 0
    with open(out_path, "a" if append else "w", encoding="utf-8") as fh:
        for sample in iter_samples(ep, keyframes, window, instruction):
            fh.write(json.dumps(sample, sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


def validate_sample(sample: dict, window: int = DEFAULT_WINDOW) -> list[str]:
    """Schema problems for one exported line (empty list = valid)."""
    bad = []
    if set(sample) != {"qid", "messages", "images", "metadata"}:
        bad.append("top-level keys")
    msgs = sample.get("messages", [])
    if [m.get("role") for m in msgs] != ["system", "user", "assistant"]:
        bad.append("message roles")
    else:
        try:
            payload = json.loads(msgs[2]["content"])
        except json.JSONDecodeError:
            payload = None
            bad.append("assistant is not JSON")
        if payload is not None:
            if set(payload) != {"current_primitive", "keyframe_positions"}:
                bad.append("assistant fields")
            elif not all(isinstance(p, int) and 1 <= p <= window for p in payload["keyframe_positions"]):
                bad.append("keyframe positions out of range")
    md = sample.get("metadata", {})
    if md.get("camera_keys") != list(CAMERA_KEYS):
        bad.append("camera_keys")
    if md.get("num_context_frames") != window:
        bad.append("num_context_frames")
    if md.get("num_context_images") != 2 * window or len(sample.get("images", [])) != 2 * window:
        bad.append("image count")
    if md.get("image_size") != list(IMAGE_SIZE):
        bad.append("image_size")
    return bad


# --------------------------------------------------------------------------
# Feature records for the predictive head


@dataclass(frozen=True)
class FeatureRecord:
    t: int
    z: tuple[float, ...]
    z_next: tuple[float, ...]
    primitive: int  # index into PRIMITIVES, -1 for idle frames
    keyframe: int
    step_id: int
    task_id: int
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__, z=list(self.z), z_next=list(self.z_next))


def feature_records(ep: Episode, keyframes: KeyframeSet | None = None) -> list[FeatureRecord]:
    if ep.length == 0:
        raise ValueError("empty episode log")
    if keyframes is None:
        keyframes = extract_keyframes(ep.frames) if ep.length >= 2 else KeyframeSet(())
    prim = {int(s["step_id"]): PRIMITIVES.index(s["planner_primitive"]) for s in ep.subtasks}
    feats = [observe(f.state_ref).feature for f in ep.frames]
    out = []
    for i in range(ep.length - 1):
        f = ep.frames[i]
        out.append(
            FeatureRecord(
                t=f.t,
                z=feats[i],
                z_next=feats[i + 1],
                primitive=prim.get(f.step_id, -1),
                keyframe=int(f.t in keyframes),
                step_id=f.step_id,
                task_id=ep.task_id,
                seed=ep.seed,
            )
        )
    return out


def export_features(ep: Episode, out_path: str | Path, append: bool = False) -> int:
    recs = feature_records(ep)
    with open(out_path, "a" if append else "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return len(recs)


def read_features(path: str | Path) -> list[FeatureRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            d["z"] = tuple(d["z"])
            d["z_next"] = tuple(d["z_next"])
            out.append(FeatureRecord(**d))
    return out


# Fixed recipe for the synthetic predictive-coding set shipped with the package.
SYNTHETIC_TASKS = (5, 8, 12, 16, 20, 23)
SYNTHETIC_SEEDS = (0, 1)


def synthetic_records(
    suite: Sequence[TaskSpec],
    tasks: Iterable[int] = SYNTHETIC_TASKS,
    seeds: Iterable[int] = SYNTHETIC_SEEDS,
) -> list[FeatureRecord]:
    by_id = {t.task_id: t for t in suite}
    out: list[FeatureRecord] = []
    for tid in tasks:
        for s in seeds:
            ep = run_demo(by_id[tid], s, NoiseConfig.off())
            out.extend(feature_records(ep))
    return out


def records_to_arrays(records: Sequence[FeatureRecord]) -> dict[str, np.ndarray]:
    recs = [r for r in records if r.primitive >= 0]
    return {
        "z": np.array([r.z for r in recs], dtype=float),
        "z_next": np.array([r.z_next for r in recs], dtype=float),
        "primitive": np.array([r.primitive for r in recs], dtype=int),
        "keyframe": np.array([r.keyframe for r in recs], dtype=float),
        "step_id": np.array([r.step_id for r in recs], dtype=int),
        "task_id": np.array([r.task_id for r in recs], dtype=int),
    }
