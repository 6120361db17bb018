"""Independent brute-force re-implementations used as test oracles."""

import math


def brute_keyframes(g, v, epsilon=0.05, theta=30.0, v_floor=1e-9):
    """Union of gripper-change frames and kinematic frames, 1-based times, no NMS."""
    out = set()
    for i in range(1, len(g)):
        t = i + 1
        if g[i] != g[i - 1]:
            out.add(t)
        s = math.sqrt(sum(x * x for x in v[i]))
        p = math.sqrt(sum(x * x for x in v[i - 1]))
        if s < epsilon:
            out.add(t)
        elif s >= v_floor and p >= v_floor:
            dot = sum(a * b for a, b in zip(v[i], v[i - 1]))
            if math.degrees(math.acos(max(-1.0, min(1.0, dot / (s * p))))) > theta:
                out.add(t)
        # s < epsilon already flagged; direction test only matters above epsilon
    return out


def naive_tsr(results):
    wins = 0
    for r in results:
        ok = True
        for x in r:
            if not x:
                ok = False
        wins += ok
    return wins / len(results)


def naive_csr(results):
    total = 0.0
    for r in results:
        hit = 0
        for x in r:
            if x:
                hit += 1
        total += hit / len(r)
    return total / len(results)


class ShadowBank:
    """List-based model of the two-buffer memory."""

    def __init__(self, window, capacity):
        self.window, self.capacity = window, capacity
        self.recent, self.keys = [], []
        self.last_key = None

    def push(self, step):
        self.recent.append(step)
        self.recent = self.recent[-self.window:]

    def write(self, step):
        if self.last_key is not None and step <= self.last_key:
            return
        self.last_key = step
        if self.capacity == 0:
            return
        self.keys.append(step)
        if self.capacity is not None:
            self.keys = self.keys[-self.capacity:]
