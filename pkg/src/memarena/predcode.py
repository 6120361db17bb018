"""Toy predictive-coding head trained from scratch with hand-written backprop.

Shapes (N samples, D feature dims, H hidden units, P primitive classes):

    u   = Z We^T + be          h  = tanh(u)              shared hidden, N x D
    a   = h W1^T + b1          r  = tanh(a)              predictor hidden, N x H
    zh  = r W2^T + b2                                    next-frame guess, N x D
    s   = h Wc^T + bc                                    primitive logits, N x P
    k   = h wk + bk                                      keyframe logit, N

    L = L_cls + lam * L_pre
    L_cls = CE(s, y) + BCE(k, kf)
    L_pre = mean_n [ mean_d (zh - z')^2 + 1 - cos(zh, z') ]

The teacher z' is the featurizer output for the next frame and is a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

COS_EPS = 1e-12
PRED_WEIGHTS = (0.0, 0.1, 0.5, 1.0)

_ORDER = ("We", "be", "W1", "b1", "W2", "b2", "Wc", "bc", "wk", "bk")


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Predictive loss


def _cos_term(zh: np.ndarray, z: np.ndarray) -> np.ndarray:
    nh = np.linalg.norm(zh, axis=-1)
    nz = np.linalg.norm(z, axis=-1)
    ok = (nh >= COS_EPS) & (nz >= COS_EPS)
    cos = np.where(ok, np.sum(zh * z, axis=-1) / np.where(ok, nh * nz, 1.0), 0.0)
    # Degenerate norms count as orthogonal: the term is 1.
    return 1.0 - cos, cos, nh, nz, ok


def loss_pre(z_hat, z_teacher) -> float:
    zh = np.asarray(z_hat, dtype=float)
    z = np.asarray(z_teacher, dtype=float)
    if zh.shape != z.shape:
        raise ValueError(f"dimension mismatch {zh.shape} vs {z.shape}")
    mse = np.mean((zh - z) ** 2, axis=-1)
    term, *_ = _cos_term(zh, z)
    return float(np.mean(mse + term))


def _loss_pre_and_grad(zh: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    n, d = zh.shape
    diff = zh - z
    mse = np.mean(diff**2, axis=1)
    term, cos, nh, nz, ok = _cos_term(zh, z)
    g = 2.0 * diff / d
    safe_nh = np.where(ok, nh, 1.0)[:, None]
    safe_nz = np.where(ok, nz, 1.0)[:, None]
    dcos = z / (safe_nh * safe_nz) - cos[:, None] * zh / safe_nh**2
    g = g - np.where(ok[:, None], dcos, 0.0)
    return float(np.mean(mse + term)), g / n


# --------------------------------------------------------------------------
# Head


@dataclass
class PredictiveHead:
    D: int
    H: int = 64
    P: int = 5
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, D: int, H: int = 64, P: int = 5, seed: int = 0) -> "PredictiveHead":
        rng = np.random.default_rng(seed)

        def w(rows, cols):
            return rng.normal(size=(rows, cols)) / math.sqrt(cols)

        p = {
            "We": w(D, D), "be": np.zeros(D),
            "W1": w(H, D), "b1": np.zeros(H),
            "W2": w(D, H), "b2": np.zeros(D),
            "Wc": w(P, D), "bc": np.zeros(P),
            "wk": rng.normal(size=D) / math.sqrt(D), "bk": np.zeros(1),
        }
        return cls(D, H, P, p)

    # parameter bookkeeping -------------------------------------------------

    @property
    def predictor_params(self) -> int:
        return self.D * self.H + self.H + self.H * self.D + self.D

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def inventory(self) -> dict[str, tuple[int, ...]]:
        return {k: self.params[k].shape for k in _ORDER}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _ORDER])

    def with_flat(self, vec: np.ndarray) -> "PredictiveHead":
        out, i = {}, 0
        for k in _ORDER:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = np.asarray(vec[i : i + size], dtype=float).reshape(shape)
            i += size
        return PredictiveHead(self.D, self.H, self.P, out)

    # forward / backward ----------------------------------------------------

    def embed(self, Z: np.ndarray) -> np.ndarray:
        p = self.params
        return np.tanh(Z @ p["We"].T + p["be"])

    def forward(self, Z: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        h = self.embed(Z)
        r = np.tanh(h @ p["W1"].T + p["b1"])
        zh = r @ p["W2"].T + p["b2"]
        s = h @ p["Wc"].T + p["bc"]
        k = h @ p["wk"] + p["bk"][0]
        return {"h": h, "r": r, "zh": zh, "s": s, "k": k}

    def loss_and_grad(self, batch: Mapping[str, np.ndarray], lam: float) -> tuple[dict, dict]:
        Z, Zn = batch["z"], batch["z_next"]
        y, kf = batch["primitive"], batch["keyframe"]
        n = Z.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        if np.any(y < 0) or np.any(y >= self.P):
            raise ValueError("primitive label out of range")
        if np.any((kf != 0) & (kf != 1)):
            raise ValueError("keyframe labels must be 0/1")
        p = self.params
        f = self.forward(Z)
        h, r, zh, s, k = f["h"], f["r"], f["zh"], f["s"], f["k"]

        s_shift = s - s.max(axis=1, keepdims=True)
        logp = s_shift - np.log(np.exp(s_shift).sum(axis=1, keepdims=True))
        ce = -float(np.mean(logp[np.arange(n), y]))
        # log(1 + e^k) - kf * k, written stably
        bce = float(np.mean(np.logaddexp(0.0, k) - kf * k))
        l_pre, dzh = _loss_pre_and_grad(zh, Zn)

        ds = np.exp(logp)
        ds[np.arange(n), y] -= 1.0
        ds /= n
        dk = (1.0 / (1.0 + np.exp(-k)) - kf) / n
        dzh = lam * dzh

        g = {}
        g["W2"] = dzh.T @ r
        g["b2"] = dzh.sum(axis=0)
        da = (dzh @ p["W2"]) * (1.0 - r**2)
        g["W1"] = da.T @ h
        g["b1"] = da.sum(axis=0)
        g["Wc"] = ds.T @ h
        g["bc"] = ds.sum(axis=0)
        g["wk"] = h.T @ dk
        g["bk"] = np.array([dk.sum()])
        dh = da @ p["W1"] + ds @ p["Wc"] + np.outer(dk, p["wk"])
        du = dh * (1.0 - h**2)
        g["We"] = du.T @ Z
        g["be"] = du.sum(axis=0)
        losses = {"cls": ce + bce, "ce": ce, "bce": bce, "pre": l_pre, "total": ce + bce + lam * l_pre}
        return losses, g

    def loss(self, batch: Mapping[str, np.ndarray], lam: float) -> float:
        return self.loss_and_grad(batch, lam)[0]["total"]

    def flat_grad(self, g: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(g[k]).ravel() for k in _ORDER])

    # serialization ---------------------------------------------------------

    def save(self, path: str | Path, lam: float, seed: int) -> None:
        header = f"# predictive-head D={self.D} H={self.H} P={self.P} lambda={float(lam)!r} seed={int(seed)}\n"
        body = "".join(f"{float(x)!r}\n" for x in self.flat())
        Path(path).write_text(header + body)

    @classmethod
    def load(cls, path: str | Path) -> tuple["PredictiveHead", dict]:
        lines = Path(path).read_text().splitlines()
        meta = dict(tok.split("=") for tok in lines[0].lstrip("# ").split()[1:])
        D, H, P = int(meta["D"]), int(meta["H"]), int(meta["P"])
        head = cls.init(D, H, P)
        vec = np.array([float(x) for x in lines[1:] if x.strip()])
        if vec.size != head.n_params:
            raise ValueError("parameter count does not match header")
        return head.with_flat(vec), {"lambda": float(meta["lambda"]), "seed": int(meta["seed"])}


# --------------------------------------------------------------------------
# Gradient check


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(head: PredictiveHead, batch, lam: float, idx: Sequence[int], step: float = 1e-5) -> np.ndarray:
    base = head.flat()
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        v = base.copy()
        v[i] += step
        hi = head.with_flat(v).loss(batch, lam)
        v[i] -= 2 * step
        lo = head.with_flat(v).loss(batch, lam)
        out[j] = (hi - lo) / (2 * step)
    return out


def gradient_check(head: PredictiveHead, batch, lam: float, idx: Sequence[int] | None = None, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, g = head.loss_and_grad(batch, lam)
    flat = head.flat_grad(g)
    idx = range(flat.size) if idx is None else idx
    idx = list(idx)
    num = numeric_grad(head, batch, lam, idx, step)
    return float(np.max(rel_error(flat[idx], num)))


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    pre_weight: float = 0.1
    lr: float = 1e-2
    epochs: int = 200
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        if self.pre_weight < 0:
            raise ValueError("pre_weight must be nonnegative")


@dataclass
class TrainCurve:
    epoch: list[int] = field(default_factory=list)
    cls: list[float] = field(default_factory=list)
    pre: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,l_cls,l_pre,total"]
        rows += [f"{e},{c!r},{p!r},{t!r}" for e, c, p, t in zip(self.epoch, self.cls, self.pre, self.total)]
        return "\n".join(rows) + "\n"


def train(batch: Mapping[str, np.ndarray], config: TrainConfig = TrainConfig(), n_classes: int = 5) -> tuple[PredictiveHead, TrainCurve]:
    D = batch["z"].shape[1]
    head = PredictiveHead.init(D, config.hidden, n_classes, config.seed)
    curve = TrainCurve()
    for epoch in range(1, config.epochs + 1):
        with np.errstate(invalid="ignore", over="ignore"):
            losses, g = head.loss_and_grad(batch, config.pre_weight)
        if not all(math.isfinite(v) for v in losses.values()):
            raise DivergenceError(f"non-finite loss at epoch {epoch}: {losses}")
        curve.epoch.append(epoch)
        curve.cls.append(losses["cls"])
        curve.pre.append(losses["pre"])
        curve.total.append(losses["total"])
        for k in _ORDER:
            head.params[k] = head.params[k] - config.lr * g[k]
    return head, curve


# --------------------------------------------------------------------------
# Separability


def separability(embeddings: np.ndarray, labels: Sequence) -> float:
    """Mean intra-class pairwise distance over mean inter-class pairwise distance."""
    X = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("separability needs at least two classes")
    if np.any(counts < 2):
        raise ValueError("each class needs at least two samples")
    sq = np.sum(X**2, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0))
    same = y[:, None] == y[None, :]
    iu = np.triu_indices(len(y), k=1)
    d, s = dist[iu], same[iu]
    return float(d[s].mean() / d[~s].mean())


def keyframe_separability(head: PredictiveHead, batch: Mapping[str, np.ndarray]) -> float:
    """Separability of embedded keyframe frames, classed by their primitive label."""
    kf = np.asarray(batch["keyframe"]) == 1
    return separability(head.embed(batch["z"][kf]), batch["primitive"][kf])


@dataclass(frozen=True)
class SweepRow:
    pre_weight: float
    final_cls: float
    final_pre: float
    separability: float


def sweep(batch: Mapping[str, np.ndarray], weights: Sequence[float] = PRED_WEIGHTS, config: TrainConfig = TrainConfig()) -> list[SweepRow]:
    rows = []
    for lam in weights:
        cfg = TrainConfig(pre_weight=lam, lr=config.lr, epochs=config.epochs, seed=config.seed, hidden=config.hidden)
        head, curve = train(batch, cfg)
        rows.append(SweepRow(lam, curve.cls[-1], curve.pre[-1], keyframe_separability(head, batch)))
    return rows
