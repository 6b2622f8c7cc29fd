"""Gumbel top-K node selection with a straight-through gradient."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

_U_CLAMP = 1e-12


@dataclass
class SelectionState:
    lam: np.ndarray
    tau: float = 4.0
    k: int = 10
    tau_min: float = 0.5
    gamma: float = 0.7
    lambda_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        n = self.lam.shape[0]
        if not 1 <= self.k <= n:
            raise ValueError(f"budget k={self.k} must lie in [1, {n}]")
        if not (self.tau_min > 0 and self.tau >= self.tau_min):
            raise ValueError("need tau >= tau_min > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not np.all(np.isfinite(self.lam)):
            raise ValueError("lambda must be finite")

    @classmethod
    def zeros(cls, n: int, **kw) -> "SelectionState":
        return cls(np.zeros(n), **kw)

    @property
    def n(self) -> int:
        return self.lam.shape[0]


@dataclass(frozen=True)
class MaskTriple:
    """Relaxed probabilities ``p``, hard K-hot mask ``h`` and the temperature
    needed to apply the straight-through backward rule."""

    p: np.ndarray
    h: np.ndarray
    k: int
    tau: float

    @property
    def m_forward(self) -> np.ndarray:
        return self.h

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.h)

    def jacobian(self) -> np.ndarray:
        """Dense matrix of the backward map, K * dp/dlambda (N x N)."""
        return (self.k / self.tau) * (np.diag(self.p) - np.outer(self.p, self.p))


def sample_gumbel(rng: np.random.Generator, n: int) -> np.ndarray:
    u = np.clip(rng.random(n), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """K-hot indicator of the largest ``scores``; ties go to the lower index."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    h = np.zeros(scores.shape[0])
    h[order[:k]] = 1.0
    return h


def mask_from_noise(lam: np.ndarray, noise: np.ndarray, tau: float, k: int) -> MaskTriple:
    z = (np.asarray(lam, dtype=np.float64) + noise) / tau
    p = softmax(z)
    # rank on z, not p: softmax can underflow distinct logits to equal zeros
    return MaskTriple(p=p, h=top_k_mask(z, k), k=k, tau=float(tau))


def gumbel_topk(state: SelectionState, rng: np.random.Generator) -> MaskTriple:
    return mask_from_noise(state.lam, sample_gumbel(rng, state.n), state.tau, state.k)


def ste_backward(mask: MaskTriple, upstream: np.ndarray) -> np.ndarray:
    """Map dL/dm to dL/dlambda through K * softmax((lambda + g) / tau)."""
    u = np.asarray(upstream, dtype=np.float64)
    p = mask.p
    return (mask.k / mask.tau) * (p * u - p * float(p @ u))


def anneal(state: SelectionState) -> SelectionState:
    return dataclasses.replace(state, lam=state.lam.copy(), tau=max(state.tau * state.gamma, state.tau_min))


def blend_features(x_base: np.ndarray, x_aug: np.ndarray, mask: MaskTriple | np.ndarray, phase: str = "forward_hard") -> np.ndarray:
    """Row-wise convex mix ``m * x_aug + (1 - m) * x_base``.

    ``phase="forward_hard"`` uses the K-hot mask, ``"relaxed"`` uses ``K * p``.
    A bare array is taken as the mask itself.
    """
    if np.shape(x_base) != np.shape(x_aug):
        raise ValueError(f"shape mismatch: {np.shape(x_base)} vs {np.shape(x_aug)}")
    if isinstance(mask, MaskTriple):
        if phase == "forward_hard":
            m = mask.h
        elif phase == "relaxed":
            m = mask.k * mask.p
        else:
            raise ValueError(f"unknown phase {phase!r}")
    else:
        m = np.asarray(mask, dtype=np.float64)
    xb = np.asarray(x_base, dtype=np.float64)
    xa = np.asarray(x_aug, dtype=np.float64)
    hard = m == 1.0
    out = xb + m[:, None] * (xa - xb)
    out[hard] = xa[hard]
    return out


def export_scores(path, state: SelectionState, selected) -> None:
    payload = {
        "lambda": [float(v) for v in state.lam],
        "tau": float(state.tau),
        "k": int(state.k),
        "selected": [int(i) for i in selected],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_scores(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    payload["lambda"] = np.asarray(payload["lambda"], dtype=np.float64)
    return payload
