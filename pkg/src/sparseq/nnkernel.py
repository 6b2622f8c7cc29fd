"""Dense-parameter GCN with closed-form gradients, finite-difference
Hessian-vector products and the full-batch inner trainer.

Arithmetic runs in float64. Parameters returned by the trainer are stored as
float32, so a checkpoint round-trip reproduces the logits exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels
from .tagcore import NormalizedAdjacency, TagGraph

CHECKPOINT_MAGIC = b"GNNW"


class DivergenceError(RuntimeError):
    pass


@dataclass
class GnnParams:
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.layers]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in self.layers:
            parts.append(np.asarray(w, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64).ravel())
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> "GnnParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {vec.shape}")
        layers, pos = [], 0
        for d_in, d_out in self.shapes:
            w = vec[pos:pos + d_in * d_out].reshape(d_in, d_out)
            pos += d_in * d_out
            b = vec[pos:pos + d_out].copy()
            pos += d_out
            layers.append((w.copy(), b))
        return GnnParams(layers)

    def astype(self, dtype) -> "GnnParams":
        return GnnParams([(w.astype(dtype), b.astype(dtype)) for w, b in self.layers])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in self.layers)


def init_params(dims: list[int], seed: int) -> GnnParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (d_in + d_out))
        layers.append((rng.uniform(-limit, limit, size=(d_in, d_out)), np.zeros(d_out)))
    return GnnParams(layers)


def save_params(path, w: GnnParams) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(w.layers)))
        for wt, b in w.layers:
            fh.write(struct.pack("<II", *wt.shape))
            fh.write(np.ascontiguousarray(wt, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path) -> GnnParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a GNNW checkpoint")
    (n_layers,) = struct.unpack_from("<I", blob, 4)
    pos, layers = 8, []
    for _ in range(n_layers):
        d_in, d_out = struct.unpack_from("<II", blob, pos)
        pos += 8
        w = np.frombuffer(blob, dtype="<f4", count=d_in * d_out, offset=pos).reshape(d_in, d_out)
        pos += 4 * d_in * d_out
        b = np.frombuffer(blob, dtype="<f4", count=d_out, offset=pos)
        pos += 4 * d_out
        layers.append((w.astype(np.float32), b.astype(np.float32)))
    if pos != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return GnnParams(layers)


# --- forward / backward -----------------------------------------------------


def _forward(x, a_hat: NormalizedAdjacency, w: GnnParams):
    h = np.asarray(x, dtype=np.float64)
    if h.shape[1] != w.shapes[0][0]:
        raise ValueError(f"feature dim {h.shape[1]} does not match first layer input {w.shapes[0][0]}")
    cache = []
    last = len(w.layers) - 1
    for l, (wt, b) in enumerate(w.layers):
        p = a_hat.apply(h)
        z = p @ np.asarray(wt, dtype=np.float64) + np.asarray(b, dtype=np.float64)
        cache.append((p, z))
        h = np.maximum(z, 0.0) if l < last else z
    return h, cache


def _backward(dout, a_hat: NormalizedAdjacency, w: GnnParams, cache, need_x: bool = False):
    grads = [None] * len(w.layers)
    dz = dout
    dx = None
    for l in range(len(w.layers) - 1, -1, -1):
        p, _ = cache[l]
        grads[l] = (p.T @ dz, dz.sum(axis=0))
        if l == 0 and not need_x:
            break
        dh = a_hat.apply_t(dz @ np.asarray(w.layers[l][0], dtype=np.float64).T)
        if l > 0:
            dz = dh * (cache[l - 1][1] > 0)
        else:
            dx = dh
    flat = np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])
    return flat, dx


def gcn_forward(x, a_hat: NormalizedAdjacency, w: GnnParams) -> np.ndarray:
    out, _ = _forward(x, a_hat, w)
    return out


def _rows(mask) -> np.ndarray:
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("loss mask selects no nodes")
    return rows


def _loss_and_dout(outputs, g: TagGraph, mask, kind: str):
    rows = _rows(mask & g.label_mask)
    if not np.all(np.isfinite(outputs[rows])):
        raise DivergenceError("non-finite model outputs")
    if kind == "classification":
        labels = np.asarray(g.labels, dtype=np.int64)
        value, dout = _kernels.softmax_xent(np.ascontiguousarray(outputs, dtype=np.float64), labels, rows)
        return float(value), dout
    if kind == "regression":
        diff = outputs[rows, 0] - g.labels[rows]
        dout = np.zeros_like(outputs)
        dout[rows, 0] = np.sign(diff) / rows.size
        return float(np.abs(diff).mean()), dout
    raise ValueError(f"unknown loss kind {kind!r}")


def loss(outputs, g: TagGraph, mask, kind: str) -> float:
    """Mean cross-entropy (classification) or mean absolute error (regression)."""
    return _loss_and_dout(np.asarray(outputs, dtype=np.float64), g, mask, kind)[0]


def objective_and_grads(x, a_hat, w: GnnParams, g, mask, kind, weight_decay=0.0, need_x=False):
    """Loss (+ L2 penalty), flat parameter gradient and, optionally, input gradient."""
    out, cache = _forward(x, a_hat, w)
    value, dout = _loss_and_dout(out, g, mask, kind)
    gflat, dx = _backward(dout, a_hat, w, cache, need_x=need_x)
    if weight_decay:
        wflat = w.flatten()
        value += 0.5 * weight_decay * float(wflat @ wflat)
        gflat = gflat + weight_decay * wflat
    return value, gflat, dx


def grad_w(x, a_hat, w: GnnParams, g, mask, kind, weight_decay=0.0) -> np.ndarray:
    return objective_and_grads(x, a_hat, w, g, mask, kind, weight_decay)[1]


def fd_directional(fn: Callable[[np.ndarray], np.ndarray], at: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """Central difference of ``fn`` along ``v`` at ``at``, taken on the unit direction
    and rescaled by ``|v|``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        return np.zeros_like(np.asarray(fn(at), dtype=np.float64))
    unit = v / norm
    return (np.asarray(fn(at + eps * unit)) - np.asarray(fn(at - eps * unit))) * (norm / (2.0 * eps))


def hvp(x, a_hat, w: GnnParams, g, mask, kind, v, eps=1e-3, weight_decay=0.0) -> np.ndarray:
    def gradient(flat):
        return grad_w(x, a_hat, w.unflatten(flat), g, mask, kind, weight_decay)

    return fd_directional(gradient, w.flatten(), np.asarray(v, dtype=np.float64), eps)


# --- inner trainer ----------------------------------------------------------


@dataclass
class TrainConfig:
    n_layers: int = 2
    hidden_dim: int = 128
    learning_rate: float = 0.01
    max_inner_steps: int = 200
    patience: int = 50
    weight_decay: float = 5e-4
    task: str | None = None
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    restore_best: bool = True

    def __post_init__(self):
        if self.max_inner_steps < 1:
            raise ValueError("max_inner_steps must be >= 1")
        if self.patience > self.max_inner_steps:
            raise ValueError("patience must not exceed max_inner_steps")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.betas = tuple(self.betas)

    def dims(self, d_in: int, d_out: int) -> list[int]:
        return [d_in] + [self.hidden_dim] * (self.n_layers - 1) + [d_out]


class TrainResult(NamedTuple):
    w_star: GnnParams
    val_loss: float
    history: dict


def train_inner(x, a_hat, g: TagGraph, cfg: TrainConfig) -> TrainResult:
    kind = cfg.task or g.task
    _rows(g.train_mask)
    _rows(g.val_mask)
    w = init_params(cfg.dims(np.shape(x)[1], g.out_dim), cfg.seed)
    theta = w.flatten()
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    b1, b2 = cfg.betas
    best_val, best_theta, best_step = np.inf, theta.copy(), 0
    train_hist, val_hist = [], []

    for step in range(1, cfg.max_inner_steps + 1):
        try:
            value, grad, _ = objective_and_grads(x, a_hat, w.unflatten(theta), g, g.train_mask, kind, cfg.weight_decay)
        except DivergenceError as exc:
            raise DivergenceError(f"non-finite training loss at inner step {step}") from exc
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite training loss at inner step {step}")
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * grad
            s = b2 * s + (1 - b2) * grad * grad
            m_hat = m / (1 - b1**step)
            s_hat = s / (1 - b2**step)
            theta = theta - cfg.learning_rate * m_hat / (np.sqrt(s_hat) + 1e-8)
        else:
            theta = theta - cfg.learning_rate * grad
        with np.errstate(over="ignore", invalid="ignore"):
            stored = w.unflatten(theta).astype(np.float32)
            try:
                val = loss(gcn_forward(x, a_hat, stored), g, g.val_mask, kind) if stored.all_finite() else np.inf
            except DivergenceError:
                val = np.inf
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at inner step {step}")
        train_hist.append(value)
        val_hist.append(val)
        if val < best_val:
            best_val, best_theta, best_step = val, theta.copy(), step
        elif step - best_step >= cfg.patience:
            break

    if not cfg.restore_best:
        best_theta, best_val = theta, val_hist[-1]
    w_star = w.unflatten(best_theta).astype(np.float32)
    history = {
        "train_loss": train_hist,
        "val_loss": val_hist,
        "best_step": best_step,
        "steps": len(val_hist),
    }
    return TrainResult(w_star, float(best_val), history)


def accuracy(outputs, g: TagGraph, mask) -> float:
    rows = _rows(mask & g.label_mask)
    return float(np.mean(np.argmax(outputs[rows], axis=1) == g.labels[rows]))


def mae(outputs, g: TagGraph, mask) -> float:
    rows = _rows(mask & g.label_mask)
    return float(np.mean(np.abs(outputs[rows, 0] - g.labels[rows])))
