"""Implicit-differentiation hypergradient of the validation loss with respect to
the node importance scores.

The inverse training Hessian is applied through a truncated, damped Neumann
series ``alpha * sum_j (I - alpha H)^j v``; Hessian-vector products and the
mixed second derivative are central finite differences of closed-form
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nnkernel import GnnParams, TrainConfig, fd_directional, grad_w, hvp, objective_and_grads
from .selector import MaskTriple, blend_features, ste_backward
from .tagcore import NormalizedAdjacency, TagGraph


class NeumannDivergenceError(ArithmeticError):
    pass


@dataclass
class HypergradConfig:
    neumann_steps: int = 10
    alpha: float | None = None  # None: use the inner learning rate
    fd_eps_w: float = 1e-3
    fd_eps_lambda: float = 1e-3
    include_direct_grad: bool = False
    divergence_factor: float = 1e8

    def __post_init__(self):
        if self.neumann_steps < 0:
            raise ValueError("neumann_steps must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def resolved_alpha(self, train_cfg: TrainConfig | None = None) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return float(train_cfg.learning_rate) if train_cfg is not None else 1.0


def _neumann(v0, hvp_fn, steps, alpha, divergence_factor):
    v = np.asarray(v0, dtype=np.float64).copy()
    total = v.copy()
    limit = divergence_factor * max(float(np.linalg.norm(v)), 1e-300)
    for j in range(1, steps + 1):
        v = v - alpha * np.asarray(hvp_fn(v), dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if not np.isfinite(norm) or norm > limit:
            raise NeumannDivergenceError(
                f"Neumann series diverged at step {j} (term norm {norm:.3g}); try a smaller alpha"
            )
        total += v
    return alpha * total, float(np.linalg.norm(v))


def neumann_inverse_hvp(v0, hvp_fn: Callable[[np.ndarray], np.ndarray], cfg: HypergradConfig, alpha: float | None = None) -> np.ndarray:
    """Approximate ``H^-1 v0`` with ``cfg.neumann_steps`` Hessian-vector products."""
    a = cfg.resolved_alpha() if alpha is None else alpha
    return _neumann(v0, hvp_fn, cfg.neumann_steps, a, cfg.divergence_factor)[0]


def mixed_partial_vjp(p_vec, lambda_grad_fn: Callable[[np.ndarray], np.ndarray], w: GnnParams | np.ndarray, eps: float) -> np.ndarray:
    """Directional derivative of ``lambda_grad_fn`` (flat weights -> N-vector)
    along ``p_vec``, i.e. ``p^T d2L/dw dlambda^T``."""
    at = w.flatten() if isinstance(w, GnnParams) else np.asarray(w, dtype=np.float64)
    return fd_directional(lambda_grad_fn, at, np.asarray(p_vec, dtype=np.float64), eps)


def make_lambda_grad_fn(graph: TagGraph, a_hat: NormalizedAdjacency, x_base, x_aug, mask: MaskTriple,
                        template: GnnParams, split: str, kind: str, weight_decay: float = 0.0):
    """dL/dlambda at fixed weights, through the straight-through path of the blend."""
    x_hard = blend_features(x_base, x_aug, mask, "forward_hard")
    delta = np.asarray(x_aug, dtype=np.float64) - np.asarray(x_base, dtype=np.float64)
    split_mask = graph.mask(split)

    def fn(flat):
        _, _, dx = objective_and_grads(x_hard, a_hat, template.unflatten(flat), graph, split_mask,
                                       kind, weight_decay, need_x=True)
        return ste_backward(mask, np.einsum("nd,nd->n", dx, delta))

    return fn


@dataclass
class HypergradReport:
    grad: np.ndarray
    grad_norm_w_star: float
    neumann_residual: float
    val_loss_grad_norm: float

    def to_json(self) -> dict:
        return {
            "grad_norm_w_star": self.grad_norm_w_star,
            "neumann_residual": self.neumann_residual,
            "dLv_dlambda": [float(v) for v in self.grad],
        }


def hypergradient_report(graph: TagGraph, a_hat: NormalizedAdjacency, x_base, x_aug, mask: MaskTriple,
                         w_star: GnnParams, cfg: HypergradConfig, train_cfg: TrainConfig) -> HypergradReport:
    kind = train_cfg.task or graph.task
    wd = train_cfg.weight_decay
    x_hard = blend_features(x_base, x_aug, mask, "forward_hard")
    w64 = w_star.astype(np.float64)

    v = grad_w(x_hard, a_hat, w64, graph, graph.val_mask, kind)
    stationarity = float(np.linalg.norm(grad_w(x_hard, a_hat, w64, graph, graph.train_mask, kind, wd)))

    def train_hvp(vec):
        return hvp(x_hard, a_hat, w64, graph, graph.train_mask, kind, vec, cfg.fd_eps_w, wd)

    p, residual = _neumann(v, train_hvp, cfg.neumann_steps, cfg.resolved_alpha(train_cfg), cfg.divergence_factor)
    lam_fn = make_lambda_grad_fn(graph, a_hat, x_base, x_aug, mask, w64, "train", kind, wd)
    grad = -mixed_partial_vjp(p, lam_fn, w64, cfg.fd_eps_lambda)
    if cfg.include_direct_grad:
        grad = grad + make_lambda_grad_fn(graph, a_hat, x_base, x_aug, mask, w64, "val", kind)(w64.flatten())
    return HypergradReport(grad, stationarity, residual, float(np.linalg.norm(v)))


def hypergradient(graph, a_hat, x_base, x_aug, mask, w_star, cfg, train_cfg) -> np.ndarray:
    return hypergradient_report(graph, a_hat, x_base, x_aug, mask, w_star, cfg, train_cfg).grad
