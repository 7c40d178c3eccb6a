"""Loss-maximizing perturbations inside an L2 ball.

Multi-step sign-gradient ascent with projection back onto the ball
(``pgd_step`` / ``find_delta``) drives the sharpness-aware trainers; the
one-step ``fgsm_perturb`` feeds the robustness harness. ``find_delta``
tracks the best iterate including the unperturbed origin, so its achieved
loss never falls below the loss at zero perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DivergenceError, ValidationError


@dataclass
class PerturbConfig:
    """Ball radius ``rho``, ascent step count ``k``, and step size ``alpha``.

    ``alpha`` defaults to ``rho / max(k, 1)`` so the unprojected sign path
    can traverse the ball.
    """

    rho: float
    k: int
    alpha: float | None = None

    def __post_init__(self):
        self.rho = float(self.rho)
        self.k = int(self.k)
        if self.rho < 0.0 or not math.isfinite(self.rho):
            raise ValidationError(f"rho must be finite and >= 0, got {self.rho}")
        if self.k < 0:
            raise ValidationError(f"k must be >= 0, got {self.k}")
        if self.alpha is None:
            self.alpha = self.rho / max(self.k, 1) if self.rho > 0.0 else 1.0
        self.alpha = float(self.alpha)
        if self.alpha <= 0.0 or not math.isfinite(self.alpha):
            raise ValidationError(f"alpha must be finite and > 0, got {self.alpha}")


@dataclass
class Perturbation:
    """A found perturbation and the loss it achieves at ``origin + delta``."""

    delta: np.ndarray
    achieved_loss: float


def project_ball(point: np.ndarray, origin: np.ndarray, rho: float) -> np.ndarray:
    """Rescale ``point - origin`` onto the radius-``rho`` sphere when outside the ball.

    Points already inside are returned untouched (per row when the inputs
    are batches of rows).
    """
    point = np.asarray(point, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if point.shape != origin.shape:
        raise ValidationError(f"shape mismatch: point {point.shape} vs origin {origin.shape}")
    diff = point - origin
    if point.ndim == 1:
        norm = float(np.linalg.norm(diff))
        if norm > rho:
            return origin + diff * (rho / norm)
        return point
    norms = np.linalg.norm(diff, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    projected = origin + diff * (rho / safe)
    return np.where(norms > rho, projected, point)


def pgd_step(current_point: np.ndarray, origin: np.ndarray, gradient: np.ndarray,
             config: PerturbConfig) -> np.ndarray:
    """One sign-gradient ascent step followed by projection onto the ball."""
    current_point = np.asarray(current_point, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != current_point.shape:
        raise ValidationError(
            f"shape mismatch: gradient {gradient.shape} vs point {current_point.shape}"
        )
    stepped = current_point + config.alpha * np.sign(gradient)
    return project_ball(stepped, origin, config.rho)


def find_delta(loss_at: Callable[[np.ndarray], float],
               grad_at: Callable[[np.ndarray], np.ndarray],
               origin: np.ndarray,
               config: PerturbConfig) -> Perturbation:
    """Approximate the loss maximizer inside the ball by k projected sign steps.

    The returned delta points to the highest-loss iterate seen, the origin
    included, so ``achieved_loss >= loss_at(origin)`` always holds and
    ``||delta||_2 <= rho`` up to float slack.
    """
    origin = np.asarray(origin, dtype=np.float64)
    best_point = origin
    best_loss = float(loss_at(origin))
    if not math.isfinite(best_loss):
        raise DivergenceError("loss is non-finite at the unperturbed origin")
    point = origin
    for step in range(config.k):
        grad = np.asarray(grad_at(point), dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient at ascent step {step}")
        point = pgd_step(point, origin, grad, config)
        loss = float(loss_at(point))
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at ascent step {step}")
        if loss > best_loss:
            best_loss = loss
            best_point = point
    return Perturbation(delta=best_point - origin, achieved_loss=best_loss)


def fgsm_step(vector: np.ndarray, gradient: np.ndarray, epsilon: float) -> np.ndarray:
    """One unprojected sign step of magnitude epsilon; epsilon 0 is the identity."""
    if epsilon < 0.0:
        raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
    vector = np.asarray(vector, dtype=np.float64)
    if epsilon == 0.0:
        return vector
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != vector.shape:
        raise ValidationError(f"shape mismatch: gradient {gradient.shape} vs vector {vector.shape}")
    return vector + epsilon * np.sign(gradient)


def fgsm_perturb(model, user_index: int, batch, epsilon: float) -> np.ndarray:
    """FGSM attack on one user row of a factor model.

    ``batch`` lists that user's rated items as (item_index, rating) pairs;
    the gradient is that of the summed squared rating error at the user row.
    """
    batch = list(batch)
    if not batch:
        raise ValidationError("fgsm_perturb requires a non-empty batch")
    if not 0 <= user_index < model.U.shape[0]:
        raise ValidationError(f"user index {user_index} out of range")
    items = np.array([int(i) for i, _ in batch], dtype=np.int64)
    ratings = np.array([float(r) for _, r in batch], dtype=np.float64)
    if items.min() < 0 or items.max() >= model.V.shape[0]:
        raise ValidationError("item index out of range")
    u = model.U[user_index]
    rows = model.V[items]
    resid = ratings - rows @ u
    grad = -2.0 * (resid[:, None] * rows).sum(axis=0)
    return fgsm_step(u, grad, float(epsilon))
