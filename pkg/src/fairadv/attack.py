"""Sign-gradient attacks inside an l-infinity ball.

The perturbation starts at zero, takes ``steps`` sign-gradient ascent steps
of size ``alpha``, is clamped back into [-epsilon, epsilon] after every
step, and the perturbed input is clamped into [0, 1] once at the very end.
A zero gradient leaves the iterate where it is (sign(0) = 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .nn import Mlp

OBJECTIVES = ("ce", "cw_margin")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int
    objective: str = "ce"
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @property
    def label(self) -> str:
        return f"pgd{self.steps}_{self.objective}"


def pgd_attack(
    model: Mlp,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Adversarial batch with ||x_adv - x||_inf <= epsilon and x_adv in [0, 1]."""
    if x.ndim != 2 or x.shape[0] != np.asarray(y).shape[0]:
        raise tensor.DimensionError("x must be (B, d) with one label per row")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("attack inputs must lie in [0, 1]")
    eps = cfg.epsilon
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        delta = rng.uniform(-eps, eps, size=x.shape)
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.steps):
        g = model.input_grad(x + delta, y, cfg.objective)
        delta = tensor.clamp(delta + cfg.alpha * tensor.sign(g), -eps, eps)
    return tensor.clamp(x + delta, 0.0, 1.0)


def fgsm_attack(model: Mlp, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """Single sign-gradient step of size epsilon (PGD with steps=1, alpha=epsilon)."""
    alpha = epsilon if epsilon > 0 else 1.0  # alpha is irrelevant inside a zero ball
    return pgd_attack(model, x, y, AttackConfig(epsilon=epsilon, alpha=alpha, steps=1))
