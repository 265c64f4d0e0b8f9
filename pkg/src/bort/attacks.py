"""Gradient-sign attacks under an l-infinity budget inside the [0,1] box.

All attack functions take and return plain arrays; gradients w.r.t. the
input are computed on a throwaway tape with parameter gradients disabled, so
attacking never touches model state or materializes parameter grads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward
from .losses import ce_loss
from .models import Fixed, MultiBranchNet, forward, no_grad


@dataclass(frozen=True)
class AttackConfig:
    """l-infinity attack budget: radius, step size, iteration count."""

    eps_ball: float
    alpha: float
    steps: int
    random_start: bool = False
    norm: str = "linf"

    def __post_init__(self):
        if not (np.isfinite(self.eps_ball) and self.eps_ball >= 0.0):
            raise ValueError(f"attack: eps_ball must be >= 0, got {self.eps_ball}")
        if not (np.isfinite(self.alpha) and self.alpha > 0.0):
            raise ValueError(f"attack: alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"attack: steps must be >= 1, got {self.steps}")
        if self.norm != "linf":
            raise ValueError(f"attack: only the 'linf' norm is supported, got {self.norm!r}")


def project_linf(x_adv: np.ndarray, x_clean: np.ndarray, eps: float) -> np.ndarray:
    """Clamp the perturbation into [-eps, eps] and the result into [0, 1]."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_adv.shape != x_clean.shape:
        raise ValueError(
            f"project_linf: shapes {x_adv.shape} and {x_clean.shape} differ")
    delta = np.clip(x_adv - x_clean, -eps, eps)
    return np.clip(x_clean + delta, 0.0, 1.0)


def _check_box(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name}: inputs must lie in [0, 1]")
    return x


def _input_grad(net: MultiBranchNet, k: int, x: np.ndarray, y) -> np.ndarray:
    """d CE(f_k(x), y) / dx on a private tape, parameters held constant."""
    with no_grad(net):
        xt = Tensor(x, requires_grad=True)
        loss = ce_loss(forward(net, xt, Fixed(k)), y)
        backward(loss)
    return xt.grad


def fgsm(net: MultiBranchNet, k: int, x: np.ndarray, y, eps: float) -> np.ndarray:
    """One signed gradient step of size eps, clamped to the valid box."""
    x = _check_box("fgsm", x)
    g = _input_grad(net, k, x, y)
    if not np.all(np.isfinite(g)):
        raise ValueError("fgsm: non-finite input gradient")
    return project_linf(x + eps * np.sign(g), x, eps)


def pgd(net: MultiBranchNet, k: int, x: np.ndarray, y, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated signed steps against one fixed branch, projected every step."""
    x = _check_box("pgd", x)
    x_adv = _pgd_init(x, cfg, rng, "pgd")
    for step in range(cfg.steps):
        g = _input_grad(net, k, x_adv, y)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"pgd: non-finite input gradient at step {step}")
        x_adv = project_linf(x_adv + cfg.alpha * np.sign(g), x, cfg.eps_ball)
    return x_adv


def pgd_full_random(net: MultiBranchNet, x: np.ndarray, y, cfg: AttackConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """PGD against the deployed net: a fresh branch is drawn for every step.

    Each iteration starts from the previous step's perturbation, so gradient
    directions from different branches compound (and may conflict).
    """
    x = _check_box("pgd_full_random", x)
    if rng is None:
        raise ValueError("pgd_full_random: an rng is required for branch draws")
    x_adv = _pgd_init(x, cfg, rng, "pgd_full_random")
    for step in range(cfg.steps):
        k = int(rng.integers(net.num_branches))
        g = _input_grad(net, k, x_adv, y)
        if not np.all(np.isfinite(g)):
            raise ValueError(
                f"pgd_full_random: non-finite input gradient at step {step}")
        x_adv = project_linf(x_adv + cfg.alpha * np.sign(g), x, cfg.eps_ball)
    return x_adv


def _pgd_init(x: np.ndarray, cfg: AttackConfig,
              rng: np.random.Generator | None, name: str) -> np.ndarray:
    if not cfg.random_start:
        return x.copy()
    if rng is None:
        raise ValueError(f"{name}: random_start requires an rng")
    noise = rng.uniform(-cfg.eps_ball, cfg.eps_ball, size=x.shape)
    return project_linf(x + noise, x, cfg.eps_ball)


def transfer_perturb(net: MultiBranchNet, k_src: int, k_tgt: int,
                     x: np.ndarray, y, cfg: AttackConfig,
                     rng: np.random.Generator | None = None) -> float:
    """Attack branch k_src with PGD, then measure branch k_tgt's accuracy."""
    for name, k in (("source", k_src), ("target", k_tgt)):
        if not 0 <= k < net.num_branches:
            raise ValueError(f"transfer_perturb: {name} branch {k} out of range")
    x_adv = pgd(net, k_src, x, y, cfg, rng)
    with no_grad(net):
        logits = forward(net, Tensor(x_adv), Fixed(k_tgt)).data
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))
