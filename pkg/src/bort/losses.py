"""Training objective terms: cross-entropy, KL consistency, branch orthogonality.

Everything here is built from the autodiff primitives so gradients flow to
whatever inputs are tracked. Reciprocals are expressed as exp(-log(d)) on a
floored positive denominator, and batched row dot products use the
polarization identity, since the primitive set has no divide and only
full-tensor reductions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    absolute,
    add,
    exp,
    l2_norm,
    log,
    log_softmax,
    max_with_scalar,
    multiply,
    reduce_mean,
    reduce_sum,
    scale,
    subtract,
)

DEFAULT_EPS_NUM = 1e-8
KL_DIRECTIONS = ("adv_clean", "clean_adv")


@dataclass(frozen=True)
class LossWeights:
    """Weights for the KL term (lambda1) and the orthogonality term (lambda2)."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossTerms:
    """Per-term values of one composite loss evaluation, for logging."""

    clean: float
    kl: float
    bo: float
    total: float


def _check_eps_num(eps_num: float) -> float:
    eps_num = float(eps_num)
    if not 0.0 < eps_num <= 1e-6:
        raise ValueError(f"eps_num must be in (0, 1e-6], got {eps_num}")
    return eps_num


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def ce_loss(logits: Tensor, y) -> Tensor:
    """Mean cross-entropy of integer labels against N x C logits."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"ce_loss: logits must be 2-D, got shape {logits.shape}")
    n, c = logits.shape
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"ce_loss: labels must be integers, got dtype {y.dtype}")
    if y.shape != (n,):
        raise ValueError(f"ce_loss: labels shape {y.shape} does not match batch {n}")
    if np.any((y < 0) | (y >= c)):
        bad = int(y[(y < 0) | (y >= c)][0])
        raise ValueError(f"ce_loss: label {bad} out of range [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    picked = multiply(log_softmax(logits), Tensor(onehot))
    return scale(reduce_sum(picked), -1.0 / n)


def kl_div(logits_adv: Tensor, logits_clean: Tensor) -> Tensor:
    """Mean KL(softmax(logits_adv) || softmax(logits_clean)) over the batch.

    Gradients flow through both arguments.
    """
    logits_adv = _as_tensor(logits_adv)
    logits_clean = _as_tensor(logits_clean)
    if logits_adv.shape != logits_clean.shape:
        raise ValueError(
            f"kl_div: shapes {logits_adv.shape} and {logits_clean.shape} differ")
    if logits_adv.data.ndim != 2:
        raise ValueError(f"kl_div: logits must be 2-D, got {logits_adv.shape}")
    n = logits_adv.shape[0]
    la = log_softmax(logits_adv)
    lc = log_softmax(logits_clean)
    terms = multiply(exp(la), subtract(la, lc))
    return scale(reduce_sum(terms), 1.0 / n)


def _inverse(d: Tensor) -> Tensor:
    # 1/d for strictly positive d, via exp(-log d)
    return exp(scale(log(d), -1.0))


def cosine_abs(u: Tensor, v: Tensor, eps_num: float = DEFAULT_EPS_NUM) -> Tensor:
    """|cos| similarity of two vectors with a floored denominator, in [0, 1]."""
    eps_num = _check_eps_num(eps_num)
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ValueError(
            f"cosine_abs: expects equal-length vectors, got {u.shape} and {v.shape}")
    dot = reduce_sum(multiply(u, v))
    den = max_with_scalar(multiply(l2_norm(u), l2_norm(v)), eps_num)
    return multiply(absolute(dot), _inverse(den))


def _rows_abs_cos(a: Tensor, b: Tensor, eps_num: float) -> Tensor:
    # per-example |cos| between rows of two N x F tensors;
    # row dots via (||a+b||^2 - ||a-b||^2) / 4
    ns = l2_norm(add(a, b))
    nd = l2_norm(subtract(a, b))
    dots = scale(subtract(multiply(ns, ns), multiply(nd, nd)), 0.25)
    den = max_with_scalar(multiply(l2_norm(a), l2_norm(b)), eps_num)
    return multiply(absolute(dots), _inverse(den))


def bo_loss(current_feats: Tensor, prev_feats_list,
            eps_num: float = DEFAULT_EPS_NUM) -> Tensor:
    """Mean |cos| between current-branch features and each earlier branch.

    Earlier-branch features are treated as detached constants; gradients only
    reach ``current_feats``. An empty list yields exactly 0.
    """
    eps_num = _check_eps_num(eps_num)
    current_feats = _as_tensor(current_feats)
    if current_feats.data.ndim != 2:
        raise ValueError(
            f"bo_loss: features must be N x F, got shape {current_feats.shape}")
    prev = [_as_tensor(p).detach() for p in prev_feats_list]
    for p in prev:
        if p.shape != current_feats.shape:
            raise ValueError(
                f"bo_loss: previous features shape {p.shape} does not match "
                f"current {current_feats.shape}")
    if not prev:
        return Tensor(0.0)
    acc = None
    for p in prev:
        term = reduce_mean(_rows_abs_cos(current_feats, p, eps_num))
        acc = term if acc is None else add(acc, term)
    return scale(acc, 1.0 / len(prev))


def bort_loss(logits_clean: Tensor, logits_adv: Tensor, y,
              current_feats: Tensor, prev_feats_list,
              weights: LossWeights, *,
              eps_num: float = DEFAULT_EPS_NUM,
              kl_direction: str = "adv_clean",
              detach_clean: bool = False):
    """Composite objective: clean CE + lambda1 * KL + lambda2 * branch-orthogonality.

    Returns the scalar total (for backward) and a LossTerms record. The KL
    argument order follows ``kl_direction``; ``detach_clean`` cuts the clean
    logits out of the KL gradient.
    """
    if kl_direction not in KL_DIRECTIONS:
        raise ValueError(
            f"bort_loss: kl_direction must be one of {KL_DIRECTIONS}, "
            f"got {kl_direction!r}")
    clean_term = ce_loss(logits_clean, y)
    kl_clean = logits_clean.detach() if detach_clean else logits_clean
    if kl_direction == "adv_clean":
        kl_term = kl_div(logits_adv, kl_clean)
    else:
        kl_term = kl_div(kl_clean, logits_adv)
    total = add(clean_term, scale(kl_term, weights.lambda1))
    if len(prev_feats_list) > 0:
        bo_term = bo_loss(current_feats, prev_feats_list, eps_num)
        total = add(total, scale(bo_term, weights.lambda2))
        bo_val = float(bo_term.data)
    else:
        bo_val = 0.0
    record = LossTerms(
        clean=float(clean_term.data),
        kl=float(kl_term.data),
        bo=bo_val,
        total=float(total.data),
    )
    return total, record
