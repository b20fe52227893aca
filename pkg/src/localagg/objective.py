"""Local aggregation loss, the instance-recognition warm-start loss, and their gradients.

The gradients are taken with respect to the current feature only; bank
rows are constants within a step. Batched variants operate on boolean
(B, N) neighbor masks so every ablation mode shares one code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding import DEFAULT_TAU, as_rows, check_tau, index_set, logsumexp, similarity_row
from .errors import DimensionMismatchError, EmptyIntersectionError, IndexOutOfRangeError, ZeroNormError
from .neighbors import NeighborSets


@dataclass(frozen=True)
class LossValue:
    value: float
    log_sb: float | None = None
    log_scb: float | None = None

    def __float__(self) -> float:
        return self.value


def _split_sets(sets: NeighborSets, n: int) -> tuple[np.ndarray, np.ndarray]:
    background = index_set(sets.background, n)
    inter = np.intersect1d(background, index_set(sets.close, n), assume_unique=True)
    if inter.size == 0:
        raise EmptyIntersectionError("close and background neighbor sets do not intersect")
    return background, inter


def la_loss(v, sets: NeighborSets, bank, tau: float = DEFAULT_TAU) -> LossValue:
    """``log sum_{B} s_j - log sum_{C & B} s_j`` with ``s_j = exp(bank_j . v / tau)``.

    The softmax normalizer cancels, so rows outside B never matter.
    """
    rows = as_rows(bank)
    tau = check_tau(tau)
    background, inter = _split_sets(sets, rows.shape[0])
    logits = rows[background] @ np.asarray(v, dtype=np.float64) / tau
    in_close = np.isin(background, inter, assume_unique=True)
    log_sb = float(logsumexp(logits))
    log_scb = float(logsumexp(logits[in_close]))
    return LossValue(max(log_sb - log_scb, 0.0), log_sb, log_scb)


def la_grad_v(v, sets: NeighborSets, bank, tau: float = DEFAULT_TAU) -> np.ndarray:
    rows = as_rows(bank)
    tau = check_tau(tau)
    background, inter = _split_sets(sets, rows.shape[0])
    sub = rows[background]
    logits = sub @ np.asarray(v, dtype=np.float64) / tau
    in_close = np.isin(background, inter, assume_unique=True)
    w = np.exp(logits - logsumexp(logits))
    u = np.zeros_like(w)
    u[in_close] = np.exp(logits[in_close] - logsumexp(logits[in_close]))
    return (w - u) @ sub / tau


def ir_loss(i: int, v, bank, tau: float = DEFAULT_TAU) -> LossValue:
    """``-log P(i | v)`` with the exact softmax over every bank row."""
    rows = as_rows(bank)
    if not 0 <= i < rows.shape[0]:
        raise IndexOutOfRangeError(f"index {i} outside [0, {rows.shape[0]})")
    logits = similarity_row(v, rows) / check_tau(tau)
    return LossValue(float(logsumexp(logits) - logits[i]))


def ir_grad_v(i: int, v, bank, tau: float = DEFAULT_TAU) -> np.ndarray:
    rows = as_rows(bank)
    if not 0 <= i < rows.shape[0]:
        raise IndexOutOfRangeError(f"index {i} outside [0, {rows.shape[0]})")
    tau = check_tau(tau)
    logits = similarity_row(v, rows) / tau
    p = np.exp(logits - logsumexp(logits))
    return (p @ rows - rows[i]) / tau


def chain_through_normalize(g, z) -> np.ndarray:
    """Map a gradient at ``v = z / ||z||`` back to a gradient at ``z``."""
    g = np.asarray(g, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if g.shape != z.shape:
        raise DimensionMismatchError(f"gradient shape {g.shape} does not match z shape {z.shape}")
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ZeroNormError("cannot differentiate through normalization at zero")
    v = z / norm
    return (g - np.sum(g * v, axis=-1, keepdims=True) * v) / norm


# --------------------------------------------------------------------------
# batched forms used by the trainer


def la_loss_grad_batch(v: np.ndarray, sims: np.ndarray, background: np.ndarray, close: np.ndarray,
                       rows: np.ndarray, tau: float):
    """Per-sample LA losses and gradients for a batch.

    ``sims`` is (B, N) dot products against ``rows``; ``background`` and
    ``close`` are (B, N) masks. Samples whose close/background masks do not
    intersect get NaN loss and zero gradient.
    """
    inter = background & close
    valid = inter.any(axis=1)
    logits = sims / tau
    shift = np.max(np.where(background, logits, -np.inf), axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(logits - shift)
    e_b = np.where(background, e, 0.0)
    e_cb = np.where(inter, e, 0.0)
    s_b = e_b.sum(axis=1)
    s_cb = e_cb.sum(axis=1)
    safe_cb = np.where(valid, s_cb, 1.0)
    with np.errstate(divide="ignore"):
        losses = np.where(valid, np.maximum(np.log(s_b) - np.log(safe_cb), 0.0), np.nan)
    weights = e_b / np.where(s_b > 0, s_b, 1.0)[:, None] - e_cb / safe_cb[:, None]
    weights[~valid] = 0.0
    grads = weights @ rows / tau
    return losses, grads, valid


def ir_loss_grad_batch(indices: np.ndarray, sims: np.ndarray, rows: np.ndarray, tau: float):
    logits = sims / tau
    lse = logsumexp(logits, axis=1)
    p = np.exp(logits - lse[:, None])
    losses = lse - logits[np.arange(len(indices)), indices]
    grads = (p @ rows - rows[indices]) / tau
    return losses, grads


# --------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    trials: int
    max_rel_error: float
    rel_errors: list[float]

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold


def central_diff(loss_fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        f_plus = float(loss_fn(x))
        flat[j] = orig - h
        f_minus = float(loss_fn(x))
        flat[j] = orig
        gflat[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``: error relative to the gradient scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def finite_diff_check(loss_fn, grad_fn, trials: int = 1, h: float = 1e-5, sampler=None,
                      dim: int = 4, seed: int = 0) -> GradCheckReport:
    """Compare ``grad_fn`` with central differences of ``loss_fn`` over random trials.

    ``sampler(rng)`` returns ``(x, problem)`` for one trial and both
    callables are invoked as ``fn(x, problem)``. Without a sampler each
    trial draws a standard-normal ``x`` of length ``dim`` and passes
    ``problem=None``.
    """
    if trials < 1 or h <= 0:
        raise ValueError("need trials >= 1 and h > 0")
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        if sampler is None:
            x, problem = rng.standard_normal(dim), None
        else:
            x, problem = sampler(rng)
        numeric = central_diff(lambda y: loss_fn(y, problem), x, h)
        errors.append(relative_error(grad_fn(x, problem), numeric))
    return GradCheckReport(trials, max(errors), errors)
