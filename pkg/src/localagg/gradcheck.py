"""Randomized finite-difference checks of every analytic gradient in the package."""

from __future__ import annotations

import numpy as np

from .embedding import normalize, normalize_rows
from .encoder import EncoderParams, backward, forward, init_params
from .neighbors import NeighborSets
from .objective import (
    GradCheckReport,
    central_diff,
    chain_through_normalize,
    finite_diff_check,
    ir_grad_v,
    ir_loss,
    la_grad_v,
    la_loss,
    relative_error,
)

LOSS_THRESHOLD = 1e-4
ENCODER_THRESHOLD = 1e-3


def random_la_problem(rng: np.random.Generator, n_range=(10, 60), d_range=(2, 12)):
    """Random bank, query row index and neighbor sets with a guaranteed overlap."""
    n = int(rng.integers(*n_range))
    d = int(rng.integers(*d_range))
    rows = normalize_rows(rng.standard_normal((n, d)))
    i = int(rng.integers(n))
    k = int(rng.integers(1, n + 1))
    background = rng.choice(n, size=k, replace=False)
    background = np.union1d(background, [i])
    close = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
    close = np.union1d(close, [i])
    tau = float(rng.uniform(0.05, 1.0))
    return rows, i, NeighborSets(background, close), tau


def _la_sampler(rng):
    rows, i, sets, tau = random_la_problem(rng)
    v = normalize(rng.standard_normal(rows.shape[1]))
    return v, (rows, sets, tau)


def _ir_sampler(rng):
    rows, i, _, tau = random_la_problem(rng)
    v = normalize(rng.standard_normal(rows.shape[1]))
    return v, (rows, i, tau)


def _chain_sampler(rng):
    rows, i, sets, tau = random_la_problem(rng)
    z = rng.standard_normal(rows.shape[1]) * rng.uniform(0.5, 3.0)
    return z, (rows, sets, tau)


def check_la(trials: int = 100, h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    return finite_diff_check(
        lambda v, p: la_loss(v, p[1], p[0], p[2]).value,
        lambda v, p: la_grad_v(v, p[1], p[0], p[2]),
        trials, h, sampler=_la_sampler, seed=seed,
    )


def check_ir(trials: int = 100, h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    return finite_diff_check(
        lambda v, p: ir_loss(p[1], v, p[0], p[2]).value,
        lambda v, p: ir_grad_v(p[1], v, p[0], p[2]),
        trials, h, sampler=_ir_sampler, seed=seed,
    )


def check_chain(trials: int = 100, h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """LA loss composed with normalization, differentiated at the raw vector."""
    return finite_diff_check(
        lambda z, p: la_loss(normalize(z), p[1], p[0], p[2]).value,
        lambda z, p: chain_through_normalize(la_grad_v(normalize(z), p[1], p[0], p[2]), z),
        trials, h, sampler=_chain_sampler, seed=seed,
    )


def _flat(params: EncoderParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def _unflat(template: EncoderParams, flat: np.ndarray) -> EncoderParams:
    out, pos = [], 0
    for a in template.arrays():
        out.append(flat[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return EncoderParams(out[0::2], out[1::2])


def check_encoder_chain(trials: int = 100, h: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """LA loss through normalization and a small random MLP, w.r.t. every parameter."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        in_dim = int(rng.integers(2, 7))
        hidden = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 3)))]
        out_dim = int(rng.integers(2, 6))
        params = init_params([in_dim, *hidden, out_dim], int(rng.integers(2**31)))
        for b in params.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        x = rng.standard_normal(in_dim)
        rows, i, sets, tau = random_la_problem(rng, d_range=(out_dim, out_dim + 1))

        def loss(flat):
            z, _ = forward(_unflat(params, flat), x)
            return la_loss(normalize(z), sets, rows, tau).value

        z, cache = forward(params, x)
        g_z = chain_through_normalize(la_grad_v(normalize(z), sets, rows, tau), z)
        analytic = _flat(backward(params, cache, g_z))
        errors.append(relative_error(analytic, central_diff(loss, _flat(params), h)))
    return GradCheckReport(trials, max(errors), errors)


def run_all(trials: int = 100, seed: int = 0) -> dict[str, tuple[GradCheckReport, float]]:
    """Every check with its pass threshold."""
    return {
        "la_grad_v": (check_la(trials, 1e-5, seed), LOSS_THRESHOLD),
        "ir_grad_v": (check_ir(trials, 1e-5, seed), LOSS_THRESHOLD),
        "chain_through_normalize": (check_chain(trials, 1e-5, seed), LOSS_THRESHOLD),
        "encoder_chain": (check_encoder_chain(trials, 1e-4, seed), ENCODER_THRESHOLD),
    }
