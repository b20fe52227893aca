import math

import numpy as np
import pytest

from localagg.embedding import normalize, set_prob
from localagg.errors import EmptyIntersectionError, IndexOutOfRangeError, ZeroNormError
from localagg.gradcheck import check_chain, check_ir, check_la, random_la_problem
from localagg.neighbors import NeighborSets
from localagg.objective import (
    central_diff,
    chain_through_normalize,
    finite_diff_check,
    ir_grad_v,
    ir_loss,
    ir_loss_grad_batch,
    la_grad_v,
    la_loss,
    la_loss_grad_batch,
    relative_error,
)

from conftest import random_bank

BANK3 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


def test_la_loss_zero_when_close_covers_background(rng):
    bank = random_bank(rng, 10, 4)
    v = normalize(rng.standard_normal(4))
    sets = NeighborSets(np.array([1, 4, 7]), np.arange(10))
    assert la_loss(v, sets, bank).value == 0.0
    np.testing.assert_allclose(la_grad_v(v, sets, bank), 0.0, atol=1e-15)


def test_la_loss_scalar_example():
    e = math.e
    expected = math.log(e + 1 + 1 / e) - math.log(e)
    got = la_loss([1.0, 0.0], NeighborSets(np.array([0, 1, 2]), np.array([0])), BANK3, tau=1.0)
    assert got.value == pytest.approx(expected, abs=1e-12)
    # the quoted four-digit figure is off by 5e-5; the closed form above is exact
    assert got.value == pytest.approx(0.40766, abs=1e-4)
    assert got.log_sb == pytest.approx(math.log(4.086161), abs=1e-6)


def test_la_loss_matches_set_probability_composition(rng):
    for _ in range(50):
        rows, i, sets, tau = random_la_problem(rng)
        v = normalize(rng.standard_normal(rows.shape[1]))
        inter = np.intersect1d(sets.background, sets.close)
        oracle = -math.log(set_prob(inter, v, rows, tau) / set_prob(sets.background, v, rows, tau))
        assert la_loss(v, sets, rows, tau).value == pytest.approx(oracle, abs=1e-9)


def test_la_loss_nonnegative_and_decomposition(rng):
    for _ in range(100):
        rows, i, sets, tau = random_la_problem(rng)
        v = normalize(rng.standard_normal(rows.shape[1]))
        assert la_loss(v, sets, rows, tau).value >= 0.0
        inter = np.intersect1d(sets.background, sets.close)
        outside = np.setdiff1d(sets.background, sets.close)
        p_b = set_prob(sets.background, v, rows, tau)
        assert abs(p_b - set_prob(inter, v, rows, tau) - set_prob(outside, v, rows, tau)) < 1e-12


def test_denominator_cancels(rng):
    rows, i, sets, tau = random_la_problem(rng, n_range=(20, 21))
    v = normalize(rng.standard_normal(rows.shape[1]))
    base = la_loss(v, sets, rows, tau).value
    extra = random_bank(rng, 500, rows.shape[1])
    assert abs(la_loss(v, sets, np.vstack([rows, extra]), tau).value - base) < 1e-12


def test_empty_intersection_raises():
    with pytest.raises(EmptyIntersectionError):
        la_loss([1.0, 0.0], NeighborSets(np.array([0, 1]), np.array([2])), BANK3)
    with pytest.raises(EmptyIntersectionError):
        la_grad_v([1.0, 0.0], NeighborSets(np.array([0]), np.array([1])), BANK3)


def test_la_grad_matches_finite_differences():
    report = check_la(trials=30, seed=1)
    assert report.max_rel_error < 1e-4


@pytest.mark.parametrize("tau", [0.2, 0.1])
def test_la_grad_temperature_scaling(rng, tau):
    bank = random_bank(rng, 50, 8)
    v = normalize(rng.standard_normal(8))
    sets = NeighborSets(np.arange(0, 50, 2), np.arange(0, 20))
    g = la_grad_v(v, sets, bank, tau)
    fd = central_diff(lambda x: la_loss(x, sets, bank, tau).value, v, 1e-5)
    assert relative_error(g, fd) < 1e-4


def test_chain_through_normalize_examples(rng):
    z = np.array([3.0, 4.0])
    np.testing.assert_allclose(chain_through_normalize(2.5 * normalize(z), z), 0.0, atol=1e-15)
    v = normalize(rng.standard_normal(5))
    g = rng.standard_normal(5)
    g -= (g @ v) * v
    np.testing.assert_allclose(chain_through_normalize(g, v), g, atol=1e-15)
    with pytest.raises(ZeroNormError):
        chain_through_normalize([1.0, 0.0], [0.0, 0.0])


def test_chain_orthogonal_and_matches_fd(rng):
    for _ in range(20):
        z = rng.standard_normal(6) * 2
        g = rng.standard_normal(6)
        assert abs(chain_through_normalize(g, z) @ normalize(z)) < 1e-8
    assert check_chain(trials=30, seed=2).max_rel_error < 1e-4


def test_ir_loss_examples():
    v = normalize([1.0, 1.0, 0.0])
    assert ir_loss(2, v, np.tile(v, (6, 1))).value == pytest.approx(math.log(6), abs=1e-12)
    assert ir_loss(0, [1.0, 0.0], BANK3[:2], 1.0).value == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert ir_loss(0, [1.0, 0.0], BANK3[:2], 1.0).value == pytest.approx(0.313262, abs=1e-6)
    with pytest.raises(IndexOutOfRangeError):
        ir_loss(5, [1.0, 0.0], BANK3)


def test_ir_grad_matches_finite_differences():
    assert check_ir(trials=30, seed=3).max_rel_error < 1e-4
    with pytest.raises(IndexOutOfRangeError):
        ir_grad_v(-1, [1.0, 0.0], BANK3)


def test_finite_diff_check_constant_loss():
    report = finite_diff_check(lambda x, p: 3.0, lambda x, p: np.zeros_like(x), trials=5)
    assert report.max_rel_error == 0.0


def test_batched_forms_agree_with_scalar_forms(rng):
    rows = random_bank(rng, 40, 5)
    v = random_bank(rng, 6, 5)
    idx = np.array([0, 3, 7, 11, 20, 39])
    sims = v @ rows.T
    background = rng.uniform(size=sims.shape) < 0.5
    close = rng.uniform(size=sims.shape) < 0.3
    background[np.arange(6), idx] = close[np.arange(6), idx] = True
    close[5] = False  # forces an empty intersection in the last row
    losses, grads, valid = la_loss_grad_batch(v, sims, background, close, rows, 0.07)
    assert valid.tolist() == [True] * 5 + [False]
    for r in range(5):
        sets = NeighborSets(np.flatnonzero(background[r]), np.flatnonzero(close[r]))
        assert losses[r] == pytest.approx(la_loss(v[r], sets, rows, 0.07).value, abs=1e-12)
        np.testing.assert_allclose(grads[r], la_grad_v(v[r], sets, rows, 0.07), atol=1e-12)
    assert np.isnan(losses[5]) and not grads[5].any()

    ir_l, ir_g = ir_loss_grad_batch(idx, sims, rows, 0.07)
    for r, i in enumerate(idx):
        assert ir_l[r] == pytest.approx(ir_loss(i, v[r], rows, 0.07).value, abs=1e-12)
        np.testing.assert_allclose(ir_g[r], ir_grad_v(i, v[r], rows, 0.07), atol=1e-12)
