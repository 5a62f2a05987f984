from __future__ import annotations

import math

import numpy as np
import pytest

from asrlab.errors import DataError
from asrlab.loss import LossInput, rnnt_alpha_beta, rnnt_grad, rnnt_loss, rnnt_loss_and_grad

from .oracles import (
    finite_difference_grad,
    max_relative_error,
    path_sum_log_prob,
    random_log_softmax_lattice,
)


def uniform_lattice(t, u, v):
    return np.full((t, u + 1, v), -math.log(v))


def test_single_blank_lattice():
    lp = random_log_softmax_lattice(np.random.default_rng(0), 1, 0, 3)
    inp = LossInput(lp, [])
    assert rnnt_loss(inp) == pytest.approx(-lp[0, 0, 0], abs=1e-12)


def test_two_path_uniform_lattice():
    # T=2, U=1, V=2: two monotone paths, each of three transitions at
    # probability 1/2, so the total is log(2 * (1/2)^3) = -log 4.
    inp = LossInput(uniform_lattice(2, 1, 2), [1])
    assert rnnt_loss(inp) == pytest.approx(math.log(4.0), abs=1e-12)


def test_loss_matches_path_enumeration_3x2x3():
    rng = np.random.default_rng(7)
    lp = random_log_softmax_lattice(rng, 3, 2, 3)
    labels = [1, 2]
    inp = LossInput(lp, labels)
    assert rnnt_loss(inp) == pytest.approx(-path_sum_log_prob(lp, labels), abs=1e-9)


def test_loss_matches_path_enumeration_sweep():
    rng = np.random.default_rng(42)
    for t in range(1, 5):
        for u in range(0, 4):
            for v in range(2, 5):
                lp = random_log_softmax_lattice(rng, t, u, v)
                labels = rng.integers(1, v, size=u)
                inp = LossInput(lp, labels)
                got = rnnt_loss(inp)
                want = -path_sum_log_prob(lp, labels)
                assert got == pytest.approx(want, abs=1e-9), (t, u, v)


def test_forward_backward_totals_agree():
    rng = np.random.default_rng(3)
    for _ in range(25):
        t, u, v = rng.integers(1, 8), rng.integers(0, 6), rng.integers(2, 6)
        lp = random_log_softmax_lattice(rng, t, u, v)
        ab = rnnt_alpha_beta(LossInput(lp, rng.integers(1, v, size=u)))
        assert ab.alpha[0, 0] == 0.0
        assert abs(ab.total_log_prob - ab.backward_total) <= 1e-6


def test_perfect_lattice_loss_near_zero():
    # Probability ~1 along one designated path, -30 as the -inf surrogate.
    t_len, labels, v = 3, [2, 1], 4
    u_len = len(labels)
    lp = np.full((t_len, u_len + 1, v), -30.0)
    # Path: emit both labels at t=0, then blanks down the u=U column.
    lp[0, 0, labels[0]] = 0.0
    lp[0, 1, labels[1]] = 0.0
    lp[0, 2, 0] = 0.0
    lp[1, 2, 0] = 0.0
    lp[2, 2, 0] = 0.0
    assert abs(rnnt_loss(LossInput(lp, labels))) <= 1e-9


def test_loss_nonnegative_for_normalized_lattices():
    rng = np.random.default_rng(11)
    for _ in range(50):
        t, u, v = rng.integers(1, 6), rng.integers(0, 4), rng.integers(2, 5)
        lp = random_log_softmax_lattice(rng, t, u, v)
        assert rnnt_loss(LossInput(lp, rng.integers(1, v, size=u))) >= 0.0


def test_grad_single_blank():
    lp = random_log_softmax_lattice(np.random.default_rng(1), 1, 0, 3)
    g = rnnt_grad(LossInput(lp, []))
    assert g[0, 0, 0] == pytest.approx(-1.0, abs=1e-12)
    assert np.all(g[0, 0, 1:] == 0.0)


def test_grad_zero_off_path_entries():
    rng = np.random.default_rng(5)
    lp = random_log_softmax_lattice(rng, 4, 2, 5)
    labels = np.array([3, 1])
    g = rnnt_grad(LossInput(lp, labels))
    mask = np.zeros_like(lp, dtype=bool)
    mask[:, :, 0] = True
    mask[:, 0, labels[0]] = True
    mask[:, 1, labels[1]] = True
    assert np.all(g[~mask] == 0.0)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(20):
        t, u, v = rng.integers(1, 5), rng.integers(0, 4), rng.integers(2, 5)
        lp = random_log_softmax_lattice(rng, t, u, v)
        labels = rng.integers(1, v, size=u)
        g = rnnt_grad(LossInput(lp, labels))
        fd = finite_difference_grad(lambda x: rnnt_loss(LossInput(x, labels)), lp)
        assert max_relative_error(g, fd) <= 1e-4


def test_occupancy_mass_totals():
    # Every path has exactly T blanks and U emissions, so the summed
    # negative gradient (transition occupancy) must equal T + U.
    rng = np.random.default_rng(13)
    for _ in range(25):
        t, u, v = rng.integers(1, 7), rng.integers(0, 5), rng.integers(2, 6)
        lp = random_log_softmax_lattice(rng, t, u, v)
        g = rnnt_grad(LossInput(lp, rng.integers(1, v, size=u)))
        assert -g.sum() == pytest.approx(t + u, abs=1e-6)


def test_log_space_stability_at_floor():
    rng = np.random.default_rng(17)
    lp = np.clip(random_log_softmax_lattice(rng, 6, 4, 5) - 25.0, -30.0, 0.0)
    labels = rng.integers(1, 5, size=4)
    loss, grad = rnnt_loss_and_grad(LossInput(lp, labels))
    assert np.isfinite(loss)
    assert np.all(np.isfinite(grad))


def test_loss_input_validation():
    with pytest.raises(DataError):
        LossInput(np.zeros((0, 1, 2)), [])  # empty lattice
    with pytest.raises(DataError):
        LossInput(np.zeros((2, 2, 3)), [0])  # blank in labels
    with pytest.raises(DataError):
        LossInput(np.zeros((2, 2, 3)), [1, 2])  # length mismatch
    bad = np.zeros((2, 1, 3))
    with pytest.raises(DataError):
        LossInput(bad, []).check_normalized()
