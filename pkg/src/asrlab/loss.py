"""Transduction-lattice loss: log-space forward-backward and gradients.

The lattice is the T x (U+1) grid of (frame, emitted-prefix) states.
With ``blank(t, u)`` and ``emit(t, u)`` the log-probabilities of the
blank / next-label transitions:

    alpha(t, u) = logsumexp(alpha(t-1, u) + blank(t-1, u),
                            alpha(t, u-1) + emit(t, u-1))
    beta(t, u)  = logsumexp(beta(t+1, u) + blank(t, u),
                            beta(t, u+1) + emit(t, u))
    total       = alpha(T-1, U) + blank(T-1, U) = beta(0, 0)

All arithmetic is double precision regardless of model precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

BLANK = 0


@dataclass
class LossInput:
    """Log-softmax lattice (T x (U+1) x V) plus the non-blank label row."""

    log_probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.log_probs.ndim != 3:
            raise DataError(f"lattice must be 3-D, got shape {self.log_probs.shape}")
        t, u1, v = self.log_probs.shape
        if t < 1:
            raise DataError("empty lattice: T must be >= 1")
        if self.labels.ndim != 1 or len(self.labels) != u1 - 1:
            raise DataError(
                f"labels length {self.labels.shape} inconsistent with lattice U+1={u1}"
            )
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() >= v):
            raise DataError("labels must be non-blank vocabulary indices in [1, V)")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.log_probs.shape

    def check_normalized(self, tol: float = 1e-5) -> None:
        slack = np.abs(_logsumexp_last(self.log_probs))
        if slack.max() > tol:
            raise DataError(f"lattice rows not log-softmax normalized (max |lse| {slack.max():.2e})")


@dataclass
class AlphaBeta:
    alpha: np.ndarray
    beta: np.ndarray
    total_log_prob: float

    @property
    def backward_total(self) -> float:
        return float(self.beta[0, 0])


def _logsumexp_last(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def _transition_lattices(inp: LossInput) -> tuple[np.ndarray, np.ndarray]:
    """Return (blank, emit) log-prob grids of shapes (T, U+1) and (T, U)."""
    t, u1, _ = inp.log_probs.shape
    blank = inp.log_probs[:, :, BLANK]
    u = u1 - 1
    if u:
        emit = inp.log_probs[:, np.arange(u), inp.labels]
    else:
        emit = np.zeros((t, 0))
    return blank, emit


def rnnt_alpha_beta(inp: LossInput) -> AlphaBeta:
    """Forward-backward over the lattice; totals agree within 1e-6."""
    t_len, u1, _ = inp.log_probs.shape
    u_len = u1 - 1
    blank, emit = _transition_lattices(inp)

    # Row recurrence along u is a log-space scan; with c(u) the running
    # sum of emit log-probs it reduces to logaddexp.accumulate.
    alpha = np.empty((t_len, u1))
    alpha[0] = np.concatenate([[0.0], np.cumsum(emit[0])]) if u_len else 0.0
    for t in range(1, t_len):
        horiz = alpha[t - 1] + blank[t - 1]
        if u_len:
            c = np.concatenate([[0.0], np.cumsum(emit[t])])
            alpha[t] = np.logaddexp.accumulate(horiz - c) + c
        else:
            alpha[t] = horiz
    total = float(alpha[t_len - 1, u_len] + blank[t_len - 1, u_len])

    beta = np.empty((t_len, u1))
    if u_len:
        tail = np.concatenate([np.cumsum(emit[t_len - 1][::-1])[::-1], [0.0]])
        beta[t_len - 1] = blank[t_len - 1, u_len] + tail
    else:
        beta[t_len - 1] = blank[t_len - 1, u_len]
    for t in range(t_len - 2, -1, -1):
        horiz = beta[t + 1] + blank[t]
        if u_len:
            c = np.concatenate([np.cumsum(emit[t][::-1])[::-1], [0.0]])
            beta[t] = np.logaddexp.accumulate((horiz - c)[::-1])[::-1] + c
        else:
            beta[t] = horiz
    return AlphaBeta(alpha=alpha, beta=beta, total_log_prob=total)


def rnnt_loss(inp: LossInput) -> float:
    """Negative log-probability of the label sequence under the lattice."""
    return -rnnt_alpha_beta(inp).total_log_prob


def rnnt_grad(inp: LossInput) -> np.ndarray:
    """d(loss) / d(log_probs), nonzero only at blank and next-label entries."""
    return rnnt_loss_and_grad(inp)[1]


def rnnt_loss_and_grad(inp: LossInput) -> tuple[float, np.ndarray]:
    """Loss and its lattice gradient in one forward-backward pass.

    Occupancy form: -grad(t, u, k) = exp(alpha(t, u) + lp(t, u, k)
    + beta_succ - total) where beta_succ routes through the successor
    state of transition k. The sum of -grad over the lattice is T + U
    (every path has exactly T blanks and U emissions).
    """
    ab = rnnt_alpha_beta(inp)
    t_len, u1, _ = inp.log_probs.shape
    u_len = u1 - 1
    blank, emit = _transition_lattices(inp)
    total = ab.total_log_prob

    # Successor of a blank at (T-1, u) exists only for u == U (terminal).
    beta_down = np.full((t_len, u1), -np.inf)
    beta_down[: t_len - 1] = ab.beta[1:]
    beta_down[t_len - 1, u_len] = 0.0

    grad = np.zeros_like(inp.log_probs)
    grad[:, :, BLANK] = -np.exp(ab.alpha + blank + beta_down - total)
    if u_len:
        occ_emit = -np.exp(ab.alpha[:, :-1] + emit + ab.beta[:, 1:] - total)
        grad[:, np.arange(u_len), inp.labels] = occ_emit
    return -total, grad
