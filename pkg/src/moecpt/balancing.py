"""Load balancing for top-k routing.

Penalty balancing adds an auxiliary load loss and a router z-loss to the
training objective. Sinkhorn balancing rescales the token/expert plan
``exp(logits)`` so rows sum to 1 and columns sum to T/E, and top-k
selection is then made on the rescaled plan.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import numeric_core as nc
from .errors import ConfigError
from .numeric_core import Matrix

if TYPE_CHECKING:
    from .moe_layer import RoutingOutcome

DEFAULT_AUX_COEFF = 0.01
DEFAULT_Z_COEFF = 0.001
DEFAULT_SINKHORN_TOLERANCE = 0.01
DEFAULT_SINKHORN_MAX_ITERATIONS = 64


@dataclass(frozen=True)
class PenaltyTerms:
    aux_loss: float
    z_loss: float
    combined: float


@dataclass(frozen=True)
class SinkhornResult:
    adjusted: np.ndarray  # transport plan, T x E
    iterations: int
    final_violation: float
    converged: bool


def expert_fractions(selected: np.ndarray, num_experts: int) -> np.ndarray:
    """Share of top-k slots held by each expert; sums to 1 for any k."""
    selected = np.asarray(selected)
    if selected.size == 0:
        raise ConfigError("aux loss needs at least one token")
    counts = np.bincount(selected.ravel(), minlength=num_experts).astype(np.float64)
    return counts / selected.size


def aux_loss_term(probs: Matrix, selected: np.ndarray, num_experts: int) -> Matrix:
    """E * sum_i f_i * P_i as a tape node; f is a constant (no gradient)."""
    f = expert_fractions(selected, num_experts)
    mean_p = nc.mean_rows(probs)
    return nc.scale(nc.sum_all(nc.mul(mean_p, nc.const(f[None, :]))), float(num_experts))


def aux_loss(outcome: "RoutingOutcome", num_experts: int) -> float:
    probs = Matrix(outcome.raw_probs)
    return aux_loss_term(probs, outcome.selected, num_experts).item()


def z_loss_term(logits: Matrix) -> Matrix:
    """Mean squared log-sum-exp of the router logits."""
    return nc.mean_all(nc.square(nc.logsumexp_rows(logits)))


def z_loss(raw_logits) -> float:
    m = raw_logits if isinstance(raw_logits, Matrix) else Matrix(raw_logits)
    return z_loss_term(m).item()


def penalty_terms(outcome: "RoutingOutcome", num_experts: int,
                  aux_coeff: float = DEFAULT_AUX_COEFF,
                  z_coeff: float = DEFAULT_Z_COEFF) -> PenaltyTerms:
    a = aux_loss(outcome, num_experts)
    z = z_loss(outcome.logits)
    return PenaltyTerms(a, z, aux_coeff * a + z_coeff * z)


def _violation(plan: np.ndarray, col_target: float) -> float:
    row_err = np.abs(plan.sum(axis=1) - 1.0).max()
    col_err = np.abs(plan.sum(axis=0) - col_target).max() / col_target
    return float(max(row_err, col_err))


def sinkhorn_balance(raw_logits, tolerance: float = DEFAULT_SINKHORN_TOLERANCE,
                     max_iterations: int = DEFAULT_SINKHORN_MAX_ITERATIONS) -> SinkhornResult:
    """Sinkhorn-Knopp scaling of ``exp(raw_logits)``.

    Rows are normalised to 1 and columns to T/E, alternately, until both
    marginals are within ``tolerance`` of their targets (measured relative
    to the target sum). Each sweep ends on a row normalisation so rows are
    always exact. If ``max_iterations`` sweeps do not converge the last
    iterate is returned with ``converged=False``.
    """
    logits = raw_logits.data if isinstance(raw_logits, Matrix) else np.asarray(raw_logits, float)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
        raise ConfigError(f"sinkhorn needs a non-empty T x E matrix, got {logits.shape}")
    if tolerance <= 0:
        raise ConfigError("sinkhorn tolerance must be positive")
    t, e = logits.shape
    col_target = t / e
    # subtracting the row max is itself a row scaling
    plan = np.exp(logits - logits.max(axis=1, keepdims=True))
    plan /= plan.sum(axis=1, keepdims=True)

    it = 0
    viol = _violation(plan, col_target)
    tiny = np.finfo(np.float64).tiny
    while viol > tolerance and it < max_iterations:
        plan *= col_target / np.maximum(plan.sum(axis=0, keepdims=True), tiny)
        plan /= plan.sum(axis=1, keepdims=True)
        it += 1
        viol = _violation(plan, col_target)
    return SinkhornResult(plan, it, viol, viol <= tolerance)
