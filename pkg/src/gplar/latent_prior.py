"""Causal factorization of the GP latent prior into Gaussian conditionals.

For a trajectory ``Z`` (``L x d_z``, row ``t`` is ``z_t``) with prior
``N(0, K ⊗ I)``, each step has

    z_t | z_{<t} ~ N(w_t^T z_{<t}, v_t I),
    w_t = K[<t,<t]^{-1} K[<t,t],   v_t = K[t,t] - K[t,<t] w_t,

and ``v_t`` equals the squared diagonal of ``chol(K)``. Time indices are
0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense_linalg import logdet_from_chol, solve_lower, solve_upper_t
from .errors import DegenerateConditional, ShapeError
from .kernels import GramMatrix

DEGENERACY_RTOL = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ConditionalLaw:
    """``z_t | z_{<t} ~ N(weights @ z_{<t}, variance * I)``."""

    weights: np.ndarray
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def _check_variance(t: int, variance: float, k_tt: float) -> None:
    if not variance >= DEGENERACY_RTOL * k_tt:
        raise DegenerateConditional(t, variance, k_tt)


def conditional_law(K: GramMatrix, t: int) -> ConditionalLaw:
    """Law of step ``t`` given steps ``0..t-1``.

    Uses the leading ``t x t`` block of the cached Cholesky factor, which
    is itself the Cholesky factor of ``K[:t, :t]``.
    """
    n = K.size
    if not 0 <= t < n:
        raise IndexError(f"step {t} out of range for a grid of length {n}")
    k_tt = float(K.K[t, t])
    if t == 0:
        _check_variance(0, k_tt, k_tt)
        return ConditionalLaw(np.zeros(0), k_tt)
    Lp = K.chol[:t, :t]
    v = solve_lower(Lp, K.K[t, :t])
    variance = k_tt - float(v @ v)
    _check_variance(t, variance, k_tt)
    return ConditionalLaw(solve_upper_t(Lp, v), variance)


def conditional_mean(law: ConditionalLaw, history) -> np.ndarray:
    """``weights @ history``; an empty history gives the zero vector."""
    H = np.asarray(history, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != law.weights.size:
        raise ShapeError(f"history shape {H.shape} does not match {law.weights.size} weights")
    return law.weights @ H


def conditional_weight_matrix(K: GramMatrix) -> tuple[np.ndarray, np.ndarray]:
    """All conditionals at once from the single Cholesky factor.

    Writing ``z = chol(K) eps`` as ``(I - W) z = diag(chol) eps`` gives a
    strictly lower ``W = I - diag(chol) chol^{-1}`` whose row ``t`` is
    ``w_t``, and variances ``diag(chol)**2``.
    """
    L = K.chol
    d = np.diag(L).copy()
    Linv = solve_lower(L, np.eye(K.size))
    W = np.eye(K.size) - d[:, None] * Linv
    W[np.triu_indices_from(W)] = 0.0
    variances = d * d
    for t in range(K.size):
        _check_variance(t, variances[t], K.K[t, t])
    return W, variances


def precompute_conditionals(K: GramMatrix) -> list[ConditionalLaw]:
    W, variances = conditional_weight_matrix(K)
    return [ConditionalLaw(W[t, :t].copy(), float(variances[t])) for t in range(K.size)]


def _as_trajectory(K: GramMatrix, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim < 2 or Z.shape[-2] != K.size:
        raise ShapeError(f"trajectory shape {Z.shape} does not match a grid of length {K.size}")
    if not np.all(np.isfinite(Z)):
        raise ShapeError("trajectory has non-finite entries")
    return Z


def chain_logdensity(K: GramMatrix, Z) -> float:
    """``sum_t log N(z_t; mu_t(z_{<t}), v_t I)``."""
    Z = _as_trajectory(K, Z)
    if Z.ndim != 2:
        raise ShapeError("chain_logdensity takes a single trajectory")
    laws = precompute_conditionals(K)
    d_z = Z.shape[1]
    total = 0.0
    for t, law in enumerate(laws):
        resid = Z[t] - conditional_mean(law, Z[:t])
        total += -0.5 * d_z * (_LOG_2PI + math.log(law.variance)) - 0.5 * float(resid @ resid) / law.variance
    return total


def joint_logdensity(K: GramMatrix, Z):
    """Log-density of ``N(0, K ⊗ I)`` at ``Z``.

    ``Z`` may carry leading batch dimensions (``... x L x d_z``); the
    result then has the batch shape.
    """
    Z = _as_trajectory(K, Z)
    L, d_z = Z.shape[-2:]
    batch = Z.shape[:-2]
    # stack every batch member's columns side by side: one triangular solve
    cols = np.moveaxis(Z.reshape(-1, L, d_z), 1, 0).reshape(L, -1)
    white = solve_lower(K.chol, cols)
    quad = np.einsum("ij,ij->j", white, white).reshape(-1, d_z).sum(axis=1)
    const = -0.5 * L * d_z * _LOG_2PI - 0.5 * d_z * logdet_from_chol(K.chol)
    out = const - 0.5 * quad
    if not batch:
        return float(out[0])
    return out.reshape(batch)
