"""Diagonal posterior, KL to the correlated GP prior, and the beta-ELBO."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense_linalg import inverse_diag_from_chol, logdet_from_chol, solve_lower
from .errors import ShapeError
from .kernels import GramMatrix
from .latent_prior import joint_logdensity

LOGVAR_CLAMP = 30.0


@dataclass(frozen=True)
class DiagonalPosterior:
    """``q(z) = prod_t N(z_t; mu_t, diag(exp(logvar_t)))``; logvar clamped to [-30, 30]."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        lv = np.atleast_2d(np.asarray(self.logvar, dtype=np.float64))
        if mu.shape != lv.shape:
            raise ShapeError(f"mu {mu.shape} and logvar {lv.shape} differ")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
            raise ShapeError("posterior parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "logvar", np.clip(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape


def kl_to_gp_prior(q: DiagonalPosterior, K: GramMatrix) -> float:
    """``KL(q || N(0, K ⊗ I))`` in nats for the whole trajectory.

    Per latent coordinate ``j``: trace term ``sum_t [K^{-1}]_tt s_tj``,
    Mahalanobis term ``||chol^{-1} mu_j||^2``, and ``logdet K`` once per
    coordinate.
    """
    L, d_z = q.shape
    if L != K.size:
        raise ShapeError(f"posterior has {L} steps, prior has {K.size}")
    kinv_diag = inverse_diag_from_chol(K.chol)
    trace = float(kinv_diag @ q.var.sum(axis=1))
    white = solve_lower(K.chol, q.mu)
    maha = float(np.sum(white * white))
    logdet = logdet_from_chol(K.chol)
    return 0.5 * (trace + maha - L * d_z + d_z * logdet - float(q.logvar.sum()))


def kl_per_token(q: DiagonalPosterior, K: GramMatrix) -> float:
    return kl_to_gp_prior(q, K) / q.shape[0]


def kl_isotropic_special_case(q: DiagonalPosterior, sigma2: float) -> float:
    """Closed-form ``KL(q || N(0, sigma2 I))``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    s = q.var
    return 0.5 * float(np.sum((s + q.mu**2) / sigma2 - 1.0 - q.logvar + math.log(sigma2)))


def kl_monte_carlo(q: DiagonalPosterior, K: GramMatrix, n: int, rng: np.random.Generator, chunk: int = 10_000):
    """Monte-Carlo ``E_q[log q - log p]`` with its standard error."""
    L, d_z = q.shape
    sd = np.exp(0.5 * q.logvar)
    logq_const = -0.5 * float(np.sum(math.log(2 * math.pi) + q.logvar))
    vals = []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        eps = rng.standard_normal((m, L, d_z))
        z = q.mu + sd * eps
        logq = logq_const - 0.5 * np.sum(eps * eps, axis=(1, 2))
        vals.append(logq - joint_logdensity(K, z))
        done += m
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class KlCap:
    cap: float = math.inf

    def __post_init__(self):
        if not self.cap > 0:
            raise ValueError("KL cap must be positive")


def kl_capped(kl_tok: float, cap: KlCap | float) -> float:
    c = cap.cap if isinstance(cap, KlCap) else float(cap)
    return min(kl_tok, c)


@dataclass(frozen=True)
class BetaSchedule:
    """Linear warm-up to ``beta_max``, then a multiplicative controller.

    After warm-up, ``beta <- beta * exp(adapt_rate * (kl_tok - kl_target))``,
    clamped to ``[beta_min, beta_max]``.
    """

    beta_max: float = 1.0
    warmup_steps: int = 0
    kl_target: float = 1.0
    adapt_rate: float = 0.01
    beta_min: float = 1e-4

    def __post_init__(self):
        if not (self.beta_max > 0 and self.beta_min > 0 and self.beta_min <= self.beta_max):
            raise ValueError("need 0 < beta_min <= beta_max")
        if self.warmup_steps < 0 or self.adapt_rate < 0 or not self.kl_target > 0:
            raise ValueError("warmup_steps and adapt_rate must be >= 0, kl_target > 0")

    def clamp(self, beta: float) -> float:
        return min(max(beta, self.beta_min), self.beta_max)


def beta_step(sched: BetaSchedule, step: int, current_beta: float, observed_kl_tok: float) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < sched.warmup_steps:
        return sched.clamp(sched.beta_max * step / sched.warmup_steps)
    return sched.clamp(current_beta * math.exp(sched.adapt_rate * (observed_kl_tok - sched.kl_target)))


def elbo(loglik_per_token: float, kl_tok: float, beta: float, cap: KlCap | float = math.inf) -> tuple[float, float]:
    """Return ``(elbo_pure, loss_train)`` per token.

    ``loss_train = -(ll - beta * min(kl, cap))``.
    """
    elbo_pure = loglik_per_token - kl_tok
    loss = -(loglik_per_token - beta * kl_capped(kl_tok, cap))
    return elbo_pure, loss
