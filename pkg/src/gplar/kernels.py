"""Stationary covariance kernels on [0, 1] and jittered Gram matrices.

Lengthscale and variance live on an unconstrained scale and are mapped
through softplus. The diagonal of a Gram matrix carries two separate
additions: a *relative nugget* ``variance * nugget_rel`` that belongs to
the model, and an absolute *jitter* that only exists to keep Cholesky
stable (default ``1e-6 * variance``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dense_linalg import cholesky
from .errors import InvalidKernelSpec, NotPositiveDefinite

FAMILIES = ("rbf", "matern12", "matern32", "matern52", "sm")
DEFAULT_JITTER_REL = 1e-6
_SOFTPLUS_LINEAR = 30.0


def softplus(x):
    """``log(1 + exp(x))``, returning ``x`` itself above 30."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > _SOFTPLUS_LINEAR, x, np.log1p(np.exp(np.minimum(x, _SOFTPLUS_LINEAR))))
    return out.item() if out.ndim == 0 else out


def softplus_grad(x):
    """Derivative of softplus, i.e. the logistic sigmoid."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return out.item() if out.ndim == 0 else out


def inv_softplus(y: float) -> float:
    if not y > 0:
        raise InvalidKernelSpec(f"softplus output must be positive, got {y}")
    if y > _SOFTPLUS_LINEAR:
        return float(y)
    return float(y + math.log(-math.expm1(-y)))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters on the unconstrained scale.

    ``jitter_abs=None`` means the default ``1e-6 * variance``. Spectral
    mixture components are ``(weight, mean frequency, scale)`` triples;
    the SM kernel ignores the lengthscale.
    """

    family: str = "rbf"
    raw_lengthscale: float = 0.0
    raw_variance: float = 0.0
    nugget_rel: float = 0.0
    jitter_abs: float | None = None
    sm_weights: tuple[float, ...] = ()
    sm_means: tuple[float, ...] = ()
    sm_scales: tuple[float, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidKernelSpec(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        for name in ("raw_lengthscale", "raw_variance", "nugget_rel"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidKernelSpec(f"{name} must be finite")
        if self.nugget_rel < 0:
            raise InvalidKernelSpec("nugget_rel must be >= 0")
        if self.jitter_abs is not None and not (math.isfinite(self.jitter_abs) and self.jitter_abs >= 0):
            raise InvalidKernelSpec("jitter_abs must be finite and >= 0")
        if self.family == "sm":
            w, m, s = self.sm_weights, self.sm_means, self.sm_scales
            if not w or not (len(w) == len(m) == len(s)):
                raise InvalidKernelSpec("spectral mixture needs equal-length, non-empty weights/means/scales")
            if not all(math.isfinite(v) for v in (*w, *m, *s)):
                raise InvalidKernelSpec("spectral mixture parameters must be finite")
            if any(v < 0 for v in w):
                raise InvalidKernelSpec("spectral mixture weights must be >= 0")

    @classmethod
    def from_constrained(cls, family: str = "rbf", lengthscale: float = 1.0, variance: float = 1.0, **kw) -> "KernelSpec":
        return cls(family=family, raw_lengthscale=inv_softplus(lengthscale), raw_variance=inv_softplus(variance), **kw)

    @property
    def lengthscale(self) -> float:
        return softplus(self.raw_lengthscale)

    @property
    def variance(self) -> float:
        return softplus(self.raw_variance)

    @property
    def jitter(self) -> float:
        if self.jitter_abs is None:
            return DEFAULT_JITTER_REL * self.variance
        return self.jitter_abs

    @property
    def diagonal_addition(self) -> float:
        return self.variance * self.nugget_rel + self.jitter

    def with_raw(self, raw_lengthscale: float, raw_variance: float) -> "KernelSpec":
        return replace(self, raw_lengthscale=float(raw_lengthscale), raw_variance=float(raw_variance))


def constrain(spec: KernelSpec) -> tuple[float, float]:
    """Return ``(lengthscale, variance)`` after softplus."""
    return spec.lengthscale, spec.variance


def _stationary(spec: KernelSpec, tau: np.ndarray) -> np.ndarray:
    ell, var = constrain(spec)
    if spec.family == "rbf":
        return var * np.exp(-0.5 * (tau / ell) ** 2)
    if spec.family == "sm":
        w = np.asarray(spec.sm_weights)[:, None]
        mu = np.asarray(spec.sm_means)[:, None]
        sc = np.asarray(spec.sm_scales)[:, None]
        flat = tau.reshape(1, -1)
        comps = w * np.exp(-2.0 * np.pi**2 * flat**2 * sc**2) * np.cos(2.0 * np.pi * mu * flat)
        return var * comps.sum(axis=0).reshape(tau.shape)
    r = np.abs(tau) / ell
    if spec.family == "matern12":
        return var * np.exp(-r)
    if spec.family == "matern32":
        a = math.sqrt(3.0) * r
        return var * (1.0 + a) * np.exp(-a)
    a = math.sqrt(5.0) * r
    return var * (1.0 + a + a * a / 3.0) * np.exp(-a)


def kernel_eval(spec: KernelSpec, t, s):
    """Kernel value ``k(t, s)`` without nugget or jitter.

    ``t`` and ``s`` broadcast against each other; scalars give a float.
    """
    tau = np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64)
    out = _stationary(spec, np.abs(tau))
    return out.item() if out.ndim == 0 else out


def kernel_lengthscale_grad(spec: KernelSpec, t, s):
    """``d k(t, s) / d lengthscale`` on the constrained scale."""
    tau = np.abs(np.asarray(t, dtype=np.float64) - np.asarray(s, dtype=np.float64))
    ell, var = constrain(spec)
    if spec.family == "rbf":
        k = var * np.exp(-0.5 * (tau / ell) ** 2)
        return k * tau**2 / ell**3
    if spec.family == "sm":
        return np.zeros_like(tau)
    r = tau / ell
    if spec.family == "matern12":
        return var * np.exp(-r) * r / ell
    if spec.family == "matern32":
        a = math.sqrt(3.0)
        return var * a * a * r * r * np.exp(-a * r) / ell
    a = math.sqrt(5.0)
    return var * (a * a * r * r / 3.0) * (1.0 + a * r) * np.exp(-a * r) / ell


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times in (0, 1].

    ``allow_origin`` admits ``t_1 = 0`` for the ``linspace(0, 1, L)``
    compatibility grid.
    """

    times: np.ndarray
    allow_origin: bool = False

    def __post_init__(self):
        t = np.array(self.times, dtype=np.float64).reshape(-1)
        if t.size < 1:
            raise ValueError("time grid needs at least one point")
        if not np.all(np.isfinite(t)):
            raise ValueError("time grid has non-finite entries")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        lo_ok = t[0] >= 0 if self.allow_origin else t[0] > 0
        if not lo_ok or t[-1] > 1:
            raise ValueError("time grid must lie in (0, 1]")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return self.times.size

    @classmethod
    def default(cls, L: int) -> "TimeGrid":
        """``linspace(1/L, 1, L)``."""
        return cls(np.linspace(1.0 / L, 1.0, L))

    @classmethod
    def unit(cls, L: int) -> "TimeGrid":
        """``linspace(0, 1, L)``; includes ``t = 0``."""
        if L == 1:
            return cls(np.array([1.0]))
        return cls(np.linspace(0.0, 1.0, L), allow_origin=True)

    @classmethod
    def make(cls, L: int, kind: str = "default") -> "TimeGrid":
        if L < 1:
            raise ValueError("grid length must be >= 1")
        if kind == "default":
            return cls.default(L)
        if kind == "unit":
            return cls.unit(L)
        raise ValueError(f"unknown grid kind {kind!r}; expected 'default' or 'unit'")


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Symmetric positive definite covariance with its Cholesky factor."""

    K: np.ndarray
    chol: np.ndarray
    spec: KernelSpec | None = None
    grid: TimeGrid | None = field(default=None, repr=False)

    def __post_init__(self):
        self.K.setflags(write=False)
        self.chol.setflags(write=False)

    @property
    def size(self) -> int:
        return self.K.shape[0]

    @classmethod
    def from_matrix(cls, K) -> "GramMatrix":
        K = np.array(K, dtype=np.float64)
        L = cholesky(K)
        return cls(0.5 * (K + K.T), L)


def gram_matrix_raw(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Kernel matrix plus the nugget/jitter diagonal, without factorizing."""
    t = grid.times
    K = kernel_eval(spec, t[:, None], t[None, :])
    K = np.atleast_2d(K)
    K[np.diag_indices_from(K)] += spec.diagonal_addition
    return K


def build_gram(spec: KernelSpec, grid: TimeGrid) -> GramMatrix:
    K = gram_matrix_raw(spec, grid)
    try:
        L = cholesky(K)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(
            exc.pivot,
            f"Gram matrix not positive definite at pivot {exc.pivot} "
            f"with jitter {spec.jitter:.3e}; increase the jitter",
        ) from None
    return GramMatrix(K, L, spec, grid)
