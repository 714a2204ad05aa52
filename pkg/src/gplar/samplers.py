"""Prior samplers driven by explicit noise.

Both samplers are deterministic maps from a standard-normal noise block
to a trajectory. The sequential one conditions step by step on the
growing history; the parallel one multiplies the noise by the Cholesky
factor. On the same noise they produce the same trajectory up to
rounding, since conditioning step by step reproduces the rows of the
factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .kernels import GramMatrix
from .latent_prior import conditional_law, conditional_mean
from .streams import stream


@dataclass(frozen=True)
class NoiseBlock:
    eps: np.ndarray
    seed: int | None = None

    @classmethod
    def draw(cls, seed: int, L: int, d_z: int, name: str = "sample/0") -> "NoiseBlock":
        return cls(stream(seed, name).standard_normal((L, d_z)), seed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.eps.shape


def _noise(noise, rows: int, d_z: int | None = None) -> np.ndarray:
    eps = np.asarray(getattr(noise, "eps", noise), dtype=np.float64)
    if eps.ndim != 2 or eps.shape[0] != rows or (d_z is not None and eps.shape[1] != d_z):
        want = f"{rows} x {d_z}" if d_z is not None else f"{rows} rows"
        raise ShapeError(f"noise of shape {eps.shape}, expected {want}")
    return eps


def sample_sequential(K: GramMatrix, d_z: int, noise) -> np.ndarray:
    eps = _noise(noise, K.size, d_z)
    return _continue(K, np.zeros((0, d_z)), eps)


def sample_parallel(K: GramMatrix, d_z: int, noise) -> np.ndarray:
    eps = _noise(noise, K.size, d_z)
    return K.chol @ eps


def sample_conditioned(K: GramMatrix, prefix, noise) -> np.ndarray:
    """Keep ``prefix`` as rows ``0..T0-1`` and continue sequentially.

    ``noise`` covers only the ``L - T0`` new steps.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 2:
        raise ShapeError("prefix must be a T0 x d_z matrix")
    T0, d_z = prefix.shape
    if not 0 <= T0 < K.size:
        raise ShapeError(f"prefix length {T0} must be in [0, {K.size})")
    if not np.all(np.isfinite(prefix)):
        raise ShapeError("prefix has non-finite entries")
    eps = _noise(noise, K.size - T0, d_z)
    return _continue(K, prefix, eps)


def _continue(K: GramMatrix, prefix: np.ndarray, eps: np.ndarray) -> np.ndarray:
    T0, d_z = prefix.shape
    z = np.empty((K.size, d_z))
    z[:T0] = prefix
    for t in range(T0, K.size):
        law = conditional_law(K, t)
        z[t] = conditional_mean(law, z[:t]) + law.std * eps[t - T0]
    return z


def sample_batch(K: GramMatrix, d_z: int, n: int, seed: int, mode: str = "para") -> np.ndarray:
    """``n`` trajectories; trajectory ``i`` uses noise stream ``sample/i``."""
    fn = {"seq": sample_sequential, "para": sample_parallel}[mode]
    out = np.empty((n, K.size, d_z))
    for i in range(n):
        out[i] = fn(K, d_z, NoiseBlock.draw(seed, K.size, d_z, f"sample/{i}"))
    return out


def empirical_moments(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean (``L x d_z``) and temporal covariance averaged over coordinates.

    The covariance uses the unbiased ``1/(N-1)`` normalization.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] < 2:
        raise ShapeError("need at least two trajectories stacked as N x L x d_z")
    N, L, d_z = X.shape
    mean = X.mean(axis=0)
    C = X - mean
    cov = np.einsum("nlj,nmj->lm", C, C) / ((N - 1) * d_z)
    return mean, cov
