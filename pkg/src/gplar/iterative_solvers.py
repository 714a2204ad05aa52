"""Matrix-free conjugate gradients and Hutchinson trace estimation.

The operator is anything that maps a length-L vector to a length-L
vector (a callable or a dense array). Solves never factorize the
operator; the only Cholesky in here is the exact log-determinant used
by :func:`kl_to_gp_prior_cg`, which stays on the dense path.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dense_linalg import logdet_from_chol
from .kernels import KernelSpec, TimeGrid, build_gram
from .streams import rademacher, stream
from .variational import DiagonalPosterior

Operator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CgConfig:
    """``max_iters=None`` means ``10 * L``."""

    tol: float = 1e-6
    max_iters: int | None = None
    preconditioner: str = "none"

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tol must be in (0, 1)")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.preconditioner not in ("none", "jacobi"):
            raise ValueError("preconditioner must be 'none' or 'jacobi'")


@dataclass
class CgReport:
    iterations: int
    final_residual: float
    converged: bool
    residual_history: list[float] = field(default_factory=list, repr=False)


def as_operator(A) -> Operator:
    if callable(A):
        return A
    M = np.asarray(A, dtype=np.float64)
    return lambda v: M @ v


def cg_solve(matvec, b, cfg: CgConfig = CgConfig(), diag=None, x0=None) -> tuple[np.ndarray, CgReport]:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops once ``||b - A x|| <= tol * ||b||`` for the *true* residual; the
    recursively updated residual is only used to decide when to check.
    Non-convergence is reported, not raised. The Jacobi preconditioner
    needs ``diag`` (taken from ``A`` when ``A`` is an array).
    """
    A = as_operator(matvec)
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    max_iters = cfg.max_iters or 10 * n
    if cfg.preconditioner == "jacobi":
        if diag is None:
            if callable(matvec):
                raise ValueError("Jacobi preconditioning needs the operator diagonal")
            diag = np.diag(np.asarray(matvec))
        inv_diag = 1.0 / np.asarray(diag, dtype=np.float64)
        precond = lambda r: inv_diag * r
    else:
        precond = lambda r: r

    bnorm = float(np.linalg.norm(b))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return np.zeros(n), CgReport(0, 0.0, True, [0.0])
    threshold = cfg.tol * bnorm
    r = b - A(x) if x0 is not None else b.copy()
    history = [float(np.linalg.norm(r))]
    if history[0] <= threshold:
        return x, CgReport(0, history[0], True, history)

    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while it < max_iters:
        Ap = A(p)
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rnorm = float(np.linalg.norm(r))
        if rnorm <= threshold:
            r = b - A(x)
            rnorm = float(np.linalg.norm(r))
            history.append(rnorm)
            if rnorm <= threshold:
                return x, CgReport(it, rnorm, True, history)
            # recursive residual drifted; restart from the true one
            z = precond(r)
            p = z.copy()
            rz = float(r @ z)
            continue
        history.append(rnorm)
        z = precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new

    final = float(np.linalg.norm(b - A(x)))
    return x, CgReport(it, final, final <= threshold, history)


@dataclass
class TraceEstimate:
    estimate: float
    stderr: float
    converged: bool
    samples: np.ndarray = field(repr=False)


def hutchinson_trace_inv(matvec, a_diag, n_probes: int, cfg: CgConfig = CgConfig(), seed: int = 0, diag=None, name: str = "hutchinson") -> TraceEstimate:
    """Estimate ``trace(A^{-1} D)`` for diagonal ``D = diag(a_diag)``.

    Each Rademacher probe ``v`` contributes ``v^T A^{-1} (D v)``, one CG
    solve per probe.
    """
    if n_probes < 2:
        raise ValueError("need at least two probes for a standard error")
    a_diag = np.asarray(a_diag, dtype=np.float64)
    n = a_diag.size
    rng = stream(seed, name)
    V = rademacher(rng, (n_probes, n))
    samples = np.empty(n_probes)
    ok = True
    for i, v in enumerate(V):
        y, rep = cg_solve(matvec, a_diag * v, cfg, diag=diag)
        ok &= rep.converged
        samples[i] = v @ y
    return TraceEstimate(float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n_probes)), ok, samples)


def kl_to_gp_prior_cg(q: DiagonalPosterior, K, cfg: CgConfig = CgConfig(tol=1e-8), n_probes: int = 64, seed: int = 0):
    """KL to the GP prior with CG solves and a Hutchinson trace term.

    The trace terms of all coordinates share one estimator since
    ``sum_j tr(K^{-1} diag(s_j)) = tr(K^{-1} diag(sum_j s_j))``. Returns
    ``(kl, stderr, converged)``.
    """
    L, d_z = q.shape
    Kmat = np.asarray(K.K)
    diag = np.diag(Kmat)
    tr = hutchinson_trace_inv(Kmat, q.var.sum(axis=1), n_probes, cfg, seed, diag=diag)
    maha = 0.0
    ok = tr.converged
    for j in range(d_z):
        x, rep = cg_solve(Kmat, q.mu[:, j], cfg, diag=diag)
        ok &= rep.converged
        maha += float(q.mu[:, j] @ x)
    logdet = logdet_from_chol(K.chol)
    kl = 0.5 * (tr.estimate + maha - L * d_z + d_z * logdet - float(q.logvar.sum()))
    return kl, 0.5 * tr.stderr, ok


def power_iteration(matvec, n: int, steps: int = 50, seed: int = 0) -> float:
    """Largest eigenvalue estimate (Rayleigh quotient after ``steps`` iterations)."""
    A = as_operator(matvec)
    v = stream(seed, "power").standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(steps):
        w = A(v)
        lam = float(v @ w)
        v = w / np.linalg.norm(w)
    return lam


def condition_estimate(K: np.ndarray, cfg: CgConfig, steps: int = 50, seed: int = 0) -> float:
    """``lambda_max(K) / lambda_min(K)`` by power iteration on ``K`` and on ``K^{-1}`` (via CG)."""
    n = K.shape[0]
    lam_max = power_iteration(K, n, steps, seed)
    inv_cfg = CgConfig(tol=min(cfg.tol, 1e-8), max_iters=cfg.max_iters, preconditioner=cfg.preconditioner)
    inv = lambda v: cg_solve(K, v, inv_cfg)[0]
    lam_inv_max = power_iteration(inv, n, steps, seed + 1)
    return lam_max * lam_inv_max


@dataclass(frozen=True)
class BenchRow:
    L: int
    kappa_est: float
    iters_mean: float
    iters_std: float
    wall_ms_mean: float


BENCH_COLUMNS = ("L", "kappa_est", "iters_mean", "iters_std", "wall_ms_mean")


def bench_cg(spec: KernelSpec | None, lengths, cfg: CgConfig = CgConfig(), trials: int = 5, seed: int = 0, grid: str = "default") -> list[BenchRow]:
    """CG iteration counts and timings on dense Gram matrices.

    ``spec=None`` benchmarks the identity operator. Right-hand sides come
    from stream ``bench/<L>/<trial>``.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    rows = []
    for L in lengths:
        if spec is None:
            K = np.eye(L)
        else:
            # fail early (NotPositiveDefinite) if the jitter is insufficient
            K = build_gram(spec, TimeGrid.make(L, grid)).K
        iters, walls = [], []
        for trial in range(trials):
            b = stream(seed, f"bench/{L}/{trial}").standard_normal(L)
            t0 = time.perf_counter()
            _, rep = cg_solve(K, b, cfg)
            walls.append(1e3 * (time.perf_counter() - t0))
            iters.append(rep.iterations)
        kappa = 1.0 if spec is None else condition_estimate(K, cfg, seed=seed)
        rows.append(BenchRow(L, kappa, float(np.mean(iters)), float(np.std(iters)), float(np.mean(walls))))
    return rows


def bench_table(rows: list[BenchRow]) -> list[list]:
    return [[getattr(r, c) for c in BENCH_COLUMNS] for r in rows]

