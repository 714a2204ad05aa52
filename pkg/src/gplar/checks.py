"""Invariant suite behind ``gplar check``.

Each check returns a :class:`CheckResult`; the report contains no
timings, so two runs with the same seed print identical text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense_linalg import kron_identities_check, solve_chol
from .iterative_solvers import CgConfig, cg_solve
from .kernels import GramMatrix, KernelSpec, TimeGrid, build_gram
from .latent_prior import chain_logdensity, conditional_law, joint_logdensity
from .samplers import sample_parallel, sample_sequential
from .streams import stream
from .toy_model import (
    Batch,
    TrainConfig,
    elbo_and_grads,
    finite_difference_grads,
    gradient_relative_errors,
    init_params,
    iso_config,
    make_dataset,
    smoothed,
    train,
)
from .variational import DiagonalPosterior, kl_isotropic_special_case, kl_monte_carlo, kl_to_gp_prior


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_spec(rng: np.random.Generator, families=("rbf", "matern12", "matern32", "matern52")) -> KernelSpec:
    """Random stationary kernel with lengthscale in [0.05, 1], variance in [0.2, 3]."""
    fam = families[int(rng.integers(len(families)))]
    return KernelSpec.from_constrained(
        fam,
        float(rng.uniform(0.05, 1.0)),
        float(rng.uniform(0.2, 3.0)),
        nugget_rel=float(rng.choice([0.0, 1e-3, 1e-2])),
    )


def random_gram(rng: np.random.Generator, L: int):
    return build_gram(random_spec(rng), TimeGrid.default(L))


def check_causal_factorization(seed: int, n: int = 20, max_L: int = 32) -> CheckResult:
    rng = stream(seed, "check/causal")
    worst = 0.0
    for _ in range(n):
        L, d_z = int(rng.integers(1, max_L + 1)), int(rng.integers(1, 9))
        K = random_gram(rng, L)
        Z = sample_parallel(K, d_z, rng.standard_normal((L, d_z)))
        joint = joint_logdensity(K, Z)
        worst = max(worst, abs(chain_logdensity(K, Z) - joint) / (1 + abs(joint)))
    return CheckResult("causal factorization", worst <= 1e-8, f"max scaled gap {worst:.3e} (tol 1e-8)")


def check_sampler_equivalence(seed: int, lengths=(2, 16, 64)) -> CheckResult:
    rng = stream(seed, "check/samplers")
    worst = 0.0
    for L in lengths:
        K = random_gram(rng, L)
        for d_z in (1, 4):
            eps = rng.standard_normal((L, d_z))
            worst = max(worst, float(np.max(np.abs(sample_sequential(K, d_z, eps) - sample_parallel(K, d_z, eps)))))
    return CheckResult("sampler equivalence", worst <= 1e-8, f"max abs gap {worst:.3e} (tol 1e-8)")


def check_cholesky_diagonal(seed: int, n: int = 20, max_L: int = 64) -> CheckResult:
    rng = stream(seed, "check/choldiag")
    worst = 0.0
    for _ in range(n):
        K = random_gram(rng, int(rng.integers(1, max_L + 1)))
        d = np.diag(K.chol)
        for t in range(K.size):
            worst = max(worst, abs(conditional_law(K, t).std - d[t]))
    return CheckResult("cholesky diagonal", worst <= 1e-10, f"max abs gap {worst:.3e} (tol 1e-10)")


def check_kl(seed: int, n: int = 5, mc_samples: int = 20_000) -> CheckResult:
    rng = stream(seed, "check/kl")
    worst_z, worst_iso = 0.0, 0.0
    for _ in range(n):
        L, d_z = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        K = random_gram(rng, L)
        q = DiagonalPosterior(rng.normal(0, 0.5, (L, d_z)), rng.normal(-1, 0.5, (L, d_z)))
        est, se = kl_monte_carlo(q, K, mc_samples, rng)
        worst_z = max(worst_z, abs(kl_to_gp_prior(q, K) - est) / se)
        s2 = float(rng.uniform(0.2, 3))
        iso = kl_isotropic_special_case(q, s2)
        dense = kl_to_gp_prior(q, build_iso(L, s2))
        worst_iso = max(worst_iso, abs(iso - dense) / max(1.0, abs(iso)))
    ok = worst_z <= 3 and worst_iso <= 1e-10
    return CheckResult("kl closed form", ok, f"max |z| vs MC {worst_z:.2f} (tol 3), isotropic gap {worst_iso:.3e}")


def build_iso(L: int, sigma2: float) -> GramMatrix:
    return GramMatrix.from_matrix(sigma2 * np.eye(L))


def check_kronecker(seed: int) -> CheckResult:
    rng = stream(seed, "check/kron")
    worst = 0.0
    for L, d_z in ((1, 3), (4, 3), (8, 8), (16, 4), (32, 2)):
        rep = kron_identities_check(random_gram(rng, L), d_z)
        worst = max(worst, rep.det_relerr, rep.inv_relerr)
    return CheckResult("kronecker identities", worst <= 1e-8, f"max rel err {worst:.3e} (tol 1e-8)")


def check_cg(seed: int, lengths=(64, 128), jitters=(1e-3, 1e-2, 1e-1)) -> CheckResult:
    rng = stream(seed, "check/cg")
    cfg = CgConfig(tol=1e-10)
    worst, monotone = 0.0, True
    for L in lengths:
        b = rng.standard_normal(L)
        iters = []
        for jit in jitters:
            K = build_gram(KernelSpec.from_constrained("rbf", 0.2, 1.0, jitter_abs=jit), TimeGrid.default(L))
            x, rep = cg_solve(K.K, b, cfg)
            ref = solve_chol(K.chol, b)
            worst = max(worst, float(np.linalg.norm(x - ref) / np.linalg.norm(ref)))
            iters.append(rep.iterations)
        monotone &= all(a >= b for a, b in zip(iters, iters[1:]))
    ok = worst <= 1e-6 and monotone
    return CheckResult("cg vs cholesky", ok, f"max rel err {worst:.3e} (tol 1e-6), iterations monotone in jitter: {monotone}")


def check_gradients(seed: int) -> CheckResult:
    rng = stream(seed, "check/grad")
    L, d_z, d_x, N = 6, 2, 3, 3
    grid = TimeGrid.default(L)
    p = init_params(d_x, d_z, KernelSpec.from_constrained("rbf", 0.3, 0.8, nugget_rel=0.05), seed)
    p = p.replace_blocks({"W_lv": 0.3 * rng.standard_normal((d_x, d_z)), "c": rng.standard_normal(d_x)})
    batch = Batch(rng.standard_normal((N, L, d_x)), rng.standard_normal((N, L, d_z)))
    _, g = elbo_and_grads(p, batch, grid, 0.7)
    errs = gradient_relative_errors(g, finite_difference_grads(p, batch, grid, 0.7))
    worst = max(errs.values())
    return CheckResult("gradient check", worst <= 1e-4, f"max rel err {worst:.3e} over {len(errs)} blocks (tol 1e-4)")


def check_training(seed: int, steps: int | None = None) -> CheckResult:
    cfg = TrainConfig(seed=seed) if steps is None else TrainConfig(seed=seed, steps=steps)
    data = make_dataset(cfg)
    _, h_gp = train(cfg, data)
    _, h_iso = train(iso_config(cfg), data)
    e = np.array([r["elbo_tok"] for r in h_gp])
    drop = float(np.max(-np.diff(smoothed(e)))) if e.size > 50 else 0.0
    finite = all(math.isfinite(v) for r in h_gp + h_iso for v in r.values())
    gp_final, iso_final = h_gp[-1]["elbo_tok"], h_iso[-1]["elbo_tok"]
    ok = finite and drop <= 1e-3 and gp_final > iso_final
    return CheckResult(
        "toy training",
        ok,
        f"{len(h_gp)} steps, final elbo/tok gp {gp_final:.4f} vs iso {iso_final:.4f}, max smoothed drop {drop:.2e}",
    )


def run_all(seed: int = 0, full: bool = False) -> list[CheckResult]:
    return [
        check_causal_factorization(seed),
        check_sampler_equivalence(seed, (2, 16, 64, 256) if full else (2, 16, 64)),
        check_cholesky_diagonal(seed),
        check_kl(seed, n=20 if full else 5, mc_samples=100_000 if full else 20_000),
        check_kronecker(seed),
        check_cg(seed, (64, 128, 256, 512) if full else (64, 128)),
        check_gradients(seed),
        check_training(seed, None if full else 400),
    ]


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
