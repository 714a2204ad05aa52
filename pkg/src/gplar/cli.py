"""Command-line entry point: ``gplar <subcommand> ...``.

Exit codes: 0 success, 1 usage/config/I/O error, 2 numerical error
(non-PD matrix, degenerate conditional, divergence, failed check).
Errors are reported on stderr as a single ``error: ...`` line.

Randomness: every stochastic step draws from a named substream of the
root ``--seed`` (``sample/<i>``, ``train/step/<k>``, ...; see
:mod:`gplar.streams`), so outputs are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checks import format_report, run_all
from .errors import NumericalError
from .io import emit_csv, emit_json, emit_matrix, matrix_header, read_matrix
from .iterative_solvers import BENCH_COLUMNS, CgConfig, bench_cg, bench_table
from .kernels import FAMILIES, GramMatrix, KernelSpec, TimeGrid, build_gram
from .latent_prior import chain_logdensity, joint_logdensity
from .samplers import NoiseBlock, sample_conditioned, sample_parallel, sample_sequential
from .streams import stream
from .toy_model import HISTORY_COLUMNS, make_dataset, train
from .variational import DiagonalPosterior, kl_isotropic_special_case, kl_monte_carlo, kl_to_gp_prior


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


KERNEL_CONFIG_KEYS = {**cfgmod.KERNEL_KEYS, "T": cfgmod.TRAIN_KEYS["T"]}


def _kernel_options(p: argparse.ArgumentParser, need_T: bool = True) -> None:
    g = p.add_argument_group("kernel")
    g.add_argument("--config", help="flat key = value file with kernel settings")
    g.add_argument("--kernel", help=f"family ({', '.join(FAMILIES)}) or a kernel config file")
    g.add_argument("--lengthscale", type=float)
    g.add_argument("--variance", type=float)
    g.add_argument("--nugget", type=float, help="relative nugget (times variance)")
    g.add_argument("--jitter", help="absolute diagonal jitter, or 'auto' for 1e-6 * variance")
    g.add_argument("--grid", choices=("default", "unit"), help="default: linspace(1/T, 1, T); unit: linspace(0, 1, T)")
    if need_T:
        g.add_argument("--T", type=int)


def _kernel_values(args) -> dict:
    values = {}
    if args.config:
        values.update(cfgmod.load(args.config, KERNEL_CONFIG_KEYS))
    if args.kernel:
        if args.kernel.lower() in FAMILIES:
            values["kernel"] = args.kernel.lower()
        elif Path(args.kernel).is_file():
            values.update(cfgmod.load(args.kernel, KERNEL_CONFIG_KEYS))
        else:
            raise UsageError(f"--kernel: {args.kernel!r} is neither a family nor a file")
    for key in ("lengthscale", "variance", "nugget", "grid", "T"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.jitter is not None:
        try:
            values["jitter"] = cfgmod.KERNEL_KEYS["jitter"](args.jitter)
        except ValueError:
            raise UsageError(f"--jitter: bad value {args.jitter!r}") from None
    return values


def _kernel_and_grid(args, L: int | None = None) -> tuple[KernelSpec, TimeGrid]:
    values = _kernel_values(args)
    spec = cfgmod.kernel_from_values(values)
    if L is None:
        L = values.get("T")
        if L is None:
            raise UsageError("grid length missing: pass --T")
    elif values.get("T") not in (None, L):
        raise UsageError(f"--T {values['T']} conflicts with input length {L}")
    return spec, TimeGrid.make(L, values.get("grid", "default"))


def _check_writable(*paths) -> None:
    for path in paths:
        if path is None or path == "-":
            continue
        p = Path(path)
        if p.is_dir():
            raise UsageError(f"{p}: is a directory")
        parent = p.parent if str(p.parent) else Path(".")
        if not parent.is_dir():
            raise UsageError(f"{p}: directory {parent} does not exist")
        if not os.access(parent, os.W_OK) or (p.exists() and not os.access(p, os.W_OK)):
            raise UsageError(f"{p}: not writable")


def _out(text: str, path) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_gram(args) -> int:
    _check_writable(args.out)
    spec, grid = _kernel_and_grid(args)
    K = build_gram(spec, grid)
    _out(emit_matrix(K.K, "t"), args.out)
    return 0


def cmd_sample(args) -> int:
    _check_writable(args.out)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    prefix = None
    if args.mode == "cond":
        if not args.prefix:
            raise UsageError("--mode cond needs --prefix")
        prefix = read_matrix(args.prefix)
        d_z = prefix.shape[1]
        if args.dz is not None and args.dz != d_z:
            raise UsageError(f"--dz {args.dz} conflicts with prefix width {d_z}")
    else:
        if args.prefix:
            raise UsageError("--prefix is only valid with --mode cond")
        d_z = args.dz if args.dz is not None else 1
    if d_z < 1:
        raise UsageError("--dz must be >= 1")
    spec, grid = _kernel_and_grid(args)
    K = build_gram(spec, grid)
    rows = []
    for i in range(args.n):
        noise = NoiseBlock.draw(args.seed, K.size, d_z, f"sample/{i}")
        if args.mode == "seq":
            z = sample_sequential(K, d_z, noise)
        elif args.mode == "para":
            z = sample_parallel(K, d_z, noise)
        else:
            z = sample_conditioned(K, prefix, noise.eps[prefix.shape[0] :])
        rows.extend([i, t, *z[t]] for t in range(K.size))
    _out(emit_csv(["sample", "step", *matrix_header("z", d_z)], rows), args.out)
    return 0


def cmd_logdensity(args) -> int:
    _check_writable(args.out)
    Z = read_matrix(args.traj)
    spec, grid = _kernel_and_grid(args, Z.shape[0])
    K = build_gram(spec, grid)
    payload = {
        "L": Z.shape[0],
        "d_z": Z.shape[1],
        "joint": joint_logdensity(K, Z),
        "chain": chain_logdensity(K, Z),
    }
    _out(emit_json(payload), args.out)
    return 0


def cmd_kl(args) -> int:
    _check_writable(args.out)
    parts = args.posterior.split(",")
    if len(parts) != 2:
        raise UsageError("--posterior takes MU_CSV,LOGVAR_CSV")
    q = DiagonalPosterior(read_matrix(parts[0]), read_matrix(parts[1]))
    L = q.shape[0]
    if args.gram:
        K = GramMatrix.from_matrix(read_matrix(args.gram))
    else:
        spec, grid = _kernel_and_grid(args, L)
        K = build_gram(spec, grid)
    kl = kl_to_gp_prior(q, K)
    payload = {"L": L, "d_z": q.shape[1], "kl_total": kl, "kl_per_token": kl / L}
    if args.isotropic is not None:
        iso = kl_isotropic_special_case(q, args.isotropic)
        payload.update(kl_isotropic_total=iso, kl_isotropic_per_token=iso / L)
    if args.mc:
        est, se = kl_monte_carlo(q, K, args.mc, stream(args.seed, "kl/mc"))
        payload.update(mc_estimate=est, mc_stderr=se, mc_samples=args.mc)
    _out(emit_json(payload), args.out)
    return 0


def cmd_bench_cg(args) -> int:
    _check_writable(args.out)
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lengths: bad list {args.lengths!r}") from None
    if not lengths or any(L < 1 for L in lengths):
        raise UsageError("--lengths needs positive integers")
    cfg = CgConfig(tol=args.tol, max_iters=args.max_iters, preconditioner=args.preconditioner)
    if args.kernel == "identity":
        spec, grid_kind = None, "default"
    else:
        values = _kernel_values(args)
        spec, grid_kind = cfgmod.kernel_from_values(values), values.get("grid", "default")
    rows = bench_cg(spec, lengths, cfg, args.trials, args.seed, grid_kind)
    _out(emit_csv(BENCH_COLUMNS, bench_table(rows)), args.out)
    return 0


_TRAIN_FLAGS = {
    "steps": "steps",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "seed": "seed",
    "T": "T",
    "dz": "dz",
    "dx": "dx",
    "n_seqs": "n_seqs",
    "prior": "prior",
    "kl_cap": "kl_cap",
    "beta_max": "beta_max",
    "warmup_steps": "warmup_steps",
    "kl_target": "kl_target",
    "adapt_rate": "adapt_rate",
    "beta_min": "beta_min",
}


def _train_config(args):
    values = cfgmod.load(args.config) if args.config else {}
    flags = _kernel_values(argparse.Namespace(**{**vars(args), "config": None}))
    flags.update({key: getattr(args, dest) for dest, key in _TRAIN_FLAGS.items() if getattr(args, dest) is not None})
    for a, b in (("lengthscale", "raw_lengthscale"), ("variance", "raw_variance")):
        if a in flags:
            values.pop(b, None)
    values.update(flags)
    return cfgmod.train_config_from_values(values)


def cmd_train(args) -> int:
    _check_writable(args.out_metrics, args.out_params, args.dump_config)
    cfg = _train_config(args)
    if args.dump_config:
        _out(cfgmod.dump_train_config(cfg), args.dump_config)
    data = make_dataset(cfg)
    params, history = train(cfg, data)
    _out(emit_csv(HISTORY_COLUMNS, ([r[c] for c in HISTORY_COLUMNS] for r in history)), args.out_metrics)
    if args.out_params:
        _out(emit_json(params.to_json()), args.out_params)
    return 0


def cmd_check(args) -> int:
    _check_writable(args.out)
    results = run_all(args.seed, full=args.full)
    _out(format_report(results), args.out)
    return 0 if all(r.passed for r in results) else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gplar", description="Latent autoregression with Gaussian-process priors.")
    p.add_argument("--log", help="append a JSON line (timestamp, argv, exit code) to this sidecar file")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gram", help="export the jittered Gram matrix as CSV")
    _kernel_options(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gram)

    s = sub.add_parser("sample", help="draw prior trajectories")
    _kernel_options(s)
    s.add_argument("--mode", choices=("seq", "para", "cond"), default="para")
    s.add_argument("--dz", type=int)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", help="CSV (T0 rows, d_z columns) for --mode cond")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("logdensity", help="chain-rule and joint prior log-density of a trajectory")
    _kernel_options(s)
    s.add_argument("--traj", required=True, help="CSV with L rows and d_z columns")
    s.add_argument("--out")
    s.set_defaults(func=cmd_logdensity)

    s = sub.add_parser("kl", help="KL from a diagonal posterior to the GP prior")
    _kernel_options(s)
    s.add_argument("--gram", help="prior covariance CSV (otherwise built from kernel options)")
    s.add_argument("--posterior", required=True, help="MU_CSV,LOGVAR_CSV")
    s.add_argument("--isotropic", type=float, metavar="SIGMA2")
    s.add_argument("--mc", type=int, default=0, metavar="N", help="also report an N-sample Monte-Carlo estimate")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_kl)

    s = sub.add_parser("bench-cg", help="CG iteration counts and timings on Gram matrices")
    _kernel_options(s, need_T=False)
    s.add_argument("--lengths", default="64,128,256,512")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--preconditioner", choices=("none", "jacobi"), default="none")
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_cg)

    s = sub.add_parser("train", help="train the linear-Gaussian toy VAE on synthetic GP data")
    _kernel_options(s)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--dz", type=int)
    s.add_argument("--dx", type=int)
    s.add_argument("--n-seqs", dest="n_seqs", type=int)
    s.add_argument("--prior", choices=("gp", "iso"))
    s.add_argument("--kl-cap", dest="kl_cap", type=float)
    s.add_argument("--beta-max", dest="beta_max", type=float)
    s.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    s.add_argument("--kl-target", dest="kl_target", type=float)
    s.add_argument("--adapt-rate", dest="adapt_rate", type=float)
    s.add_argument("--beta-min", dest="beta_min", type=float)
    s.add_argument("--out-metrics", dest="out_metrics")
    s.add_argument("--out-params", dest="out_params")
    s.add_argument("--dump-config", dest="dump_config", help="write the effective config here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("check", help="run the invariant suite and print a pass/fail table")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--full", action="store_true", help="acceptance-size instances (slower)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_check)
    return p


def _thread_limit():
    n = os.environ.get("GPLAR_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    code, log_path = 1, None
    try:
        args = parser.parse_args(argv)
        log_path = args.log
        if not getattr(args, "command", None):
            sys.stderr.write(parser.format_help())
            return 1
        with _thread_limit():
            code = args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        if not argv:
            sys.stderr.write(parser.format_usage())
        code = 1
    except NumericalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = 2
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = 1
    if log_path:
        with open(log_path, "a") as fh:
            fh.write(json.dumps({"time": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "argv": argv, "exit": code}) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
