"""Linear-Gaussian VAE with a GP latent prior, trained on the beta-ELBO.

Encoder ``x_t -> (mu_t, logvar_t)`` and decoder ``z_t -> x_t`` are affine
maps, so every gradient (including those of the raw kernel
hyperparameters, through ``dKL/dK``) is available in closed form and can
be checked against finite differences.

A "token" here is one time step, so per-token quantities are divided by
``L``. Batch quantities are means over sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dense_linalg import cholesky, inverse_from_chol
from .errors import NonFiniteLoss, TrainingDiverged
from .kernels import (
    GramMatrix,
    KernelSpec,
    TimeGrid,
    build_gram,
    kernel_eval,
    kernel_lengthscale_grad,
    softplus_grad,
)
from .samplers import NoiseBlock, sample_parallel
from .streams import stream
from .variational import LOGVAR_CLAMP, BetaSchedule, DiagonalPosterior, KlCap, beta_step, kl_capped, kl_to_gp_prior

_LOG_2PI = math.log(2.0 * math.pi)
PRIORS = ("gp", "iso")


@dataclass
class LinearEncoder:
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_lv: np.ndarray
    b_lv: np.ndarray

    def forward(self, X):
        """Return ``(mu, logvar, inside)``; ``inside`` marks unclamped logvar entries."""
        mu = X @ self.W_mu + self.b_mu
        pre = X @ self.W_lv + self.b_lv
        inside = (pre > -LOGVAR_CLAMP) & (pre < LOGVAR_CLAMP)
        return mu, np.clip(pre, -LOGVAR_CLAMP, LOGVAR_CLAMP), inside


@dataclass
class LinearDecoder:
    V: np.ndarray
    c: np.ndarray
    log_obs_var: float = 0.0

    @property
    def obs_var(self) -> float:
        return math.exp(min(max(self.log_obs_var, -LOGVAR_CLAMP), LOGVAR_CLAMP))

    def forward(self, Z):
        return Z @ self.V + self.c


PARAM_BLOCKS = ("W_mu", "b_mu", "W_lv", "b_lv", "V", "c", "log_obs_var", "raw_lengthscale", "raw_variance")


@dataclass
class ToyParams:
    encoder: LinearEncoder
    decoder: LinearDecoder
    kernel: KernelSpec
    prior: str = "gp"

    def as_dict(self) -> dict[str, np.ndarray]:
        e, d = self.encoder, self.decoder
        return {
            "W_mu": e.W_mu,
            "b_mu": e.b_mu,
            "W_lv": e.W_lv,
            "b_lv": e.b_lv,
            "V": d.V,
            "c": d.c,
            "log_obs_var": np.array(d.log_obs_var),
            "raw_lengthscale": np.array(self.kernel.raw_lengthscale),
            "raw_variance": np.array(self.kernel.raw_variance),
        }

    def replace_blocks(self, blocks: dict) -> "ToyParams":
        cur = {k: np.array(v, dtype=np.float64) for k, v in self.as_dict().items()}
        cur.update({k: np.array(v, dtype=np.float64) for k, v in blocks.items()})
        return ToyParams(
            LinearEncoder(cur["W_mu"], cur["b_mu"], cur["W_lv"], cur["b_lv"]),
            LinearDecoder(cur["V"], cur["c"], float(cur["log_obs_var"])),
            self.kernel.with_raw(float(cur["raw_lengthscale"]), float(cur["raw_variance"])),
            self.prior,
        )

    def to_json(self) -> dict:
        out = {k: np.asarray(v).tolist() for k, v in self.as_dict().items()}
        out.update(
            prior=self.prior,
            kernel_family=self.kernel.family,
            lengthscale=self.kernel.lengthscale,
            variance=self.kernel.variance,
        )
        return out


def init_params(d_x: int, d_z: int, kernel: KernelSpec, seed: int, prior: str = "gp") -> ToyParams:
    """Small random encoder/decoder weights from stream ``train/init``."""
    if prior not in PRIORS:
        raise ValueError(f"prior must be one of {PRIORS}")
    rng = stream(seed, "train/init")
    enc = LinearEncoder(
        0.1 * rng.standard_normal((d_x, d_z)),
        np.zeros(d_z),
        np.zeros((d_x, d_z)),
        np.full(d_z, -1.0),
    )
    dec = LinearDecoder(0.1 * rng.standard_normal((d_z, d_x)), np.zeros(d_x), 0.0)
    return ToyParams(enc, dec, kernel, prior)


@dataclass(frozen=True)
class PriorGram:
    gram: GramMatrix
    dK_dlengthscale: np.ndarray
    dK_dvariance: np.ndarray


def prior_gram(kernel: KernelSpec, grid: TimeGrid, prior: str = "gp") -> PriorGram:
    """Prior covariance and its derivatives w.r.t. the constrained hyperparameters.

    ``prior="iso"`` gives ``K = variance * I`` (no temporal correlation).
    """
    L = len(grid)
    var = kernel.variance
    if prior == "iso":
        K = var * np.eye(L)
        return PriorGram(GramMatrix(K, cholesky(K)), np.zeros((L, L)), np.eye(L))
    t = grid.times
    base = np.atleast_2d(kernel_eval(kernel, t[:, None], t[None, :]))
    dvar = base / var
    dvar[np.diag_indices(L)] += kernel.nugget_rel
    if kernel.jitter_abs is None:
        dvar[np.diag_indices(L)] += kernel.jitter / var
    dell = np.atleast_2d(kernel_lengthscale_grad(kernel, t[:, None], t[None, :]))
    return PriorGram(build_gram(kernel, grid), dell, dvar)


def kl_gradients(mu: np.ndarray, logvar: np.ndarray, Kinv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the whole-trajectory KL w.r.t. ``mu`` and ``logvar``."""
    s = np.exp(logvar)
    return Kinv @ mu, 0.5 * (np.diag(Kinv)[:, None] * s - 1.0)


@dataclass
class Batch:
    X: np.ndarray
    eps: np.ndarray


def _check(term: str, value: float) -> None:
    if not math.isfinite(value):
        raise NonFiniteLoss(term)


def elbo_and_grads(params: ToyParams, batch: Batch, grid: TimeGrid, beta: float, cap: KlCap | float = math.inf):
    """Batch beta-ELBO metrics and analytic gradients of the training loss.

    The loss is ``-(ll_tok_sample - beta * min(kl_tok, cap))`` with
    ``ll_tok_sample`` from one reparameterized draw per sequence (the
    noise in ``batch.eps``). ``metrics["ll_tok"]`` is the exact expected
    log-likelihood, which the linear decoder makes available in closed
    form; it is what gets logged.
    """
    X, E = batch.X, batch.eps
    N, L, d_x = X.shape
    d_z = E.shape[2]
    enc, dec = params.encoder, params.decoder

    pg = prior_gram(params.kernel, grid, params.prior)
    K = pg.gram
    Kinv = inverse_from_chol(K.chol)

    mu, lv, inside = enc.forward(X)
    sd = np.exp(0.5 * lv)
    Z = mu + sd * E
    R = X - dec.forward(Z)
    lov_inside = -LOGVAR_CLAMP < dec.log_obs_var < LOGVAR_CLAMP
    s_o = dec.obs_var
    lov = math.log(s_o)

    sq = np.sum(R * R, axis=(1, 2))
    ll_seq = -0.5 * d_x * (_LOG_2PI + lov) - sq / (2.0 * s_o * L)
    ll_tok_sample = float(ll_seq.mean())

    R_mean = X - dec.forward(mu)
    v_norms = np.sum(dec.V * dec.V, axis=1)
    expected_sq = np.sum(R_mean * R_mean, axis=(1, 2)) + np.einsum("ntj,j->n", np.exp(lv), v_norms)
    ll_tok = float(np.mean(-0.5 * d_x * (_LOG_2PI + lov) - expected_sq / (2.0 * s_o * L)))

    kl_seq = np.array([kl_to_gp_prior(DiagonalPosterior(mu[n], lv[n]), K) for n in range(N)])
    kl_tok = float(kl_seq.mean() / L)
    kl_cap_val = kl_capped(kl_tok, cap)
    loss = -(ll_tok_sample - beta * kl_cap_val)
    for term, value in (("ll_tok", ll_tok_sample), ("kl_tok", kl_tok), ("loss", loss)):
        _check(term, value)

    metrics = {
        "elbo_tok": ll_tok - kl_tok,
        "ll_tok": ll_tok,
        "ll_tok_sample": ll_tok_sample,
        "kl_tok_raw": kl_tok,
        "kl_tok_capped": kl_cap_val,
        "loss": loss,
        "beta": beta,
        "lengthscale": params.kernel.lengthscale,
        "variance": params.kernel.variance,
    }

    cap_value = cap.cap if isinstance(cap, KlCap) else float(cap)
    a = beta if kl_tok < cap_value else 0.0
    kscale = a / (N * L)

    # reconstruction: d loss / d Xhat
    g_xhat = -R / (N * s_o * L)
    g_V = np.einsum("ntj,ntk->jk", Z, g_xhat)
    g_c = g_xhat.sum(axis=(0, 1))
    g_Z = g_xhat @ dec.V.T
    g_lov = -float(np.mean(-0.5 * d_x + sq / (2.0 * s_o * L))) if lov_inside else 0.0

    g_mu = g_Z.copy()
    g_lv = g_Z * 0.5 * sd * E
    if kscale:
        s = np.exp(lv)
        g_mu += kscale * np.einsum("ts,nsj->ntj", Kinv, mu)
        g_lv += kscale * 0.5 * (np.diag(Kinv)[None, :, None] * s - 1.0)
    g_lv *= inside

    grads = {
        "W_mu": np.einsum("nti,ntj->ij", X, g_mu),
        "b_mu": g_mu.sum(axis=(0, 1)),
        "W_lv": np.einsum("nti,ntj->ij", X, g_lv),
        "b_lv": g_lv.sum(axis=(0, 1)),
        "V": g_V,
        "c": g_c,
        "log_obs_var": np.array(g_lov),
        "raw_lengthscale": np.array(0.0),
        "raw_variance": np.array(0.0),
    }

    if kscale:
        s_sum = np.exp(lv).sum(axis=(0, 2))
        MM = np.einsum("ntj,nsj->ts", mu, mu)
        inner = Kinv @ (np.diag(s_sum) + MM) @ Kinv
        G = 0.5 * kscale * (N * d_z * Kinv - inner)
        grads["raw_lengthscale"] = np.array(
            float(np.sum(G * pg.dK_dlengthscale)) * softplus_grad(params.kernel.raw_lengthscale)
        )
        grads["raw_variance"] = np.array(float(np.sum(G * pg.dK_dvariance)) * softplus_grad(params.kernel.raw_variance))
    return metrics, grads


def batch_loss(params: ToyParams, batch: Batch, grid: TimeGrid, beta: float, cap=math.inf) -> float:
    return elbo_and_grads(params, batch, grid, beta, cap)[0]["loss"]


def finite_difference_grads(params: ToyParams, batch: Batch, grid: TimeGrid, beta: float, cap=math.inf, h: float = 1e-5):
    """Central differences of the training loss for every parameter entry."""
    out = {}
    base = params.as_dict()
    for name in PARAM_BLOCKS:
        arr = np.array(base[name], dtype=np.float64)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            fp = batch_loss(params.replace_blocks({name: plus.reshape(arr.shape)}), batch, grid, beta, cap)
            fm = batch_loss(params.replace_blocks({name: minus.reshape(arr.shape)}), batch, grid, beta, cap)
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def gradient_relative_errors(analytic: dict, numeric: dict, floor: float = 1e-8) -> dict[str, float]:
    """Largest elementwise ``|a - f| / max(|a|, |f|, floor)`` per block."""
    out = {}
    for name in PARAM_BLOCKS:
        a = np.asarray(analytic[name], dtype=np.float64)
        f = np.asarray(numeric[name], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        out[name] = float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
    return out


@dataclass
class SynthDataset:
    x: np.ndarray
    z: np.ndarray
    grid: TimeGrid

    @property
    def n_seqs(self) -> int:
        return self.x.shape[0]


def synth_dataset(kernel: KernelSpec, decoder_true: LinearDecoder, n_seqs: int, L: int, seed: int, grid_kind: str = "default") -> SynthDataset:
    """Draw ``z`` from the GP prior (parallel sampler) and ``x_t = V^T z_t + c + noise``.

    Latents use stream ``synth/z/<i>``, observation noise ``synth/x/<i>``.
    """
    grid = TimeGrid.make(L, grid_kind)
    K = build_gram(kernel, grid)
    d_z, d_x = decoder_true.V.shape
    sd = math.sqrt(decoder_true.obs_var)
    xs, zs = np.empty((n_seqs, L, d_x)), np.empty((n_seqs, L, d_z))
    for i in range(n_seqs):
        z = sample_parallel(K, d_z, NoiseBlock.draw(seed, L, d_z, f"synth/z/{i}"))
        noise = stream(seed, f"synth/x/{i}").standard_normal((L, d_x))
        zs[i] = z
        xs[i] = decoder_true.forward(z) + sd * noise
    return SynthDataset(xs, zs, grid)


def lag1_autocorrelation(x: np.ndarray) -> float:
    """Pooled lag-1 autocorrelation over sequences and channels (``N x L x d``)."""
    c = x - x.mean(axis=(0, 1))
    num = np.sum(c[:, 1:] * c[:, :-1])
    return float(num / np.sum(c * c))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 64
    learning_rate: float = 0.01
    seed: int = 0
    L: int = 32
    d_z: int = 2
    d_x: int = 4
    n_seqs: int = 64
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec.from_constrained("rbf", 0.1, 1.0, nugget_rel=0.05))
    schedule: BetaSchedule = field(
        default_factory=lambda: BetaSchedule(beta_max=1.0, warmup_steps=100, kl_target=0.5, adapt_rate=0.01)
    )
    cap: KlCap = field(default_factory=KlCap)
    prior: str = "gp"
    grid: str = "default"
    data_lengthscale: float = 0.2
    data_variance: float = 1.0
    data_nugget: float = 0.01
    data_obs_var: float = 0.25

    def __post_init__(self):
        for name in ("steps", "batch_size", "L", "d_z", "d_x", "n_seqs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if not (self.data_lengthscale > 0 and self.data_variance > 0 and self.data_obs_var > 0):
            raise ValueError("data kernel and noise parameters must be positive")


def true_decoder(cfg: TrainConfig) -> LinearDecoder:
    rng = stream(cfg.seed, "synth/decoder")
    return LinearDecoder(rng.standard_normal((cfg.d_z, cfg.d_x)), np.zeros(cfg.d_x), math.log(cfg.data_obs_var))


def make_dataset(cfg: TrainConfig) -> SynthDataset:
    spec = KernelSpec.from_constrained("rbf", cfg.data_lengthscale, cfg.data_variance, nugget_rel=cfg.data_nugget)
    return synth_dataset(spec, true_decoder(cfg), cfg.n_seqs, cfg.L, cfg.seed, cfg.grid)


HISTORY_COLUMNS = ("step", "elbo_tok", "ll_tok", "kl_tok_raw", "kl_tok_capped", "beta", "lengthscale", "variance")


def _step_batch(cfg: TrainConfig, data: SynthDataset, step: int) -> Batch:
    rng = stream(cfg.seed, f"train/step/{step}")
    N = data.n_seqs
    if cfg.batch_size >= N:
        idx = np.arange(N)
    else:
        idx = np.sort(rng.choice(N, size=cfg.batch_size, replace=False))
    eps = rng.standard_normal((idx.size, data.x.shape[1], cfg.d_z))
    return Batch(data.x[idx], eps)


def train(cfg: TrainConfig, data: SynthDataset, params: ToyParams | None = None) -> tuple[ToyParams, list[dict]]:
    """Fixed-step gradient descent on the loss (ascent on the beta-ELBO).

    Row ``k`` of the history holds the metrics evaluated *before* update
    ``k``. On a non-finite value at step ``k``, raises
    :class:`TrainingDiverged` carrying the last finite parameters and the
    ``k`` completed rows.
    """
    if data.x.shape[2] != cfg.d_x or data.x.shape[1] != cfg.L:
        raise ValueError("dataset shape does not match the config")
    if params is None:
        params = init_params(cfg.d_x, cfg.d_z, cfg.kernel, cfg.seed, cfg.prior)
    history: list[dict] = []
    beta, observed = cfg.schedule.beta_max, cfg.schedule.kl_target
    for step in range(cfg.steps):
        beta = beta_step(cfg.schedule, step, beta, observed)
        batch = _step_batch(cfg, data, step)
        try:
            # overflow past this point surfaces as NonFiniteLoss / TrainingDiverged
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                metrics, grads = elbo_and_grads(params, batch, data.grid, beta, cfg.cap)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(step, exc.term, params, history) from exc
        blocks = params.as_dict()
        new = {k: blocks[k] - cfg.learning_rate * grads[k] for k in PARAM_BLOCKS}
        bad = next((k for k, v in new.items() if not np.all(np.isfinite(v))), None)
        if bad is not None:
            raise TrainingDiverged(step, bad, params, history)
        history.append({"step": step, **{k: metrics[k] for k in HISTORY_COLUMNS[1:]}})
        observed = metrics["kl_tok_raw"]
        params = params.replace_blocks(new)
    return params, history


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.mean(keepdims=True)
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def iso_config(cfg: TrainConfig) -> TrainConfig:
    """The paired ablation: same data and seed, prior ``variance * I``."""
    return replace(cfg, prior="iso")

