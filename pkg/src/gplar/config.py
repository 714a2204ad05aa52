"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment. Unknown keys are rejected.
Kernel hyperparameters may be given constrained (``lengthscale``,
``variance``) or raw (``raw_lengthscale``, ``raw_variance``); the
serializer always writes the raw form so that a round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

from .kernels import FAMILIES, KernelSpec, inv_softplus
from .toy_model import PRIORS, TrainConfig
from .variational import KlCap


class ConfigError(ValueError):
    pass


def _float(v: str) -> float:
    return float(v)


def _int(v: str) -> int:
    f = float(v)
    if not f.is_integer():
        raise ValueError(f"expected an integer, got {v!r}")
    return int(f)


def _jitter(v: str):
    return None if v.strip().lower() in ("auto", "default", "none") else float(v)


def _choice(options):
    def parse(v: str) -> str:
        v = v.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v

    return parse


KERNEL_KEYS = {
    "kernel": _choice(FAMILIES),
    "lengthscale": _float,
    "variance": _float,
    "raw_lengthscale": _float,
    "raw_variance": _float,
    "nugget": _float,
    "jitter": _jitter,
    "grid": _choice(("default", "unit")),
}

TRAIN_KEYS = {
    **KERNEL_KEYS,
    "steps": _int,
    "batch_size": _int,
    "learning_rate": _float,
    "seed": _int,
    "T": _int,
    "dz": _int,
    "dx": _int,
    "n_seqs": _int,
    "beta_max": _float,
    "warmup_steps": _int,
    "kl_target": _float,
    "adapt_rate": _float,
    "beta_min": _float,
    "kl_cap": _float,
    "prior": _choice(PRIORS),
    "data_lengthscale": _float,
    "data_variance": _float,
    "data_nugget": _float,
    "data_obs_var": _float,
}

_TRAIN_FIELDS = {
    "steps": "steps",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "seed": "seed",
    "T": "L",
    "dz": "d_z",
    "dx": "d_x",
    "n_seqs": "n_seqs",
    "prior": "prior",
    "grid": "grid",
    "data_lengthscale": "data_lengthscale",
    "data_variance": "data_variance",
    "data_nugget": "data_nugget",
    "data_obs_var": "data_obs_var",
}
_SCHEDULE_FIELDS = ("beta_max", "warmup_steps", "kl_target", "adapt_rate", "beta_min")


def parse_text(text: str, allowed=TRAIN_KEYS, source: str = "<config>") -> dict:
    """Parse config text into typed values; rejects unknown keys."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = allowed[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def load(path, allowed=TRAIN_KEYS) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    return parse_text(text, allowed, str(path))


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def serialize(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def kernel_from_values(values: dict, base: KernelSpec | None = None) -> KernelSpec:
    """Apply kernel keys from ``values`` on top of ``base``."""
    base = base or KernelSpec.from_constrained("rbf", 0.2, 1.0)
    if "lengthscale" in values and "raw_lengthscale" in values:
        raise ConfigError("give either lengthscale or raw_lengthscale, not both")
    if "variance" in values and "raw_variance" in values:
        raise ConfigError("give either variance or raw_variance, not both")
    kw = {}
    if "kernel" in values:
        kw["family"] = values["kernel"]
    if "nugget" in values:
        kw["nugget_rel"] = values["nugget"]
    if "jitter" in values:
        kw["jitter_abs"] = values["jitter"]
    if "lengthscale" in values:
        kw["raw_lengthscale"] = inv_softplus(values["lengthscale"])
    if "raw_lengthscale" in values:
        kw["raw_lengthscale"] = values["raw_lengthscale"]
    if "variance" in values:
        kw["raw_variance"] = inv_softplus(values["variance"])
    if "raw_variance" in values:
        kw["raw_variance"] = values["raw_variance"]
    return replace(base, **kw)


def train_config_from_values(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    unknown = set(values) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    kw = {field: values[key] for key, field in _TRAIN_FIELDS.items() if key in values}
    kw["kernel"] = kernel_from_values(values, base.kernel)
    sched = {k: values[k] for k in _SCHEDULE_FIELDS if k in values}
    kw["schedule"] = replace(base.schedule, **sched)
    if "kl_cap" in values:
        kw["cap"] = KlCap(values["kl_cap"])
    return replace(base, **kw)


def train_config_to_values(cfg: TrainConfig) -> dict:
    k, s = cfg.kernel, cfg.schedule
    if k.family == "sm":
        raise ConfigError("spectral-mixture kernels cannot be written to a flat config")
    out = {key: getattr(cfg, field) for key, field in _TRAIN_FIELDS.items()}
    out.update(
        kernel=k.family,
        raw_lengthscale=k.raw_lengthscale,
        raw_variance=k.raw_variance,
        nugget=k.nugget_rel,
        jitter=k.jitter_abs,
    )
    out.update({f: getattr(s, f) for f in _SCHEDULE_FIELDS})
    out["kl_cap"] = cfg.cap.cap
    return out


def dump_train_config(cfg: TrainConfig) -> str:
    return serialize(train_config_to_values(cfg))


def parse_train_config(text: str) -> TrainConfig:
    return train_config_from_values(parse_text(text))
