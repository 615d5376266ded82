"""Run configuration: defaults, YAML loading, overrides, hashing.

A single nested key/value file covers every module's defaults; CLI
``--set section.key=value`` flags override file keys.  The resolved
configuration is hashed (sha256 of its canonical JSON form) and the
hash is embedded in every output so runs are traceable.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .core import PhysicsLimits, ScanConfig
from .encoding import blur_scale_for_total_decay
from .metrics import LossWeights
from .optim import OptimConfig
from .recon import ReconConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "grid": {"n": 64, "fov": 0.22},
    "scan": {
        "te": 0.100,
        "t2": 0.080,
        "dwell": 1.0e-6,
        "noise_sigma": 0.0,
        "accel": 8.0,
        "blur_scale": 1.0,
        # When set, overrides blur_scale so the last of the m samples
        # decays by exp(-blur_total_decay).
        "blur_total_decay": None,
    },
    "limits": {"gamma": 42.577e6, "g_max": 0.040, "s_max": 200.0},
    "sampling": {"decay": 3.0, "seed": 1234, "two_opt_passes": 1000},
    "recon": {
        "lam": None,
        "rhs": "dcf_adjoint",
        "cg_iters": 30,
        "dcf_sigma": 0.7,
        "dcf_iters": 20,
        "plugin": "identity",
        "plugin_alpha": 1.0e-2,
    },
    "loss": {"beta": None, "beta_balance": 100.0, "lambda_v": 1.0, "lambda_a": 1.0, "per_axis": False},
    "optim": {
        "steps": 500,
        "batch": 1,
        "lr": None,  # None -> 0.01 * k_max
        "lr_end": None,
        "limit_margin": 0.0,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1.0e-8,
        "cg_unroll": 6,
        "seed": 0,
        "clamp_to_nyquist": True,
        "val_every": 25,
    },
    "dataset": {"train_count": 10, "val_count": 5, "nc": 4, "seed": 99, "with_phase": False, "edge_smooth": 1.0},
    "output": {"crop": None, "figures": True},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults, overlaid with the YAML file at ``path`` when given."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if loaded is None:
        loaded = {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(DEFAULTS, loaded)


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as YAML)."""
    cfg = copy.deepcopy(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like section.key=value: {pair!r}")
        dotted, raw = pair.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"bad override value {raw!r}: {e}") from e
        node = cfg
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def num_samples(cfg: dict) -> int:
    n = cfg["grid"]["n"]
    return int(round(n * n / cfg["scan"]["accel"]))


def k_max(cfg: dict) -> float:
    return cfg["grid"]["n"] / (2.0 * cfg["grid"]["fov"])


def make_scan(cfg: dict) -> ScanConfig:
    s = cfg["scan"]
    blur_scale = s["blur_scale"]
    if s.get("blur_total_decay") is not None:
        blur_scale = blur_scale_for_total_decay(
            float(s["blur_total_decay"]), num_samples(cfg), s["dwell"], s["t2"]
        )
    return ScanConfig(
        te=s["te"], t2=s["t2"], dwell=s["dwell"], noise_sigma=s["noise_sigma"],
        accel=s["accel"], blur_scale=blur_scale,
    )


def make_limits(cfg: dict) -> PhysicsLimits:
    l = cfg["limits"]
    return PhysicsLimits(gamma=l["gamma"], g_max=l["g_max"], s_max=l["s_max"])


def make_recon(cfg: dict) -> ReconConfig:
    r = cfg["recon"]
    return ReconConfig(
        grid_n=cfg["grid"]["n"],
        lam=None if r["lam"] is None else float(r["lam"]),
        rhs=r["rhs"], cg_iters=r["cg_iters"],
        dcf_sigma=r["dcf_sigma"], dcf_iters=r["dcf_iters"],
        plugin=r["plugin"], plugin_alpha=r["plugin_alpha"],
    )


def make_loss_weights(cfg: dict) -> LossWeights:
    l = cfg["loss"]
    return LossWeights(
        beta=1.0 if l["beta"] is None else float(l["beta"]),
        lambda_v=l["lambda_v"], lambda_a=l["lambda_a"], per_axis=l["per_axis"],
    )


def make_optim(cfg: dict) -> OptimConfig:
    o = cfg["optim"]
    lr = o["lr"] if o["lr"] is not None else 0.01 * k_max(cfg)
    return OptimConfig(
        steps=o["steps"], batch=o["batch"], lr=float(lr),
        lr_end=None if o["lr_end"] is None else float(o["lr_end"]),
        limit_margin=o["limit_margin"],
        adam_beta1=o["adam_beta1"], adam_beta2=o["adam_beta2"], adam_eps=o["adam_eps"],
        beta=None if cfg["loss"]["beta"] is None else float(cfg["loss"]["beta"]),
        beta_balance=cfg["loss"]["beta_balance"],
        cg_unroll=o["cg_unroll"], seed=o["seed"],
        clamp_to_nyquist=o["clamp_to_nyquist"], val_every=o["val_every"],
    )
