"""Flat key-value configuration files.

Format: one `key = value` per line, `#` starts a comment, keys may contain a
single dot for namespacing (`sim.paths = 100000`). Floats are written with
repr so a write/read cycle reproduces the exact double.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .model import ControlVector, HestonParams, UncertaintyEllipse

_COV_KEYS = ("cov_rr", "cov_rk", "cov_rb", "cov_kk", "cov_kb", "cov_bb")


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key or key.count(".") > 1:
            raise InputError(f"config line {lineno}: bad key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path) -> dict:
    with open(path) as fh:
        return parse_config(fh.read())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_config(mapping: dict, path) -> None:
    with open(path, "w") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {format_value(value)}\n")


def get_float(cfg: dict, key: str, default=None) -> float:
    if key not in cfg:
        if default is None:
            raise InputError(f"missing config key {key!r}")
        return default
    try:
        return float(cfg[key])
    except ValueError as exc:
        raise InputError(f"config key {key!r}: not a number: {cfg[key]!r}") from exc


def get_int(cfg: dict, key: str, default=None) -> int:
    if key not in cfg:
        if default is None:
            raise InputError(f"missing config key {key!r}")
        return default
    try:
        return int(cfg[key])
    except ValueError as exc:
        raise InputError(f"config key {key!r}: not an integer: {cfg[key]!r}") from exc


def get_bool(cfg: dict, key: str, default: bool) -> bool:
    if key not in cfg:
        return default
    val = cfg[key].lower()
    if val in ("true", "1", "yes", "on"):
        return True
    if val in ("false", "0", "no", "off"):
        return False
    raise InputError(f"config key {key!r}: not a boolean: {cfg[key]!r}")


def params_to_mapping(params: HestonParams) -> dict:
    return {
        "r": params.r,
        "kappa": params.kappa,
        "theta": params.theta,
        "sigma": params.sigma,
        "rho": params.rho,
        "lambda": params.lam,
    }


def params_from_mapping(cfg: dict) -> HestonParams:
    return HestonParams(
        r=get_float(cfg, "r"),
        kappa=get_float(cfg, "kappa"),
        theta=get_float(cfg, "theta"),
        sigma=get_float(cfg, "sigma"),
        rho=get_float(cfg, "rho"),
        lam=get_float(cfg, "lambda", 0.0),
    )


def ellipse_to_mapping(ell: UncertaintyEllipse) -> dict:
    c = ell.covariance
    vals = (c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2])
    out = dict(zip(_COV_KEYS, (float(v) for v in vals)))
    out["chi"] = float(ell.chi)
    return out


def ellipse_from_mapping(cfg: dict, center: ControlVector) -> UncertaintyEllipse:
    rr, rk, rb, kk, kb, bb = (get_float(cfg, k) for k in _COV_KEYS)
    cov = np.array([[rr, rk, rb], [rk, kk, kb], [rb, kb, bb]])
    return UncertaintyEllipse(center=center, covariance=cov, chi=get_float(cfg, "chi"))


def model_to_mapping(params: HestonParams, ell: UncertaintyEllipse | None = None) -> dict:
    out = params_to_mapping(params)
    if ell is not None:
        out.update(ellipse_to_mapping(ell))
    return out


def model_from_mapping(cfg: dict):
    """Returns (params, ellipse-or-None); the ellipse center is the parameter
    point itself, in (r, kappa, beta) coordinates."""
    params = params_from_mapping(cfg)
    if "chi" not in cfg:
        return params, None
    return params, ellipse_from_mapping(cfg, params.center_control())
