"""Flat key = value run configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment.  The physical keys (mu_s, mu_a, g, alpha, c, voxel_edge,
grid_radius) must be present; method keys fall back to the defaults below.
Unknown keys are rejected so typos cannot silently change a run.

The ``lambda`` key (damping factor of the fit) keeps its config spelling
here and maps to ``DescentOptions.damping``.
"""

from __future__ import annotations

import math

from .estimators import Scenario
from .grid import VoxelGrid
from .inverse import DescentOptions
from .mh import MhParams
from .optics import OpticalParams, SourceSpec

__all__ = ["ConfigError", "parse_config", "load_config", "resolved_text",
           "build_scenario", "mh_params", "descent_options",
           "REQUIRED_KEYS", "DEFAULTS"]


class ConfigError(ValueError):
    """Malformed or incomplete run configuration."""


REQUIRED_KEYS = ("mu_s", "mu_a", "g", "alpha", "c", "voxel_edge", "grid_radius")

# Method-key defaults; the required physical keys never default.
DEFAULTS = {
    "M": 30_000,
    "M_points": 40,
    "M_rot": 30,
    "T": 250_000,
    "j": 10,
    "J": 21,
    "epsilon": 0.9,
    "lambda": 0.01,
    "eps_score": 0.005,
    "tau0": 1.0,
    "iter_cap": 100,
    "burn_in_frac": 0.05,
    "fit_M": 10_000,
    "fit_M_points": 20,
    "fit_M_rot": 10,
}

_INT_KEYS = {"M", "M_points", "M_rot", "T", "j", "J", "grid_radius",
             "iter_cap", "fit_M", "fit_M_points", "fit_M_rot"}
_ALL_KEYS = set(REQUIRED_KEYS) | set(DEFAULTS)


def parse_config(text: str) -> dict:
    """Parse config text into a fully-resolved dict."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate config key '{key}'")
        try:
            cfg[key] = int(value) if key in _INT_KEYS else float(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {value!r}") from exc

    for key in REQUIRED_KEYS:
        if key not in cfg:
            raise ConfigError(f"missing required config key '{key}'")
    for key, default in DEFAULTS.items():
        cfg.setdefault(key, default)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def resolved_text(cfg: dict) -> str:
    """Canonical config serialisation; parses back to the same dict."""
    keys = list(REQUIRED_KEYS) + list(DEFAULTS)
    lines = []
    for key in keys:
        v = cfg[key]
        lines.append(f"{key} = {v:.12g}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(lines) + "\n"


def build_scenario(cfg: dict) -> Scenario:
    try:
        params = OpticalParams(mu_s=cfg["mu_s"], mu_a=cfg["mu_a"], g=cfg["g"])
        source = SourceSpec(alpha=cfg["alpha"], c=cfg["c"])
        gridspec = VoxelGrid(h=cfg["voxel_edge"], m=cfg["grid_radius"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Scenario(params, source, gridspec)


def mh_params(cfg: dict) -> MhParams:
    try:
        return MhParams(j=cfg["j"], J=cfg["J"], epsilon=cfg["epsilon"],
                        T=cfg["T"], m_rot=cfg["M_rot"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def descent_options(cfg: dict) -> DescentOptions:
    return DescentOptions(damping=cfg["lambda"], eps_score=cfg["eps_score"],
                          tau0=cfg["tau0"], iter_cap=cfg["iter_cap"],
                          m_rays=cfg["fit_M"], m_points=cfg["fit_M_points"],
                          m_rot=cfg["fit_M_rot"])


def healthy_tissue_text() -> str:
    """Example config: optical coefficients of healthy brain tissue at red
    light, fibre half-angle pi/10, 0.04 cm voxels on a radius-25 grid."""
    return (
        "mu_s = 280\n"
        "mu_a = 0.57\n"
        "g = 0.9\n"
        f"alpha = {math.pi / 10:.12g}\n"
        "c = 1\n"
        "voxel_edge = 0.04\n"
        "grid_radius = 25\n"
    )
