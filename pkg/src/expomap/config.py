"""Flat key-value run configuration.

The config file format is one dotted key per line, ``key = value``, with
``#`` comments and blank lines ignored. Every run echoes the fully resolved
configuration (all defaults materialized) to ``config.resolved`` in the
output directory, and a run is reproducible from that file alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Optional

from .errors import ConfigError

METHODS = ("cntk_exact", "cntk_eigenpro", "glip")
PRIORS = ("lip", "rnp")


@dataclass
class RunConfig:
    # grid
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    extent_m: float = 1000.0
    rows: int = 128
    cols: int = 128
    # data mode (real CSV) or synth mode; exactly one must be configured
    sensor_csv: Optional[str] = None
    buildings_json: Optional[str] = None
    synth_sources: Optional[int] = None
    synth_amplitude: float = 6.0
    synth_exponent: float = 1.0
    synth_shadow_sigma_db: float = 4.0
    synth_sensors: int = 46
    synth_noise_std: float = 0.01
    synth_seed: Optional[int] = None
    # normalization override (fitted from data when absent)
    norm_min_vpm: Optional[float] = None
    norm_max_vpm: Optional[float] = None
    # prior
    prior_kind: str = "lip"
    lip_k: int = 5
    lip_power: float = 2.0
    rnp_seed: Optional[int] = None
    # method
    method: str = "cntk_eigenpro"
    cntk_layers: int = 6
    cntk_filter_size: int = 3
    cntk_leaky_slope: float = 0.1
    cntk_precision: str = "f64"
    cntk_tile_rows: int = 1024
    solver_s: int = 10
    solver_safety: float = 1.5
    solver_epochs: int = 350
    solver_jitter: Optional[float] = None  # None = auto
    glip_widths: tuple[int, ...] = (1, 16, 32, 32, 16, 1)
    glip_lr: float = 0.01
    glip_epochs: int = 150
    glip_seed: Optional[int] = None
    # evaluation
    holdout: tuple[str, ...] = ()
    bin_hours: float = 2.0
    snapshots: int = 20
    snapshot_index: int = 0
    max_observed_fraction: Optional[float] = None
    # run
    seed: int = 0
    out_dir: str = "out"


# dotted config key -> RunConfig field
KEY_MAP = {
    "grid.origin_lat": "origin_lat",
    "grid.origin_lon": "origin_lon",
    "grid.extent_m": "extent_m",
    "grid.rows": "rows",
    "grid.cols": "cols",
    "data.sensor_csv": "sensor_csv",
    "data.buildings_json": "buildings_json",
    "synth.sources": "synth_sources",
    "synth.amplitude": "synth_amplitude",
    "synth.exponent": "synth_exponent",
    "synth.shadow_sigma_db": "synth_shadow_sigma_db",
    "synth.sensors": "synth_sensors",
    "synth.noise_std": "synth_noise_std",
    "synth.seed": "synth_seed",
    "norm.min_vpm": "norm_min_vpm",
    "norm.max_vpm": "norm_max_vpm",
    "prior.kind": "prior_kind",
    "prior.k": "lip_k",
    "prior.power": "lip_power",
    "prior.rnp_seed": "rnp_seed",
    "method.name": "method",
    "cntk.layers": "cntk_layers",
    "cntk.filter_size": "cntk_filter_size",
    "cntk.leaky_slope": "cntk_leaky_slope",
    "cntk.precision": "cntk_precision",
    "cntk.tile_rows": "cntk_tile_rows",
    "solver.s": "solver_s",
    "solver.safety": "solver_safety",
    "solver.epochs": "solver_epochs",
    "solver.jitter": "solver_jitter",
    "glip.widths": "glip_widths",
    "glip.lr": "glip_lr",
    "glip.epochs": "glip_epochs",
    "glip.seed": "glip_seed",
    "eval.holdout": "holdout",
    "eval.bin_hours": "bin_hours",
    "eval.snapshots": "snapshots",
    "eval.snapshot_index": "snapshot_index",
    "eval.max_observed_fraction": "max_observed_fraction",
    "run.seed": "seed",
    "run.out_dir": "out_dir",
}

_FIELD_TO_KEY = {v: k for k, v in KEY_MAP.items()}


def _convert(field_name: str, text: str):
    text = text.strip()
    if field_name in ("sensor_csv", "buildings_json", "prior_kind", "method",
                      "cntk_precision", "out_dir"):
        return text
    if field_name == "holdout":
        return tuple(s.strip() for s in text.split(",") if s.strip())
    if field_name == "glip_widths":
        return tuple(int(s) for s in text.split(",") if s.strip())
    if field_name == "solver_jitter":
        return None if text.lower() == "auto" else float(text)
    if field_name in ("rows", "cols", "synth_sources", "synth_sensors", "synth_seed",
                      "lip_k", "rnp_seed", "cntk_layers", "cntk_filter_size",
                      "cntk_tile_rows", "solver_s", "solver_epochs", "glip_epochs",
                      "glip_seed", "snapshots", "snapshot_index", "seed"):
        return int(text)
    return float(text)


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEY_MAP:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        field_name = KEY_MAP[key]
        try:
            setattr(cfg, field_name, _convert(field_name, value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    cfg.prior_kind = cfg.prior_kind.lower()
    cfg.method = cfg.method.lower()
    return cfg


def resolve(cfg: RunConfig) -> RunConfig:
    """Fill derived defaults and validate cross-field constraints."""
    if cfg.synth_seed is None:
        cfg.synth_seed = cfg.seed
    if cfg.rnp_seed is None:
        cfg.rnp_seed = cfg.seed
    if cfg.glip_seed is None:
        cfg.glip_seed = cfg.seed

    has_data = cfg.sensor_csv is not None
    has_synth = cfg.synth_sources is not None
    if has_data == has_synth:
        raise ConfigError(
            "exactly one of data.sensor_csv and synth.sources must be configured"
        )
    if has_data and not os.path.exists(cfg.sensor_csv):
        raise ConfigError(f"sensor CSV not found: {cfg.sensor_csv}")
    if cfg.buildings_json is not None and not os.path.exists(cfg.buildings_json):
        raise ConfigError(f"buildings file not found: {cfg.buildings_json}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method.name must be one of {METHODS}, got {cfg.method!r}")
    if cfg.prior_kind not in PRIORS:
        raise ConfigError(f"prior.kind must be one of {PRIORS}, got {cfg.prior_kind!r}")
    if (cfg.norm_min_vpm is None) != (cfg.norm_max_vpm is None):
        raise ConfigError("norm.min_vpm and norm.max_vpm must be given together")
    if cfg.rows < 1 or cfg.cols < 1 or cfg.extent_m <= 0:
        raise ConfigError("grid must have positive rows, cols, and extent")
    if has_synth and cfg.synth_sources < 1:
        raise ConfigError("synth.sources must be >= 1")
    return cfg


def resolved_text(cfg: RunConfig) -> str:
    """The full configuration as config-file text, sorted by key."""
    lines = []
    for f in fields(cfg):
        key = _FIELD_TO_KEY[f.name]
        value = getattr(cfg, f.name)
        if value is None:
            if f.name == "solver_jitter":
                value = "auto"
            else:
                continue
        elif isinstance(value, tuple):
            if not value:
                continue
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(sorted(lines)) + "\n"
