"""Held-out-sensor RMSE over snapshot series, plus the timing harness.

Holdout sensors never enter the observation grid; their readings are the
reference values. RMSE is reported in V/m after denormalization, with the
normalized-space value kept alongside for diagnostics.
"""

from __future__ import annotations

import logging
import resource
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import glip as glip_mod
from .cntk import CntkConfig, compute_kernel
from .errors import EmptyInput, OutOfBounds, UnitMismatch
from .grid import (
    BuildingMask,
    GridSpec,
    ObservationGrid,
    SensorReading,
    UNITS_NORMALIZED,
    UNITS_VPM,
    latlon_to_pixel,
    rasterize_readings,
)
from .ingest import NormParams
from .priors import KIND_LIP, KIND_RNP, PriorImage, build_lip, build_rnp
from .solver import build_preconditioner, eigenpro_solve, predict, solve_exact

log = logging.getLogger(__name__)

METHOD_CNTK_EXACT = "cntk_exact"
METHOD_CNTK_EIGENPRO = "cntk_eigenpro"
METHOD_GLIP = "glip"
METHODS = (METHOD_CNTK_EXACT, METHOD_CNTK_EIGENPRO, METHOD_GLIP)


@dataclass
class EvalConfig:
    """What to evaluate: holdout sensors, method, prior, method parameters."""

    holdout_ids: tuple[str, ...]
    method: str = METHOD_CNTK_EIGENPRO
    prior: str = KIND_LIP
    cntk: CntkConfig = field(default_factory=CntkConfig)
    solver_s: int = 10
    solver_safety: float = 1.5
    solver_epochs: int = 350
    jitter: Optional[float] = None
    lip_k: int = 5
    lip_power: float = 2.0
    rnp_seed: int = 0
    glip_widths: tuple[int, ...] = glip_mod.DEFAULT_WIDTHS
    glip_lr: float = glip_mod.DEFAULT_LR
    glip_epochs: int = glip_mod.DEFAULT_EPOCHS
    glip_seed: int = 0

    def __post_init__(self):
        self.holdout_ids = tuple(self.holdout_ids)
        if not self.holdout_ids:
            raise ValueError("holdout sensor set must be nonempty")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.prior not in (KIND_LIP, KIND_RNP):
            raise ValueError(f"prior must be {KIND_LIP} or {KIND_RNP}")


@dataclass
class SnapshotResult:
    index: int
    rmse_vpm: float
    rmse_normalized: float
    n_holdout_pixels: int
    observed_pixels: int
    observed_fraction: float


@dataclass
class SeriesReport:
    """Per-snapshot RMSE plus aggregates and the prediction time series."""

    results: list[SnapshotResult]
    skipped_missing_holdout: int
    # rows (snapshot_index, sensor_id, reference_vpm, predicted_vpm)
    series: list[tuple[int, str, float, float]]

    @property
    def rmse_values(self) -> np.ndarray:
        return np.array([r.rmse_vpm for r in self.results])

    @property
    def mean_rmse_vpm(self) -> float:
        return float(self.rmse_values.mean()) if self.results else float("nan")

    @property
    def std_rmse_vpm(self) -> float:
        return float(self.rmse_values.std()) if self.results else float("nan")

    def to_dict(self) -> dict:
        return {
            "per_snapshot": [vars(r) for r in self.results],
            "mean_rmse_vpm": self.mean_rmse_vpm,
            "std_rmse_vpm": self.std_rmse_vpm,
            "snapshots_evaluated": len(self.results),
            "skipped_missing_holdout": self.skipped_missing_holdout,
        }


@dataclass
class TimingReport:
    train_seconds: float
    inference_seconds_per_image: float
    peak_memory_bytes: int

    def __post_init__(self):
        if self.train_seconds < 0 or self.inference_seconds_per_image < 0:
            raise ValueError("durations must be non-negative")
        if self.peak_memory_bytes < 0:
            raise ValueError("memory must be non-negative")

    def to_dict(self) -> dict:
        return vars(self)


def rmse(ref, pred, ref_units: str = UNITS_VPM, pred_units: str = UNITS_VPM) -> float:
    """Root mean square error between paired reference/predicted values."""
    if ref_units == UNITS_NORMALIZED or pred_units == UNITS_NORMALIZED:
        raise UnitMismatch("rmse expects both sides denormalized to V/m")
    ref = np.asarray(ref, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if ref.size == 0:
        raise EmptyInput("rmse needs at least one point")
    if ref.shape != pred.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {pred.shape}")
    return float(np.sqrt(np.mean((ref - pred) ** 2)))


def build_prior(obs: ObservationGrid, spec: GridSpec, cfg: EvalConfig, snapshot_index: int = 0) -> PriorImage:
    if cfg.prior == KIND_LIP:
        return build_lip(obs, k=cfg.lip_k, power=cfg.lip_power)
    return build_rnp(spec, seed=cfg.rnp_seed + snapshot_index)


def reconstruct_pixels(
    obs: ObservationGrid,
    prior: PriorImage,
    pixels: np.ndarray,
    cfg: EvalConfig,
) -> np.ndarray:
    """Normalized-unit predictions at the requested flat pixel indices."""
    pixels = np.asarray(pixels, dtype=np.int64)
    if cfg.method == METHOD_GLIP:
        net = glip_mod.init_net(cfg.glip_seed, widths=cfg.glip_widths)
        net, _ = glip_mod.train(net, prior, obs, lr=cfg.glip_lr, epochs=cfg.glip_epochs)
        return glip_mod.forward(net, prior).ravel()[pixels]

    obs_idx = obs.observed_indices()
    y = obs.observed_values()
    k_tt = compute_kernel(prior, cfg.cntk, obs_idx, obs_idx)
    if cfg.method == METHOD_CNTK_EXACT:
        state = solve_exact(k_tt, y, jitter=cfg.jitter)
    else:
        pre = build_preconditioner(k_tt, s=min(cfg.solver_s, len(y) - 1), safety=cfg.solver_safety)
        state = eigenpro_solve(k_tt, y, pre, epochs=cfg.solver_epochs)
    k_pt = compute_kernel(prior, cfg.cntk, pixels, obs_idx)
    return predict(k_pt, state)


def _reference_pixels(
    readings: Sequence[SensorReading], spec: GridSpec
) -> tuple[np.ndarray, np.ndarray, list[list[str]]]:
    """Mean V/m reference value per occupied pixel, plus the sensor ids.

    Readings that project outside the grid cannot be compared and are
    skipped.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    ids: dict[int, list[str]] = {}
    for r in readings:
        try:
            row, col = latlon_to_pixel(spec, r.lat, r.lon)
        except OutOfBounds:
            log.warning("holdout sensor %s projects outside the grid; skipped", r.sensor_id)
            continue
        pix = row * spec.cols + col
        sums[pix] = sums.get(pix, 0.0) + r.e_field
        counts[pix] = counts.get(pix, 0) + 1
        ids.setdefault(pix, []).append(r.sensor_id)
    pixels = np.array(sorted(sums), dtype=np.int64)
    values = np.array([sums[p] / counts[p] for p in pixels])
    return pixels, values, [ids[p] for p in pixels]


def evaluate_series(
    snapshots: Sequence[Sequence[SensorReading]],
    spec: GridSpec,
    norm: NormParams,
    cfg: EvalConfig,
    buildings: Optional[BuildingMask] = None,
    max_observed_fraction: Optional[float] = None,
    reconstruct_fn: Optional[Callable] = None,
) -> SeriesReport:
    """Holdout RMSE for every snapshot; aggregates over the series.

    Snapshots missing any holdout sensor are skipped and counted. Holdout
    pixels falling inside buildings are excluded with a warning. When
    ``max_observed_fraction`` is given, each snapshot's observation density
    is checked against it as a precondition. ``reconstruct_fn`` substitutes
    the prediction routine (same signature as reconstruct_pixels), mainly
    for harness-level testing.
    """
    if reconstruct_fn is None:
        reconstruct_fn = reconstruct_pixels
    holdout = set(cfg.holdout_ids)
    results: list[SnapshotResult] = []
    series: list[tuple[int, str, float, float]] = []
    skipped = 0

    for i, snapshot in enumerate(snapshots):
        ref_readings = [r for r in snapshot if r.sensor_id in holdout]
        train_readings = [r for r in snapshot if r.sensor_id not in holdout]
        present = {r.sensor_id for r in ref_readings}
        if present != holdout:
            log.warning(
                "snapshot %d missing holdout sensor(s) %s; skipped",
                i,
                sorted(holdout - present),
            )
            skipped += 1
            continue

        ref_pixels, ref_values, ref_ids = _reference_pixels(ref_readings, spec)
        if buildings is not None:
            inside = buildings.blocked.ravel()[ref_pixels]
            if inside.any():
                log.warning(
                    "snapshot %d: %d holdout pixel(s) fall inside buildings; excluded",
                    i,
                    int(inside.sum()),
                )
                ref_pixels = ref_pixels[~inside]
                ref_values = ref_values[~inside]
                ref_ids = [g for g, drop in zip(ref_ids, inside) if not drop]
        if len(ref_pixels) == 0:
            skipped += 1
            continue

        # Holdout hygiene: no holdout pixel may enter the observation grid.
        ref_pixel_set = set(ref_pixels.tolist())
        kept = []
        for r in train_readings:
            try:
                row, col = latlon_to_pixel(spec, r.lat, r.lon)
            except OutOfBounds:
                continue  # rasterization would drop it anyway
            if row * spec.cols + col not in ref_pixel_set:
                kept.append(r)
        obs, _ = rasterize_readings(kept, spec, norm)
        assert not obs.mask.ravel()[ref_pixels].any(), "holdout pixel leaked into observations"

        frac = obs.n_observed / spec.n_pixels
        if max_observed_fraction is not None and frac > max_observed_fraction:
            raise ValueError(
                f"snapshot {i}: observed fraction {frac:.4f} exceeds "
                f"precondition {max_observed_fraction:.4f}"
            )

        prior = build_prior(obs, spec, cfg, snapshot_index=i)
        pred_norm = reconstruct_fn(obs, prior, ref_pixels, cfg)
        pred_vpm = norm.denormalize(pred_norm)
        ref_norm = norm.normalize(ref_values)

        results.append(
            SnapshotResult(
                index=i,
                rmse_vpm=rmse(ref_values, pred_vpm),
                rmse_normalized=float(np.sqrt(np.mean((ref_norm - pred_norm) ** 2))),
                n_holdout_pixels=len(ref_pixels),
                observed_pixels=obs.n_observed,
                observed_fraction=frac,
            )
        )
        for ids_at_pixel, ref_v, pred_v in zip(ref_ids, ref_values, pred_vpm):
            for sensor_id in ids_at_pixel:
                series.append((i, sensor_id, float(ref_v), float(pred_v)))

    return SeriesReport(results=results, skipped_missing_holdout=skipped, series=series)


def time_run(
    train_fn: Callable[[], object],
    infer_fn: Callable[[object], object],
    images: int = 1,
) -> TimingReport:
    """Wall-clock timing of a closed reconstruction job.

    ``train_fn`` builds whatever the method needs (kernel rows, trained
    net); ``infer_fn`` consumes that context once per image. Peak memory is
    the process high-water mark, best effort.
    """
    t0 = time.perf_counter()
    ctx = train_fn()
    train_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    for _ in range(images):
        infer_fn(ctx)
    per_image = (time.perf_counter() - t1) / max(images, 1)

    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return TimingReport(
        train_seconds=train_seconds,
        inference_seconds_per_image=per_image,
        peak_memory_bytes=int(peak_kb) * 1024,
    )
