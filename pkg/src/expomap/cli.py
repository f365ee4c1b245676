"""Batch pipeline driver.

Subcommands:

    expomap ingest      --csv data.csv --out DIR
    expomap synth       --config run.cfg [--out DIR]
    expomap reconstruct --config run.cfg [--seed N] [--out DIR]
    expomap evaluate    --config run.cfg [--out DIR]
    expomap render      --map map.csv --format pgm --out map.pgm
    expomap bench       --config run.cfg [--out DIR]

Every run echoes its fully resolved configuration to config.resolved in the
output directory; rerunning from that file reproduces the outputs byte for
byte. Output files are written atomically (temp file + rename).
"""

from __future__ import annotations

# Thread cap must land in the environment before BLAS initializes.
import os

_threads = os.environ.get("EXPOMAP_THREADS")
if _threads and _threads.strip() not in ("", "0"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads.strip())

import argparse
import json
import logging
import sys
import tempfile
from datetime import timedelta

import numpy as np

from . import binio
from . import glip as glip_mod
from .cntk import CntkConfig, compute_kernel
from .config import RunConfig, load_config, resolve, resolved_text
from .errors import ConfigError, ExpomapError
from .evaluate import (
    EvalConfig,
    METHOD_CNTK_EXACT,
    METHOD_GLIP,
    METHODS,
    evaluate_series,
    time_run,
)
from .grid import (
    ExposureMap,
    GridSpec,
    UNITS_VPM,
    apply_building_mask,
    rasterize_readings,
)
from .ingest import (
    NormParams,
    bin_snapshots,
    clean_readings,
    fit_norm,
    load_building_polygons,
    parse_sensor_csv,
    rasterize_buildings,
    write_sensor_csv,
)
from .priors import KIND_LIP, KIND_RNP, build_lip, build_rnp
from .solver import build_preconditioner, eigenpro_solve, predict, solve_exact
from .synth import SourceSpec, generate_field, sample_sensors

log = logging.getLogger(__name__)

# Published reference results for the original two-district Lille deployment
# (46 sensors in Wazemmes, 18 in Euratechnologies, 4 + 2 held out, 128x128
# grid). They are carried in reports as documented targets only: reproducing
# them requires the proprietary MEL sensor dataset, which is not
# redistributable. Where two figures were published for the same setup, both
# are recorded verbatim.
REFERENCE_TARGETS = {
    "note": (
        "Published reference RMSE in V/m for the original Lille deployment; "
        "requires MEL dataset, not reproducible from synthetic runs."
    ),
    "rmse_vpm": {
        "wazemmes": {
            "cntk_exact_lip": 8.59e-1,
            "cntk_eigenpro_lip": 1.99e-1,
            "cntk_eigenpro_rnp": 8.59e-1,
            "glip_lip": 4.96e-1,
            "glip_lip_alternate": 6.01e-1,
        },
        "euratechnologies": {
            "cntk_exact_lip": 7.46e-1,
            "cntk_eigenpro_lip": 4.59e-1,
            "cntk_eigenpro_rnp": 8.70e-1,
            "glip_lip": 6.61e-1,
        },
    },
    "timing_seconds": {
        "glip_train": 73.0,
        "cntk_exact_train": 10.0,
        "cntk_exact_inference_per_image": 3.5e-5,
        "cntk_eigenpro_train": 14.0,
        "cntk_eigenpro_inference_per_image": 4.1e-4,
    },
}


def _atomic_write(path: str, data) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-expomap-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def map_to_csv(emap: ExposureMap) -> str:
    """Row-major CSV text, grid row 0 (southern edge) first, 12 sig digits."""
    lines = [",".join(f"{v:.12g}" for v in row) for row in emap.values]
    return "\n".join(lines) + "\n"


def map_to_pgm(emap: ExposureMap) -> str:
    """Plain P2 raster, min-max scaled to 0..255, grid row 0 first.

    Grid row 0 is the southern edge, so the image is south-up. A constant
    map renders all zero, and excluded (building) pixels render zero
    regardless of scaling.
    """
    values = emap.values
    excluded = emap.excluded if emap.excluded is not None else np.zeros(values.shape, bool)
    live = values[~excluded]
    lo = live.min() if live.size else 0.0
    hi = live.max() if live.size else 0.0
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0).astype(int)
        scaled = np.clip(scaled, 0, 255)
    else:
        scaled = np.zeros(values.shape, dtype=int)
    scaled[excluded] = 0
    rows, cols = values.shape
    body = "\n".join(" ".join(str(v) for v in scaled[r]) for r in range(rows))
    return f"P2\n{cols} {rows}\n255\n{body}\n"


def render_map(emap: ExposureMap, fmt: str, path: str) -> None:
    """Write a map artifact in the requested format (csv or pgm)."""
    if fmt == "csv":
        _atomic_write(path, map_to_csv(emap))
    elif fmt == "pgm":
        _atomic_write(path, map_to_pgm(emap))
    else:
        raise ConfigError(f"unknown render format {fmt!r} (expected csv or pgm)")


def parse_map_csv(path) -> np.ndarray:
    values = np.loadtxt(path, delimiter=",", ndmin=2)
    return values


def grid_spec_from(cfg: RunConfig) -> GridSpec:
    return GridSpec(
        origin_lat=cfg.origin_lat,
        origin_lon=cfg.origin_lon,
        extent_m=cfg.extent_m,
        rows=cfg.rows,
        cols=cfg.cols,
    )


def cntk_config_from(cfg: RunConfig) -> CntkConfig:
    return CntkConfig(
        layers=cfg.cntk_layers,
        filter_size=cfg.cntk_filter_size,
        leaky_slope=cfg.cntk_leaky_slope,
        precision=cfg.cntk_precision,
        tile_rows=cfg.cntk_tile_rows,
    )


def eval_config_from(cfg: RunConfig) -> EvalConfig:
    return EvalConfig(
        holdout_ids=cfg.holdout,
        method=cfg.method,
        prior=KIND_LIP if cfg.prior_kind == "lip" else KIND_RNP,
        cntk=cntk_config_from(cfg),
        solver_s=cfg.solver_s,
        solver_safety=cfg.solver_safety,
        solver_epochs=cfg.solver_epochs,
        jitter=cfg.solver_jitter,
        lip_k=cfg.lip_k,
        lip_power=cfg.lip_power,
        rnp_seed=cfg.rnp_seed,
        glip_widths=cfg.glip_widths,
        glip_lr=cfg.glip_lr,
        glip_epochs=cfg.glip_epochs,
        glip_seed=cfg.glip_seed,
    )


def synth_sources_from(cfg: RunConfig, spec: GridSpec) -> list[SourceSpec]:
    """Seeded random source layout, fixed across a snapshot series."""
    rng = np.random.default_rng(cfg.synth_seed)
    sources = []
    for _ in range(cfg.synth_sources):
        sources.append(
            SourceSpec(
                row=int(rng.integers(0, spec.rows)),
                col=int(rng.integers(0, spec.cols)),
                amplitude=cfg.synth_amplitude,
                exponent=cfg.synth_exponent,
                shadow_sigma_db=cfg.synth_shadow_sigma_db,
            )
        )
    return sources


def synth_snapshot(cfg: RunConfig, spec: GridSpec, sources, index: int, buildings=None):
    """Field and readings for snapshot ``index`` of a synthetic series.

    Source and sensor positions stay fixed across the series; shadowing and
    measurement noise vary per snapshot.
    """
    field = generate_field(spec, sources, seed=cfg.synth_seed + index)
    readings = sample_sensors(
        field,
        spec,
        count=cfg.synth_sensors,
        seed=cfg.synth_seed,
        noise_std=cfg.synth_noise_std,
        buildings=buildings,
        noise_seed=cfg.synth_seed + 7919 + index,
    )
    return field, readings


def _load_buildings(cfg: RunConfig, spec: GridSpec):
    if cfg.buildings_json is None:
        return None
    return rasterize_buildings(load_building_polygons(cfg.buildings_json), spec)


def _prepare_data_snapshots(cfg: RunConfig):
    """Real-data path: parse, clean, fit normalization, bin into snapshots."""
    with open(cfg.sensor_csv, "rb") as fh:
        readings, malformed = parse_sensor_csv(fh)
    cleaned, report = clean_readings(readings)
    if cfg.norm_min_vpm is not None:
        norm = NormParams(cfg.norm_min_vpm, cfg.norm_max_vpm)
    else:
        norm = fit_norm(cleaned)
    snapshots = bin_snapshots(cleaned, period=timedelta(hours=cfg.bin_hours))
    cleaning = report.to_dict()
    cleaning["malformed_rows"] = len(malformed)
    return snapshots, norm, cleaning


def _prepare_synth_series(cfg: RunConfig, spec: GridSpec, n: int, buildings=None):
    """Synthetic path: n seeded snapshots plus a global normalization."""
    sources = synth_sources_from(cfg, spec)
    fields, snapshots = [], []
    for i in range(n):
        field, readings = synth_snapshot(cfg, spec, sources, i, buildings)
        fields.append(field)
        snapshots.append(readings)
    all_readings = [r for snap in snapshots for r in snap]
    if cfg.norm_min_vpm is not None:
        norm = NormParams(cfg.norm_min_vpm, cfg.norm_max_vpm)
    else:
        norm = fit_norm(all_readings)
    return fields, snapshots, norm


def cmd_reconstruct(cfg: RunConfig, out_dir: str) -> int:
    spec = grid_spec_from(cfg)
    buildings = _load_buildings(cfg, spec)

    if cfg.sensor_csv is not None:
        snapshots, norm, cleaning = _prepare_data_snapshots(cfg)
        if cfg.snapshot_index >= len(snapshots):
            raise ConfigError(
                f"eval.snapshot_index {cfg.snapshot_index} out of range "
                f"({len(snapshots)} snapshots)"
            )
        readings = snapshots[cfg.snapshot_index]
    else:
        sources = synth_sources_from(cfg, spec)
        _, readings = synth_snapshot(cfg, spec, sources, cfg.snapshot_index, buildings)
        norm = (
            NormParams(cfg.norm_min_vpm, cfg.norm_max_vpm)
            if cfg.norm_min_vpm is not None
            else fit_norm(readings)
        )
        cleaning = {
            "duplicates_dropped": 0,
            "nan_dropped": 0,
            "outliers_dropped": 0,
            "out_of_bounds_dropped": 0,
            "malformed_rows": 0,
        }

    obs, dropped = rasterize_readings(readings, spec, norm)
    cleaning["rasterize_out_of_bounds_dropped"] = dropped
    if obs.n_observed == 0:
        raise ConfigError("no observations landed on the grid")

    if cfg.prior_kind == "lip":
        prior = build_lip(obs, k=cfg.lip_k, power=cfg.lip_power)
    else:
        prior = build_rnp(spec, seed=cfg.rnp_seed)

    kcfg = cntk_config_from(cfg)
    all_pixels = np.arange(spec.n_pixels)
    info: dict = {}

    if cfg.method == METHOD_GLIP:
        def train_fn():
            net = glip_mod.init_net(cfg.glip_seed, widths=cfg.glip_widths)
            net, trace = glip_mod.train(net, prior, obs, lr=cfg.glip_lr, epochs=cfg.glip_epochs)
            info["final_loss"] = trace.losses[-1] if trace.losses else None
            return net

        def infer_fn(net):
            return glip_mod.forward(net, prior).ravel()
    else:
        def train_fn():
            obs_idx = obs.observed_indices()
            y = obs.observed_values()
            k_tt = compute_kernel(prior, kcfg, obs_idx, obs_idx)
            if cfg.method == METHOD_CNTK_EXACT:
                state = solve_exact(k_tt, y, jitter=cfg.solver_jitter)
            else:
                pre = build_preconditioner(
                    k_tt, s=min(cfg.solver_s, len(y) - 1), safety=cfg.solver_safety
                )
                state = eigenpro_solve(k_tt, y, pre, epochs=cfg.solver_epochs)
            info["iterations"] = state.iterations
            info["final_residual"] = state.final_residual
            k_pt = compute_kernel(prior, kcfg, all_pixels, obs_idx)
            return state, k_pt

        def infer_fn(ctx):
            state, k_pt = ctx
            return predict(k_pt, state)

    t_ctx = {}

    def train_once():
        t_ctx["ctx"] = train_fn()
        return t_ctx["ctx"]

    timing = time_run(train_once, infer_fn)
    pred_norm = np.asarray(infer_fn(t_ctx["ctx"]), dtype=np.float64).reshape(spec.shape)

    emap = ExposureMap(values=norm.denormalize(pred_norm), units=UNITS_VPM)
    suppressed = 0
    if buildings is not None:
        emap = apply_building_mask(emap, buildings)
        suppressed = int(buildings.blocked.sum())

    os.makedirs(out_dir, exist_ok=True)
    if cfg.method == METHOD_GLIP:
        binio.save_glip_net(os.path.join(out_dir, "net.bin"), t_ctx["ctx"])
    else:
        state, k_pt = t_ctx["ctx"]
        binio.save_kernel_block(
            os.path.join(out_dir, "kernel_cache.bin"),
            k_pt,
            grid_shape=spec.shape,
            layers=cfg.cntk_layers,
            filter_size=cfg.cntk_filter_size,
            leaky_slope=cfg.cntk_leaky_slope,
            precision=cfg.cntk_precision,
        )
        _write_json(
            os.path.join(out_dir, "solve_state.json"),
            state.to_dict(config_echo={"method": cfg.method, "epochs": cfg.solver_epochs}),
        )
    render_map(emap, "csv", os.path.join(out_dir, "map.csv"))
    render_map(emap, "pgm", os.path.join(out_dir, "map.pgm"))
    _write_json(os.path.join(out_dir, "cleaning_report.json"), cleaning)
    _write_json(os.path.join(out_dir, "timing.json"), timing.to_dict())
    report = {
        "method": cfg.method,
        "prior": cfg.prior_kind,
        "grid": {"rows": spec.rows, "cols": spec.cols, "extent_m": spec.extent_m},
        "observed_pixels": obs.n_observed,
        "total_pixels": spec.n_pixels,
        "observed_fraction": obs.n_observed / spec.n_pixels,
        "suppressed_pixels": suppressed,
        "map_units": UNITS_VPM,
        "norm": {"min_vpm": norm.min_vpm, "max_vpm": norm.max_vpm},
        "solver": info,
        "timing": timing.to_dict(),
        "reference_targets": REFERENCE_TARGETS,
    }
    _write_json(os.path.join(out_dir, "report.json"), report)
    _atomic_write(os.path.join(out_dir, "config.resolved"), resolved_text(cfg))
    print(f"reconstruct: wrote {out_dir}/map.csv ({obs.n_observed} observed pixels)")
    return 0


def cmd_evaluate(cfg: RunConfig, out_dir: str) -> int:
    if not cfg.holdout:
        raise ConfigError("evaluate needs eval.holdout sensor ids")
    spec = grid_spec_from(cfg)
    buildings = _load_buildings(cfg, spec)

    if cfg.sensor_csv is not None:
        snapshots, norm, _ = _prepare_data_snapshots(cfg)
    else:
        _, snapshots, norm = _prepare_synth_series(cfg, spec, cfg.snapshots, buildings)

    ecfg = eval_config_from(cfg)
    report = evaluate_series(
        snapshots,
        spec,
        norm,
        ecfg,
        buildings=buildings,
        max_observed_fraction=cfg.max_observed_fraction,
    )

    os.makedirs(out_dir, exist_ok=True)
    doc = report.to_dict()
    doc["method"] = cfg.method
    doc["prior"] = cfg.prior_kind
    doc["holdout"] = list(cfg.holdout)
    doc["norm"] = {"min_vpm": norm.min_vpm, "max_vpm": norm.max_vpm}
    doc["reference_targets"] = REFERENCE_TARGETS
    _write_json(os.path.join(out_dir, "report.json"), doc)

    lines = ["snapshot,sensor_id,reference_vpm,predicted_vpm"]
    for idx, sensor_id, ref, pred in report.series:
        lines.append(f"{idx},{sensor_id},{ref:.12g},{pred:.12g}")
    _atomic_write(os.path.join(out_dir, "series.csv"), "\n".join(lines) + "\n")
    _atomic_write(os.path.join(out_dir, "config.resolved"), resolved_text(cfg))
    print(
        f"evaluate: {len(report.results)} snapshots, mean RMSE "
        f"{report.mean_rmse_vpm:.4g} V/m (std {report.std_rmse_vpm:.4g})"
    )
    return 0


def cmd_synth(cfg: RunConfig, out_dir: str) -> int:
    if cfg.synth_sources is None:
        raise ConfigError("synth subcommand needs synth.* configuration")
    spec = grid_spec_from(cfg)
    buildings = _load_buildings(cfg, spec)
    sources = synth_sources_from(cfg, spec)
    field, readings = synth_snapshot(cfg, spec, sources, cfg.snapshot_index, buildings)
    os.makedirs(out_dir, exist_ok=True)
    render_map(field, "csv", os.path.join(out_dir, "truth_map.csv"))
    render_map(field, "pgm", os.path.join(out_dir, "truth_map.pgm"))
    write_sensor_csv(readings, os.path.join(out_dir, "sensors.csv"))
    _atomic_write(os.path.join(out_dir, "config.resolved"), resolved_text(cfg))
    print(f"synth: wrote {out_dir}/truth_map.csv and {len(readings)} sensor readings")
    return 0


def cmd_ingest(csv_path: str, out_dir: str) -> int:
    with open(csv_path, "rb") as fh:
        readings, malformed = parse_sensor_csv(fh)
    cleaned, report = clean_readings(readings)
    os.makedirs(out_dir, exist_ok=True)
    write_sensor_csv(cleaned, os.path.join(out_dir, "cleaned.csv"))
    doc = report.to_dict()
    doc["malformed_rows"] = len(malformed)
    doc["input_rows"] = len(readings)
    doc["output_rows"] = len(cleaned)
    _write_json(os.path.join(out_dir, "cleaning_report.json"), doc)
    print(
        f"ingest: {len(readings)} rows in, {len(cleaned)} out "
        f"({report.total_dropped()} dropped, {len(malformed)} malformed)"
    )
    return 0


def cmd_render(map_path: str, fmt: str, out_path: str) -> int:
    values = parse_map_csv(map_path)
    emap = ExposureMap(values=values, units=UNITS_VPM)
    render_map(emap, fmt, out_path)
    print(f"render: wrote {out_path}")
    return 0


def cmd_bench(cfg: RunConfig, out_dir: str) -> int:
    """Timing matrix over the three methods on one snapshot."""
    spec = grid_spec_from(cfg)
    buildings = _load_buildings(cfg, spec)
    if cfg.sensor_csv is not None:
        snapshots, norm, _ = _prepare_data_snapshots(cfg)
        if not snapshots:
            raise ConfigError("no snapshots in the data")
        readings = snapshots[min(cfg.snapshot_index, len(snapshots) - 1)]
    else:
        sources = synth_sources_from(cfg, spec)
        _, readings = synth_snapshot(cfg, spec, sources, cfg.snapshot_index, buildings)
        norm = fit_norm(readings)

    obs, _ = rasterize_readings(readings, spec, norm)
    all_pixels = np.arange(spec.n_pixels)
    results = {}
    for method in METHODS:
        mcfg_fields = vars(cfg).copy()
        mcfg_fields["method"] = method
        mcfg = RunConfig(**mcfg_fields)
        kcfg = cntk_config_from(mcfg)
        if mcfg.prior_kind == "lip":
            prior = build_lip(obs, k=mcfg.lip_k, power=mcfg.lip_power)
        else:
            prior = build_rnp(spec, seed=mcfg.rnp_seed)

        if method == METHOD_GLIP:
            def train_fn(prior=prior, mcfg=mcfg):
                net = glip_mod.init_net(mcfg.glip_seed, widths=mcfg.glip_widths)
                net, _ = glip_mod.train(net, prior, obs, lr=mcfg.glip_lr, epochs=mcfg.glip_epochs)
                return net

            def infer_fn(net, prior=prior):
                return glip_mod.forward(net, prior)
        else:
            def train_fn(prior=prior, mcfg=mcfg, kcfg=kcfg, method=method):
                obs_idx = obs.observed_indices()
                y = obs.observed_values()
                k_tt = compute_kernel(prior, kcfg, obs_idx, obs_idx)
                if method == METHOD_CNTK_EXACT:
                    state = solve_exact(k_tt, y, jitter=mcfg.solver_jitter)
                else:
                    pre = build_preconditioner(
                        k_tt, s=min(mcfg.solver_s, len(y) - 1), safety=mcfg.solver_safety
                    )
                    state = eigenpro_solve(k_tt, y, pre, epochs=mcfg.solver_epochs)
                k_pt = compute_kernel(prior, kcfg, all_pixels, obs_idx)
                return state, k_pt

            def infer_fn(ctx):
                state, k_pt = ctx
                return predict(k_pt, state)

        results[method] = time_run(train_fn, infer_fn).to_dict()

    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "grid": {"rows": spec.rows, "cols": spec.cols},
        "observed_pixels": obs.n_observed,
        "methods": results,
        "reference_targets": REFERENCE_TARGETS["timing_seconds"],
        "note": "absolute seconds are machine specific",
    }
    _write_json(os.path.join(out_dir, "timing.json"), doc)
    _atomic_write(os.path.join(out_dir, "config.resolved"), resolved_text(cfg))
    for method, t in results.items():
        print(
            f"bench {method}: train {t['train_seconds']:.3f}s, "
            f"inference {t['inference_seconds_per_image']:.6f}s/image"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expomap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", help="output directory (overrides run.out_dir)")
        p.add_argument("--seed", type=int, help="override run.seed")
        return p

    add_config_cmd("reconstruct", "reconstruct a full exposure map")
    add_config_cmd("evaluate", "held-out sensor RMSE over a snapshot series")
    add_config_cmd("synth", "generate a synthetic truth map and sensor CSV")
    add_config_cmd("bench", "timing matrix across the three methods")

    p_ingest = sub.add_parser("ingest", help="parse and clean a sensor CSV")
    p_ingest.add_argument("--csv", required=True)
    p_ingest.add_argument("--out", required=True)

    p_render = sub.add_parser("render", help="re-render a map.csv artifact")
    p_render.add_argument("--map", required=True)
    p_render.add_argument("--format", choices=("csv", "pgm"), default="pgm")
    p_render.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            return cmd_ingest(args.csv, args.out)
        if args.command == "render":
            return cmd_render(args.map, args.format, args.out)

        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg = resolve(cfg)
        out_dir = args.out or cfg.out_dir
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, out_dir)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out_dir)
        if args.command == "synth":
            return cmd_synth(cfg, out_dir)
        if args.command == "bench":
            return cmd_bench(cfg, out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ExpomapError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"IOError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
