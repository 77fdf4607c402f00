"""Monte-Carlo experiment orchestration.

Runs sweeps over SNR, pilot length, receive-patch count or RF-chain count,
executes every configured estimator on identical channel/pilot/noise
realizations, and writes the metric table as CSV.  Configuration is a YAML
key tree; two built-in profiles ("ci" desk-scale and "paper" full-scale)
provide complete defaults that a user file can override.
"""

import concurrent.futures
import copy
import csv
import time

import numpy as np
import yaml

from hmimo.geometry import SurfaceGeometry
from hmimo.green import WaveConfig, QuadratureRule, full_channel
from hmimo.surrogate import (CoordinateBox, HybridNet, TrainConfig,
                             generate_training_set, train)
from hmimo.signals import (gen_combiner, gen_pilots, simulate_rx,
                           simulate_rx_hybrid, unitary_transform,
                           combine_channel)
from hmimo.estimator import (EstimatorConfig, NumericalFailure,
                             estimate_full_digital, estimate_hybrid,
                             ls_estimate, _model_stacked)
from hmimo.crlb import SingularInformationError, crlb_position_normalized, fim

CSV_COLUMNS = ["sweep_var", "sweep_value", "estimator", "trials_ok",
               "trials_failed", "nmse_h_db", "nmse_h_stderr_db", "nmse_p_db",
               "nmse_p_stderr_db", "crlb_db", "wall_s"]

ESTIMATOR_NAMES = ("mp-hybrid", "mp-approx", "ls", "known-location")
SWEEP_VARIABLES = ("snr", "length", "patches", "chains")

PROFILES = {
    "ci": {
        "geometry": {"rx_rows": 6, "rx_cols": 6, "tx_rows": 3, "tx_cols": 3,
                     "rx_dx": 0.05, "rx_dy": 0.05, "tx_dx": 0.01, "tx_dy": 0.01},
        "wave": {"frequency": 3.0e9},
        "prior": {"x": [-1.0, 1.0], "y": [-1.0, 1.0], "z": [20.0, 40.0]},
        "sweep": {"variable": "snr", "values": [0.0, 4.0, 8.0, 12.0]},
        "fixed": {"snr": 8.0, "length": 100, "chains": None},
        "trials": 20,
        "quadrature_order": 8,
        "estimators": ["mp-hybrid", "ls", "known-location"],
        "estimator": {"max_iters": 50, "tol": 1e-6, "damping": 0.7,
                      "grid_points": 9},
        "training": {"samples": 20000, "hidden_count": 50, "epochs": 150,
                     "quadrature_order": 4, "seed": 3, "sample_seed": 11},
        "seed": 0,
        "record_timing": True,
        "paths": {"weights": "weights.json",
                  "weights_approx": "weights_approx.json",
                  "out": "sweep.csv"},
    },
    "paper": {
        "geometry": {"rx_rows": 10, "rx_cols": 10, "tx_rows": 5, "tx_cols": 5,
                     "rx_dx": 0.05, "rx_dy": 0.05, "tx_dx": 0.01, "tx_dy": 0.01},
        "wave": {"frequency": 3.0e9},
        "prior": {"x": [-1.0, 1.0], "y": [-1.0, 1.0], "z": [20.0, 40.0]},
        "sweep": {"variable": "snr", "values": [0.0, 4.0, 8.0, 12.0, 16.0, 20.0]},
        "fixed": {"snr": 8.0, "length": 100, "chains": None},
        "trials": 100,
        "quadrature_order": 8,
        "estimators": ["mp-hybrid", "mp-approx", "ls", "known-location"],
        "estimator": {"max_iters": 50, "tol": 1e-6, "damping": 0.7,
                      "grid_points": 9},
        "training": {"samples": 50000, "hidden_count": 50, "epochs": 300,
                     "quadrature_order": 8, "seed": 3, "sample_seed": 11},
        "seed": 0,
        "record_timing": True,
        "paths": {"weights": "weights.json",
                  "weights_approx": "weights_approx.json",
                  "out": "sweep.csv"},
    },
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, profile="ci", overrides=None) -> dict:
    """Assemble the experiment config from a profile plus optional YAML file."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = copy.deepcopy(PROFILES[profile])
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _deep_merge(cfg, user)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        sweep = cfg["sweep"]
        var = sweep["variable"]
        values = sweep["values"]
        trials = cfg["trials"]
        prior = cfg["prior"]
        geom = cfg["geometry"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"missing config field: {exc}") from exc
    if var not in SWEEP_VARIABLES:
        raise ConfigError(f"sweep variable {var!r} not in {SWEEP_VARIABLES}")
    if not values:
        raise ConfigError("sweep grid is empty")
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError(f"trials must be a positive integer, got {trials!r}")
    for axis in ("x", "y", "z"):
        lo, hi = prior[axis]
        if not lo < hi:
            raise ConfigError(f"degenerate prior range for {axis}: [{lo}, {hi}]")
    for key in ("rx_rows", "rx_cols", "tx_rows", "tx_cols"):
        if geom[key] < 1:
            raise ConfigError(f"geometry {key} must be >= 1")
    for name in cfg["estimators"]:
        if name not in ESTIMATOR_NAMES:
            raise ConfigError(f"unknown estimator {name!r}")
    if var == "patches":
        for v in values:
            side = int(round(np.sqrt(v)))
            if side * side != v:
                raise ConfigError(f"patch-count sweep value {v} is not a square")


def build_geometry(cfg: dict, patches=None) -> SurfaceGeometry:
    g = cfg["geometry"]
    rx_rows, rx_cols = g["rx_rows"], g["rx_cols"]
    if patches is not None:
        side = int(round(np.sqrt(patches)))
        rx_rows = rx_cols = side
    return SurfaceGeometry(rx_rows, rx_cols, g["tx_rows"], g["tx_cols"],
                           g["rx_dx"], g["rx_dy"], g["tx_dx"], g["tx_dy"])


def estimator_config(cfg: dict) -> EstimatorConfig:
    e = cfg["estimator"]
    prior = cfg["prior"]
    return EstimatorConfig(max_iters=e["max_iters"], tol=e["tol"],
                           damping=e["damping"], grid_points=e["grid_points"],
                           prior_x=tuple(prior["x"]), prior_y=tuple(prior["y"]),
                           prior_z=tuple(prior["z"]))


# --- training entry point ---------------------------------------------------


def train_surrogates(cfg: dict, progress=None):
    """Train the exact-target and closed-form-target surrogates.

    Returns {"exact": (net, report), "approx": (net, report)} and writes
    both weight files to the configured paths.
    """
    t = cfg["training"]
    geom = build_geometry(cfg)
    wave = WaveConfig(cfg["wave"]["frequency"])
    prior = cfg["prior"]
    box = CoordinateBox.from_prior(geom, tuple(prior["x"]), tuple(prior["y"]),
                                   tuple(prior["z"]))
    quad = QuadratureRule(t["quadrature_order"])
    tc = TrainConfig(hidden_count=t["hidden_count"], epochs=t["epochs"],
                     seed=t["seed"])
    out = {}
    for kind, target, path_key in (("exact", "quadrature", "weights"),
                                   ("approx", "approx", "weights_approx")):
        inputs, targets = generate_training_set(box, geom, wave, quad,
                                                t["samples"],
                                                seed=t["sample_seed"],
                                                channel=target)
        net, report = train(inputs, targets, tc, wave.frequency)
        net.save(cfg["paths"][path_key])
        out[kind] = (net, report)
        if progress is not None:
            progress(f"{kind} surrogate: validation NMSE "
                     f"{report['val_nmse_db']:.1f} dB -> "
                     f"{cfg['paths'][path_key]}")
    return out


# --- Monte-Carlo trials -----------------------------------------------------


def _trial_values(cfg: dict, variable: str, value):
    fixed = dict(cfg["fixed"])
    fixed[{"snr": "snr", "length": "length", "chains": "chains",
           "patches": "patches"}[variable]] = value
    return fixed


def run_trial(cfg, nets, variable, value, seed_seq):
    """One Monte-Carlo realization; returns per-estimator metric dict.

    Every estimator sees the identical (H, S, W) realization.  Metric dict
    maps estimator name to (nmse_h, nmse_p or None); the normalized CRLB
    at the realized position and precision is included under "crlb".
    """
    fixed = _trial_values(cfg, variable, value)
    geom = build_geometry(cfg, patches=fixed.get("patches"))
    wave = WaveConfig(cfg["wave"]["frequency"])
    quad = QuadratureRule(cfg["quadrature_order"])
    prior = cfg["prior"]
    seeds = seed_seq.spawn(4)
    rng = np.random.default_rng(seeds[0])
    p1 = np.array([rng.uniform(*prior["x"]), rng.uniform(*prior["y"]),
                   rng.uniform(*prior["z"])])
    h_true = full_channel(geom, p1, wave, quad).stacked
    pilots = gen_pilots(geom.n_patches, int(fixed["length"]), seed=seeds[1])
    snr_db = float(fixed["snr"])
    chains = fixed.get("chains")
    ecfg = estimator_config(cfg)

    if chains is None:
        y, gamma = simulate_rx(h_true, pilots, snr_db, seed=seeds[2])
        model = unitary_transform(pilots.matrix, y)
        f = None
    else:
        f = gen_combiner(int(chains), geom.m_patches, seed=seeds[3])
        y, gamma = simulate_rx_hybrid(f, h_true, pilots, snr_db, seed=seeds[2])
        model = unitary_transform(pilots.matrix, y)

    ref_power = np.linalg.norm(h_true) ** 2
    p_power = float(np.sum(p1 ** 2))
    results = {}
    for name in cfg["estimators"]:
        t0 = time.perf_counter()
        try:
            if name in ("mp-hybrid", "mp-approx"):
                net = nets["exact" if name == "mp-hybrid" else "approx"]
                if f is None:
                    res = estimate_full_digital(model, net, geom, ecfg)
                else:
                    res = estimate_hybrid(model, f, net, geom, ecfg)
                nmse_h = np.linalg.norm(res.h_hat - h_true) ** 2 / ref_power
                nmse_p = float(np.sum((res.position - p1) ** 2)) / p_power
            elif name == "ls":
                g_ls = ls_estimate(pilots.matrix, y)
                if f is not None:
                    # minimum-norm completion through the combiner
                    f_pinv_t = np.linalg.pinv(f.T)
                    h_ls = np.vstack([
                        g_ls[k * geom.n_patches:(k + 1) * geom.n_patches]
                        @ f_pinv_t
                        for k in range(6)])
                else:
                    h_ls = g_ls
                nmse_h = np.linalg.norm(h_ls - h_true) ** 2 / ref_power
                nmse_p = None
            elif name == "known-location":
                h_model = _model_stacked(nets["exact"], geom, p1, wave)
                nmse_h = np.linalg.norm(h_model - h_true) ** 2 / ref_power
                nmse_p = None
            else:  # pragma: no cover - guarded by validate_config
                raise ConfigError(f"unknown estimator {name!r}")
            results[name] = {"ok": True, "nmse_h": float(nmse_h),
                             "nmse_p": nmse_p,
                             "wall_s": time.perf_counter() - t0}
        except (NumericalFailure, np.linalg.LinAlgError) as exc:
            results[name] = {"ok": False, "error": str(exc),
                             "wall_s": time.perf_counter() - t0}

    if np.isfinite(gamma):
        try:
            f_info = fim(p1, nets["exact"], geom, pilots.matrix, gamma, wave)
            results["crlb"] = crlb_position_normalized(f_info, p1)
        except SingularInformationError:
            results["crlb"] = np.nan
    else:
        results["crlb"] = np.nan
    return results


def _mean_stderr_db(values):
    """dB of the linear mean plus the delta-method stderr in dB."""
    values = np.asarray(values, dtype=float)
    mean = values.mean()
    if mean <= 0 or values.size == 0:
        return -np.inf, 0.0
    if values.size == 1:
        return 10 * np.log10(mean), 0.0
    se = values.std(ddof=1) / np.sqrt(values.size)
    return 10 * np.log10(mean), 10 / np.log(10) * se / mean


def run_point(cfg, nets, variable, value, point_seed) -> list:
    """All trials of one sweep point; returns one CSV row dict per estimator."""
    trials = cfg["trials"]
    trial_seqs = np.random.SeedSequence(
        entropy=cfg["seed"], spawn_key=(point_seed,)).spawn(trials)

    def one(i):
        return run_trial(cfg, nets, variable, value, trial_seqs[i])

    threads = int(cfg.get("threads", 1) or 1)
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            outcomes = list(ex.map(one, range(trials)))
    else:
        outcomes = [one(i) for i in range(trials)]

    crlb_vals = [o["crlb"] for o in outcomes if np.isfinite(o["crlb"])]
    crlb_db = 10 * np.log10(np.mean(crlb_vals)) if crlb_vals else float("nan")
    rows = []
    for name in cfg["estimators"]:
        ok = [o[name] for o in outcomes if o[name]["ok"]]
        failed = trials - len(ok)
        if not ok:
            raise NumericalFailure(
                f"all {trials} trials failed for {name} at {variable}={value}")
        nmse_h_db, nmse_h_se = _mean_stderr_db([o["nmse_h"] for o in ok])
        p_vals = [o["nmse_p"] for o in ok if o["nmse_p"] is not None]
        if p_vals:
            nmse_p_db, nmse_p_se = _mean_stderr_db(p_vals)
        else:
            nmse_p_db, nmse_p_se = float("nan"), float("nan")
        wall = sum(o[name]["wall_s"] for o in outcomes)
        rows.append({"sweep_var": variable, "sweep_value": value,
                     "estimator": name, "trials_ok": len(ok),
                     "trials_failed": failed, "nmse_h_db": nmse_h_db,
                     "nmse_h_stderr_db": nmse_h_se, "nmse_p_db": nmse_p_db,
                     "nmse_p_stderr_db": nmse_p_se, "crlb_db": crlb_db,
                     "wall_s": wall if cfg.get("record_timing", True) else 0.0})
    return rows


def sweep(cfg, nets, progress=None) -> list:
    """Run every sweep point; returns the list of CSV row dicts."""
    variable = cfg["sweep"]["variable"]
    rows = []
    for idx, value in enumerate(cfg["sweep"]["values"]):
        point_rows = run_point(cfg, nets, variable, value, idx)
        rows.extend(point_rows)
        if progress is not None:
            for row in point_rows:
                progress(f"{variable}={value} {row['estimator']}: "
                         f"NMSE_H {row['nmse_h_db']:.1f} dB "
                         f"(ok {row['trials_ok']}/{cfg['trials']})")
    return rows


def _format_cell(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_rows_csv(path, rows) -> None:
    """Write metric rows with the fixed column order and full precision."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow([_format_cell(row[c]) for c in CSV_COLUMNS])
    except OSError as exc:
        raise IOError(f"cannot write CSV {path}: {exc}") from exc


def load_nets(cfg) -> dict:
    """Load the trained surrogates required by the configured estimators."""
    nets = {}
    needed = {"mp-hybrid": "exact", "mp-approx": "approx",
              "known-location": "exact"}
    kinds = {needed[n] for n in cfg["estimators"] if n in needed}
    kinds.add("exact")   # the CRLB column always uses the exact surrogate
    paths = {"exact": cfg["paths"]["weights"],
             "approx": cfg["paths"]["weights_approx"]}
    for kind in kinds:
        try:
            nets[kind] = HybridNet.load(paths[kind])
        except OSError as exc:
            raise ConfigError(
                f"missing {kind} surrogate weights {paths[kind]}: {exc}"
                " (run the train subcommand first)") from exc
    return nets


def crlb_rows(cfg, net) -> list:
    """Normalized CRLB per sweep point, averaged over prior draws."""
    variable = cfg["sweep"]["variable"]
    rows = []
    for idx, value in enumerate(cfg["sweep"]["values"]):
        fixed = _trial_values(cfg, variable, value)
        geom = build_geometry(cfg, patches=fixed.get("patches"))
        wave = WaveConfig(cfg["wave"]["frequency"])
        prior = cfg["prior"]
        trial_seqs = np.random.SeedSequence(
            entropy=cfg["seed"], spawn_key=(idx,)).spawn(cfg["trials"])
        vals = []
        for seq in trial_seqs:
            seeds = seq.spawn(4)
            rng = np.random.default_rng(seeds[0])
            p1 = np.array([rng.uniform(*prior["x"]), rng.uniform(*prior["y"]),
                           rng.uniform(*prior["z"])])
            pilots = gen_pilots(geom.n_patches, int(fixed["length"]),
                                seed=seeds[1])
            h_model = _model_stacked(net, geom, p1, wave)
            snr = 10 ** (float(fixed["snr"]) / 10)
            gamma = snr * pilots.matrix.shape[0] * h_model.shape[1] \
                / np.linalg.norm(pilots.matrix @ h_model) ** 2
            f_info = fim(p1, net, geom, pilots.matrix, gamma, wave)
            vals.append(crlb_position_normalized(f_info, p1))
        rows.append({"sweep_var": variable, "sweep_value": value,
                     "estimator": "crlb", "trials_ok": len(vals),
                     "trials_failed": 0, "nmse_h_db": float("nan"),
                     "nmse_h_stderr_db": float("nan"),
                     "nmse_p_db": float("nan"),
                     "nmse_p_stderr_db": float("nan"),
                     "crlb_db": 10 * np.log10(np.mean(vals)),
                     "wall_s": 0.0})
    return rows
