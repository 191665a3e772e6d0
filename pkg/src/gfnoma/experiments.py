"""Dataset generation, training and evaluation sweeps.

All randomness flows from ``cfg.seed`` through :func:`derive_seed`.  Test
and calibration frames for a sweep point depend only on the point's value
(not on its position in the grid), so every detector sees the same frames
and a one-point sweep reproduces the matching row of a longer one.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .cnn import CnnActivityDetector
from .config import DETECTORS, ConfigError, ExperimentConfig, config_from_dict
from .cs import AmpDetector, OmpDetector
from .io import read_header, load_frames, save_frames, write_csv
from .metrics import ConfusionCounts, precision_recall_f1, wilson_interval
from .mud import OracleDetector, ber_with_ad
from .simulator import (FrameBatch, PowerProfile, SpreadingMatrix, gen_spreading,
                        simulate_frames, snr_to_noise_var)
from .threshold import (SymbolStatParams, ThresholdDetector, analytic_vs_empirical_pe,
                        error_probability, optimal_threshold, statistic_moments, ROW_FIELDS)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SWEEP_FIELDS = ("gamma_db", "pa", "detector", "aer", "aer_ci_low", "aer_ci_high", "ber",
                "ber_ci_low", "ber_ci_high", "ber_undefined", "precision", "recall", "f1",
                "missed_bits", "false_alarm_bits", "frames", "seed")


class FingerprintMismatch(ConfigError):
    pass


def derive_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


def _hash(obj) -> str:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def data_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    return _hash({"seed": d["seed"], "system": d["system"], "data": d["data"]})


def model_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    return _hash({"seed": d["seed"], "system": d["system"], "data": d["data"], "train": d["train"]})


def make_codes(cfg: ExperimentConfig) -> SpreadingMatrix:
    return gen_spreading(cfg.system.K, cfg.system.Nc, derive_seed(cfg.seed, 100))


def make_powers(cfg: ExperimentConfig) -> PowerProfile:
    s = cfg.system
    if s.group_sizes is None:
        return PowerProfile.homogeneous(s.K, s.group_powers[0])
    return PowerProfile.from_groups(s.group_powers, s.group_sizes)


def noise_variance(cfg: ExperimentConfig, gamma_db: float) -> float:
    """Noise level for SNR ``gamma_db``; the activity in the definition is fixed per config."""
    return snr_to_noise_var(gamma_db, make_powers(cfg), cfg.system.nominal_activity)


def frames_for(cfg: ExperimentConfig, n: int, gamma_db: float, purpose: int, stream: int,
               rate: Optional[float] = None, start: int = 0) -> FrameBatch:
    s = cfg.system
    return simulate_frames(n, make_codes(cfg), make_powers(cfg), s.M, s.Ns, s.Pmax,
                           noise_variance(cfg, gamma_db), derive_seed(cfg.seed, purpose),
                           stream=stream, start=start, rate=rate, coeff_var=s.coeff_var)


def _point_stream(kind: str, value: float) -> int:
    base = {"snr": 1_000_000, "activity": 3_000_000}[kind]
    return base + int(round(value * 1000)) + 500_000


def stamp(cfg: ExperimentConfig, **extra) -> str:
    lines = [f"config_hash: {cfg.fingerprint()}", f"data_hash: {data_hash(cfg)}",
             f"model_hash: {model_hash(cfg)}", f"seed: {cfg.seed}"]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    return "\n".join(lines)


# ---------------------------------------------------------------- datasets

def estimate_dataset(cfg: ExperimentConfig) -> dict:
    """Disk size and generation time estimate for ``gen-data``."""
    s = cfg.system
    per = s.M * s.Nc * s.Ns * 8 + s.M * s.K * 8 + s.K + s.K * s.Ns + 8
    t0 = time.perf_counter()
    frames_for(cfg, 20, cfg.data.gamma_db, 200, 99)
    rate = (time.perf_counter() - t0) / 20
    n = cfg.data.n_samples
    return dict(samples=n, bytes=per * n, seconds=rate * n)


def shard_path(out_dir, split: str, index: int) -> Path:
    return Path(out_dir) / "data" / f"{split}-{index:04d}.gfn"


def gen_data(cfg: ExperimentConfig, out_dir=None, log=print) -> List[Path]:
    """Write train/val/test frame shards; shards already on disk with a matching hash are kept."""
    out_dir = Path(out_dir or cfg.output_dir)
    (out_dir / "data").mkdir(parents=True, exist_ok=True)
    est = estimate_dataset(cfg)
    log(f"generating {est['samples']} samples: ~{est['bytes'] / 2**20:.1f} MiB, "
        f"~{est['seconds']:.0f} s")
    dh = data_hash(cfg)
    paths = []
    size = cfg.data.shard_size
    for split_idx, (split, n) in enumerate(zip(SPLITS, cfg.data.split_sizes())):
        for index, start in enumerate(range(0, n, size)):
            count = min(size, n - start)
            path = shard_path(out_dir, split, index)
            if path.exists():
                try:
                    h = read_header(path)
                    if h.get("data_hash") == dh and h.get("count") == count:
                        paths.append(path)
                        continue
                except (OSError, ValueError):
                    pass
            frames = frames_for(cfg, count, cfg.data.gamma_db, 200, split_idx, start=start)
            save_frames(path, frames, config_hash=cfg.fingerprint(),
                        extra_header=dict(data_hash=dh, split=split, shard=index, count=count,
                                          gamma_db=cfg.data.gamma_db))
            paths.append(path)
            log(f"wrote {path.name} ({count} frames)")
    return paths


def load_split(cfg: ExperimentConfig, split: str, out_dir=None) -> FrameBatch:
    out_dir = Path(out_dir or cfg.output_dir)
    paths = sorted((out_dir / "data").glob(f"{split}-*.gfn"))
    if not paths:
        raise FileNotFoundError(f"no {split} shards under {out_dir / 'data'}; run gen-data first")
    dh = data_hash(cfg)
    batches = []
    for p in paths:
        frames, header = load_frames(p)
        if header.get("data_hash") != dh:
            raise FingerprintMismatch(f"{p} was generated for a different configuration "
                                      f"({header.get('data_hash')} != {dh})")
        batches.append(frames)
    return FrameBatch.concatenate(batches)


# ---------------------------------------------------------------- training

def make_cnn(cfg: ExperimentConfig) -> CnnActivityDetector:
    t = cfg.train
    return CnnActivityDetector(conv_channels=tuple(t.conv_channels),
                               kernel_size=tuple(t.kernel_size), hidden_units=t.hidden_units,
                               learning_rate=t.learning_rate, batch_size=t.batch_size,
                               max_epochs=t.epochs, patience=t.patience,
                               threshold=cfg.detectors.cnn.threshold, pos_weight=t.pos_weight,
                               augment=t.augment,
                               dtype=t.dtype, random_state=derive_seed(cfg.seed, 300))


def train_cnn(cfg: ExperimentConfig, out_dir=None, resume: bool = False) -> Path:
    """Train CNN-AD on the stored train/val splits; writes ``cnn.ckpt`` and ``train_log.csv``."""
    out_dir = Path(out_dir or cfg.output_dir)
    train = load_split(cfg, "train", out_dir)
    val = load_split(cfg, "val", out_dir)
    state = out_dir / "train_state.gfn"
    if state.exists() and not resume:
        state.unlink()
    if resume and state.exists() and read_header(state).get("model_hash") != model_hash(cfg):
        raise FingerprintMismatch(f"{state} belongs to a different configuration")
    cnn = make_cnn(cfg)
    cnn.fit(train, train.activity, val, val.activity, state_path=state, resume=resume,
            state_header=dict(model_hash=model_hash(cfg)))
    ckpt = out_dir / "cnn.ckpt"
    cnn.save(ckpt, config_hash=model_hash(cfg))
    write_csv(out_dir / "train_log.csv", cnn.training_log_,
              ("epoch", "train_loss", "val_loss", "val_aer"), comment=stamp(cfg))
    return ckpt


def load_cnn(cfg: ExperimentConfig, checkpoint) -> CnnActivityDetector:
    if checkpoint is None or not Path(checkpoint).exists():
        raise FileNotFoundError(f"CNN checkpoint {checkpoint} not found; run train first")
    cnn = CnnActivityDetector.load(checkpoint)
    if cnn.config_hash_ != model_hash(cfg):
        raise FingerprintMismatch(f"checkpoint {checkpoint} was trained under a different "
                                  "configuration")
    cnn.threshold = cfg.detectors.cnn.threshold
    return cnn


# ---------------------------------------------------------------- evaluation

def build_detectors(cfg: ExperimentConfig, names: Iterable[str], cnn=None) -> Dict[str, object]:
    d = cfg.detectors
    out = {}
    for name in names:
        if name == "threshold":
            out[name] = ThresholdDetector(pmax=cfg.system.Pmax, assumed_pa=d.threshold.assumed_pa,
                                          rule=d.threshold.rule, statistic=d.threshold.statistic)
        elif name == "omp":
            out[name] = OmpDetector(residual_tol=d.omp.residual_tol, max_iters=d.omp.max_iters,
                                    calibrate=d.omp.calibrate)
        elif name == "amp":
            out[name] = AmpDetector(n_iters=d.amp.n_iters, damping=d.amp.damping,
                                    alpha=d.amp.alpha, score_threshold=d.amp.score_threshold,
                                    score_mode=d.amp.score_mode)
        elif name == "cnn":
            if cnn is None:
                raise ConfigError("the cnn detector needs a trained checkpoint")
            out[name] = cnn
        elif name == "oracle":
            out[name] = OracleDetector()
        else:
            raise ConfigError(f"unknown detector {name!r}")
    return out


def fit_detectors(detectors: dict, calib: FrameBatch) -> dict:
    """Calibrate every detector except the (already trained) CNN on labelled frames."""
    for name, det in detectors.items():
        if name != "cnn":
            det.fit(calib, calib.activity)
    return detectors


def score_detectors(detectors: dict, frames: FrameBatch, ber_mode: str, point: dict,
                    seed: int) -> list:
    rows = []
    for name, det in detectors.items():
        ev = ber_with_ad(frames, det, mode=ber_mode)
        n_dec = ev.estimates.size
        aer_errors = int(np.sum(ev.estimates != frames.activity))
        a_lo, a_hi = wilson_interval(aer_errors, n_dec)
        b = ev.ber
        b_lo, b_hi = wilson_interval(b.errors, b.bits)
        prf = precision_recall_f1(ev.confusion)
        rows.append(dict(point, detector=name, aer=ev.aer, aer_ci_low=a_lo, aer_ci_high=a_hi,
                         ber=b.value, ber_ci_low=b_lo, ber_ci_high=b_hi,
                         ber_undefined=int(b.undefined), precision=prf.precision,
                         recall=prf.recall, f1=prf.f1, missed_bits=b.missed_bits,
                         false_alarm_bits=b.false_alarm_bits, frames=len(frames), seed=seed))
    return rows


def _selected(cfg, detectors):
    names = tuple(detectors) if detectors else cfg.detectors.selected
    bad = set(names) - set(DETECTORS)
    if bad:
        raise ConfigError(f"unknown detector(s): {', '.join(sorted(bad))}")
    return tuple(n for n in DETECTORS if n in names)


def evaluate_point(cfg: ExperimentConfig, kind: str, value: float, names, checkpoint=None) -> list:
    """Score the selected detectors at one SNR ("snr") or activity-rate ("activity") point."""
    if kind == "snr":
        gamma, rate = float(value), None
    elif kind == "activity":
        gamma, rate = cfg.evaluation.activity_gamma_db, float(value)
    else:
        raise ValueError(f"unknown sweep kind {kind!r}")
    stream = _point_stream(kind, value)
    cnn = load_cnn(cfg, checkpoint) if "cnn" in names else None
    dets = build_detectors(cfg, names, cnn)
    # baselines are calibrated on the training distribution (rate unknown, drawn on [0, Pmax])
    calib = frames_for(cfg, cfg.detectors.calibration_frames, gamma, 400, stream)
    fit_detectors(dets, calib)
    test = frames_for(cfg, cfg.evaluation.n_frames, gamma, 500, stream, rate=rate)
    point = dict(gamma_db=gamma, pa=float("nan") if rate is None else rate)
    return score_detectors(dets, test, cfg.evaluation.ber_mode, point, cfg.seed)


def _point_job(args):
    cfg_dict, kind, value, names, checkpoint = args
    return evaluate_point(config_from_dict(cfg_dict), kind, value, names, checkpoint)


def _run_points(cfg, kind, values, names, checkpoint, workers) -> list:
    jobs = [(cfg.to_dict(), kind, v, names, checkpoint) for v in values]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_point_job, jobs))
    else:
        results = [_point_job(j) for j in jobs]
    rows = [r for res in results for r in res]
    order = {n: i for i, n in enumerate(DETECTORS)}
    key = "gamma_db" if kind == "snr" else "pa"
    return sorted(rows, key=lambda r: (r[key], order[r["detector"]]))


def _checkpoint(out_dir, checkpoint):
    return str(checkpoint) if checkpoint else str(Path(out_dir) / "cnn.ckpt")


def sweep_snr(cfg: ExperimentConfig, out_dir=None, checkpoint=None, workers: int = 1,
              detectors=None) -> Path:
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = _selected(cfg, detectors)
    rows = _run_points(cfg, "snr", cfg.evaluation.snr_db, names,
                       _checkpoint(out_dir, checkpoint), workers)
    return write_csv(out_dir / "sweep_snr.csv", rows, SWEEP_FIELDS, comment=stamp(cfg))


def sweep_activity(cfg: ExperimentConfig, out_dir=None, checkpoint=None, workers: int = 1,
                   detectors=None) -> Path:
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = _selected(cfg, detectors)
    rows = _run_points(cfg, "activity", cfg.evaluation.activity_rates, names,
                       _checkpoint(out_dir, checkpoint), workers)
    return write_csv(out_dir / "sweep_activity.csv", rows, SWEEP_FIELDS, comment=stamp(cfg))


TABLE_FIELDS = ("device", "detector", "tp", "fp", "tn", "fn", "precision", "recall", "f1",
                "precision_undefined", "recall_undefined")


def table_metrics(cfg: ExperimentConfig, out_dir=None, checkpoint=None, detectors=None) -> Path:
    """Per-device precision/recall/F1 plus the raw per-frame decisions they come from."""
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [n for n in _selected(cfg, detectors or ("cnn", "omp", "amp")) if n != "oracle"]
    gamma = cfg.evaluation.table_gamma_db
    stream = _point_stream("snr", gamma)
    cnn = load_cnn(cfg, _checkpoint(out_dir, checkpoint)) if "cnn" in names else None
    dets = fit_detectors(build_detectors(cfg, names, cnn),
                         frames_for(cfg, cfg.detectors.calibration_frames, gamma, 400, stream))
    test = frames_for(cfg, cfg.evaluation.n_frames, gamma, 500, stream)
    decisions = {name: det.predict(test) for name, det in dets.items()}
    K = cfg.system.K
    raw = []
    for i in range(len(test)):
        for k in range(K):
            r = dict(frame=i, device=k, truth=int(test.activity[i, k]))
            r.update({name: int(decisions[name][i, k]) for name in names})
            raw.append(r)
    write_csv(out_dir / "table_raw.csv", raw, ("frame", "device", "truth") + tuple(names),
              comment=stamp(cfg, gamma_db=gamma))
    rows = []
    for name in names:
        cc = ConfusionCounts.from_predictions(decisions[name], test.activity)
        for k in range(K):
            s = precision_recall_f1(cc, device=k)
            rows.append(dict(device=k, detector=name, tp=int(cc.tp[k]), fp=int(cc.fp[k]),
                             tn=int(cc.tn[k]), fn=int(cc.fn[k]), precision=s.precision,
                             recall=s.recall, f1=s.f1,
                             precision_undefined=int(s.precision_undefined),
                             recall_undefined=int(s.recall_undefined)))
    return write_csv(out_dir / "table_metrics.csv", rows, TABLE_FIELDS,
                     comment=stamp(cfg, gamma_db=gamma))


# ---------------------------------------------------------------- threshold analysis

SUMMARY_FIELDS = ("K", "gamma_db", "n_decisions", "errors", "pe_empirical", "pe_analytic",
                  "standard_error", "z_score", "relative_gap", "ci_low", "ci_high",
                  "fa_one_sided_empirical", "fa_one_sided_analytic", "fa_two_sided_empirical",
                  "fa_two_sided_analytic")
CONVEXITY_FIELDS = ("draw", "mu", "sigma", "pa", "min_second_difference", "convex",
                    "quasi_convex", "tau_closed_form", "tau_search", "tau_grid",
                    "search_gap_over_mu")


def golden_section_min(f, lo: float, hi: float, tol: float) -> float:
    """Minimizer of a unimodal ``f`` on [lo, hi] (bounded Brent/golden-section search)."""
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                          options=dict(xatol=tol, maxiter=500))
    x = float(res.x)
    # the bounded search never evaluates the endpoints exactly
    cands = [lo, x, hi]
    return min(cands, key=f)


def convexity_check(mu, sigma, pa, grid_points=1000) -> dict:
    """Numerical convexity and argmin checks of the error objective on [0, 2 mu]."""
    params = SymbolStatParams(mu, sigma, pa)
    grid = np.linspace(0.0, 2.0 * mu, grid_points)
    pe = error_probability(grid, params)
    d2 = pe[2:] - 2 * pe[1:-1] + pe[:-2]
    d1 = np.diff(pe)
    # unimodal: differences go (weakly) negative then (weakly) positive
    signs = np.sign(d1[np.abs(d1) > 1e-15])
    quasi = bool(np.all(np.diff(signs) >= 0))
    tau_cf = optimal_threshold(params)
    tau_search = golden_section_min(lambda t: error_probability(t, params), 0.0, 2.0 * mu,
                                    tol=1e-10 * mu)
    return dict(mu=float(mu), sigma=float(sigma), pa=float(pa),
                min_second_difference=float(d2.min()), convex=int(d2.min() >= -1e-9),
                quasi_convex=int(quasi), tau_closed_form=float(tau_cf),
                tau_search=tau_search, tau_grid=float(grid[np.argmin(pe)]),
                search_gap_over_mu=abs(min(tau_cf, 2.0 * mu) - tau_search) / mu)


def convexity_draws(cfg: ExperimentConfig):
    """(mu, sigma, pa) triples from simulated channels and a spread of assumed rates."""
    ta = cfg.threshold_analysis
    rng = np.random.default_rng(derive_seed(cfg.seed, 610))
    K = max(ta.K_values)
    codes = gen_spreading(K, ta.Nc, derive_seed(cfg.seed, 611))
    powers = PowerProfile.homogeneous(K)
    part = "real" if ta.statistic == "real" else "complex"
    out = []
    for _ in range(ta.convexity_draws):
        gamma = float(rng.choice(ta.gamma_db))
        pa = float(rng.uniform(0.01, 0.5))
        G = np.sqrt(0.5) * (rng.standard_normal((1, K)) + 1j * rng.standard_normal((1, K)))
        nv = snr_to_noise_var(gamma, powers, ta.pa)
        mu, sigma = statistic_moments(G, codes, nv, powers, pa, part=part)
        k = int(rng.integers(K))
        out.append((float(mu[0, k]), float(sigma[0, k]), pa))
    return out


def threshold_analysis(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Analytic-vs-empirical error checks plus convexity/argmin validation.

    Writes ``threshold_rows.csv`` (per draw, device and antenna),
    ``threshold_summary.csv``, ``threshold_convexity.csv`` and
    ``threshold_curves.csv`` (objective on a tau grid for a few draws).
    """
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ta = cfg.threshold_analysis
    rows, summaries = [], []
    for i, K in enumerate(ta.K_values):
        for j, gamma in enumerate(ta.gamma_db):
            rep = analytic_vs_empirical_pe(K=K, Nc=ta.Nc, gamma_db=gamma, pa=ta.pa,
                                           n_draws=ta.n_draws, symbols_per_draw=ta.symbols_per_draw,
                                           statistic=ta.statistic,
                                           seed=derive_seed(cfg.seed, 600, i, j))
            summaries.append(dict(K=K, gamma_db=gamma, **rep.summary()))
            rows.extend(dict(r, K=K, gamma_db=gamma) for r in rep.rows)
    comment = stamp(cfg)
    write_csv(out_dir / "threshold_rows.csv", rows, ("K", "gamma_db") + ROW_FIELDS, comment=comment)
    write_csv(out_dir / "threshold_summary.csv", summaries, SUMMARY_FIELDS, comment=comment)

    checks = []
    curves = []
    for d, (mu, sigma, pa) in enumerate(convexity_draws(cfg)):
        checks.append(dict(draw=d, **convexity_check(mu, sigma, pa, ta.grid_points)))
        if d < 5:
            grid = np.linspace(0.0, 2.0 * mu, 101)
            pe = error_probability(grid, SymbolStatParams(mu, sigma, pa))
            curves.extend(dict(draw=d, tau=t, pe=p) for t, p in zip(grid, pe))
    write_csv(out_dir / "threshold_convexity.csv", checks, CONVEXITY_FIELDS, comment=comment)
    write_csv(out_dir / "threshold_curves.csv", curves, ("draw", "tau", "pe"), comment=comment)
    return dict(summary=summaries, convexity=checks)
