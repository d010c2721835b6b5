"""Experiment configuration, deterministic runs, sweeps and CSV output.

A run writes ``<name>.csv`` (rows strictly increasing in ``iteration``) and
``<name>.manifest.json`` (config echo, seed, version, wall time, summary).
Floats are written with ``repr`` so identical runs give identical bytes;
wall time is only recorded in the manifest.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from . import __version__, benchmarks as bm, comms
from .bayes import BmamlConfig
from .bilevel import AlsetConfig, alset_solve, implicit_hypergradient, linear_quadratic_problem
from .core import RngStream
from .meta_algorithms import InnerConfig, OuterConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4

BENCHMARKS = ("sinusoid", "demod", "chanpred", "bilevel_quadratic", "bounds")

ALGORITHMS = {
    "sinusoid": bm.META_ALGORITHMS,
    "demod": ("maml", "fomaml", "reptile", "imaml", "prox_maml", "joint"),
    "chanpred": ("lstd", "naive", "per_frame"),
    "bilevel_quadratic": ("alset",),
    "bounds": ("enumeration",),
}

COLUMNS = {
    "sinusoid": ("iteration", "meta_train_loss", "meta_test_loss", "seed"),
    "demod": ("iteration", "meta_train_loss", "ser", "seed"),
    "chanpred": ("iteration", "meta_train_loss", "nmse", "seed"),
    "bilevel_quadratic": ("iteration", "upper_loss", "hypergrad_norm_sq", "seed"),
    "bounds": ("iteration", "gap", "bound", "meta_gap", "meta_bound", "seed"),
}

SWEEP_AXES = {"N": ("sinusoid", "demod", "chanpred"), "K": ("sinusoid", "demod", "chanpred"),
              "SNR": ("demod",), "n_pilots": ("demod",)}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending fields."""


@dataclass(frozen=True)
class DemodOptions:
    snr_db: float = 20.0
    n_test_symbols: int = 1000
    scratch_steps: int = 200


@dataclass(frozen=True)
class ChanPredOptions:
    S: int = 16
    R: int = 2
    L: int = 2
    delta: int = 1
    lam: float = 1.0
    n_slots: int = 40
    noise_var: float = 1e-3


@dataclass(frozen=True)
class BilevelOptions:
    A: float = 2.0
    b: float = 1.0
    noise: float = 0.1
    theta0: float = 0.0


@dataclass(frozen=True)
class BoundsOptions:
    n_instances: int = 50
    n_symbols: int = 2
    n_hyp: int = 2
    n_tasks: int = 2
    n_theta: int = 2
    N: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str = "sinusoid"
    algorithm: str = "maml"
    K: int = 100
    n_train: int = 10
    n_val: int = 10
    seed: int = 0
    output: str = "results"
    name: str = ""
    log_every: int = 0               # 0 picks n_meta_iters // 10
    n_test_tasks: int = 100
    n_test_points: int = 100
    n_particles: int = 5
    context_dim: int = 4
    inner: InnerConfig = InnerConfig()
    outer: OuterConfig = OuterConfig()
    bmaml: BmamlConfig = BmamlConfig()
    demod: DemodOptions = DemodOptions()
    chanpred: ChanPredOptions = ChanPredOptions()
    bilevel: AlsetConfig = AlsetConfig()
    bilevel_problem: BilevelOptions = BilevelOptions()
    bounds: BoundsOptions = BoundsOptions()

    @property
    def run_name(self):
        return self.name or f"{self.benchmark}_{self.algorithm}_seed{self.seed}"

    @property
    def n_iters(self):
        if self.algorithm == "bmaml":
            return self.bmaml.n_meta_iters
        if self.benchmark == "bilevel_quadratic":
            return self.bilevel.I_max
        return self.outer.n_meta_iters

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {"inner": InnerConfig, "outer": OuterConfig, "bmaml": BmamlConfig,
             "demod": DemodOptions, "chanpred": ChanPredOptions, "bilevel": AlsetConfig,
             "bilevel_problem": BilevelOptions, "bounds": BoundsOptions}
_TOP = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{where}] {err}") from err


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    top = dict(data.pop("experiment", {}))
    for k in list(data):
        if k not in _SECTIONS:
            if isinstance(data[k], dict):
                raise ConfigError(f"unknown section [{k}]")
            top[k] = data.pop(k)
    unknown = sorted(set(top) - _TOP)
    if unknown:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(unknown)}")
    sections = {k: _build(_SECTIONS[k], v, k) for k, v in data.items()}
    cfg = ExperimentConfig(**top, **sections)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    return config_from_dict(data)


def validate(cfg: ExperimentConfig):
    bad = []
    if cfg.benchmark not in BENCHMARKS:
        raise ConfigError(f"benchmark: {cfg.benchmark!r} not in {BENCHMARKS}")
    if cfg.algorithm not in ALGORITHMS[cfg.benchmark]:
        bad.append(f"algorithm: {cfg.algorithm!r} not admissible for {cfg.benchmark} "
                   f"(choose from {', '.join(ALGORITHMS[cfg.benchmark])})")
    for key in ("K", "n_train", "n_test_tasks", "n_test_points", "n_particles"):
        if getattr(cfg, key) < 1:
            bad.append(f"{key}: must be positive")
    if cfg.n_val < 1 and cfg.benchmark in ("sinusoid", "demod"):
        bad.append("n_val: must be positive")
    if cfg.log_every < 0:
        bad.append("log_every: must be nonnegative")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        bad.append("seed: must be a nonnegative integer")
    if cfg.benchmark in ("sinusoid", "demod"):
        mb = cfg.bmaml.meta_batch_size if cfg.algorithm == "bmaml" else cfg.outer.meta_batch_size
        if mb > cfg.K:
            bad.append(f"outer.meta_batch_size: {mb} exceeds K={cfg.K}")
        if cfg.algorithm == "cavia" and cfg.inner.n_steps != 1:
            bad.append("inner.n_steps: cavia uses a single context step")
        if cfg.algorithm in ("imaml", "prox_maml") and not cfg.inner.lam > 0:
            bad.append("inner.lam: proximal algorithms need lam > 0")
    if cfg.benchmark == "chanpred":
        c = cfg.chanpred
        if not 1 <= c.R <= c.S:
            bad.append("chanpred.R: must lie in [1, S]")
        if not c.lam > 0:
            bad.append("chanpred.lam: must be positive")
        if c.n_slots < cfg.n_train + c.L + c.delta:
            bad.append("chanpred.n_slots: too short for n_train + L + delta")
    if cfg.benchmark == "bilevel_quadratic" and cfg.bilevel.I_max < 1:
        bad.append("bilevel.I_max: must be positive")
    if cfg.benchmark == "bounds":
        b = cfg.bounds
        if min(b.n_instances, b.n_symbols, b.n_hyp, b.n_tasks, b.n_theta, b.N) < 1:
            bad.append("bounds: all sizes must be positive")
    if bad:
        raise ConfigError("; ".join(bad))


# ---------------------------------------------------------------------------
# CSV writing


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class CsvSink:
    """Writes to ``path.partial`` and renames on success; removes it on failure."""

    def __init__(self, path, columns, ordered=True):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.ordered = ordered
        self.tmp = self.path.with_name(self.path.name + ".partial")
        self.rows = []

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.tmp, "w", newline="\n", encoding="utf-8")
        self.fh.write(",".join(self.columns) + "\n")
        return self

    def write(self, row: dict):
        if self.ordered and self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("rows must be strictly increasing in iteration")
        self.rows.append(row)
        self.fh.write(",".join(fmt(row[c]) for c in self.columns) + "\n")

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            self.tmp.unlink(missing_ok=True)
            self.path.unlink(missing_ok=True)
        return False


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list
    summary: dict
    csv_path: Path = None
    manifest_path: Path = None
    wall_time_s: float = 0.0
    stream_paths: dict = field(default_factory=dict)


def _log_points(n_iters, log_every):
    every = log_every or max(n_iters // 10, 1)
    pts = set(range(0, n_iters + 1, every))
    pts.add(n_iters)
    return pts


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# Benchmarks


def _run_meta(cfg: ExperimentConfig, emit, workers):
    stream = RngStream(cfg.seed)
    alg = cfg.algorithm
    if cfg.benchmark == "sinusoid":
        model = bm.sinusoid_model(alg, cfg.context_dim)
        env = bm.SinusoidEnv()
        tasks = env.tasks(stream.child(bm.TRAIN_PATH), cfg.K, cfg.n_train, cfg.n_val)
        test = env.tasks(stream.child(bm.TEST_PATH), cfg.n_test_tasks, cfg.n_train,
                         cfg.n_test_points)

        def metric(state):
            return float(np.mean(_map(lambda t: bm.adapted_mse(alg, model, state, t, cfg.inner,
                                                               cfg.bmaml), test, workers)))
    else:
        model = bm.demod_classifier()
        d = cfg.demod
        tasks = [bm.demod_device(stream.child(bm.TRAIN_PATH), k, cfg.n_train, cfg.n_val,
                                 d.snr_db)[1] for k in range(cfg.K)]
        test = [bm.demod_device(stream.child(bm.TEST_PATH), k, cfg.n_train,
                                d.n_test_symbols, d.snr_db)[1] for k in range(cfg.n_test_tasks)]

        def metric(state):
            def one(t):
                phi = bm.adapt(alg, model, state, t, cfg.inner)
                return comms.ser_eval(model, phi, t.val_x, t.val_y)
            return float(np.mean(_map(one, test, workers)))

    state0 = bm.initial_state(alg, model, stream.child(bm.INIT_PATH), cfg.n_particles)
    n_iters = cfg.n_iters
    points = _log_points(n_iters, cfg.log_every)
    emit(0, math.nan, metric(state0))

    def callback(it, loss, state):
        if it in points and it > 0:
            emit(it, loss, metric(state))

    state, trace = bm.train(alg, model, tasks, state0, cfg.inner, cfg.outer,
                            stream.child(bm.OUTER_PATH), cfg.bmaml, callback)
    summary = {}
    if cfg.benchmark == "demod":
        scratch = InnerConfig(alpha=cfg.inner.alpha, n_steps=cfg.demod.scratch_steps)
        theta0 = state0
        ser_s, ser_ml = [], []
        for k in range(cfg.n_test_tasks):
            raw, eq, p = bm.demod_device(stream.child(bm.TEST_PATH), k, cfg.n_train,
                                         cfg.demod.n_test_symbols, cfg.demod.snr_db)
            ser_s.append(comms.ser_eval(model, bm.adapt("maml", model, theta0, eq, scratch),
                                        eq.val_x, eq.val_y))
            ser_ml.append(comms.symbol_error_rate(comms.mmse_ml_baseline(raw, p.N0), raw.val_y))
        summary.update(scratch_ser=float(np.mean(ser_s)), mmse_ml_ser=float(np.mean(ser_ml)))
    return summary, {"train": [bm.TRAIN_PATH], "test": [bm.TEST_PATH],
                     "init": [bm.INIT_PATH], "outer": [bm.OUTER_PATH]}


def _run_chanpred(cfg: ExperimentConfig, emit, workers):
    c = cfg.chanpred
    setup = bm.ChanPredSetup(K=cfg.K, S=c.S, R=c.R, L=c.L, delta=c.delta, lam=c.lam,
                             n_tr=cfg.n_train, n_slots=c.n_slots, noise_var=c.noise_var,
                             n_test_frames=cfg.n_test_tasks)
    stream = RngStream(cfg.seed)
    tr = bm.chanpred_frames(stream.child(bm.TRAIN_PATH), cfg.K, setup)
    te = bm.chanpred_frames(stream.child(bm.TEST_PATH), cfg.n_test_tasks, setup)
    mode = "naive" if cfg.algorithm == "per_frame" else cfg.algorithm
    a = (c.L, c.delta, c.lam)
    if cfg.algorithm == "per_frame":
        theta = comms.zero_bias(c.S, c.L)
        train_loss = math.nan
    else:
        theta = comms.chanpred_meta(tr, *a, mode=mode, R=c.R, n_tr=cfg.n_train)
        tasks = [comms.frame_ridge_task(f, *a, cfg.n_train,
                                        c.n_slots - cfg.n_train - c.L - c.delta + 1, mode, c.R)
                 for f in tr]
        from .ridge_meta import ridge_meta_loss
        train_loss = ridge_meta_loss(tasks, theta) / len(tasks)
    per = _map(lambda f: comms.nmse(*comms.chanpred_adapt_predict(
        f, theta, *a, cfg.n_train, mode, c.R)), te, workers)
    emit(0, train_loss, float(np.mean(per)))
    return {"median_frame_nmse": float(np.median(per))}, {"train": [bm.TRAIN_PATH],
                                                          "test": [bm.TEST_PATH]}


def _run_bilevel(cfg: ExperimentConfig, emit, workers):
    p = cfg.bilevel_problem
    prob = linear_quadratic_problem(p.A, p.b, p.noise)
    res = alset_solve(prob, dataclasses.replace(cfg.bilevel, track=True), RngStream(cfg.seed),
                      theta0=np.array([p.theta0]))
    points = _log_points(cfg.bilevel.I_max, cfg.log_every)
    for i in sorted(points):
        th, ph = res.theta_path[i], prob.lower_solution(res.theta_path[i])
        hg = implicit_hypergradient(prob, th, ph)
        emit(i, prob.f(th, ph, None), float(hg @ hg))
    return {"theta": float(res.theta[0]), "target": p.b / p.A,
            "mean_grad_norm_sq": float(res.mean_grad_norm_sq)}, {"alset": []}


def _run_bounds(cfg: ExperimentConfig, emit, workers):
    b = cfg.bounds
    stream = RngStream(cfg.seed)
    results = _map(lambda i: bm.bounds_instance(stream.child(i), b.n_symbols, b.n_hyp,
                                                b.n_tasks, b.n_theta, b.N, cfg.K),
                   range(b.n_instances), workers)
    viol = 0
    for i, r in enumerate(results):
        viol += int(r["gap"] > r["bound"]) + int(r["meta_gap"] > r["meta_bound"])
        emit(i, r)
    return {"violations": viol}, {"instances": []}


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers=1, write=True) -> RunResult:
    """Run one configured experiment; raises ConfigError or NumericError on failure."""
    validate(cfg)
    out = Path(out_dir or cfg.output)
    columns = COLUMNS[cfg.benchmark]
    csv_path = out / f"{cfg.run_name}.csv"
    rows = []
    t0 = time.perf_counter()

    def run(sink):
        def emit(it, a, b=None):
            if cfg.benchmark == "bounds":
                row = {"iteration": it, **a, "seed": cfg.seed}
            else:
                row = dict(zip(columns, (it, a, b, cfg.seed)))
            rows.append(row)
            if sink is not None:
                sink.write(row)

        if cfg.benchmark in ("sinusoid", "demod"):
            return _run_meta(cfg, emit, workers)
        if cfg.benchmark == "chanpred":
            return _run_chanpred(cfg, emit, workers)
        if cfg.benchmark == "bilevel_quadratic":
            return _run_bilevel(cfg, emit, workers)
        return _run_bounds(cfg, emit, workers)

    if write:
        with CsvSink(csv_path, columns) as sink:
            summary, paths = run(sink)
    else:
        summary, paths = run(None)
    wall = time.perf_counter() - t0
    metric = columns[2]
    finite = [r[metric] for r in rows if np.isfinite(r[metric])]
    if cfg.benchmark in ("sinusoid", "demod", "chanpred") and finite:
        summary.update(final=rows[-1][metric], best=float(min(finite)))
    result = RunResult(cfg, rows, summary, csv_path if write else None, None, wall, paths)
    if write:
        result.manifest_path = write_manifest(result, out / f"{cfg.run_name}.manifest.json")
    return result


def write_manifest(result: RunResult, path):
    data = {"config": result.config.to_dict(), "seed": result.config.seed,
            "library_version": __version__, "wall_time_s": result.wall_time_s,
            "summary": result.summary, "csv": str(result.csv_path),
            "stream_paths": result.stream_paths}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")
    return Path(path)


# ---------------------------------------------------------------------------
# Sweeps


def _check_axis(cfg: ExperimentConfig, axis):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: {axis!r} not in {tuple(SWEEP_AXES)}")
    if cfg.benchmark not in SWEEP_AXES[axis]:
        raise ConfigError(f"axis: {axis} is not defined for benchmark {cfg.benchmark}")


def _apply_axis(cfg: ExperimentConfig, axis, value):
    _check_axis(cfg, axis)
    try:
        if axis == "K":
            value = int(value)
            new = dataclasses.replace(cfg, K=value)
        elif axis in ("N", "n_pilots"):
            value = int(value)
            new = dataclasses.replace(cfg, n_train=value)
        else:
            value = float(value)
            new = dataclasses.replace(cfg, demod=dataclasses.replace(cfg.demod, snr_db=value))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{axis}: bad sweep value {value!r} ({err})") from None
    validate(new)
    return new, value


def sweep(cfg: ExperimentConfig, axis, values, out_dir=None, workers=1):
    """One run per value under the shared seed; returns ``(csv path, per-value summaries)``."""
    _check_axis(cfg, axis)
    pairs = [_apply_axis(cfg, axis, v) for v in values]
    configs = [c for c, _ in pairs]
    values = [v for _, v in pairs]
    out = Path(out_dir or cfg.output)
    columns = ("sweep_index", axis) + COLUMNS[cfg.benchmark]
    path = out / f"{cfg.benchmark}_{cfg.algorithm}_sweep_{axis}_seed{cfg.seed}.csv"
    results = _map(lambda c: run_experiment(c, write=False), configs, workers)
    summaries = []
    with CsvSink(path, columns, ordered=False) as sink:
        for i, (v, r) in enumerate(zip(values, results)):
            for row in r.rows:
                sink.write({"sweep_index": i, axis: v, **row})
            summaries.append({axis: v, **r.summary})
    Path(out / (path.stem + ".manifest.json")).write_text(json.dumps(
        {"config": cfg.to_dict(), "axis": axis, "values": values, "seed": cfg.seed,
         "library_version": __version__, "summaries": summaries},
        indent=2, sort_keys=True, default=str) + "\n")
    return path, summaries

