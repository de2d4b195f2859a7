"""Explicit time stepping, ensembles and stroboscopic snapshots.

Every path ``i`` owns a Philox stream keyed by ``(seed, i)``; within a path
the normal draws are consumed in step order, so the ``j``-th increment of
path ``i`` is fixed by ``(seed, i, j)``.  Paths are processed in blocks of
``block_size`` and a block's result depends only on its path indices, which
is why the thread count never changes the output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import BlowUpError, ContractError, EnsembleQualityError, InvalidInputError
from .model import SystemSpec, _drift_raw, diffusion, drift

__all__ = [
    "SCHEMES",
    "SdeConfig",
    "PathState",
    "ProductNormal",
    "EmpiricalLaw",
    "SimulatedPath",
    "em_step",
    "tamed_step",
    "simulate_path",
    "ensemble_snapshots",
    "dynkin_estimate",
    "path_rng",
    "write_snapshots",
    "read_snapshots",
]

SCHEMES = ("euler-maruyama", "tamed-euler")
MAX_REJECTED = 0.01


@dataclass(frozen=True)
class PathState:
    x: np.ndarray
    y: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if x.shape != y.shape or x.ndim != 1:
            raise InvalidInputError(f"x and y must be vectors of equal length, got {x.shape}, {y.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and math.isfinite(self.t)):
            raise InvalidInputError("path state must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", float(self.t))

    def as_row(self):
        return np.concatenate([self.x, self.y])


@dataclass(frozen=True)
class SdeConfig:
    """Simulation settings.

    The horizon is ``n_periods`` periods or ``t_end`` (not both; default one
    period).  ``h`` is snapped to ``period / ceil(period / h)`` so that every
    multiple of the period is a grid time.  ``block_size`` and
    ``noise_block`` tune memory use; neither changes results.
    """

    h: float = 1e-3
    scheme: str = "tamed-euler"
    n_periods: int | None = None
    t_end: float | None = None
    seed: int = 0
    ensemble_size: int = 1
    burn_in_periods: int = 0
    snapshot_times: tuple | None = None
    block_size: int = 4096
    noise_block: int = 1024
    threads: int = 1

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise InvalidInputError(f"h must be positive, got {self.h}")
        if self.scheme not in SCHEMES:
            raise InvalidInputError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.n_periods is not None and self.t_end is not None:
            raise InvalidInputError("give either n_periods or t_end, not both")
        if self.n_periods is not None and self.n_periods < 1:
            raise InvalidInputError("n_periods must be >= 1")
        if self.t_end is not None and not self.t_end > 0:
            raise InvalidInputError("t_end must be positive")
        if self.ensemble_size < 1:
            raise InvalidInputError("ensemble_size must be >= 1")
        if self.burn_in_periods < 0:
            raise InvalidInputError("burn_in_periods must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")
        if self.block_size < 1 or self.noise_block < 1 or self.threads < 1:
            raise InvalidInputError("block_size, noise_block and threads must be positive")
        if self.snapshot_times is not None:
            object.__setattr__(self, "snapshot_times", tuple(float(s) for s in self.snapshot_times))

    def result_fields(self):
        """Fields that determine results (excludes speed-only knobs)."""
        d = asdict(self)
        for k in ("block_size", "noise_block", "threads"):
            d.pop(k)
        return d


class _Plan(NamedTuple):
    h: float
    steps_per_period: int
    period: float
    total_steps: int
    snap_steps: tuple

    def time(self, i):
        q, r = divmod(int(i), self.steps_per_period)
        return q * self.period + r * self.h


def _plan(sys: SystemSpec, cfg: SdeConfig, default_first=1):
    T = sys.period
    N = max(1, math.ceil(T / cfg.h - 1e-9))
    h = T / N
    if cfg.t_end is not None:
        total = math.ceil(cfg.t_end / h - 1e-9)
    else:
        total = (cfg.n_periods or 1) * N
    if cfg.snapshot_times is None:
        first = max(cfg.burn_in_periods, default_first)
        steps = [k * N for k in range(first, total // N + 1)]
        if not steps:
            steps = [total]
    else:
        steps = []
        for s in cfg.snapshot_times:
            q = s / T
            k = round(q * N)
            if abs(k * h - s) > 1e-9 * (1 + abs(s)):
                raise InvalidInputError(f"snapshot time {s} is not on the step grid (h={h})")
            if k < 0 or k > total:
                raise InvalidInputError(f"snapshot time {s} lies outside [0, {total * h}]")
            steps.append(k)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidInputError("snapshot times must be strictly increasing")
    return _Plan(h, N, T, total, tuple(steps))


@dataclass(frozen=True)
class ProductNormal:
    """Initial law ``N(mean_x, std_x^2 I) x N(mean_y, std_y^2 I)``."""

    mean_x: tuple = (0.0,)
    mean_y: tuple = (0.0,)
    std_x: float = 1.0
    std_y: float = 1.0

    def sample(self, rng, n):
        mx = np.broadcast_to(np.asarray(self.mean_x, dtype=float), (n,))
        my = np.broadcast_to(np.asarray(self.mean_y, dtype=float), (n,))
        z = rng.standard_normal(2 * n)
        return mx + self.std_x * z[:n], my + self.std_y * z[n:]


@dataclass
class EmpiricalLaw:
    """Surviving ensemble rows ``(x, y)`` at one time."""

    time: float
    samples: np.ndarray
    provenance: dict = field(default_factory=dict)
    rejected: int = 0
    path_ids: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] % 2:
            raise ContractError(f"samples must be (N, 2n), got {self.samples.shape}")
        if self.path_ids is None:
            self.path_ids = np.arange(len(self.samples))
        self.path_ids = np.asarray(self.path_ids, dtype=np.int64)

    @property
    def n(self):
        return self.samples.shape[1] // 2

    @property
    def size(self):
        return len(self.samples)


class SimulatedPath(NamedTuple):
    states: list
    blown_up: bool
    last_state: PathState


def path_rng(seed, path):
    """Counter-based generator for one path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(path),))))


# -- single steps -------------------------------------------------------------

def _increment(sys, state, h, dw):
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if dw.shape != (sys.k,):
        raise InvalidInputError(f"noise increment must have length {sys.k}")
    return dw


def _finish(sys, state, h, x, y):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise BlowUpError(f"non-finite state after a step of size {h}", state=state, h=h)
    return PathState(x, y, state.t + h)


def em_step(sys: SystemSpec, state: PathState, h, noise_increment) -> PathState:
    """``x+ = x + h y``, ``y+ = y + h dy + Sigma dW``."""
    dw = _increment(sys, state, h, noise_increment)
    with np.errstate(over="ignore", invalid="ignore"):
        dx, dy = _drift_raw(sys, state.x, state.y, state.t)
        S = diffusion(sys, state.x, state.y, state.t)
        return _finish(sys, state, h, state.x + h * dx, state.y + h * dy + S @ dw)


def tamed_step(sys: SystemSpec, state: PathState, h, noise_increment) -> PathState:
    """Euler step with the full drift ``b = (y, dy)`` replaced by ``b / (1 + h|b|)``."""
    dw = _increment(sys, state, h, noise_increment)
    with np.errstate(over="ignore", invalid="ignore"):
        dx, dy = _drift_raw(sys, state.x, state.y, state.t)
        S = diffusion(sys, state.x, state.y, state.t)
        nb = math.sqrt(float(dx @ dx + dy @ dy))
        c = h / (1.0 + h * nb)
        return _finish(sys, state, h, state.x + c * dx, state.y + c * dy + S @ dw)


# -- ensemble engine ----------------------------------------------------------

def _run_block(sys, plan, scheme, seed, path_ids, init, noise_block):
    n, k = sys.n, sys.k
    B = len(path_ids)
    gens = [path_rng(seed, p) for p in path_ids]
    x = np.empty((B, n))
    y = np.empty((B, n))
    for b, g in enumerate(gens):
        x[b], y[b] = init(g)
    dead_at = np.full(B, -1, dtype=np.int64)
    out = np.empty((len(plan.snap_steps), B, 2 * n))
    h = plan.h
    sqh = math.sqrt(h)
    tamed = scheme == "tamed-euler"
    si = 0
    while si < len(plan.snap_steps) and plan.snap_steps[si] == 0:
        out[si, :, :n], out[si, :, n:] = x, y
        si += 1
    step = 0
    last = plan.snap_steps[-1] if plan.snap_steps else 0
    noise = np.empty((noise_block, B, k))
    with np.errstate(over="ignore", invalid="ignore"):
        while step < last:
            S = min(noise_block, last - step)
            for b, g in enumerate(gens):
                noise[:S, b, :] = g.standard_normal((S, k))
            noise[:S] *= sqh
            for j in range(S):
                t = plan.time(step)
                dx, dy = _drift_raw(sys, x, y, t)
                sig = sys.noise.value(x, y, t)
                kick = np.matmul(sig, noise[j][..., None])[..., 0]
                if tamed:
                    nb = np.sqrt(np.sum(dx * dx, axis=-1) + np.sum(dy * dy, axis=-1))
                    c = (h / (1.0 + h * nb))[:, None]
                    xn = x + c * dx
                    yn = y + c * dy + kick
                else:
                    xn = x + h * dx
                    yn = y + h * dy + kick
                ok = np.all(np.isfinite(xn), axis=-1) & np.all(np.isfinite(yn), axis=-1)
                ok &= dead_at < 0
                if not ok.all():
                    dead_at[~ok & (dead_at < 0)] = step
                    xn[~ok] = x[~ok]
                    yn[~ok] = y[~ok]
                x, y = xn, yn
                step += 1
                while si < len(plan.snap_steps) and plan.snap_steps[si] == step:
                    out[si, :, :n], out[si, :, n:] = x, y
                    si += 1
    return out, dead_at, x


def _init_fn(sys, initial):
    n = sys.n
    if initial is None:
        zero = np.zeros(n)
        return lambda g: (zero, zero)
    if isinstance(initial, ProductNormal):
        return lambda g: initial.sample(g, n)
    if isinstance(initial, PathState):
        x0, y0 = initial.x, initial.y
    else:
        x0, y0 = (np.asarray(v, dtype=float) for v in initial)
    x0 = np.broadcast_to(np.atleast_1d(x0), (n,))
    y0 = np.broadcast_to(np.atleast_1d(y0), (n,))
    return lambda g: (x0, y0)


def _start_time(initial):
    return initial.t if isinstance(initial, PathState) else 0.0


def config_hash(sys, cfg):
    blob = json.dumps({"system": sys.name, "params": sys.params, "config": cfg.result_fields()},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _describe_initial(initial):
    if initial is None:
        return {"kind": "point", "x": "origin", "y": "origin"}
    if isinstance(initial, ProductNormal):
        return {"kind": "normal", "mean_x": [float(v) for v in initial.mean_x],
                "mean_y": [float(v) for v in initial.mean_y],
                "std_x": float(initial.std_x), "std_y": float(initial.std_y)}
    x, y = (initial.x, initial.y) if isinstance(initial, PathState) else initial
    return {"kind": "point", "x": np.atleast_1d(x).astype(float).tolist(),
            "y": np.atleast_1d(y).astype(float).tolist()}


def _provenance(sys, cfg, plan, initial):
    return {
        "seed": int(cfg.seed),
        "scheme": cfg.scheme,
        "h": plan.h,
        "h_requested": cfg.h,
        "steps_per_period": plan.steps_per_period,
        "n": sys.n,
        "k": sys.k,
        "builtin": sys.name,
        "params": json.loads(json.dumps(sys.params, default=str)),
        "ensemble_size": cfg.ensemble_size,
        "initial": _describe_initial(initial),
        "config_hash": config_hash(sys, cfg),
    }


def _simulate(sys, cfg, initial, path_ids, plan):
    init = _init_fn(sys, initial)
    blocks = [path_ids[i:i + cfg.block_size] for i in range(0, len(path_ids), cfg.block_size)]

    def job(ids):
        return _run_block(sys, plan, cfg.scheme, cfg.seed, ids, init, cfg.noise_block)

    if cfg.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(b) for b in blocks]
    out = np.concatenate([r[0] for r in results], axis=1)
    dead_at = np.concatenate([r[1] for r in results])
    final = np.concatenate([r[2] for r in results])
    return out, dead_at, final


def simulate_path(sys: SystemSpec, config: SdeConfig, initial=None) -> SimulatedPath:
    """Path 0 of the ensemble, recorded at the snapshot times.

    On blow-up the state list is truncated before the first non-finite
    snapshot and ``blown_up`` is set.
    """
    plan = _plan(sys, config)
    if _start_time(initial) != 0.0:
        raise InvalidInputError("paths start at t = 0; shift the system clock instead")
    if isinstance(initial, PathState):
        drift(sys, initial.x, initial.y, 0.0)
    out, dead_at, _ = _simulate(sys, config, initial, np.array([0]), plan)
    n = sys.n
    blown = bool(dead_at[0] >= 0)
    states = [PathState(row[:n], row[n:], plan.time(step))
              for step, row in zip(plan.snap_steps, out[:, 0, :])
              if not blown or step <= dead_at[0]]
    if blown:
        # the frozen row holds the state reached just before the failing step
        row = out[-1, 0, :]
        last = PathState(row[:n], row[n:], plan.time(dead_at[0]))
    else:
        last = states[-1] if states else None
    return SimulatedPath(states, blown, last)


def ensemble_snapshots(sys: SystemSpec, config: SdeConfig, initial=None) -> list:
    """Snapshots of ``config.ensemble_size`` independent paths.

    ``initial`` is ``None`` (origin), a :class:`PathState` / ``(x, y)`` pair,
    or a :class:`ProductNormal`.  Blown-up paths are dropped from every
    snapshot and counted; more than 1% raises :class:`EnsembleQualityError`.
    """
    plan = _plan(sys, config)
    ids = np.arange(config.ensemble_size)
    out, dead_at, _ = _simulate(sys, config, initial, ids, plan)
    alive = dead_at < 0
    rejected = int((~alive).sum())
    if rejected > MAX_REJECTED * config.ensemble_size:
        raise EnsembleQualityError(
            f"{rejected} of {config.ensemble_size} paths blew up with scheme {config.scheme!r} "
            f"and h={plan.h:.4g}; reduce h or use tamed-euler",
            rejected=rejected, total=config.ensemble_size)
    prov = _provenance(sys, config, plan, initial)
    return [EmpiricalLaw(plan.time(s), out[i][alive], dict(prov), rejected, ids[alive])
            for i, s in enumerate(plan.snap_steps)]


# -- Dynkin check -------------------------------------------------------------

def dynkin_estimate(sys: SystemSpec, cert, z: PathState, h=1e-3, m=100_000, seed=0):
    """Monte Carlo ``(E[Psi(Z_h)] - Psi(z)) / h`` from ``m`` Euler-Maruyama steps.

    Returns ``(estimate, std_error, rejected)``.
    """
    from .lyapunov import UF2Certificate, psi, psi_uf2

    if m < 1 or not h > 0:
        raise InvalidInputError("need m >= 1 and h > 0")
    f = psi_uf2 if isinstance(cert, UF2Certificate) else psi
    x, y, t = z.x, z.y, z.t
    dx, dy = drift(sys, x, y, t)
    S = diffusion(sys, x, y, t)
    p0 = float(f(sys, cert, x, y, t))
    if not np.any(S):
        p1 = float(f(sys, cert, x + h * dx, y + h * dy, t + h))
        return (p1 - p0) / h, 0.0, 0
    rng = path_rng(seed, 0)
    dw = rng.standard_normal((m, sys.k)) * math.sqrt(h)
    x1 = np.broadcast_to(x + h * dx, (m, sys.n))
    y1 = y + h * dy + dw @ S.T
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.asarray(f(sys, cert, x1, y1, t + h), dtype=float)
    ok = np.isfinite(vals)
    rejected = int((~ok).sum())
    if rejected > MAX_REJECTED * m:
        raise EnsembleQualityError(f"{rejected} of {m} Dynkin samples were non-finite",
                                   rejected=rejected, total=m)
    d = (vals[ok] - p0) / h
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d))), rejected


# -- file I/O -----------------------------------------------------------------

def _header(n):
    return ["t", "path"] + [f"x{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(n)]


def write_snapshots(laws, directory, prefix="snapshot"):
    """One CSV per snapshot plus ``provenance.json``; returns the CSV paths.

    Floats are written with ``repr`` so reading back is exact.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, law in enumerate(laws):
        p = directory / f"{prefix}_{i:03d}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_header(law.n))
            t = repr(float(law.time))
            for pid, row in zip(law.path_ids, law.samples):
                w.writerow([t, int(pid)] + [repr(float(v)) for v in row])
        paths.append(p)
    if laws:
        prov = dict(laws[0].provenance, rejected=laws[0].rejected,
                    times=[float(law.time) for law in laws])
        with open(directory / "provenance.json", "w") as fh:
            json.dump(prov, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return paths


def read_snapshots(directory, prefix="snapshot"):
    directory = Path(directory)
    files = sorted(directory.glob(f"{prefix}_*.csv"))
    if not files:
        raise FileNotFoundError(f"no {prefix}_*.csv files in {directory}")
    prov_path = directory / "provenance.json"
    prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
    laws = []
    for f in files:
        with open(f, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[:2] != ["t", "path"] or (len(header) - 2) % 2:
                raise ContractError(f"{f}: unexpected header {header}")
            rows = [list(map(float, row)) for row in r]
        if not rows:
            raise ContractError(f"{f}: no rows")
        arr = np.array(rows)
        times = np.unique(arr[:, 0])
        if len(times) != 1:
            raise ContractError(f"{f}: mixed time stamps")
        laws.append(EmpiricalLaw(float(times[0]), arr[:, 2:], prov,
                                 int(prov.get("rejected", 0)), arr[:, 1].astype(np.int64)))
    return laws
