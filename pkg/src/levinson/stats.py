"""Two-sample distances and periodicity tests for stroboscopic snapshots."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import kendalltau, wasserstein_distance

from .errors import ContractError, InvalidInputError

__all__ = [
    "MAX_PAIRS",
    "DistanceReport",
    "PeriodicityReport",
    "ProfileTable",
    "energy_distance",
    "energy_distance_details",
    "sliced_w1",
    "permutation_test",
    "periodicity_report",
    "periodic_profile",
    "standardize",
]

MAX_PAIRS = 10 ** 7
_CHUNK = 1 << 20


def _samples(A):
    s = getattr(A, "samples", A)
    s = np.asarray(s, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2:
        raise ContractError(f"samples must be a 2-D array, got shape {s.shape}")
    return s


def _pair(A, B):
    a, b = _samples(A), _samples(B)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ContractError("each sample needs at least 2 points")
    return a, b


def _mean_pair_dist(P, i, j):
    total = 0.0
    for s in range(0, len(i), _CHUNK):
        d = P[i[s:s + _CHUNK]] - P[j[s:s + _CHUNK]]
        total += float(np.sqrt(np.einsum("ij,ij->i", d, d)).sum())
    return total / len(i)


class _PairDesign:
    """Fixed random index pairs into the pooled sample (positions, not points).

    Evaluating the same design on permuted pooled data keeps the permutation
    null exact even when the statistic is subsampled.
    """

    def __init__(self, na, nb, max_pairs, rng):
        self.na, self.nb = na, nb
        self.exact = na * nb <= max_pairs and max(na, nb) ** 2 <= max_pairs
        self.pairs = None if self.exact else max_pairs
        if not self.exact:
            m = max_pairs
            self.ab = (rng.integers(0, na, m), na + rng.integers(0, nb, m))
            self.aa = (rng.integers(0, na, m), rng.integers(0, na, m))
            self.bb = (na + rng.integers(0, nb, m), na + rng.integers(0, nb, m))

    def terms(self, P):
        na = self.na
        if self.exact:
            a, b = P[:na], P[na:]
            return cdist(a, b).mean(), cdist(a, a).mean(), cdist(b, b).mean()
        return (_mean_pair_dist(P, *self.ab), _mean_pair_dist(P, *self.aa),
                _mean_pair_dist(P, *self.bb))

    def value(self, P):
        ab, aa, bb = self.terms(P)
        return 2 * ab - aa - bb


def energy_distance_details(A, B, *, max_pairs=MAX_PAIRS, seed=0):
    """Energy distance (V-statistic) and how it was computed.

    Above ``max_pairs`` pairwise terms each of the three means is estimated
    from ``max_pairs`` seeded uniform pairs; the standard error of the
    estimate is reported.
    """
    a, b = _pair(A, B)
    P = np.concatenate([a, b])
    design = _PairDesign(len(a), len(b), max_pairs, np.random.default_rng(seed))
    value = design.value(P)
    info = {"exact": design.exact, "pairs": design.pairs, "seed": seed, "std_error": 0.0}
    if not design.exact:
        # per-pair contributions of the three sub-samples are independent
        se2 = 0.0
        for w, (i, j) in ((2.0, design.ab), (1.0, design.aa), (1.0, design.bb)):
            k = min(len(i), _CHUNK)
            d = np.linalg.norm(P[i[:k]] - P[j[:k]], axis=-1)
            se2 += w * w * d.var(ddof=1) / len(i)
        info["std_error"] = math.sqrt(se2)
    return float(value), info


def energy_distance(A, B, *, max_pairs=MAX_PAIRS, seed=0):
    """``2 E|a-b| - E|a-a'| - E|b-b'|`` over the empirical laws."""
    return energy_distance_details(A, B, max_pairs=max_pairs, seed=seed)[0]


def _directions(d, count, seed):
    z = np.random.default_rng(seed).standard_normal((count, d))
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def sliced_w1(A, B, n_projections=64, seed=0):
    """Mean over random unit directions of the 1-D Wasserstein-1 distance.

    Unequal sample sizes are handled exactly by the 1-D CDF integral.
    """
    if n_projections < 16:
        raise InvalidInputError("n_projections must be >= 16")
    a, b = _pair(A, B)
    if a.shape[1] == 1:
        return float(wasserstein_distance(a[:, 0], b[:, 0]))
    dirs = _directions(a.shape[1], n_projections, seed)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_distance(pa[:, i], pb[:, i]) for i in range(n_projections)]))


@dataclass
class DistanceReport:
    statistic: str
    value: float
    p_value: float
    n_a: int
    n_b: int
    seed: int
    n_perm: int
    degenerate: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"statistic": self.statistic, "value": self.value, "p": self.p_value,
                "n_a": self.n_a, "n_b": self.n_b, "seed": self.seed, "n_perm": self.n_perm,
                "degenerate": self.degenerate, "details": self.details}


def permutation_test(A, B, statistic="energy", n_perm=199, seed=0, *,
                     max_pairs=10 ** 6, n_projections=64) -> DistanceReport:
    """Permutation p-value ``(1 + #{perm >= observed}) / (n_perm + 1)``.

    The statistic (including any subsampling design or projection set) is
    fixed before shuffling, so every permutation is scored identically.
    """
    if n_perm < 100:
        raise InvalidInputError("n_perm must be >= 100")
    a, b = _pair(A, B)
    na = len(a)
    P = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    if statistic == "energy":
        design = _PairDesign(na, len(b), max_pairs, rng)
        stat = design.value
        details = {"exact": design.exact, "pairs": design.pairs}
    elif statistic == "sliced-w1":
        dirs = _directions(P.shape[1], n_projections, seed)

        def stat(Q):
            pr = Q @ dirs.T
            return float(np.mean([wasserstein_distance(pr[:na, i], pr[na:, i])
                                  for i in range(len(dirs))]))
        details = {"n_projections": n_projections}
    else:
        raise InvalidInputError(f"unknown statistic {statistic!r} (energy, sliced-w1)")
    if np.all(P == P[0]):
        return DistanceReport(statistic, 0.0, 1.0, na, len(b), seed, n_perm, True, details)
    obs = stat(P)
    tol = 1e-12 * (1.0 + abs(obs))
    count = 0
    for _ in range(n_perm):
        if stat(P[rng.permutation(len(P))]) >= obs - tol:
            count += 1
    p = (1 + count) / (n_perm + 1)
    details["raw_value"] = obs
    return DistanceReport(statistic, max(obs, 0.0), p, na, len(b), seed, n_perm, False, details)


# -- periodicity --------------------------------------------------------------

def standardize(snapshots):
    """Pooled per-coordinate mean and std; constant coordinates get std 1."""
    pooled = np.concatenate([_samples(s) for s in snapshots])
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


@dataclass
class PeriodicityReport:
    distances: list
    verdict: str
    threshold: float
    statistic: str
    standardization: dict
    trend_p: float
    raw_distances: list = field(default_factory=list)

    @property
    def consistent(self):
        return self.verdict == "consistent-with-periodic"

    def to_dict(self):
        return {"distances": self.distances, "verdict": self.verdict,
                "threshold": self.threshold, "statistic": self.statistic,
                "standardization": self.standardization, "trend_p": self.trend_p,
                "raw_distances": self.raw_distances}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary(self):
        lines = [f"{'k':>4} {'distance':>12} {'p':>8}"]
        for d in self.distances:
            lines.append(f"{d['k']:>4} {d['value']:>12.6f} {d['p']:>8.4f}")
        lines.append(f"trend p = {self.trend_p:.4f}; verdict: {self.verdict}")
        return "\n".join(lines)


def _trend_p(values):
    """One-sided Kendall test against an increasing trend."""
    if len(values) < 3 or np.ptp(values) == 0:
        return 1.0
    res = kendalltau(np.arange(len(values)), values, alternative="greater")
    return 1.0 if not np.isfinite(res.pvalue) else float(res.pvalue)


def periodicity_report(snapshots, *, threshold=0.05, statistic="energy", n_perm=199, seed=0,
                       standardize_samples=True, max_pairs=10 ** 6, alpha=0.05):
    """Consecutive-snapshot distances at ``k T`` and ``(k+1) T``.

    Verdict is ``consistent-with-periodic`` iff the last distance is below
    ``threshold``, its permutation p-value exceeds ``alpha`` and the final
    third of the distance sequence shows no significant upward trend.
    """
    if len(snapshots) < 3:
        raise ContractError(f"need at least 3 snapshots, got {len(snapshots)}")
    dims = {_samples(s).shape[1] for s in snapshots}
    if len(dims) != 1:
        raise ContractError(f"snapshots have different dimensions {sorted(dims)}")
    if standardize_samples:
        mean, std = standardize(snapshots)
    else:
        d = dims.pop()
        mean, std = np.zeros(d), np.ones(d)
    scaled = [(_samples(s) - mean) / std for s in snapshots]
    distances, raw = [], []
    for k in range(len(scaled) - 1):
        rep = permutation_test(scaled[k], scaled[k + 1], statistic, n_perm, seed + k,
                               max_pairs=max_pairs)
        distances.append({"k": k, "value": rep.value, "p": rep.p_value})
        if statistic == "energy":
            raw.append(energy_distance(snapshots[k], snapshots[k + 1], max_pairs=max_pairs,
                                       seed=seed + k))
        else:
            raw.append(sliced_w1(snapshots[k], snapshots[k + 1], seed=seed + k))
    vals = np.array([d["value"] for d in distances])
    tail = vals[-max(3, math.ceil(len(vals) / 3)):]
    trend = _trend_p(tail)
    last = distances[-1]
    ok = last["value"] < threshold and last["p"] > alpha and trend > alpha
    return PeriodicityReport(distances, "consistent-with-periodic" if ok else "not-periodic",
                             threshold, statistic,
                             {"mean": mean.tolist(), "std": std.tolist()}, trend, raw)


@dataclass
class ProfileTable:
    """Per within-period time: means, covariances, differences and standard errors."""

    phases: list
    rows: list
    paired: bool

    @property
    def flagged(self):
        return [r for r in self.rows if r["flagged"]]

    def max_abs_z(self, which="mean"):
        zs = [abs(z) for r in self.rows for z in r[f"{which}_z"] if np.isfinite(z)]
        return max(zs, default=0.0)

    def to_dict(self):
        return {"phases": self.phases, "paired": self.paired, "rows": self.rows}


def _zscore(diff, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0),
                     np.where(np.abs(diff) > 1e-12, np.inf, 0.0))
    return z


def periodic_profile(first, second, period, *, z_flag=3.0):
    """Compare snapshot laws at matched phases of two consecutive periods.

    ``first`` and ``second`` are lists of :class:`EmpiricalLaw` (or objects
    with ``time`` and ``samples``).  When both ensembles carry identical path
    ids the comparison is paired (same paths one period apart); otherwise the
    two samples are treated as independent.
    """
    if len(first) != len(second) or not first:
        raise ContractError("both periods need the same non-empty list of snapshot times")
    phases = []
    for a, b in zip(first, second):
        if abs((b.time - a.time) - period) > 1e-9 * (1 + abs(b.time)):
            raise ContractError(f"times {a.time} and {b.time} are not one period apart")
        phases.append(float(math.remainder(a.time, period)) % period)
    ids_a = [getattr(a, "path_ids", None) for a in first]
    ids_b = [getattr(b, "path_ids", None) for b in second]
    paired = all(ia is not None and ib is not None and len(ia) == len(ib) and np.array_equal(ia, ib)
                 for ia, ib in zip(ids_a, ids_b))
    rows = []
    for s, a, b in zip(phases, first, second):
        A, Bm = _samples(a), _samples(b)
        ma, mb = A.mean(axis=0), Bm.mean(axis=0)
        ca = np.cov(A, rowvar=False).reshape(A.shape[1], A.shape[1])
        cb = np.cov(Bm, rowvar=False).reshape(A.shape[1], A.shape[1])
        pa = (A - ma)[:, :, None] * (A - ma)[:, None, :]
        pb = (Bm - mb)[:, :, None] * (Bm - mb)[:, None, :]
        if paired:
            n = len(A)
            se_m = (A - Bm).std(axis=0, ddof=1) / math.sqrt(n)
            se_c = (pa - pb).std(axis=0, ddof=1) / math.sqrt(n)
        else:
            se_m = np.sqrt(A.var(axis=0, ddof=1) / len(A) + Bm.var(axis=0, ddof=1) / len(Bm))
            se_c = np.sqrt(pa.var(axis=0, ddof=1) / len(A) + pb.var(axis=0, ddof=1) / len(Bm))
        z_m = _zscore(mb - ma, se_m)
        z_c = _zscore(cb - ca, se_c)
        rows.append({
            "phase": s, "time_first": float(a.time), "time_second": float(b.time),
            "mean_first": ma.tolist(), "mean_second": mb.tolist(),
            "mean_diff": (mb - ma).tolist(), "mean_se": se_m.tolist(), "mean_z": z_m.tolist(),
            "cov_first": ca.tolist(), "cov_second": cb.tolist(),
            "cov_diff": (cb - ca).tolist(), "cov_se": se_c.tolist(),
            "cov_z": z_c.ravel().tolist(),
            "flagged": bool(np.any(np.abs(z_m) > z_flag) or np.any(np.abs(z_c) > z_flag)),
        })
    return ProfileTable(phases, rows, paired)
