"""Lyapunov function, generator drift and grid certification.

For Hessian friction the Lyapunov function is::

    Psi = 1/2 |y + grad F - a x|^2 + [V + a F - a^2/2 |x|^2] + D

and its generator drift has the closed form::

    L Psi = V_t + 1/2 Tr(Sigma Sigma^T) - <E, y + grad F - a x>
            - a |y|^2 - <grad_x V, grad F - a x>

For general friction the same construction with ``F = alpha |x|^2`` and
``a = alpha`` is used (``psi_uf2``).  Verification works on finite grids
and certifies limits by a trend-plus-threshold test; nothing here is a proof.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from . import _backend as B
from .errors import (
    CapabilityError,
    CertificateError,
    CertificateFailure,
    InvalidInputError,
    NumericDomainError,
    WrongVariantError,
)
from .model import SystemSpec, friction_matrix
from .polysys import sphere_points

__all__ = [
    "UFCertificate",
    "UF2Certificate",
    "certificate_from_dict",
    "default_certificate",
    "Grid",
    "ConditionResult",
    "VerificationReport",
    "TestFunction",
    "psi",
    "psi_uf2",
    "psi_function",
    "psi_uf2_function",
    "generator_psi",
    "generator_psi_uf2",
    "generator_apply",
    "calibrate_D",
    "verify_hypotheses",
    "verify_khasminskii",
    "uf2_drift_constant",
]

TOL = 1e-9


# -- certificates -------------------------------------------------------------

def _require(cond, msg):
    if not cond:
        raise CertificateError(msg)


@dataclass(frozen=True)
class UFCertificate:
    """Constants for Hessian friction: ``a, D`` (Lyapunov function), ``b, m, M``
    (inner product growth), ``e`` (perturbation bound), ``c1, M1, c2, M2``
    (time-derivative and noise bounds)."""

    a: float
    D: float
    b: float
    m: float
    M: float
    e: float = 0.0
    c1: float = 0.0
    M1: float = 0.0
    c2: float = 0.0
    M2: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "m"):
            _require(getattr(self, name) > 0, f"{name} must be positive")
        for name in ("M", "e", "c1", "M1", "c2", "M2"):
            _require(getattr(self, name) >= 0, f"{name} must be nonnegative")
        _require(math.isfinite(self.D), "D must be finite")
        _require(self.c1 + self.c2 < 1, f"c1 + c2 = {self.c1 + self.c2} must be < 1")


@dataclass(frozen=True)
class UF2Certificate:
    """Constants for general friction: ``alpha, beta`` (friction floor and bound),
    ``b, eps, M`` (potential growth), ``c, M1`` (noise bound)."""

    alpha: float
    beta: float
    b: float
    eps: float
    M: float
    c: float
    M1: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "b", "eps"):
            _require(getattr(self, name) > 0, f"{name} must be positive")
        _require(self.M >= 0 and self.M1 >= 0, "M and M1 must be nonnegative")
        _require(0 < self.c < 1, f"c = {self.c} must lie in (0, 1)")


def certificate_from_dict(d):
    d = dict(d)
    variant = d.pop("variant", "uf2" if "alpha" in d else "uf")
    cls = UF2Certificate if variant == "uf2" else UFCertificate
    try:
        return cls(**d)
    except TypeError as exc:
        raise CertificateError(f"bad certificate fields: {exc}") from None


def default_certificate(sys: SystemSpec):
    """The certificate attached to a builtin (raises if it has none)."""
    if not sys.constants or "a" not in sys.constants and "alpha" not in sys.constants:
        raise CertificateError(f"system {sys.name!r} carries no default certificate")
    return certificate_from_dict(sys.constants)


# -- Psi and its generator ----------------------------------------------------

def _hess_only(sys, cert, want=UFCertificate):
    if not isinstance(cert, want):
        raise WrongVariantError(f"expected {want.__name__}, got {type(cert).__name__}")
    if want is UFCertificate and not sys.hessian_friction:
        raise WrongVariantError("psi needs Hessian friction; use psi_uf2 for general friction")


def _prep(sys, x, y):
    x = x if isinstance(x, np.ndarray) else np.asarray(x, dtype=float)
    y = y if isinstance(y, np.ndarray) else np.asarray(y, dtype=float)
    if x.shape[-1:] != (sys.n,) or y.shape[-1:] != (sys.n,):
        raise InvalidInputError(f"expected vectors of length {sys.n}")
    return x, y


def psi(sys: SystemSpec, cert: UFCertificate, x, y, t):
    _hess_only(sys, cert)
    x, y = _prep(sys, x, y)
    F = sys.friction.F
    a = cert.a
    v = y + F.grad(x) - a * x
    out = (B.sqnorm(v) / 2 + sys.potential.value(x, t) + a * F.value(x)
           - a * a / 2 * B.sqnorm(x) + cert.D)
    return np.asarray(out)[()]


def psi_uf2(sys: SystemSpec, cert: UF2Certificate, x, y, t=0.0):
    """``1/2 |y + alpha x|^2 + V(x) + alpha^2/2 |x|^2``.

    ``t`` only matters if the potential is time dependent, in which case
    the value is the frozen-time one.
    """
    _hess_only(sys, cert, UF2Certificate)
    x, y = _prep(sys, x, y)
    al = cert.alpha
    out = B.sqnorm(y + al * x) / 2 + sys.potential.value(x, t) + al * al / 2 * B.sqnorm(x)
    return np.asarray(out)[()]


@dataclass(frozen=True)
class TestFunction:
    """Oracles for a function ``f(x, y, t)`` fed to :func:`generator_apply`.

    Missing oracles are filled by central differences when the caller
    allows it.
    """

    value: Callable
    dt: Callable | None = None
    grad_x: Callable | None = None
    grad_y: Callable | None = None
    hess_y: Callable | None = None

    __test__ = False


def psi_function(sys: SystemSpec, cert: UFCertificate) -> TestFunction:
    """Psi with derivatives assembled in closed form (no differencing)."""
    _hess_only(sys, cert)
    F = sys.friction.F
    V = sys.potential
    a = cert.a
    eye = np.eye(sys.n)

    def grad_y(x, y, t):
        return y + F.grad(x) - a * x

    def grad_x(x, y, t):
        H = F.hess(x)
        return (V.grad_x(x, t) + B.matvec(H, y) - a * y + B.matvec(H, F.grad(x))
                - a * B.matvec(H, x))

    def hess_y(x, y, t):
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(eye, shape + eye.shape)

    return TestFunction(lambda x, y, t: psi(sys, cert, x, y, t),
                        lambda x, y, t: V.dt(x, t), grad_x, grad_y, hess_y)


def psi_uf2_function(sys: SystemSpec, cert: UF2Certificate) -> TestFunction:
    _hess_only(sys, cert, UF2Certificate)
    V = sys.potential
    al = cert.alpha
    eye = np.eye(sys.n)

    def hess_y(x, y, t):
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(eye, shape + eye.shape)

    return TestFunction(
        lambda x, y, t: psi_uf2(sys, cert, x, y, t),
        lambda x, y, t: V.dt(x, t),
        lambda x, y, t: al * (y + al * x) + V.grad_x(x, t) + al * al * x,
        lambda x, y, t: y + al * x,
        hess_y)


def _noise_trace(sys, x, y, t):
    S = sys.noise.value(x, y, t)
    return np.sum(S * S, axis=(-2, -1))


def _finite_or_raise(total, terms, x, y, t):
    if B.is_mp(total):
        return
    total = np.asarray(total, dtype=float)
    bad = ~np.isfinite(total)
    if np.any(bad):
        idx = tuple(np.argwhere(np.atleast_1d(bad))[0]) if total.ndim else ()
        breakdown = {k: float(np.broadcast_to(np.asarray(v, dtype=float), total.shape)[idx])
                     for k, v in terms.items()}
        raise NumericDomainError(
            f"non-finite generator value; terms: {breakdown}",
            witness={"x": np.asarray(x[idx] if total.ndim else x, dtype=float).tolist(),
                     "y": np.asarray(y[idx] if total.ndim else y, dtype=float).tolist(),
                     "terms": breakdown})


def generator_psi(sys: SystemSpec, cert: UFCertificate, x, y, t):
    """Closed-form ``L Psi`` for Hessian friction."""
    _hess_only(sys, cert)
    x, y = _prep(sys, x, y)
    F = sys.friction.F
    V = sys.potential
    a = cert.a
    w = F.grad(x) - a * x
    gV = V.grad_x(x, t)
    terms = {
        "dt_V": V.dt(x, t),
        "noise": _noise_trace(sys, x, y, t) / 2,
        "perturbation": -B.dot(sys.perturbation.value(x, y, t), y + w),
        "damping": -a * B.sqnorm(y),
        "inner": -B.dot(gV, w),
    }
    total = terms["dt_V"] + terms["noise"] + terms["perturbation"] + terms["damping"] + terms["inner"]
    _finite_or_raise(total, terms, x, y, t)
    return np.asarray(total)[()]


def generator_psi_uf2(sys: SystemSpec, cert: UF2Certificate, x, y, t):
    """Closed-form ``L Psi`` for general friction, expanded as
    ``-al(|y|^2 + <x, grad V>) - <y, (C^s - 2 al I) y> - al <x, (C - 2 al I) y>
    - <E, y + al x> + 1/2 |Sigma|^2`` (plus ``V_t`` if the potential moves)."""
    _hess_only(sys, cert, UF2Certificate)
    x, y = _prep(sys, x, y)
    al = cert.alpha
    C = friction_matrix(sys, x, y, t)
    Cy = B.matvec(C, y)
    total = (-al * (B.sqnorm(y) + B.dot(x, sys.potential.grad_x(x, t)))
             - (B.dot(y, Cy) - 2 * al * B.sqnorm(y))
             - al * (B.dot(x, Cy) - 2 * al * B.dot(x, y))
             - B.dot(sys.perturbation.value(x, y, t), y + al * x)
             + _noise_trace(sys, x, y, t) / 2
             + sys.potential.dt(x, t))
    return np.asarray(total)[()]


# numeric fallbacks for generator_apply

def _fd_dt(f, x, y, t):
    t = np.asarray(t, dtype=float)
    h = 1e-5 * (1.0 + np.abs(t))
    return (f(x, y, t + h) - f(x, y, t - h)) / (2 * h)


def _fd_grad(f, x, y, t, wrt):
    n = x.shape[-1]
    base = x if wrt == "x" else y
    h = 1e-5 * (1.0 + np.linalg.norm(base, axis=-1))
    out = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        step = h[..., None] * e
        if wrt == "x":
            d = f(x + step, y, t) - f(x - step, y, t)
        else:
            d = f(x, y + step, t) - f(x, y - step, t)
        out.append(d / (2 * h))
    return np.stack(out, axis=-1)


def _fd_hess_y(f, x, y, t):
    n = y.shape[-1]
    h = 1e-4 * (1.0 + np.linalg.norm(y, axis=-1))
    eye = np.eye(n)
    out = np.empty(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (n, n))
    for i in range(n):
        for j in range(i, n):
            ei = h[..., None] * eye[i]
            ej = h[..., None] * eye[j]
            v = (f(x, y + ei + ej, t) - f(x, y + ei - ej, t)
                 - f(x, y - ei + ej, t) + f(x, y - ei - ej, t)) / (4 * h * h)
            out[..., i, j] = out[..., j, i] = v
    return out


def generator_apply(sys: SystemSpec, f: TestFunction, x, y, t, *, numeric=False, dps=None):
    """Apply the generator to ``f`` at ``(x, y, t)``::

        L f = f_t + 1/2 sum_ij (Sigma Sigma^T)_ij d2f/dy_i dy_j
              + <y, grad_x f> - <M y + grad_x V + E, grad_y f>

    ``numeric=True`` allows central differences for missing oracles.
    ``dps`` evaluates everything in mpmath with that many digits; this is
    needed when the terms cancel over many orders of magnitude (e.g. an
    exponential friction function).
    """
    if not numeric:
        missing = [k for k in ("dt", "grad_x", "grad_y", "hess_y") if getattr(f, k) is None]
        if missing:
            raise CapabilityError(f"test function lacks {missing}; pass numeric=True to difference")
    if dps is not None:
        if numeric and any(getattr(f, k) is None for k in ("dt", "grad_x", "grad_y", "hess_y")):
            raise CapabilityError("numeric differencing is float64 only; supply all oracles")
        with B.precision(dps):
            out = _generator_eval(sys, f, B.to_mp(x), B.to_mp(y), B.to_mp(t))
            return B.to_float(out)
    x, y = _prep(sys, x, y)
    t = np.asarray(t, dtype=float)
    return _generator_eval(sys, f, x, y, t)


def _generator_eval(sys, f, x, y, t):
    ft = f.dt(x, y, t) if f.dt else _fd_dt(f.value, x, y, t)
    gx = f.grad_x(x, y, t) if f.grad_x else _fd_grad(f.value, x, y, t, "x")
    gy = f.grad_y(x, y, t) if f.grad_y else _fd_grad(f.value, x, y, t, "y")
    hy = f.hess_y(x, y, t) if f.hess_y else _fd_hess_y(f.value, x, y, t)
    S = sys.noise.value(x, y, t)
    A = np.matmul(S, np.swapaxes(S, -1, -2))
    M = friction_matrix(sys, x, y, t)
    pull = B.matvec(M, y) + sys.potential.grad_x(x, t) + sys.perturbation.value(x, y, t)
    out = ft + np.sum(A * hy, axis=(-2, -1)) / 2 + B.dot(y, gx) - B.dot(pull, gy)
    return np.asarray(out)[()]


# -- grids and reports --------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Sampling plan: shells of the given radii, ``sphere_res`` directions per
    shell, ``t_samples`` equispaced times per period and a ``y_res``-per-axis
    lattice on ``[-y_box, y_box]^n``.  ``psi_threshold`` and
    ``drift_threshold`` are the crossing levels for the limit tests."""

    radii: tuple
    sphere_res: int = 64
    t_samples: int = 64
    y_box: float = 2.0
    y_res: int = 3
    psi_threshold: float = 100.0
    drift_threshold: float = 100.0

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if r.ndim != 1 or len(r) < 1 or np.any(np.diff(r) <= 0) or np.any(r < 0):
            raise InvalidInputError("radii must be increasing and nonnegative")
        object.__setattr__(self, "radii", tuple(float(v) for v in r))

    def describe(self):
        return {"radii": list(self.radii), "sphere_res": self.sphere_res,
                "t_samples": self.t_samples, "y_box": self.y_box, "y_res": self.y_res}

    def times(self, period):
        return np.arange(self.t_samples) * (period / self.t_samples)

    def directions(self, dim):
        return sphere_points(dim, self.sphere_res)

    def y_points(self, n):
        if self.y_res ** n <= 4096:
            axis = np.linspace(-self.y_box, self.y_box, self.y_res)
            mesh = np.meshgrid(*([axis] * n), indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=-1)
        else:
            from scipy.stats import qmc
            pts = (2 * qmc.Halton(d=n, scramble=False).random(4096) - 1) * self.y_box
            pts[0] = 0.0
        return pts


@dataclass
class ConditionResult:
    condition: str
    passed: bool
    margin: float
    witness: dict
    grid: dict
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"condition": self.condition, "pass": bool(self.passed),
                "margin": _jsonable(self.margin), "witness": self.witness,
                "grid": self.grid, "details": _jsonable(self.details)}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(w) for k, w in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(w) for w in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


@dataclass
class VerificationReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def __getitem__(self, condition):
        for e in self.entries:
            if e.condition == condition:
                return e
        raise KeyError(condition)

    def __iter__(self):
        return iter(self.entries)

    def extend(self, other):
        self.entries.extend(other.entries)
        return self

    def to_dict(self):
        return {"pass": self.passed, "conditions": [e.to_dict() for e in self.entries]}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, indent=kw.pop("indent", 2), **kw)

    def summary(self):
        lines = [f"{'condition':<22} {'pass':<5} {'margin':>14}"]
        for e in self.entries:
            lines.append(f"{e.condition:<22} {'yes' if e.passed else 'NO':<5} {e.margin:>14.6g}")
        return "\n".join(lines)


def _witness(x, y, t, idx):
    return {"x": np.asarray(x[idx], dtype=float).tolist(),
            "y": np.asarray(y[idx], dtype=float).tolist() if y is not None else [],
            "t": float(t[idx])}


def _pointwise(name, margin, x, y, t, grid, details=None):
    margin = np.asarray(margin, dtype=float)
    idx = np.unravel_index(int(np.argmin(margin)), margin.shape)
    worst = float(margin[idx])
    return ConditionResult(name, bool(worst >= -TOL), worst,
                           _witness(x, y, t, idx), grid, details or {})


def _trend(name, shell_vals, threshold, increasing, x, y, t, idx_fn, grid, details=None):
    """Strict monotone trend over the top three shells plus threshold crossing."""
    vals = np.asarray(shell_vals, dtype=float)
    tail = vals[-3:]
    diffs = np.diff(tail)
    if increasing:
        trend_margin = float(diffs.min()) if len(diffs) else 0.0
        level_margin = float(vals[-1] - threshold)
    else:
        trend_margin = float(-diffs.max()) if len(diffs) else 0.0
        level_margin = float(-threshold - vals[-1])
    ok = len(vals) >= 3 and trend_margin > 0 and level_margin > 0
    idx = idx_fn()
    d = {"shell_values": vals.tolist(), "trend_margin": trend_margin,
         "level_margin": level_margin, "threshold": threshold}
    d.update(details or {})
    return ConditionResult(name, bool(ok), min(trend_margin, level_margin),
                           _witness(x, y, t, idx), grid, d)


def _x_grid(sys, grid):
    dirs = grid.directions(sys.n)
    ts = grid.times(sys.period)
    r = np.asarray(grid.radii)
    x = r[:, None, None, None] * dirs[None, :, None, :]
    x = np.broadcast_to(x, (len(r), len(dirs), len(ts), sys.n))
    t = np.broadcast_to(ts, x.shape[:-1])
    return x, t


def _xy_grid(sys, grid):
    dirs = grid.directions(sys.n)
    ts = grid.times(sys.period)
    ys = grid.y_points(sys.n)
    r = np.asarray(grid.radii)
    shape = (len(r), len(dirs), len(ys), len(ts))
    x = np.broadcast_to((r[:, None, None] * dirs[None, :, :])[:, :, None, None, :], shape + (sys.n,))
    y = np.broadcast_to(ys[None, None, :, None, :], shape + (sys.n,))
    t = np.broadcast_to(ts, shape)
    return x, y, t


def _joint_grid(sys, grid):
    dirs = grid.directions(2 * sys.n)
    ts = grid.times(sys.period)
    r = np.asarray(grid.radii)
    z = r[:, None, None, None] * dirs[None, :, None, :]
    z = np.broadcast_to(z, (len(r), len(dirs), len(ts), 2 * sys.n))
    t = np.broadcast_to(ts, z.shape[:-1])
    return z[..., :sys.n], z[..., sys.n:], t


def _periodicity(sys, x, y, t, grid):
    T = sys.period
    pairs = [
        ("V", lambda s: sys.potential.value(x, s)),
        ("E", lambda s: sys.perturbation.value(x, y, s)),
        ("Sigma", lambda s: sys.noise.value(x, y, s)),
    ]
    if not sys.hessian_friction:
        pairs.append(("C", lambda s: sys.friction.matrix(x, y, s)))
    worst = 0.0
    details = {}
    for label, fn in pairs:
        a = np.asarray(fn(t), dtype=float)
        b = np.asarray(fn(t + T), dtype=float)
        err = float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))) if a.size else 0.0
        details[label] = err
        worst = max(worst, err)
    margin = 1e-10 - worst
    return ConditionResult("periodicity", margin >= 0, margin, {"x": [], "y": [], "t": 0.0},
                           grid, details)


def _lower_bound(name, sys, x, t, grid):
    v = np.asarray(sys.potential.value(x, t), dtype=float)
    return _pointwise(name, v - sys.potential.lower_bound, x, None, t, grid,
                      {"declared_lower_bound": sys.potential.lower_bound})


def _check_finite(arr, label):
    a = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericDomainError(f"non-finite {label} on verification grid")
    return a


# -- calibration --------------------------------------------------------------

def calibrate_D(sys: SystemSpec, cert, grid: Grid):
    """Smallest ``D`` with ``min Psi = 1`` over the grid (grid-valid only).

    ``cert`` supplies ``a`` (its ``D`` is ignored; a bare float ``a`` works
    too).  The minimum over the ``y`` ball ``|y| <= y_max`` of the mixed
    energy is taken exactly, with ``y_max = max(radii, y_box)``.
    """
    a = cert if isinstance(cert, (int, float)) else cert.a
    if not sys.hessian_friction:
        raise WrongVariantError("calibrate_D applies to Hessian friction")
    F = sys.friction.F
    radii = np.unique(np.concatenate([[0.0], grid.radii]))
    g2 = Grid(tuple(radii), grid.sphere_res, grid.t_samples, grid.y_box, grid.y_res)
    x, t = _x_grid(sys, g2)
    ymax = max(max(grid.radii), grid.y_box)
    w = np.asarray(F.grad(x) - a * x, dtype=float)
    gap = np.maximum(np.linalg.norm(w, axis=-1) - ymax, 0.0)
    bracket = (np.asarray(sys.potential.value(x, t), dtype=float) + a * np.asarray(F.value(x))
               - a * a / 2 * np.sum(x * x, axis=-1))
    floor = gap * gap / 2 + bracket
    if not np.all(np.isfinite(floor)):
        raise CertificateFailure("Psi is not finite on the calibration grid")
    shell_min = floor.reshape(len(radii), -1).min(axis=1)
    lo = float(shell_min.min())
    if len(radii) >= 3 and np.argmin(shell_min) == len(radii) - 1 and shell_min[-1] < shell_min[-2]:
        idx = np.unravel_index(np.argmin(floor[-1]), floor[-1].shape)
        raise CertificateFailure("Psi decreases towards the outer shell: unbounded below",
                                 witness={"x": x[-1][idx].tolist(), "t": float(t[-1][idx])})
    return 1.0 - lo


# -- verification -------------------------------------------------------------

def _growth(x, m):
    return np.sum(x * x, axis=-1) ** m


def verify_hypotheses(sys: SystemSpec, cert, grid: Grid) -> VerificationReport:
    """One report entry per hypothesis; failures carry witnesses, nothing raises."""
    if isinstance(cert, UF2Certificate):
        return _verify_uf2(sys, cert, grid)
    _hess_only(sys, cert)
    F = sys.friction.F
    V = sys.potential
    a = cert.a
    gdesc = grid.describe()
    report = VerificationReport()

    x, t = _x_grid(sys, grid)
    r = np.asarray(grid.radii)
    report.entries.append(_lower_bound("H1-lower-bound", sys, x, t, gdesc))
    xs, ys, ts = _xy_grid(sys, grid)
    report.entries.append(_periodicity(sys, x, np.zeros_like(x), t, gdesc))

    # (H2)
    W = _check_finite(V.value(x, t) + a * F.value(x) - a * a / 2 * np.sum(x * x, axis=-1), "H2 bracket")
    shell = W.reshape(len(r), -1).min(axis=1)
    report.entries.append(_trend(
        "H2", shell, grid.psi_threshold, True, x, None, t,
        lambda: (len(r) - 1,) + np.unravel_index(np.argmin(W[-1]), W[-1].shape), gdesc))

    # (H3)
    w = np.asarray(F.grad(x) - a * x, dtype=float)
    g = _check_finite(np.sum(np.asarray(V.grad_x(x, t)) * w, axis=-1), "inner product")
    xn2m = _growth(x, cert.m)
    report.entries.append(_pointwise("H3", cert.M - cert.b * xn2m + g, x, None, t, gdesc,
                                     {"b": cert.b, "m": cert.m, "M": cert.M}))

    # (H4)
    E = _check_finite(sys.perturbation.value(xs, ys, ts), "perturbation")
    report.entries.append(_pointwise("H4-bound", cert.e - np.linalg.norm(E, axis=-1), xs, ys, ts,
                                     gdesc, {"e": cert.e}))
    keep = r >= 1.0
    if keep.sum() >= 1:
        safe = np.where(keep[:, None, None], xn2m, 1.0)
        ratio = np.where(keep[:, None, None], cert.e * np.linalg.norm(w, axis=-1) / safe, -np.inf)
        shell_max = ratio.reshape(len(r), -1).max(axis=1)[keep]
        tail = shell_max[-3:]
        trend_ok = bool(np.all(np.diff(tail) <= 1e-12))
        level = 0.1 - float(shell_max[-1])
        idx = (len(r) - 1,) + np.unravel_index(np.argmax(ratio[-1]), ratio[-1].shape)
        report.entries.append(ConditionResult(
            "H4-limit", bool(trend_ok and level > 0 and len(shell_max) >= 3), level,
            _witness(x, None, t, idx), gdesc,
            {"shell_ratio": shell_max.tolist(), "non_increasing": trend_ok}))
    else:
        report.entries.append(ConditionResult("H4-limit", False, -math.inf, {}, gdesc,
                                              {"reason": "no shells with R >= 1"}))

    # (H5)
    vt = _check_finite(V.dt(x, t), "V_t")
    report.entries.append(_pointwise("H5-time", cert.c1 * cert.b * xn2m + cert.M1 - np.abs(vt),
                                     x, None, t, gdesc, {"c1": cert.c1, "M1": cert.M1}))
    tr = _check_finite(_noise_trace(sys, xs, ys, ts), "noise trace")
    bound = 2 * cert.c2 * (a * np.sum(ys * ys, axis=-1) + cert.b * _growth(xs, cert.m)) + cert.M2
    report.entries.append(_pointwise("H5-noise", bound - tr, xs, ys, ts, gdesc,
                                     {"c2": cert.c2, "M2": cert.M2}))

    # Psi >= 1 with this D on the (x, y) grid
    p = _check_finite(psi(sys, cert, xs, ys, ts), "Psi")
    report.entries.append(_pointwise("psi-at-least-1", p - 1.0, xs, ys, ts, gdesc, {"D": cert.D}))
    return report


def _verify_uf2(sys, cert, grid):
    if sys.hessian_friction:
        raise WrongVariantError("general-friction certificate given for a Hessian-friction system")
    gdesc = grid.describe()
    report = VerificationReport()
    x, t = _x_grid(sys, grid)
    xs, ys, ts = _xy_grid(sys, grid)
    report.entries.append(_lower_bound("A1-lower-bound", sys, x, t, gdesc))
    report.entries.append(_periodicity(sys, xs, ys, ts, gdesc))

    C = _check_finite(sys.friction.matrix(xs, ys, ts), "friction matrix")
    Cs = (C + np.swapaxes(C, -1, -2)) / 2
    eig_min = np.linalg.eigvalsh(Cs)[..., 0]
    report.entries.append(_pointwise("A2-floor", eig_min - 2 * cert.alpha, xs, ys, ts, gdesc,
                                     {"alpha": cert.alpha}))
    opnorm = np.linalg.norm(C, ord=2, axis=(-2, -1))
    E = _check_finite(sys.perturbation.value(xs, ys, ts), "perturbation")
    enorm = np.linalg.norm(E, axis=-1)
    report.entries.append(_pointwise("A2-bound", cert.beta - np.maximum(opnorm, enorm), xs, ys, ts,
                                     gdesc, {"beta": cert.beta}))
    gv = _check_finite(np.sum(x * sys.potential.grad_x(x, t), axis=-1), "<x, grad V>")
    report.entries.append(_pointwise("A3", gv - cert.b * _growth(x, 1 + cert.eps / 2) + cert.M,
                                     x, None, t, gdesc))
    tr = _check_finite(_noise_trace(sys, xs, ys, ts), "noise trace")
    bound = cert.c * cert.alpha * (np.sum(ys * ys, axis=-1)
                                   + cert.b * _growth(xs, 1 + cert.eps / 2)) + cert.M1
    report.entries.append(_pointwise("A4", bound - tr, xs, ys, ts, gdesc))
    return report


def uf2_drift_constant(cert: UF2Certificate):
    """Constant ``K`` with ``L Psi <= -(alpha/2)(1-c)(|y|^2 + b|x|^(2+eps)) + K``.

    Follows the chain of Young-type bounds for general friction: the ``|y|``
    part contributes ``beta^2/alpha`` and the ``|x|`` part is maximised
    numerically in one dimension.
    """
    al, be, b, ep = cert.alpha, cert.beta, cert.b, cert.eps
    k2 = al * (be + 2 * al) ** 2

    def h(r):
        return -(al / 2) * b * r ** (2 + ep) + k2 * r * r + al * be * r

    rcap = 1.0 + (2 * (k2 + al * be) / (al * b / 2)) ** (1 / ep)
    rs = np.linspace(0.0, rcap, 20001)
    i = int(np.argmax(h(rs)))
    lo, hi = rs[max(i - 1, 0)], rs[min(i + 1, len(rs) - 1)]
    res = minimize_scalar(lambda r: -h(r), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    sup_r = max(float(h(rs[i])), float(-res.fun))
    return be * be / al + sup_r + al * cert.M + cert.M1 / 2


def verify_khasminskii(sys: SystemSpec, cert, grid: Grid) -> VerificationReport:
    """Trend-plus-threshold checks of the two limit conditions on joint
    ``(x, y)`` shells, plus the pointwise comparison with the proof's bound line."""
    gdesc = grid.describe()
    x, y, t = _joint_grid(sys, grid)
    nr = len(grid.radii)
    report = VerificationReport()
    if isinstance(cert, UF2Certificate):
        P = _check_finite(psi_uf2(sys, cert, x, y, t), "Psi")
        L = _check_finite(generator_psi_uf2(sys, cert, x, y, t), "L Psi")
        K = uf2_drift_constant(cert)
        line = (-(cert.alpha / 2) * (1 - cert.c)
                * (np.sum(y * y, axis=-1) + cert.b * _growth(x, 1 + cert.eps / 2)) + K)
        line_details = {"K": K}
    else:
        _hess_only(sys, cert)
        P = _check_finite(psi(sys, cert, x, y, t), "Psi")
        L = _check_finite(generator_psi(sys, cert, x, y, t), "L Psi")
        a = cert.a
        q = a * np.sum(y * y, axis=-1) + cert.b * _growth(x, cert.m)
        w = np.asarray(sys.friction.F.grad(x) - a * x, dtype=float)
        slack = 1 - cert.c1 - cert.c2
        extra = (cert.e * np.linalg.norm(y, axis=-1) + cert.e * np.linalg.norm(w, axis=-1)
                 - slack / 2 * q)
        m_star = float(max(0.0, extra.max()))
        const = cert.M1 + cert.M2 / 2 + cert.M + m_star
        line = -slack / 2 * q + const
        line_details = {"M_star": m_star, "constant": const}
    shell_min = P.reshape(nr, -1).min(axis=1)
    shell_max = L.reshape(nr, -1).max(axis=1)
    report.entries.append(_trend(
        "khasminskii-psi", shell_min, grid.psi_threshold, True, x, y, t,
        lambda: (nr - 1,) + np.unravel_index(np.argmin(P[-1]), P[-1].shape), gdesc))
    report.entries.append(_trend(
        "khasminskii-drift", shell_max, grid.drift_threshold, False, x, y, t,
        lambda: (nr - 1,) + np.unravel_index(np.argmax(L[-1]), L[-1].shape), gdesc,
        {"max_drift_outer_shell": float(shell_max[-1])}))
    report.entries.append(_pointwise("drift-bound-line", line - L, x, y, t, gdesc, line_details))
    return report
