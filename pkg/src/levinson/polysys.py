"""Multivariate polynomials, sphere minimisation and the polynomial-case constants.

A :class:`MultiPoly` stores ``{exponent tuple: coefficient}``.  Evaluation is
vectorised over leading axes of ``x`` (shape ``(..., n)``) and works for float
arrays as well as mpmath object arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import NamedTuple

import numpy as np
from scipy import stats as _stats
from scipy.stats import qmc

from .errors import (
    CertificateFailure,
    ContractError,
    DissipativityFailure,
    InvalidInputError,
    ParseError,
)

__all__ = [
    "MultiPoly",
    "SphereMinimum",
    "Uf1Constants",
    "InnerBoundFit",
    "leading_form",
    "min_on_sphere",
    "sphere_points",
    "uf1_constants",
    "fit_inner_bound",
]


class MultiPoly:
    """Polynomial in ``n`` variables.

    >>> p = MultiPoly.parse([((4, 0), 1.0), ((0, 2), -0.5)])
    >>> p.degree
    4
    """

    __slots__ = ("n", "terms", "_grad", "_hess")

    def __init__(self, n, terms=()):
        if int(n) < 1:
            raise InvalidInputError(f"dimension must be >= 1, got {n}")
        self.n = int(n)
        items = terms.items() if isinstance(terms, dict) else terms
        out = {}
        for exps, coef in items:
            exps = tuple(int(e) for e in exps)
            if len(exps) != self.n:
                raise ParseError(f"exponent tuple {exps} does not have length {self.n}")
            if any(e < 0 for e in exps):
                raise ParseError(f"negative exponent in {exps}")
            coef = float(coef)
            if not math.isfinite(coef):
                raise ParseError(f"non-finite coefficient for {exps}")
            if exps in out:
                raise ParseError(f"duplicate exponent tuple {exps}")
            if coef != 0.0:
                out[exps] = coef
        self.terms = out
        self._grad = None
        self._hess = None

    @classmethod
    def parse(cls, records, n=None):
        """Build from ``[(exponents, coefficient), ...]`` records.

        This is the on-disk coefficient format used by configuration files.
        """
        try:
            records = [(tuple(r[0]), r[1]) for r in records]
        except (TypeError, IndexError) as exc:
            raise ParseError(f"polynomial records must be (exponents, coefficient) pairs: {exc}")
        if not records:
            raise ParseError("polynomial has no terms")
        if n is None:
            n = len(records[0][0])
        for exps, coef in records:
            if not isinstance(coef, (int, float)) or isinstance(coef, bool):
                raise ParseError(f"coefficient {coef!r} is not a number")
        return cls(n, records)

    @classmethod
    def norm_power(cls, n, k, scale=1.0):
        """``scale * ||x||^(2k)`` expanded into monomials."""
        terms = {}
        for combo in product(range(k + 1), repeat=n):
            if sum(combo) != k:
                continue
            c = math.factorial(k)
            for j in combo:
                c //= math.factorial(j)
            terms[tuple(2 * j for j in combo)] = scale * c
        return cls(n, terms)

    def to_records(self):
        return [(list(e), c) for e, c in sorted(self.terms.items())]

    @property
    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    def is_zero(self):
        return not self.terms

    def is_homogeneous(self):
        return len({sum(e) for e in self.terms}) <= 1

    def __repr__(self):
        body = " + ".join(f"{c:g}*x^{e}" for e, c in sorted(self.terms.items())) or "0"
        return f"MultiPoly(n={self.n}, {body})"

    def __eq__(self, other):
        if not isinstance(other, MultiPoly):
            return NotImplemented
        return self.n == other.n and self.terms == other.terms

    def __hash__(self):
        return hash((self.n, tuple(sorted(self.terms.items()))))

    def __add__(self, other):
        terms = dict(self.terms)
        for e, c in other.terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return MultiPoly(self.n, {e: c for e, c in terms.items() if c != 0.0})

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, s):
        return MultiPoly(self.n, {e: c * float(s) for e, c in self.terms.items()})

    __rmul__ = __mul__

    def partial(self, i):
        terms = {}
        for e, c in self.terms.items():
            if e[i] == 0:
                continue
            d = list(e)
            d[i] -= 1
            d = tuple(d)
            terms[d] = terms.get(d, 0.0) + c * e[i]
        return MultiPoly(self.n, terms)

    def __call__(self, x):
        return self.value(x)

    def value(self, x):
        x = np.asarray(x) if not isinstance(x, np.ndarray) else x
        if x.shape[-1] != self.n:
            raise InvalidInputError(f"expected last axis {self.n}, got shape {x.shape}")
        if not self.terms:
            return np.zeros(x.shape[:-1])[()] if x.dtype != object else np.sum(x * 0, axis=-1)[()]
        deg = self.degree
        cols = [x[..., i] for i in range(self.n)]
        powers = []
        for c in cols:
            pw = [None] * (deg + 1)
            pw[0] = None
            if deg >= 1:
                pw[1] = c
            for k in range(2, deg + 1):
                pw[k] = pw[k - 1] * c
            powers.append(pw)
        total = 0
        for e, coef in self.terms.items():
            term = coef
            for i, k in enumerate(e):
                if k:
                    term = term * powers[i][k]
            total = total + term
        if np.ndim(total) == 0 and x.ndim > 1:
            total = np.broadcast_to(np.asarray(total), x.shape[:-1]).copy()
        return np.asarray(total)[()]

    def grad_polys(self):
        if self._grad is None:
            self._grad = tuple(self.partial(i) for i in range(self.n))
        return self._grad

    def hess_polys(self):
        if self._hess is None:
            g = self.grad_polys()
            self._hess = tuple(tuple(g[i].partial(j) for j in range(self.n)) for i in range(self.n))
        return self._hess

    def grad(self, x):
        x = np.asarray(x) if not isinstance(x, np.ndarray) else x
        parts = [np.broadcast_to(np.asarray(p.value(x)), x.shape[:-1]) for p in self.grad_polys()]
        return np.stack(parts, axis=-1)

    def hess(self, x):
        x = np.asarray(x) if not isinstance(x, np.ndarray) else x
        rows = []
        for row in self.hess_polys():
            rows.append(np.stack(
                [np.broadcast_to(np.asarray(p.value(x)), x.shape[:-1]) for p in row], axis=-1))
        return np.stack(rows, axis=-2)


def leading_form(poly):
    """The homogeneous part of ``poly`` of maximal total degree."""
    if poly.is_zero():
        raise ContractError("the zero polynomial has no leading form")
    d = poly.degree
    return MultiPoly(poly.n, {e: c for e, c in poly.terms.items() if sum(e) == d})


def sphere_points(n, count):
    """Deterministic quasi-uniform points on the unit sphere in R^n.

    Point sets are nested: the first ``count`` points of a larger request are
    the points of a smaller one (for n=2 when ``count`` doubles).
    """
    if n == 1:
        return np.array([[-1.0], [1.0]])
    count = int(count)
    if count < 1:
        raise InvalidInputError("count must be positive")
    if n == 2:
        ang = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    u = qmc.Halton(d=n, scramble=False).random(count + 1)[1:]
    z = _stats.norm.ppf(u)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


class SphereMinimum(NamedTuple):
    min_value: float
    witness: np.ndarray

    @property
    def positive_definite(self):
        return self.min_value > 1e-9


_MAX_SPHERE_SAMPLES = 1 << 16


def _sphere_count(n, resolution):
    return min(resolution ** (n - 1), _MAX_SPHERE_SAMPLES)


def min_on_sphere(form, resolution=64, *, starts=8, iterations=200):
    """Minimum of a homogeneous form of even degree over the unit sphere.

    Samples ``resolution**(n-1)`` quasi-uniform points (capped at 65536),
    then runs projected gradient descent with step halving from the best
    ``starts`` samples.  This is a heuristic, not a certificate.
    """
    if form.is_zero():
        return SphereMinimum(0.0, sphere_points(form.n, 1)[0])
    if not form.is_homogeneous():
        raise ContractError("min_on_sphere needs a homogeneous form")
    if form.degree % 2:
        raise ContractError(f"form has odd degree {form.degree}; odd forms are never definite")
    if resolution < 8:
        raise ContractError("resolution must be >= 8")
    pts = sphere_points(form.n, _sphere_count(form.n, resolution))
    vals = np.asarray(form.value(pts), dtype=float)
    order = np.argsort(vals, kind="stable")[:starts]
    u = pts[order].copy()
    f = vals[order].copy()
    if form.n > 1:
        step = np.full(len(u), 0.5)
        for _ in range(iterations):
            g = np.asarray(form.grad(u), dtype=float)
            rg = g - np.sum(g * u, axis=-1, keepdims=True) * u
            cand = u - step[:, None] * rg
            cand /= np.linalg.norm(cand, axis=-1, keepdims=True)
            fc = np.asarray(form.value(cand), dtype=float)
            better = fc < f
            u[better] = cand[better]
            f[better] = fc[better]
            step[~better] *= 0.5
            if np.all(step < 1e-14):
                break
    best = int(np.argmin(f))
    return SphereMinimum(float(f[best]), u[best])


@dataclass(frozen=True)
class Uf1Constants:
    """Certificate constants for polynomial V and F.

    ``lam`` is set when p = q = 1, ``nu`` otherwise.  ``c_max`` is the strict
    upper bound for the noise growth constant; ``m = p + q - 1`` is the
    growth exponent of the friction-potential inner product.
    """

    p: int
    q: int
    a: float
    c_max: float
    m: int
    lam: float | None = None
    nu: float | None = None
    literal_condition: bool = True
    notes: tuple = field(default=())

    def check(self):
        if self.p == self.q == 1:
            assert 0 < self.a < 2 * self.lam
            assert self.lam + self.lam * self.a - self.a ** 2 / 2 > 0
        else:
            assert self.nu > 0
        assert self.c_max > 0
        return self


def _require_pd(form, resolution, label):
    if form.degree % 2:
        raise CertificateFailure(
            f"leading form of {label} has odd degree {form.degree}", witness=None)
    res = min_on_sphere(form, resolution)
    if not res.positive_definite:
        raise CertificateFailure(
            f"leading form of {label} is not positive definite "
            f"(sphere minimum {res.min_value:.6g})", witness=res.witness)
    return res.min_value


def uf1_constants(V, F, a=None, *, resolution=64):
    """Constants for polynomial ``V`` (potential) and ``F`` (friction function).

    ``a`` defaults to ``lam`` when p = q = 1, to ``nu`` when q = 1 < p (so the
    ``-a x`` term cannot cancel the leading friction gradient) and to 1
    otherwise.
    """
    P = leading_form(V)
    Q = leading_form(F)
    min_p = _require_pd(P, resolution, "V")
    min_q = _require_pd(Q, resolution, "F")
    p, q = P.degree // 2, Q.degree // 2
    literal = (P == MultiPoly.norm_power(P.n, p)) or (Q == MultiPoly.norm_power(Q.n, q))
    notes = []
    if not literal:
        notes.append("neither leading form equals a pure power of ||x||; "
                     "constants reported but the literal hypothesis does not hold")
    if p == 1 and q == 1:
        lam = min(min_p, min_q)
        if a is None:
            a = lam
        if not 0 < a < 2 * lam:
            raise CertificateFailure(f"a={a} outside (0, 2*lambda) with lambda={lam}")
        out = Uf1Constants(p, q, float(a), min(2 * (2 * lam - a), 2 * a), p + q - 1,
                           lam=lam, literal_condition=literal, notes=tuple(notes))
    else:
        nu = min_q
        if q == 1:
            if a is None:
                a = nu
            if not 0 < a < 2 * nu:
                raise CertificateFailure(f"a={a} outside (0, 2*nu) with nu={nu}")
            c_max = min(2 * p * (2 * nu - a), 2 * a)
        else:
            if a is None:
                a = 1.0
            c_max = min(4 * p * q * nu, 2 * a)
        out = Uf1Constants(p, q, float(a), c_max, p + q - 1, nu=nu,
                           literal_condition=literal, notes=tuple(notes))
    return out.check()


class InnerBoundFit(NamedTuple):
    b_hat: float
    m_hat: float
    M_hat: float
    report: dict


def _gradient_fn(obj):
    if hasattr(obj, "grad_x"):
        return lambda x, t: obj.grad_x(x, t)
    if hasattr(obj, "grad") and callable(obj.grad):
        return lambda x, t: obj.grad(x)
    raise InvalidInputError(f"{obj!r} provides no gradient")


def fit_inner_bound(V, F, a, radii, sphere_res=64, *, t_samples=64, period=2 * np.pi, top=None):
    """Fit ``<grad V, grad F - a x> >= b ||x||^(2m) - M`` on sphere shells.

    Shell minima of the inner product ``g`` are fitted in log-log on the
    ``top`` largest shells (default: the upper half, at least three).  The
    returned ``b_hat`` is half the fitted leading coefficient; ``M_hat`` is
    valid on the sampled shells only.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or len(radii) < 3 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ContractError("radii must be >= 3 increasing positive values")
    gV, gF = _gradient_fn(V), _gradient_fn(F)
    n = V.n
    dirs = sphere_points(n, _sphere_count(n, sphere_res) if n > 2 else sphere_res)
    time_dep = hasattr(V, "grad_x") and getattr(V, "time_dependent", True)
    ts = np.arange(t_samples) * (period / t_samples) if time_dep else np.zeros(1)
    x = radii[:, None, None, None] * dirs[None, :, None, :]
    x = np.broadcast_to(x, (len(radii), len(dirs), len(ts), n))
    t = np.broadcast_to(ts[None, None, :], x.shape[:-1])
    g = np.sum(gV(x, t) * (gF(x, t) - a * x), axis=-1)
    shell_min = g.reshape(len(radii), -1).min(axis=1)
    top = max(3, len(radii) // 2) if top is None else top
    tail = shell_min[-3:]
    witness_idx = np.unravel_index(np.argmin(g[-1]), g[-1].shape)
    witness = x[-1][witness_idx]
    if not np.all(np.diff(tail) > 0) or tail[-1] <= 0:
        raise DissipativityFailure(
            "shell minima of the friction-potential inner product do not grow "
            f"(top shells: {tail.tolist()})", witness=witness)
    use = slice(len(radii) - top, None)
    ok = shell_min[use] > 0
    lr = np.log(radii[use][ok])
    lg = np.log(shell_min[use][ok])
    slope, intercept = np.polyfit(lr, lg, 1)
    m_hat = slope / 2.0
    b_hat = 0.5 * math.exp(intercept)
    r = np.linalg.norm(x, axis=-1)
    M_hat = max(0.0, float(-np.min(g - b_hat * r ** (2 * m_hat))))
    report = {
        "radii": radii.tolist(),
        "shell_min": shell_min.tolist(),
        "fitted_shells": int(ok.sum()),
        "sphere_points": len(dirs),
        "t_samples": len(ts),
        "grid_valid_only": True,
    }
    return InnerBoundFit(b_hat, m_hat, M_hat, report)
