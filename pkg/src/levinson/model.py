"""Stochastic time-periodic Newtonian systems.

A system in first-order form reads::

    dx = y dt
    dy = -[M(x, y, t) y + grad_x V(x, t) + E(x, y, t)] dt + Sigma(x, y, t) dB

where the friction matrix ``M`` is either the Hessian of a friction function
``F`` or a general matrix field.  All field callables take batched arguments:
``x`` and ``y`` of shape ``(..., n)`` and ``t`` broadcastable to ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _backend as B
from .errors import (
    CatalogError,
    ContractError,
    InvalidInputError,
    NumericDomainError,
    ParseError,
)
from .polysys import MultiPoly

__all__ = [
    "ScalarField",
    "TimeScalarField",
    "VectorField",
    "MatrixField",
    "HessianFriction",
    "GeneralFriction",
    "SystemSpec",
    "drift",
    "diffusion",
    "friction_matrix",
    "numeric_derivatives",
    "builtin",
    "BUILTINS",
]

TWO_PI = 2.0 * math.pi


def _arr(v):
    return v if isinstance(v, np.ndarray) else np.asarray(v)


def _t_like(t, x):
    """Broadcast ``t`` to the batch shape of ``x``."""
    t = _arr(t)
    return np.broadcast_to(t, np.broadcast_shapes(t.shape, x.shape[:-1]))


@dataclass(frozen=True)
class ScalarField:
    """Time-independent scalar field with optional derivative oracles."""

    n: int
    value: Callable
    grad: Callable | None = None
    hess: Callable | None = None

    @property
    def has_hess(self):
        return self.hess is not None


@dataclass(frozen=True)
class TimeScalarField:
    """``V(x, t)``, periodic in ``t``; ``lower_bound`` is declared, not assumed."""

    n: int
    value: Callable
    grad_x: Callable
    dt: Callable
    period: float
    lower_bound: float = -math.inf
    time_dependent: bool = True

    @classmethod
    def static(cls, f: ScalarField, period, lower_bound=-math.inf):
        def dt(x, t):
            return np.zeros(np.broadcast_shapes(_arr(t).shape, _arr(x).shape[:-1]))[()]

        return cls(f.n, lambda x, t: f.value(x), lambda x, t: f.grad(x), dt, period,
                   lower_bound, time_dependent=False)


@dataclass(frozen=True)
class VectorField:
    """``E(x, y, t)`` with declared sup-norm bound ``bound``."""

    n: int
    value: Callable
    bound: float = 0.0

    @classmethod
    def zero(cls, n):
        return cls(n, lambda x, y, t: np.zeros(np.broadcast_shapes(
            _arr(x).shape, _arr(y).shape, _arr(t).shape + (1,))), 0.0)


@dataclass(frozen=True)
class MatrixField:
    """``Sigma(x, y, t)`` returning ``(..., n, k)`` arrays."""

    n: int
    k: int
    value: Callable

    @classmethod
    def constant(cls, n, sigma, k=None):
        k = n if k is None else k
        mat = float(sigma) * np.eye(n, k)

        def value(x, y, t):
            batch = np.broadcast_shapes(_arr(x).shape[:-1], _arr(y).shape[:-1], _arr(t).shape)
            return np.broadcast_to(mat, batch + (n, k))

        return cls(n, k, value)


@dataclass(frozen=True)
class HessianFriction:
    F: ScalarField

    def __post_init__(self):
        if self.F.hess is None or self.F.grad is None:
            raise InvalidInputError("Hessian friction needs a friction function with grad and hess")


@dataclass(frozen=True)
class GeneralFriction:
    """General friction matrix ``C(x, y, t)`` with ``C^s >= 2 alpha I`` and ``||C|| <= beta``."""

    matrix: Callable
    alpha: float
    beta: float


@dataclass(frozen=True)
class SystemSpec:
    n: int
    k: int
    friction: HessianFriction | GeneralFriction
    potential: TimeScalarField
    perturbation: VectorField
    noise: MatrixField
    period: float
    name: str = "custom"
    params: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.period > 0:
            raise InvalidInputError(f"period must be positive, got {self.period}")
        for part in (self.potential, self.perturbation, self.noise):
            if part.n != self.n:
                raise InvalidInputError(f"sub-field dimension {part.n} != system dimension {self.n}")
        if isinstance(self.friction, HessianFriction) and self.friction.F.n != self.n:
            raise InvalidInputError("friction function dimension mismatch")
        if self.noise.k != self.k:
            raise InvalidInputError(f"noise has {self.noise.k} columns, system declares k={self.k}")

    @property
    def hessian_friction(self):
        return isinstance(self.friction, HessianFriction)


def _check_xy(sys, x, y):
    x = _arr(x)
    y = _arr(y)
    if x.shape[-1:] != (sys.n,) or y.shape[-1:] != (sys.n,):
        raise InvalidInputError(
            f"expected vectors of length {sys.n}, got shapes {x.shape} and {y.shape}")
    return x, y


def _witness(x, y, t, bad):
    idx = np.argwhere(np.atleast_1d(bad))[0]
    idx = tuple(idx) if np.ndim(bad) else ()
    xt = np.broadcast_to(_arr(t), _arr(bad).shape) if np.ndim(bad) else t
    return {"x": np.asarray(x[idx] if np.ndim(bad) else x, dtype=float).tolist(),
            "y": np.asarray(y[idx] if np.ndim(bad) else y, dtype=float).tolist(),
            "t": float(xt[idx] if np.ndim(bad) else xt)}


def friction_matrix(sys, x, y, t):
    if sys.hessian_friction:
        return sys.friction.F.hess(x)
    return sys.friction.matrix(x, y, t)


def _drift_raw(sys, x, y, t):
    M = friction_matrix(sys, x, y, t)
    dy = -(B.matvec(M, y) + sys.potential.grad_x(x, t) + sys.perturbation.value(x, y, t))
    return y, dy


def drift(sys: SystemSpec, x, y, t):
    """Return ``(dx, dy)``; arguments may carry leading batch axes."""
    x, y = _check_xy(sys, x, y)
    dx, dy = _drift_raw(sys, x, y, t)
    if not B.is_mp(dy):
        bad = ~np.all(np.isfinite(dy), axis=-1)
        if np.any(bad):
            raise NumericDomainError("non-finite drift", witness=_witness(x, y, t, bad))
    return dx, dy


def diffusion(sys: SystemSpec, x, y, t):
    x, y = _check_xy(sys, x, y)
    s = sys.noise.value(x, y, t)
    want = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], _arr(t).shape) + (sys.n, sys.k)
    if s.shape != want:
        raise ContractError(f"noise returned shape {s.shape}, expected {want}")
    return s


# -- numeric derivatives -----------------------------------------------------

def _checked(f, pts):
    v = f(pts)
    if not B.is_mp(v):
        v = np.asarray(v, dtype=float)
        bad = ~np.isfinite(v)
        if np.any(bad):
            where = np.argwhere(bad)[0]
            raise NumericDomainError("non-finite value in difference stencil",
                                     witness={"x": np.asarray(pts[tuple(where)]).tolist()})
    return v


def numeric_derivatives(f: ScalarField) -> ScalarField:
    """Central-difference gradient and Hessian for a field lacking them.

    Steps are ``1e-5 (1 + ||x||)`` for the gradient and ``1e-4 (1 + ||x||)``
    for the Hessian.  Each stencil point is evaluated once per call.
    """
    n = f.n
    eye = np.eye(n)

    def grad(x):
        x = np.asarray(x, dtype=float)
        h = 1e-5 * (1.0 + np.linalg.norm(x, axis=-1))[..., None, None]
        pts = np.concatenate([x[..., None, :] + h * eye, x[..., None, :] - h * eye], axis=-2)
        v = _checked(f.value, pts)
        return (v[..., :n] - v[..., n:]) / (2.0 * h[..., 0])

    def hess(x):
        x = np.asarray(x, dtype=float)
        h = 1e-4 * (1.0 + np.linalg.norm(x, axis=-1))
        steps = []
        for i in range(n):
            for j in range(i, n):
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    steps.append(si * eye[i] + sj * eye[j])
        steps = np.array(steps)
        pts = x[..., None, :] + h[..., None, None] * steps
        v = _checked(f.value, pts)
        out = np.empty(x.shape[:-1] + (n, n))
        c = 0
        for i in range(n):
            for j in range(i, n):
                pp, pm, mp, mm = (v[..., c + r] for r in range(4))
                out[..., i, j] = out[..., j, i] = (pp - pm - mp + mm) / (4.0 * h * h)
                c += 4
        return out

    return ScalarField(n, f.value, f.grad or grad, f.hess or hess)


# -- field constructors used by the builtins ---------------------------------

def radial_field(n, phi, dphi, d2phi):
    """``F(x) = phi(||x||^2)`` with analytic gradient and Hessian."""
    eye = np.eye(n)

    def value(x):
        return _arr(phi(B.sqnorm(_arr(x))))[()]

    def grad(x):
        x = _arr(x)
        return 2 * _arr(dphi(B.sqnorm(x)))[..., None] * x

    def hess(x):
        x = _arr(x)
        u = B.sqnorm(x)
        outer = x[..., :, None] * x[..., None, :]
        return 2 * _arr(dphi(u))[..., None, None] * eye + 4 * _arr(d2phi(u))[..., None, None] * outer

    return ScalarField(n, value, grad, hess)


def radial_time_field(n, phi, phi_u, phi_t, period, lower_bound, time_dependent=True):
    """``V(x, t) = phi(||x||^2, t)``."""

    def value(x, t):
        return _arr(phi(B.sqnorm(_arr(x)), _arr(t)))[()]

    def grad_x(x, t):
        x = _arr(x)
        return 2 * _arr(phi_u(B.sqnorm(x), _arr(t)))[..., None] * x

    def dt(x, t):
        x = _arr(x)
        return _arr(phi_t(B.sqnorm(x), _t_like(t, x)))[()]

    return TimeScalarField(n, value, grad_x, dt, period, lower_bound, time_dependent)


def poly_field(poly: MultiPoly) -> ScalarField:
    return ScalarField(poly.n, poly.value, poly.grad, poly.hess)


def forcing_field(n, amplitude, omega=1.0):
    """``E(x, y, t) = -A sin(omega t) e_1``: encodes ``+A sin(omega t)`` on the right-hand side."""
    amp = float(amplitude)
    e1 = np.zeros(n)
    e1[0] = 1.0

    def value(x, y, t):
        x = _arr(x)
        tt = _t_like(t, x)
        return -amp * _arr(B.sin(omega * tt))[..., None] * e1

    return VectorField(n, value, abs(amp))


def _noise_field(n, kind, params, growth):
    """Noise options shared by the worked examples.

    ``growth(x)`` is ``||x||^(2m)``; the saturating option returns
    ``diag(sqrt(c (growth + ||y||^2) + C))``.
    """
    if kind == "zero":
        return MatrixField.constant(n, 0.0)
    if kind == "constant":
        return MatrixField.constant(n, params.get("sigma", 1.0))
    if kind == "saturating":
        c = float(params.get("c", 1.0))
        C = float(params.get("C", 1.0))
        eye = np.eye(n)

        def value(x, y, t):
            x, y = _arr(x), _arr(y)
            s = B.sqrt(c * (growth(x) + B.sqnorm(y)) + C)
            s = _arr(s)
            batch = np.broadcast_shapes(s.shape, _arr(t).shape)
            return np.broadcast_to(s, batch)[..., None, None] * eye

        return MatrixField(n, n, value)
    raise ParseError(f"unknown noise kind {kind!r} (zero, constant, saturating)")


def _noise_constants(n, kind, params, a, b):
    """Return (c2, M2) so that Tr(Sigma Sigma^T) <= 2 c2 (a|y|^2 + b|x|^2m) + M2."""
    if kind == "zero":
        return 0.0, 0.0
    if kind == "constant":
        return 0.0, n * float(params.get("sigma", 1.0)) ** 2
    c = float(params.get("c", 1.0))
    C = float(params.get("C", 1.0))
    return n * c / (2.0 * min(a, b)), n * C


# -- builtins ----------------------------------------------------------------

def _ln_potential(n):
    # V = ln(2 + sin t + |x|^2)
    return radial_time_field(
        n,
        lambda u, t: B.log(2 + B.sin(t) + u),
        lambda u, t: 1 / (2 + B.sin(t) + u),
        lambda u, t: B.cos(t) / (2 + B.sin(t) + u),
        TWO_PI, 0.0)


def _sqrt_potential(n):
    # V = sqrt(2 + sin t + |x|^2)
    return radial_time_field(
        n,
        lambda u, t: B.sqrt(2 + B.sin(t) + u),
        lambda u, t: 1 / (2 * B.sqrt(2 + B.sin(t) + u)),
        lambda u, t: B.cos(t) / (2 * B.sqrt(2 + B.sin(t) + u)),
        TWO_PI, 1.0)


def _gauss_well_potential(n):
    # V = (2 + sin t)(1 - exp(-|x|^2))
    return radial_time_field(
        n,
        lambda u, t: (2 + B.sin(t)) * (1 - B.exp(-u)),
        lambda u, t: (2 + B.sin(t)) * B.exp(-u),
        lambda u, t: B.cos(t) * (1 - B.exp(-u)),
        TWO_PI, 0.0)


def _quartic_friction(n, sign):
    # F = |x|^4 + sign |x|^2
    return radial_field(n, lambda u: u * u + sign * u, lambda u: 2 * u + sign, lambda u: 2 + 0 * u)


def _exp_friction(n, sign):
    # F = 1/4 int_0^{|x|^2} e^s (s + sign) ds
    if sign > 0:
        return radial_field(n, lambda u: u * B.exp(u) / 4,
                            lambda u: B.exp(u) * (u + 1) / 4,
                            lambda u: B.exp(u) * (u + 2) / 4)
    return radial_field(n, lambda u: ((u - 2) * B.exp(u) + 2) / 4,
                        lambda u: B.exp(u) * (u - 1) / 4,
                        lambda u: B.exp(u) * u / 4)


def _worked_example(name, n, params, potential, friction, consts):
    kind = params.get("noise", "zero")
    m = consts["m"]
    noise = _noise_field(n, kind, params, lambda x: B.sqnorm(x) ** m if m != 1 else B.sqnorm(x))
    c2, M2 = _noise_constants(n, kind, params, consts["a"], consts["b"])
    consts = dict(consts, variant="uf", e=0.0, c1=0.0, c2=c2, M2=M2)
    return SystemSpec(n, n, HessianFriction(friction), potential, VectorField.zero(n), noise,
                      TWO_PI, name, dict(params, n=n), consts)


def _example_41(n, params):
    return _worked_example("example-4.1", n, params, _ln_potential(n), _quartic_friction(n, 1),
                          dict(a=8.0, D=19.0, b=8.0, m=1.0, M=36.0, M1=1.0))


def _example_42(n, params):
    return _worked_example("example-4.2", n, params, _sqrt_potential(n), _quartic_friction(n, 1),
                          dict(a=2.0, D=1.0, b=2.0, m=1.5, M=2.0, M1=0.5))


def _example_43(n, params):
    return _worked_example("example-4.3", n, params, _gauss_well_potential(n), _exp_friction(n, 1),
                          dict(a=1.0, D=2.0, b=1.0, m=2.0, M=3.0, M1=1.0))


def _example_41_relax(n, params):
    # -<grad V, grad F - 8x> = -4u(2u - 5)/(s + u) <= -8u + 44; min of V + 8F - 32u is about -48.75.
    return _worked_example("example-4.1-relax", n, params, _ln_potential(n),
                          _quartic_friction(n, -1),
                          dict(a=8.0, D=50.0, b=8.0, m=1.0, M=44.0, M1=1.0))


def _example_43_relax(n, params):
    # -<grad V, grad F - x> = -(2 + sin t)(u^2 - u - 2u e^-u) <= -u^2/2 + 4.
    return _worked_example("example-4.3-relax", n, params, _gauss_well_potential(n),
                          _exp_friction(n, -1),
                          dict(a=1.0, D=2.0, b=0.5, m=2.0, M=4.0, M1=1.0))


def _open_problem(n, params):
    """x'' + x' + x^3 = B' + A sin t, written with F = |x|^2/2, V = |x|^4/4, E = -A sin t e_1."""
    sigma = float(params.get("sigma", 1.0))
    amp = float(params.get("forcing", 1.0))
    F = radial_field(n, lambda u: u / 2, lambda u: 0 * u + 0.5, lambda u: 0 * u)
    V = radial_time_field(n, lambda u, t: u * u / 4, lambda u, t: u / 2, lambda u, t: 0 * u,
                          TWO_PI, 0.0, time_dependent=False)
    consts = dict(variant="uf", a=0.5, D=1.0, b=0.25, m=2.0, M=0.0, e=abs(amp),
                  c1=0.0, M1=0.0, c2=0.0, M2=n * sigma ** 2)
    return SystemSpec(n, n, HessianFriction(F), V, forcing_field(n, amp),
                      MatrixField.constant(n, sigma), TWO_PI, "open-problem-v4",
                      dict(params, n=n, sigma=sigma, forcing=amp), consts)


def _van_der_pol(n, params):
    """Forced van der Pol: F = mu(|x|^4/12 - |x|^2/2) so D^2F = mu(x^2 - 1) for n = 1."""
    mu = float(params.get("mu", 1.0))
    amp = float(params.get("forcing", 1.0))
    omega = float(params.get("omega", 1.0))
    sigma = float(params.get("sigma", 0.0))
    if mu <= 0:
        raise InvalidInputError("mu must be positive")
    F = radial_field(n, lambda u: mu * (u * u / 12 - u / 2), lambda u: mu * (u / 6 - 0.5),
                     lambda u: mu / 6 + 0 * u)
    V = radial_time_field(n, lambda u, t: u / 2, lambda u, t: 0 * u + 0.5, lambda u, t: 0 * u,
                          TWO_PI / omega, 0.0, time_dependent=False)
    consts = dict(variant="uf", a=1.0, D=1.0 + 0.75 * mu, b=mu / 6, m=2.0,
                  M=1.5 * (mu + 1) ** 2 / mu, e=abs(amp), c1=0.0, M1=0.0, c2=0.0,
                  M2=n * sigma ** 2)
    return SystemSpec(n, n, HessianFriction(F), V, forcing_field(n, amp, omega),
                      MatrixField.constant(n, sigma), TWO_PI / omega, "van-der-pol",
                      dict(params, n=n, mu=mu, forcing=amp, omega=omega, sigma=sigma), consts)


def _parse_poly(records, label):
    if isinstance(records, MultiPoly):
        return records
    if records is None:
        raise ParseError(f"polynomial builtin needs coefficient records for {label}")
    try:
        return MultiPoly.parse(records)
    except ParseError as exc:
        raise ParseError(f"{label}: {exc}") from None


def _polynomial(n, params):
    V = _parse_poly(params.get("V"), "V")
    F = _parse_poly(params.get("F"), "F")
    if V.n != F.n:
        raise ParseError(f"V has {V.n} variables but F has {F.n}")
    n = V.n
    period = float(params.get("period", TWO_PI))
    amp = float(params.get("forcing", 0.0))
    sigma = float(params.get("sigma", 0.0))
    Vf = poly_field(V)
    consts = {}
    return SystemSpec(n, n, HessianFriction(poly_field(F)),
                      TimeScalarField.static(Vf, period),
                      forcing_field(n, amp, TWO_PI / period), MatrixField.constant(n, sigma),
                      period, "polynomial",
                      dict(params, n=n, V=V.to_records(), F=F.to_records(),
                           forcing=amp, sigma=sigma, period=period),
                      consts)


def _periodic_langevin(n, params):
    """Time-periodic Langevin system with general friction.

    ``C = (g0 + g1 sin t) I + s J`` where ``J`` rotates the first two
    coordinates; ``V = |x|^4/4 + |x|^2/2``.
    """
    g0 = float(params.get("gamma0", 1.0))
    g1 = float(params.get("gamma1", 0.5))
    skew = float(params.get("skew", 0.25)) if n >= 2 else 0.0
    amp = float(params.get("forcing", 0.5))
    sigma = float(params.get("sigma", 0.5))
    if not g0 > abs(g1):
        raise InvalidInputError("need gamma0 > |gamma1| for a positive friction floor")
    J = np.zeros((n, n))
    if n >= 2:
        J[0, 1], J[1, 0] = 1.0, -1.0
    eye = np.eye(n)

    def matrix(x, y, t):
        batch = np.broadcast_shapes(_arr(x).shape[:-1], _arr(y).shape[:-1], _arr(t).shape)
        g = _arr(g0 + g1 * B.sin(np.broadcast_to(_arr(t), batch)))
        return g[..., None, None] * eye + skew * J

    alpha = (g0 - abs(g1)) / 2
    beta = max(math.hypot(g0 + abs(g1), skew), abs(amp))
    V = radial_time_field(n, lambda u, t: u * u / 4 + u / 2, lambda u, t: u / 2 + 0.5,
                          lambda u, t: 0 * u, TWO_PI, 0.0, time_dependent=False)
    consts = dict(variant="uf2", alpha=alpha, beta=beta, b=1.0, eps=2.0, M=0.0, c=0.5,
                  M1=n * sigma ** 2)
    return SystemSpec(n, n, GeneralFriction(matrix, alpha, beta), V, forcing_field(n, amp),
                      MatrixField.constant(n, sigma), TWO_PI, "periodic-langevin",
                      dict(params, n=n, gamma0=g0, gamma1=g1, skew=skew, forcing=amp,
                           sigma=sigma), consts)


BUILTINS = {
    "example-4.1": (_example_41, 2),
    "example-4.2": (_example_42, 2),
    "example-4.3": (_example_43, 2),
    "example-4.1-relax": (_example_41_relax, 2),
    "example-4.3-relax": (_example_43_relax, 2),
    "open-problem-v4": (_open_problem, 1),
    "van-der-pol": (_van_der_pol, 1),
    "polynomial": (_polynomial, None),
    "periodic-langevin": (_periodic_langevin, 2),
}


def builtin(name: str, params: dict | None = None, **kwargs) -> SystemSpec:
    """Construct a builtin system.

    ``params`` (or keyword arguments) may carry ``n``, a noise choice
    (``noise`` = zero/constant/saturating with ``sigma`` or ``c``, ``C``) and,
    for ``"polynomial"``, the coefficient records ``V`` and ``F``.
    Default certificate constants are attached as ``sys.constants``.
    """
    if name not in BUILTINS:
        raise CatalogError(name, BUILTINS)
    params = dict(params or {}, **kwargs)
    factory, default_n = BUILTINS[name]
    n = int(params.pop("n", default_n or 0))
    if default_n is not None and n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    return factory(n, params)
