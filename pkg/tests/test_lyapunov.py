import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levinson.errors import CapabilityError, CertificateError, CertificateFailure, WrongVariantError
from levinson.lyapunov import (
    Grid,
    TestFunction,
    UF2Certificate,
    UFCertificate,
    calibrate_D,
    default_certificate,
    generator_apply,
    generator_psi,
    generator_psi_uf2,
    psi,
    psi_function,
    psi_uf2,
    psi_uf2_function,
    uf2_drift_constant,
    verify_hypotheses,
    verify_khasminskii,
)
from levinson.model import (
    GeneralFriction,
    MatrixField,
    SystemSpec,
    VectorField,
    builtin,
    radial_time_field,
)

HESSIAN = ["example-4.1", "example-4.2", "example-4.3", "example-4.1-relax",
           "example-4.3-relax", "open-problem-v4", "van-der-pol"]


def ball(rng, count, n, radius):
    v = rng.standard_normal((count, n))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * radius * rng.uniform(0, 1, (count, 1)) ** (1 / n)


def general_system(alpha_v=1.0, n=2, vscale=1.0):
    """General friction 2 alpha I with V = vscale |x|^2."""
    eye = np.eye(n)
    C = lambda x, y, t: np.broadcast_to(2 * alpha_v * eye, np.shape(x)[:-1] + (n, n))
    V = radial_time_field(n, lambda u, t: vscale * u, lambda u, t: vscale + 0 * u,
                          lambda u, t: 0 * u, 2 * math.pi, 0.0, time_dependent=False)
    return SystemSpec(n, n, GeneralFriction(C, alpha_v, 2 * alpha_v), V, VectorField.zero(n),
                      MatrixField.constant(n, 0.0), 2 * math.pi)


# -- psi ----------------------------------------------------------------------

def test_psi_at_origin_example_41():
    sys = builtin("example-4.1")
    assert psi(sys, default_certificate(sys), [0, 0], [0, 0], 0.0) == pytest.approx(19 + math.log(2), abs=1e-12)


def test_psi_example_42_by_hand():
    sys = builtin("example-4.2", n=1)
    val = psi(sys, default_certificate(sys), [1.0], [0.0], 0.0)
    assert val == pytest.approx(11 + math.sqrt(3), abs=1e-12)


def test_psi_cancellation_case():
    a = 1.5
    sys = builtin("polynomial", V=[((4, 0), 1.0), ((0, 2), 1.0)], F=[((2, 0), a / 2), ((0, 2), a / 2)])
    cert = UFCertificate(a=a, D=2.0, b=1, m=1, M=0)
    x, y = np.array([0.7, -1.1]), np.array([0.3, 2.0])
    expect = (y @ y / 2 + sys.potential.value(x, 0) + a * sys.friction.F.value(x)
              - a * a / 2 * (x @ x) + 2.0)
    assert psi(sys, cert, x, y, 0.0) == pytest.approx(expect, rel=1e-14)


def test_psi_rejects_general_friction():
    sys = builtin("periodic-langevin")
    with pytest.raises(WrongVariantError):
        psi(sys, UFCertificate(a=1, D=1, b=1, m=1, M=0), [0, 0], [0, 0], 0.0)


def test_psi_uf2_examples():
    sys = general_system(1.0)
    cert = UF2Certificate(alpha=1.0, beta=2.0, b=1.0, eps=1.0, M=0.0, c=0.5)
    assert psi_uf2(sys, cert, [1.0, 0.0], [0.0, 0.0]) == pytest.approx(2.0)
    assert psi_uf2(sys, cert, [0.0, 0.0], [0.0, 0.0]) == 0.0
    sys1 = general_system(2.0, n=1, vscale=0.0)
    cert2 = UF2Certificate(alpha=2.0, beta=4.0, b=1.0, eps=1.0, M=0.0, c=0.5)
    assert psi_uf2(sys1, cert2, [1.0], [-2.0]) == pytest.approx(2.0)


# -- generator ----------------------------------------------------------------

def test_generator_at_origin_is_time_derivative():
    sys = builtin("example-4.1")
    assert generator_psi(sys, default_certificate(sys), [0, 0], [0, 0], 0.0) == pytest.approx(0.5)


def test_generator_pure_damping():
    sys = builtin("example-4.1")
    y = np.array([1.5, -0.5])
    val = generator_psi(sys, default_certificate(sys), [0, 0], y, math.pi / 2)
    assert val == pytest.approx(-8 * (y @ y), abs=1e-12)


def test_unit_noise_contributes_half():
    quiet = builtin("open-problem-v4", sigma=0.0)
    loud = builtin("open-problem-v4", sigma=1.0)
    cert = default_certificate(loud)
    rng = np.random.default_rng(0)
    x, y, t = rng.standard_normal((5, 1)), rng.standard_normal((5, 1)), rng.uniform(0, 6, 5)
    diff = generator_psi(loud, cert, x, y, t) - generator_psi(quiet, cert, x, y, t)
    np.testing.assert_allclose(diff, 0.5, atol=1e-12)


def _const_fn(n):
    z = lambda x, y, t: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y)))
    return TestFunction(lambda x, y, t: np.full(np.shape(x)[:-1], 3.0),
                        lambda x, y, t: np.zeros(np.shape(x)[:-1]), z, z,
                        lambda x, y, t: np.zeros(np.shape(x)[:-1] + (n, n)))


def test_generator_kills_constants():
    sys = builtin("example-4.2")
    rng = np.random.default_rng(1)
    out = generator_apply(sys, _const_fn(2), rng.standard_normal((10, 2)), rng.standard_normal((10, 2)), 0.3)
    np.testing.assert_array_equal(out, 0.0)


def _ysq(n, oracles=True):
    if not oracles:
        return TestFunction(lambda x, y, t: np.sum(y * y, axis=-1))
    return TestFunction(lambda x, y, t: np.sum(y * y, axis=-1),
                        lambda x, y, t: np.zeros(np.shape(y)[:-1]),
                        lambda x, y, t: np.zeros_like(y),
                        lambda x, y, t: 2 * y,
                        lambda x, y, t: np.broadcast_to(2 * np.eye(n), np.shape(y)[:-1] + (n, n)))


def test_generator_of_kinetic_energy():
    sigma = 0.7
    sys = builtin("van-der-pol", sigma=sigma, forcing=0.0)
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((20, 1)), rng.standard_normal((20, 1))
    pull = np.einsum("...ij,...j->...i", sys.friction.F.hess(x), y) + sys.potential.grad_x(x, 0.0)
    expect = sigma ** 2 * 1 - 2 * np.sum(pull * y, axis=-1)
    np.testing.assert_allclose(generator_apply(sys, _ysq(1), x, y, 0.0), expect, rtol=1e-13)


def test_missing_oracle_needs_permission():
    sys = builtin("open-problem-v4")
    with pytest.raises(CapabilityError):
        generator_apply(sys, _ysq(1, oracles=False), [1.0], [1.0], 0.0)
    a = generator_apply(sys, _ysq(1, oracles=False), [1.0], [1.0], 0.0, numeric=True)
    b = generator_apply(sys, _ysq(1), [1.0], [1.0], 0.0)
    assert a == pytest.approx(b, rel=1e-6)


def test_psi_generator_matches_generic_example_41():
    sys = builtin("example-4.1")
    cert = default_certificate(sys)
    rng = np.random.default_rng(3)
    x, y, t = ball(rng, 100, 2, 5), ball(rng, 100, 2, 5), rng.uniform(0, 2 * math.pi, 100)
    closed = generator_psi(sys, cert, x, y, t)
    generic = generator_apply(sys, psi_function(sys, cert), x, y, t)
    np.testing.assert_allclose(generic, closed, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("name", HESSIAN)
def test_cancellation_identity(name):
    sys = builtin(name)
    cert = default_certificate(sys)
    f = psi_function(sys, cert)
    rng = np.random.default_rng(4)
    n = sys.n
    x, y, t = ball(rng, 200, n, 3), ball(rng, 200, n, 3), rng.uniform(0, sys.period, 200)
    H = sys.friction.F.hess(x)
    gV = sys.potential.grad_x(x, t)
    w = sys.friction.F.grad(x) - cert.a * x
    terms = [np.sum(y * f.grad_x(x, y, t), -1),
             -np.sum((np.einsum("...ij,...j->...i", H, y) + gV) * f.grad_y(x, y, t), -1),
             cert.a * np.sum(y * y, -1),
             np.sum(gV * w, -1)]
    total = sum(terms)
    scale = 1 + sum(np.abs(v) for v in terms)
    assert np.max(np.abs(total) / scale) <= 1e-8


@pytest.mark.parametrize("name", ["open-problem-v4", "van-der-pol", "example-4.2", "periodic-langevin"])
def test_closed_form_matches_generic_float(name):
    sys = builtin(name)
    cert = default_certificate(sys)
    rng = np.random.default_rng(5)
    n = sys.n
    x, y, t = ball(rng, 300, n, 5), ball(rng, 300, n, 5), rng.uniform(0, sys.period, 300)
    if sys.hessian_friction:
        closed, f = generator_psi(sys, cert, x, y, t), psi_function(sys, cert)
    else:
        closed, f = generator_psi_uf2(sys, cert, x, y, t), psi_uf2_function(sys, cert)
    generic = generator_apply(sys, f, x, y, t)
    assert np.all(np.abs(closed - generic) <= 1e-6 * (1 + np.abs(closed)))


def test_extended_precision_resolves_cancellation():
    sys = builtin("example-4.3")
    cert = default_certificate(sys)
    x, y = np.array([[3.5, 3.4]]), np.array([[1.0, -2.0]])
    closed = generator_psi(sys, cert, x, y, 0.4)
    generic = generator_apply(sys, psi_function(sys, cert), x, y, 0.4, dps=50)
    assert abs(closed - generic) <= 1e-9 * (1 + abs(closed))


# -- calibration --------------------------------------------------------------

CAL = Grid(tuple(np.linspace(0.0, 10.0, 101)), sphere_res=64, t_samples=64)


def test_calibrate_example_41_below_catalogue_value():
    sys = builtin("example-4.1")
    D = calibrate_D(sys, default_certificate(sys), CAL)
    assert D <= 19.0
    # bracket min at |x|^2 = 3/2: 8u^2 - 24u + ln(1 + u) -> -18 + ln 2.5
    assert D == pytest.approx(1 + 18 - math.log(2.5), abs=1e-2)


def test_calibrate_nonnegative_bracket():
    sys = builtin("example-4.2")
    assert calibrate_D(sys, default_certificate(sys), CAL) <= 1.0


def test_calibrate_constant_negative_potential():
    a = 2.0
    sys = builtin("polynomial", V=[((0, 0), -5.0)], F=[((2, 0), a / 2), ((0, 2), a / 2)])
    D = calibrate_D(sys, a, CAL)
    assert D == pytest.approx(6.0, abs=1e-6)
    cert = UFCertificate(a=a, D=D, b=1, m=1, M=0)
    rng = np.random.default_rng(6)
    vals = psi(sys, cert, ball(rng, 2000, 2, 10), ball(rng, 2000, 2, 10), 0.0)
    assert vals.min() >= 1 - 1e-9


def test_psi_at_least_one_after_calibration():
    sys = builtin("example-4.1")
    cert = dataclasses.replace(default_certificate(sys), D=calibrate_D(sys, 8.0, CAL))
    g = Grid(tuple(np.linspace(0.0, 10.0, 41)), sphere_res=32, t_samples=16, y_box=10, y_res=11)
    rep = verify_hypotheses(sys, cert, g)
    assert rep["psi-at-least-1"].passed


def test_calibrate_unbounded_below():
    sys = builtin("polynomial", V=[((2,), -1.0)], F=[((2,), 0.5)])
    with pytest.raises(CertificateFailure):
        calibrate_D(sys, 1.0, Grid(tuple(range(0, 11)), 8, 4))


# -- verification -------------------------------------------------------------

HYP = Grid(tuple(float(r) for r in range(1, 11)), sphere_res=256, t_samples=64)


@pytest.mark.parametrize("name", ["example-4.1", "example-4.3", "example-4.2", "example-4.1-relax",
                                  "example-4.3-relax"])
def test_examples_satisfy_hypotheses(name):
    sys = builtin(name)
    rep = verify_hypotheses(sys, default_certificate(sys), HYP)
    assert rep.passed, rep.summary()


def test_lowered_M_fails_with_witness():
    sys = builtin("example-4.1")
    rep = verify_hypotheses(sys, dataclasses.replace(default_certificate(sys), M=1.0), HYP)
    h3 = rep["H3"]
    assert not h3.passed
    assert h3.margin < 0
    assert len(h3.witness["x"]) == 2


def test_khasminskii_example_41():
    sys = builtin("example-4.1")
    g = Grid((4.0, 6.0, 8.0, 10.0), sphere_res=256, t_samples=64, psi_threshold=10.0)
    rep = verify_khasminskii(sys, default_certificate(sys), g)
    assert rep["khasminskii-psi"].passed
    # along y = -(grad F - a x) the shell infimum grows like R^(4/3); it is about 15.70 at R = 10
    assert rep["khasminskii-psi"].details["shell_values"][-1] >= 15.70
    assert rep["khasminskii-drift"].passed
    assert rep["khasminskii-drift"].details["max_drift_outer_shell"] <= -763
    assert rep["drift-bound-line"].passed


def test_certificate_rejects_noise_budget():
    with pytest.raises(CertificateError):
        UFCertificate(a=8, D=19, b=8, m=1, M=36, c1=0.5, c2=0.5)
    with pytest.raises(CertificateError):
        UF2Certificate(alpha=1, beta=1, b=1, eps=1, M=0, c=1.0)
    with pytest.raises(CertificateError):
        UFCertificate(a=-1, D=0, b=1, m=1, M=0)


def test_frictionless_fails_drift_condition():
    sys = builtin("polynomial", V=[((2,), 1.0)], F=[((0,), 0.0)])
    cert = UFCertificate(a=1.0, D=1.0, b=1.0, m=1.0, M=0.0)
    rep = verify_khasminskii(sys, cert, Grid((4.0, 6.0, 8.0, 10.0), 64, 8))
    entry = rep["khasminskii-drift"]
    assert not entry.passed
    assert entry.witness["x"] and entry.witness["y"]


@settings(max_examples=15, deadline=None)
@given(st.floats(0, 10), st.floats(0, 2), st.floats(0, 5), st.floats(0, 3))
def test_larger_constants_never_flip_to_fail(dM, dM1, dM2, de):
    sys = builtin("open-problem-v4", sigma=1.3)
    base = default_certificate(sys)
    g = Grid((1.0, 2.0, 3.0, 4.0), sphere_res=16, t_samples=8)
    before = {e.condition: e for e in verify_hypotheses(sys, base, g)}
    bigger = dataclasses.replace(base, M=base.M + dM, M1=base.M1 + dM1, M2=base.M2 + dM2, e=base.e + de)
    after = {e.condition: e for e in verify_hypotheses(sys, bigger, g)}
    for name in ("H3", "H4-bound", "H5-time", "H5-noise"):
        if before[name].passed:
            assert after[name].passed
        assert after[name].margin >= before[name].margin - 1e-12


def test_uf2_hypotheses_and_drift_bound():
    sys = builtin("periodic-langevin")
    cert = default_certificate(sys)
    g = Grid((1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0), sphere_res=64, t_samples=16)
    assert verify_hypotheses(sys, cert, g).passed
    K = uf2_drift_constant(cert)
    f = psi_uf2_function(sys, cert)
    from levinson.lyapunov import _joint_grid
    x, y, t = _joint_grid(sys, g)
    L = generator_apply(sys, f, x, y, t)
    line = -(cert.alpha / 2) * (1 - cert.c) * (np.sum(y * y, -1) + cert.b * np.sum(x * x, -1) ** 2) + K
    assert np.all(L <= line + 1e-9)
    assert verify_khasminskii(sys, cert, g)["drift-bound-line"].passed


def test_uf2_constant_is_a_supremum():
    cert = UF2Certificate(alpha=0.25, beta=1.5, b=1.0, eps=2.0, M=0.0, c=0.5, M1=0.5)
    K = uf2_drift_constant(cert)
    al, be = cert.alpha, cert.beta
    r = np.linspace(0, 20, 200001)
    h = -(al / 2) * r ** 4 + al * (be + 2 * al) ** 2 * r ** 2 + al * be * r
    assert K == pytest.approx(be ** 2 / al + h.max() + cert.M1 / 2, rel=1e-9)


def test_wrong_certificate_variant():
    with pytest.raises(WrongVariantError):
        verify_hypotheses(builtin("example-4.1"),
                          UF2Certificate(alpha=1, beta=1, b=1, eps=1, M=0, c=0.5), HYP)


def test_report_json_layout():
    sys = builtin("example-4.2", n=1)
    rep = verify_hypotheses(sys, default_certificate(sys), Grid((1.0, 2.0, 3.0), 8, 4))
    doc = json.loads(rep.to_json())
    assert set(doc) == {"pass", "conditions"}
    entry = doc["conditions"][0]
    for key in ("condition", "pass", "margin", "witness", "grid"):
        assert key in entry
    assert set(entry["witness"]) == {"x", "y", "t"}
    assert {"radii", "sphere_res", "t_samples"} <= set(entry["grid"])
