"""Acceptance criteria 1-9; the terminal summary prints one line per criterion."""

import math
import time

import numpy as np
import pytest

from levinson.cli import main
from levinson.lyapunov import (
    Grid,
    UFCertificate,
    calibrate_D,
    default_certificate,
    generator_apply,
    generator_psi,
    generator_psi_uf2,
    psi_function,
    psi_uf2_function,
    verify_hypotheses,
    verify_khasminskii,
)
from levinson.model import BUILTINS, builtin
from levinson.polysys import MultiPoly, uf1_constants
from levinson.sde import PathState, SdeConfig, dynkin_estimate, ensemble_snapshots
from levinson.stats import energy_distance, periodic_profile, permutation_test, standardize

criterion = pytest.mark.criterion

SHELLS = tuple(float(r) for r in range(1, 11))
POLY = {"V": [((4,), 0.25), ((2,), 0.5)], "F": [((2,), 0.5)], "forcing": 0.3, "sigma": 0.7}


def shell_grid(sys):
    g = Grid(SHELLS, sphere_res=256, t_samples=64)
    dirs = g.directions(sys.n)
    ts = g.times(sys.period)
    x = np.asarray(SHELLS)[:, None, None, None] * dirs[None, :, None, :]
    x = np.broadcast_to(x, (len(SHELLS), len(dirs), len(ts), sys.n))
    return g, x, np.broadcast_to(ts, x.shape[:-1])


def violations(name, a, bound):
    sys = builtin(name, n=2)
    g, x, t = shell_grid(sys)
    assert x.shape[:2] == (10, 256) and x.shape[2] == 64
    lhs = -np.sum(sys.potential.grad_x(x, t) * (sys.friction.F.grad(x) - a * x), axis=-1)
    rhs = bound(np.linalg.norm(x, axis=-1))
    return int(np.sum(lhs > rhs + 1e-9 * (1 + np.abs(rhs)))), sys, g


@criterion(1)
def test_criterion_1_example_41_inequality():
    start = time.perf_counter()
    bad, sys, g = violations("example-4.1", 8.0, lambda r: -8 * r ** 2 + 36)
    assert bad == 0
    assert verify_hypotheses(sys, default_certificate(sys), g)["H3"].passed
    assert time.perf_counter() - start < 10


@criterion(2)
def test_criterion_2_example_42_inequality():
    sys = builtin("example-4.2")
    cert = default_certificate(sys)
    assert (cert.a, cert.D) == (2.0, 1.0)
    bad, _, _ = violations("example-4.2", 2.0, lambda r: -2 * r ** 3 + 2)
    assert bad == 0


@criterion(2)
def test_criterion_2_example_43_inequality():
    sys = builtin("example-4.3")
    cert = default_certificate(sys)
    assert (cert.a, cert.D) == (1.0, 2.0)
    bad, _, _ = violations("example-4.3", 1.0, lambda r: -r ** 4 + 3)
    assert bad == 0


def _certificate(sys):
    if sys.name != "polynomial":
        return default_certificate(sys)
    k = uf1_constants(MultiPoly.parse(POLY["V"]), MultiPoly.parse(POLY["F"]))
    D = calibrate_D(sys, k.a, Grid(tuple(float(r) for r in range(11)), 64, 4))
    return UFCertificate(a=k.a, D=D, b=1.0, m=1.0, M=0.0)


@criterion(3)
@pytest.mark.parametrize("name", list(BUILTINS))
def test_criterion_3_generator_identity(name):
    sys = builtin(name, POLY) if name == "polynomial" else builtin(name)
    cert = _certificate(sys)
    rng = np.random.default_rng(2024)

    def ball():
        v = rng.standard_normal((1000, sys.n))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        return 5 * v * rng.uniform(0, 1, (1000, 1)) ** (1 / sys.n)

    x, y = ball(), ball()
    t = rng.uniform(0, sys.period, 1000)
    if sys.hessian_friction:
        closed, f = generator_psi(sys, cert, x, y, t), psi_function(sys, cert)
    else:
        closed, f = generator_psi_uf2(sys, cert, x, y, t), psi_uf2_function(sys, cert)
    generic = generator_apply(sys, f, x, y, t, dps=50)
    assert np.all(np.abs(closed - generic) <= 1e-6 * np.abs(closed))


@criterion(4)
def test_criterion_4_khasminskii_saturating_noise():
    start = time.perf_counter()
    sys = builtin("example-4.1", n=1, noise="saturating", c=8.0, C=1.0)
    cert = default_certificate(sys)
    # the Psi threshold is a user choice; the shell infimum is about 15.7 at R = 10
    grid = Grid((4.0, 6.0, 8.0, 10.0), sphere_res=256, t_samples=64, psi_threshold=10.0)
    rep = verify_khasminskii(sys, cert, grid)
    elapsed = time.perf_counter() - start
    assert rep["khasminskii-psi"].passed
    assert rep["khasminskii-drift"].passed
    assert elapsed < 30
    max_outer = rep["khasminskii-drift"].details["max_drift_outer_shell"]
    assert max_outer <= -500, f"max generator value on the R = 10 shell is {max_outer:.2f}"


@criterion(5)
def test_criterion_5_dynkin_consistency():
    start = time.perf_counter()
    sys = builtin("example-4.1", n=1, noise="constant", sigma=1.0)
    cert = default_certificate(sys)
    z = PathState([1.0], [0.0], 0.0)
    target = float(generator_psi(sys, cert, z.x, z.y, z.t))
    hits = 0
    for seed in range(20):
        est, se, rejected = dynkin_estimate(sys, cert, z, h=1e-3, m=100_000, seed=seed)
        assert rejected == 0
        hits += abs(est - target) <= 3 * se
    assert hits >= 19, f"{hits}/20 within 3 standard errors"
    assert time.perf_counter() - start < 60


@pytest.fixture(scope="module")
def open_problem_run():
    sys = builtin("open-problem-v4")
    T = sys.period
    times = tuple(k * T + j * T / 8 for k in (30, 31) for j in range(8))
    cfg = SdeConfig(h=T / 8192, scheme="tamed-euler", n_periods=32, burn_in_periods=30,
                    snapshot_times=times, ensemble_size=8192, seed=42)
    start = time.perf_counter()
    laws = ensemble_snapshots(sys, cfg)
    return sys, laws, time.perf_counter() - start


@criterion(6)
def test_criterion_6_open_problem_stroboscopic(open_problem_run):
    sys, laws, elapsed = open_problem_run
    start = time.perf_counter()
    a, b = laws[0], laws[8]
    assert a.time == 30 * sys.period and b.time == 31 * sys.period
    assert a.size == b.size == 8192
    mean, std = standardize([a, b])
    rep = permutation_test((a.samples - mean) / std, (b.samples - mean) / std, n_perm=199, seed=0)
    assert rep.value < 0.05
    assert rep.p_value > 0.05
    assert energy_distance(a, b) >= 0
    assert elapsed + time.perf_counter() - start < 600


@criterion(6)
def test_criterion_6_open_problem_profile(open_problem_run):
    sys, laws, _ = open_problem_run
    prof = periodic_profile(laws[:8], laws[8:], sys.period, z_flag=3.0)
    assert len(prof.rows) == 8
    assert prof.max_abs_z("mean") <= 3.0


@criterion(7)
@pytest.mark.parametrize("n", [1, 2])
def test_criterion_7_quartic_friction_constants(n):
    k = uf1_constants(MultiPoly.norm_power(n, 1), MultiPoly.norm_power(n, 2))
    assert k.nu == pytest.approx(1.0, abs=1e-9)
    assert k.m == 2
    assert k.a == 1.0
    assert k.c_max == pytest.approx(2.0)


@criterion(7)
def test_criterion_7_quadratic_constants():
    k = uf1_constants(MultiPoly.parse([((2,), 1.0)]), MultiPoly.parse([((2,), 1.0)]))
    assert (k.p, k.q) == (1, 1)
    assert k.lam == pytest.approx(1.0)
    assert k.c_max == pytest.approx(2.0)


@criterion(8)
def test_criterion_8_super_uniform():
    rng = np.random.default_rng(8)
    small = 0
    for rep in range(200):
        pool = rng.standard_normal((80, 2))
        small += permutation_test(pool[:40], pool[40:], n_perm=199, seed=rep).p_value <= 0.05
    assert small <= 20


@criterion(8)
def test_criterion_8_identical_and_point_masses():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((200, 3))
    assert abs(energy_distance(a, a[::-1].copy())) <= 1e-12
    for d in (0.5, 1.0, 3.0, 10.0):
        b = np.zeros((50, 3))
        b[:, 1] = d
        assert energy_distance(np.zeros((40, 3)), b) == 2 * d


@criterion(9)
def test_criterion_9_simulate_threads_byte_identical(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f"""
[system]
builtin = "open-problem-v4"

[sde]
h = {2 * math.pi / 1024!r}
n_periods = 3
ensemble_size = 1000
block_size = 64
seed = 7
initial = {{ kind = "normal", std_x = 1.0, std_y = 1.0 }}
""")
    runs = [("a", 1), ("b", 8), ("c", 1), ("d", 8)]
    for tag, threads in runs:
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / tag),
                     "--threads", str(threads)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("snapshot_*.csv"))
    assert len(files) == 3
    for tag, _ in runs[1:]:
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / tag / f).read_bytes()
