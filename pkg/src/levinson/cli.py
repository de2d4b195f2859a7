"""Command-line front end.

Runs are described by a TOML file::

    [system]
    builtin = "example-4.1"        # or builtin = "polynomial" with V / F records
    n = 2
    params = { noise = "saturating", c = 8.0, C = 1.0 }

    [certificate]                  # omit to use the builtin's constants
    a = 8.0                        # ... or `derive = true` for polynomial systems

    [grid]
    radii = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
    sphere_res = 256

    [sde]
    h = 0.001
    n_periods = 31
    ensemble_size = 8192

    [stats]
    statistic = "energy"
    epsilon = 0.05

    [output]
    directory = "out"

Exit codes: 0 pass, 1 usage or configuration error, 2 certificate or
verdict failure, 3 simulation quality failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys as _sys
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import lyapunov as L
from .errors import (
    CatalogError,
    CertificateError,
    CertificateFailure,
    ContractError,
    EnsembleQualityError,
    InvalidInputError,
    LevinsonError,
    ParseError,
)
from .model import BUILTINS, builtin
from .polysys import MultiPoly, fit_inner_bound, uf1_constants
from .sde import ProductNormal, SdeConfig, ensemble_snapshots, read_snapshots, write_snapshots
from .stats import periodicity_report

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_QUALITY = 0, 1, 2, 3

log = logging.getLogger("levinson")


class ConfigError(LevinsonError):
    pass


# -- configuration ------------------------------------------------------------

_SECTIONS = {"system", "certificate", "grid", "sde", "stats", "output", "periodicity"}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(cfg) - _SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}; "
                          f"expected {sorted(_SECTIONS)}")
    return cfg


def _records(raw, label):
    try:
        return MultiPoly.parse([(tuple(r[0]), r[1]) for r in raw])
    except (TypeError, IndexError, ParseError) as exc:
        raise ConfigError(f"system.{label}: malformed coefficient records ({exc})") from None


def build_system(cfg):
    sec = dict(cfg.get("system", {}))
    name = sec.pop("builtin", None)
    params = dict(sec.pop("params", {}))
    has_poly = "V" in sec or "F" in sec
    if name is None and not has_poly:
        raise ConfigError("system: give `builtin` or polynomial `V` and `F` records")
    if name not in (None, "polynomial") and has_poly:
        raise ConfigError("system: exactly one system source allowed (builtin or V/F records)")
    if has_poly:
        if "V" not in sec or "F" not in sec:
            raise ConfigError("system: polynomial systems need both V and F")
        params["V"] = _records(sec.pop("V"), "V")
        params["F"] = _records(sec.pop("F"), "F")
        name = "polynomial"
    params.update(sec)
    try:
        return builtin(name, params)
    except CatalogError as exc:
        raise ConfigError(f"system.builtin: {exc}") from None
    except (ParseError, InvalidInputError) as exc:
        raise ConfigError(f"system: {exc}") from None


def build_grid(cfg):
    sec = dict(cfg.get("grid", {}))
    sec.setdefault("radii", list(range(1, 11)))
    allowed = {f.name for f in fields(L.Grid)}
    bad = set(sec) - allowed
    if bad:
        raise ConfigError(f"grid: unknown key(s) {sorted(bad)}")
    try:
        return L.Grid(**sec)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"grid: {exc}") from None


def derive_certificate(sys, grid):
    """Constants for a polynomial system via the leading-form recipe."""
    V = MultiPoly.parse(sys.params["V"])
    F = MultiPoly.parse(sys.params["F"])
    k = uf1_constants(V, F)
    fit_radii = [r for r in grid.radii if r >= 1] or [1.0, 2.0, 3.0]
    fit = fit_inner_bound(V, F, k.a, fit_radii, sphere_res=min(grid.sphere_res, 64),
                          t_samples=1, period=sys.period)
    b = fit.b_hat
    m = fit.m_hat
    M = fit.M_hat
    D = L.calibrate_D(sys, k.a, grid)
    sigma = float(sys.params.get("sigma", 0.0))
    cert = L.UFCertificate(a=k.a, D=D, b=b, m=m, M=M, e=abs(float(sys.params.get("forcing", 0.0))),
                           c1=0.0, M1=0.0, c2=0.0, M2=sys.n * sigma ** 2)
    return cert, {"uf1": _uf1_dict(k), "fit": fit.report}


def build_certificate(cfg, sys, grid):
    sec = dict(cfg.get("certificate", {}))
    derive = sec.pop("derive", None)
    if derive and sec:
        raise ConfigError("certificate: `derive = true` excludes explicit constants")
    if derive or (not sec and sys.name == "polynomial"):
        if sys.name != "polynomial":
            raise ConfigError("certificate.derive applies to polynomial systems only")
        return derive_certificate(sys, grid)
    if sec:
        base = dict(sys.constants)
        base.update(sec)
        return L.certificate_from_dict(base), {}
    return L.default_certificate(sys), {}


def build_sde(cfg, seed=None, threads=None):
    sec = dict(cfg.get("sde", {}))
    init = sec.pop("initial", None)
    allowed = {f.name for f in fields(SdeConfig)}
    bad = set(sec) - allowed
    if bad:
        raise ConfigError(f"sde: unknown key(s) {sorted(bad)}")
    if seed is not None:
        sec["seed"] = seed
    if threads is not None:
        sec["threads"] = threads
    try:
        conf = SdeConfig(**sec)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"sde: {exc}") from None
    return conf, _initial(init)


def _initial(init):
    if init is None:
        return None
    kind = init.get("kind", "point")
    if kind == "point":
        return (np.asarray(init.get("x", [0.0]), dtype=float),
                np.asarray(init.get("y", [0.0]), dtype=float))
    if kind == "normal":
        return ProductNormal(tuple(float(v) for v in np.atleast_1d(init.get("mean_x", 0.0))),
                             tuple(float(v) for v in np.atleast_1d(init.get("mean_y", 0.0))),
                             float(init.get("std_x", 1.0)), float(init.get("std_y", 1.0)))
    raise ConfigError(f"sde.initial.kind: unknown kind {kind!r} (point, normal)")


def _uf1_dict(k):
    return {"p": k.p, "q": k.q, "a": k.a, "c_max": k.c_max, "m": k.m, "lambda": k.lam,
            "nu": k.nu, "literal_condition": k.literal_condition, "notes": list(k.notes)}


def _write_json(path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=str) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_verify(cfg, out, args):
    sys = build_system(cfg)
    grid = build_grid(cfg)
    try:
        cert, extra = build_certificate(cfg, sys, grid)
    except CertificateFailure as exc:
        w = exc.witness
        print(f"certificate failure: {exc}")
        if w is not None:
            print(f"witness: {np.asarray(w).tolist() if not isinstance(w, dict) else w}")
        _write_json(out / "verification.json",
                    {"pass": False, "error": str(exc),
                     "witness": np.asarray(w).tolist() if w is not None and not isinstance(w, dict) else w})
        return EXIT_FAIL
    report = L.verify_hypotheses(sys, cert, grid)
    report.extend(L.verify_khasminskii(sys, cert, grid))
    doc = report.to_dict()
    doc["system"] = sys.name
    doc["certificate"] = {k: v for k, v in vars(cert).items()}
    if extra:
        doc["derived"] = extra
    _write_json(out / "verification.json", doc)
    text = report.summary()
    (out / "verification.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK if report.passed else EXIT_FAIL


def _simulate(cfg, out, args):
    sys = build_system(cfg)
    conf, init = build_sde(cfg, args.seed, args.threads)
    log.info("simulating %s: %d paths, scheme %s", sys.name, conf.ensemble_size, conf.scheme)
    laws = ensemble_snapshots(sys, conf, init)
    write_snapshots(laws, out)
    log.info("wrote %d snapshots to %s (rejected %d)", len(laws), out, laws[0].rejected)
    return laws


def cmd_simulate(cfg, out, args):
    try:
        laws = _simulate(cfg, out, args)
    except EnsembleQualityError as exc:
        print(f"ensemble quality failure: {exc} (blow-up fraction {exc.fraction:.3%})")
        return EXIT_QUALITY
    print(f"{len(laws)} snapshot(s) of {laws[0].size} paths written to {out}")
    return EXIT_OK


def cmd_periodicity(cfg, out, args):
    src = args.snapshots or cfg.get("periodicity", {}).get("snapshots")
    if src:
        try:
            laws = read_snapshots(src)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=_sys.stderr)
            return EXIT_USAGE
    else:
        try:
            laws = _simulate(cfg, out, args)
        except EnsembleQualityError as exc:
            print(f"ensemble quality failure: {exc}")
            return EXIT_QUALITY
    st = dict(cfg.get("stats", {}))
    seed = args.seed if args.seed is not None else int(cfg.get("sde", {}).get("seed", 0))
    try:
        rep = periodicity_report(laws, threshold=float(st.get("epsilon", 0.05)),
                                 statistic=st.get("statistic", "energy"),
                                 n_perm=int(st.get("n_perm", 199)), seed=seed,
                                 max_pairs=int(st.get("max_pairs", 10 ** 6)))
    except ContractError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    _write_json(out / "periodicity.json", rep.to_dict())
    print(rep.summary())
    return EXIT_OK if rep.consistent else EXIT_FAIL


def cmd_list_builtins(cfg, out, args):
    for name in BUILTINS:
        print(name)
    return EXIT_OK


def cmd_constants(cfg, out, args):
    sys = build_system(cfg)
    if sys.name != "polynomial":
        raise ConfigError("constants: needs a polynomial system (V and F records)")
    try:
        k = uf1_constants(MultiPoly.parse(sys.params["V"]), MultiPoly.parse(sys.params["F"]))
    except CertificateFailure as exc:
        print(f"certificate failure: {exc}")
        if exc.witness is not None:
            print(f"witness: {np.asarray(exc.witness).tolist()}")
        return EXIT_FAIL
    d = _uf1_dict(k)
    _write_json(out / "constants.json", d)
    print(json.dumps(d, sort_keys=True, indent=2))
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "periodicity": cmd_periodicity,
    "list-builtins": cmd_list_builtins,
    "constants": cmd_constants,
}


def _parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="overrides sde.seed")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--threads", type=int, help="worker threads (speed only)")
    p = argparse.ArgumentParser(prog="levinson", parents=[common],
                                description="Verify, simulate and test periodic Newtonian SDEs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "periodicity":
            sp.add_argument("--snapshots", help="directory of snapshot CSVs to test")
    return p


def _setup_logging(out):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    fh = logging.FileHandler(out / "run.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    return fh


def main(argv=None):
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args = argparse.Namespace(config=getattr(ns, "config", None), seed=getattr(ns, "seed", None),
                              out=getattr(ns, "out", None), threads=getattr(ns, "threads", None),
                              snapshots=getattr(ns, "snapshots", None))
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=_sys.stderr)
        return EXIT_USAGE
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=_sys.stderr)
        return EXIT_USAGE
    fh = None
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.get("output", {}).get("directory", "out"))
        if ns.command != "list-builtins":
            out.mkdir(parents=True, exist_ok=True)
            fh = _setup_logging(out)
            log.info("command %s, config %s", ns.command, args.config)
        return COMMANDS[ns.command](cfg, out, args)
    except (ConfigError, CertificateError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    finally:
        if fh is not None:
            log.removeHandler(fh)
            fh.close()


if __name__ == "__main__":
    _sys.exit(main())
