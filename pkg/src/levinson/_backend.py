"""Elementary functions that work on float arrays and on mpmath object arrays.

Every builtin field is written against these helpers so the same code can be
evaluated in float64 (fast path) or in extended precision, where the inputs
are numpy ``object`` arrays holding :class:`mpmath.mpf` values.
"""

import contextlib

import mpmath
import numpy as np


def _lift(np_fn, mp_fn):
    mp_vec = np.frompyfunc(mp_fn, 1, 1)

    def fn(v):
        if isinstance(v, mpmath.mpf):
            return mp_fn(v)
        if isinstance(v, np.ndarray) and v.dtype == object:
            return mp_vec(v)
        return np_fn(v)

    fn.__name__ = np_fn.__name__
    return fn


exp = _lift(np.exp, mpmath.exp)
log = _lift(np.log, mpmath.log)
sqrt = _lift(np.sqrt, mpmath.sqrt)
sin = _lift(np.sin, mpmath.sin)
cos = _lift(np.cos, mpmath.cos)


def is_mp(v):
    return isinstance(v, mpmath.mpf) or (isinstance(v, np.ndarray) and v.dtype == object)


def to_mp(v):
    """Convert floats (or arrays of floats) to mpf exactly."""
    if np.ndim(v) == 0:
        return mpmath.mpf(float(v))
    return np.frompyfunc(lambda z: mpmath.mpf(float(z)), 1, 1)(np.asarray(v, dtype=float))


def to_float(v):
    if np.ndim(v) == 0:
        return float(v)
    return np.asarray(v, dtype=object).astype(float)


@contextlib.contextmanager
def precision(dps):
    """Context for extended-precision evaluation; ``dps=None`` is a no-op."""
    if dps is None:
        yield
    else:
        with mpmath.workdps(dps):
            yield


def sqnorm(x):
    return np.sum(x * x, axis=-1)


def norm(x):
    return sqrt(sqnorm(x))


def matvec(m, v):
    return np.matmul(m, v[..., None])[..., 0]


def dot(a, b):
    return np.sum(a * b, axis=-1)
