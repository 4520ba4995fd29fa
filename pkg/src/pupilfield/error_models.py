"""Relative errors made by ignoring the exit pupil.

Three families are provided, each as a composition of :mod:`pupilfield.spc`
functions (authoritative) and as a closed form in ``lam = o / o_f``:

``shift_error``
    ``(S_naive(o) - S(o)) / S(o)``
``distance_error_naive_model``
    the correct shift pushed through the naive distance formula,
    ``(o_naive(S(o)) - o) / o``
``distance_error_naive_shift``
    the naive shift pushed through the correct distance formula,
    ``(o(S_naive(o)) - o) / o``

Negative values mean the naive quantity underestimates the true one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import spc
from .exceptions import DomainError
from .spc import SpcConfig
from .tables import dumps_csv

CSV_HEADER = ("lambda", "o_mm", "e_shift", "e_dist_naive_model", "e_dist_naive_shift", "flags")


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def shift_error(c: SpcConfig, o):
    o = np.asarray(o, dtype=float)
    at_focus = o == c.o_f
    s = spc.shift_from_distance(c, o)
    s_naive = spc.shift_from_distance(c, o, "naive")
    with np.errstate(divide="ignore", invalid="ignore"):
        e = (np.asarray(s_naive) - s) / s
    # removable singularity: both shifts vanish at o_f
    return _out(np.where(at_focus, 0.0, e))


def distance_error_naive_model(c: SpcConfig, o):
    o = np.asarray(o, dtype=float)
    o_naive = spc.distance_from_shift(c, spc.shift_from_distance(c, o), "naive")
    with np.errstate(invalid="ignore"):
        return _out((np.asarray(o_naive) - o) / o)


def distance_error_naive_shift(c: SpcConfig, o):
    o = np.asarray(o, dtype=float)
    o_back = spc.distance_from_shift(c, spc.shift_from_distance(c, o, "naive"))
    with np.errstate(invalid="ignore"):
        return _out((np.asarray(o_back) - o) / o)


def shift_error_o_form(c: SpcConfig, o):
    """Closed form of :func:`shift_error` in absolute distance."""
    o = np.asarray(o, dtype=float)
    f_M, d, X = c.f_M, c.d, c.X
    return _out(X * (d * f_M - o * (d - f_M)) / (o * f_M * (d - X)))


# closed forms in lam; infinite focus uses the finite stand-in for o_f

def _lam_params(c):
    return c.o_f_finite, c.d_finite, c.X, c.f_M


def shift_error_lambda(c: SpcConfig, lam):
    o_f, d, X, _ = _lam_params(c)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _out(X * (lam - 1.0) / (lam * o_f * (X / d - 1.0)))


def distance_error_naive_model_lambda(c: SpcConfig, lam):
    o_f, d, X, _ = _lam_params(c)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _out(X * (lam - 1.0) ** 2 / (lam * o_f * (1.0 - X / d) - X * (lam - 1.0) * lam))


def distance_error_naive_shift_lambda(c: SpcConfig, lam):
    o_f, _, X, f_M = _lam_params(c)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _out(X * (lam - 1.0) ** 2 / (lam * o_f * (X / f_M - 1.0) - lam * lam * X))


def shift_error_limit(c: SpcConfig) -> float:
    """Value of the shift error for ``lam -> inf``."""
    o_f, d, X, _ = _lam_params(c)
    return X / (o_f * (X / d - 1.0))


@dataclass(frozen=True)
class ErrorRecord:
    lam: float
    o: float
    e_shift: float
    e_dist_naive_model: float
    e_dist_naive_shift: float
    flags: tuple[str, ...] = ()

    def row(self):
        return (self.lam, self.o, self.e_shift, self.e_dist_naive_model,
                self.e_dist_naive_shift, self.flags)


def close_enough(a, b, tol=1e-12) -> bool:
    """Agreement test used for the closed-form cross-check.

    The tolerance is absolute for small errors and relative near poles.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        return a == b
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def error_record(c: SpcConfig, lam: float, check=True) -> ErrorRecord:
    lam = float(lam)
    o = lam * c.o_f_finite
    if not o > c.f_M:
        raise DomainError(f"lambda={lam} puts the object at or inside f_M (need lambda > f_M/o_f)")
    flags = []
    values = [shift_error(c, o), distance_error_naive_model(c, o), distance_error_naive_shift(c, o)]
    names = ("e_shift", "e_dist_naive_model", "e_dist_naive_shift")
    if lam == 1.0:
        flags.append("continuity")
    for k, v in enumerate(values):
        if not math.isfinite(v):
            flags.append(f"pole:{names[k]}")
            values[k] = math.nan
    if check and not c.infinite_focus:
        closed = (shift_error_lambda(c, lam), distance_error_naive_model_lambda(c, lam),
                  distance_error_naive_shift_lambda(c, lam))
        for name, v, w in zip(names, values, closed):
            if math.isfinite(v) and not close_enough(v, w, 1e-9):
                flags.append(f"closed-form-mismatch:{name}")
    return ErrorRecord(lam, o, *values, tuple(flags))


def error_sweep(c: SpcConfig, lambdas) -> list[ErrorRecord]:
    """One :class:`ErrorRecord` per ``lam``, in input order."""
    return [error_record(c, lam) for lam in lambdas]


def dumps_sweep(records, comments=()) -> str:
    return dumps_csv(CSV_HEADER, [r.row() for r in records], comments)


DEFAULT_LAMBDAS = (0.5, 0.6, 0.8, 1.0, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0)
