"""Desk-scale reruns of the five validation experiments on synthetic data.

I    MIC origin: exact-traced chief-ray bundles converge at the exit pupil.
II   Refocus shift: the sharpest shift-and-sum shift versus the model S(o),
     plus the inverse check (sharpest object distance for a given shift).
III  Naive distance model fed with measured shifts.
IV   Naive shift used for refocusing.
V    Grid-search fit of the two-parameter distance model.

All routines are deterministic; there is no randomness anywhere.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import error_models as em
from . import spc
from .exceptions import DomainError, InputParseError, PupilFieldError
from .lightfield import _threads, best_shift, focus_measure, refocus, refocus_support
from .optics import BlurSpotReport, LensPrescription, min_blur_spot, paraxial_summary
from .spc import SpcConfig
from .synth import MicGroundTruth, PatternSpec, mic_backtrace, mic_forward_trace, synth_lightfield
from .tables import dumps_csv, parse_flags, read_csv

FINITE_LAMBDAS = (0.6, 0.8, 1.0, 1.25, 1.5, 2.0, 3.0)
INFINITE_MULTIPLES = (2.0, 3.0, 5.0, 10.0, 20.0)
N_VIEWS = 9


@dataclass(frozen=True)
class SweepRecord:
    experiment: str
    o: float
    lam: float
    s_measured: float
    s_model: float
    s_naive: float
    o_from_s_naive: float
    o_from_s_model: float
    e_measured: float
    e_model: float
    flags: tuple[str, ...] = ()

    def row(self):
        return (self.experiment, self.o, self.lam, self.s_measured, self.s_model, self.s_naive,
                self.o_from_s_naive, self.o_from_s_model, self.e_measured, self.e_model, self.flags)


SWEEP_HEADER = ("experiment", "o_mm", "lambda", "s_measured", "s_model", "s_naive",
                "o_from_s_naive", "o_from_s_model", "e_measured", "e_model", "flags")


@dataclass(frozen=True)
class FitReport:
    a0_calc_original: float
    a1_calc_original: float
    a0_calc_corrected: float
    a1_calc_corrected: float
    a0_fit: float
    a1_fit: float
    rmse_original: float
    rmse_corrected: float
    rmse_fit: float
    o_f: float = math.nan
    n_points: int = 0

    FIELDS = ("a0_calc_original", "a1_calc_original", "a0_calc_corrected", "a1_calc_corrected",
              "a0_fit", "a1_fit", "rmse_original", "rmse_corrected", "rmse_fit")

    def row(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


@dataclass
class MicVerifyReport:
    name: str
    exit_pupil: float  # X, H_cam frame
    stop_plane: float  # aperture stop, H_cam frame
    pitch_measured: float
    pitch_expected: float
    pitch_naive: float
    subsets: dict = field(default_factory=dict)  # fraction -> BlurSpotReport
    ground_truth: MicGroundTruth | None = None

    HEADER = ("subset", "n_rays", "best_z_mm", "rms_mm", "axis_mean_mm", "axis_variance_mm2",
              "exit_pupil_mm", "stop_mm", "flags")

    def rows(self):
        out = []
        for frac, (n, r) in sorted(self.subsets.items()):
            out.append((frac, n, r.best_axial_position, r.rms_radius_at_best,
                        r.axis_intersection_mean, r.axis_intersection_variance,
                        self.exit_pupil, self.stop_plane, r.flags))
        return out

    def relative_offset(self, frac) -> float:
        """``|z_min - X| / |X|`` of a subset's blur minimum."""
        _, r = self.subsets[frac]
        return abs(r.best_axial_position - self.exit_pupil) / abs(self.exit_pupil)


def default_distances(c: SpcConfig):
    if c.infinite_focus:
        return [m * c.f_M for m in INFINITE_MULTIPLES]
    return [lam * c.o_f for lam in FINITE_LAMBDAS if lam * c.o_f > 1.05 * c.f_M]


def _lam(c, o):
    return o / c.o_f_finite


def shift_range(c: SpcConfig, distances, margin=0.5):
    """Search interval covering both shift models over ``distances``."""
    s = np.concatenate([np.atleast_1d(spc.shift_from_distance(c, distances)),
                        np.atleast_1d(spc.shift_from_distance(c, distances, "naive"))])
    return float(s.min() - margin), float(s.max() + margin)


# ---------------------------------------------------------------------------
# I


def exp_mic_verify(p: LensPrescription, c: SpcConfig, fractions=(0.25, 0.5, 1.0),
                   rays_per_bundle=16, name="") -> MicVerifyReport:
    """Forward-trace MIC ground truth, back-trace it and locate the waist.

    Subsets keep the microlenses closest to the optical axis.  All axial
    positions are measured from H_cam, positive toward the sensor.
    """
    s = paraxial_summary(p)
    g = mic_forward_trace(p, c, rays_per_bundle)
    rays = mic_backtrace(g, c)
    centers = np.array([r.height for r in rays])
    order = np.argsort(np.abs(centers), kind="stable")
    z_lo = min(c.X, 0.0, -s.h_cam) - c.f_M
    z_hi = c.d - 1e-3
    subsets = {}
    for frac in fractions:
        n = max(2, int(round(frac * len(rays))))
        sub = [rays[i] for i in order[:n]]
        subsets[float(frac)] = (n, min_blur_spot(sub, z_lo, z_hi))
    geo = spc.geometry(c)
    return MicVerifyReport(name or c.name, c.X, -s.h_cam, g.pitch_ratio() * c.d_ML,
                           geo.d_mli, geo.d_mli_naive, subsets, g)


# ---------------------------------------------------------------------------
# II


def _record(c, experiment, o, s_meas, e_measured, e_model, flags):
    s_model = spc.shift_from_distance(c, o)
    s_naive = spc.shift_from_distance(c, o, "naive")
    o_naive = spc.distance_from_shift(c, s_meas, "naive")
    o_model = spc.distance_from_shift(c, s_meas)
    return SweepRecord(experiment, float(o), _lam(c, o), float(s_meas), s_model, s_naive,
                       o_naive, o_model, float(e_measured), float(e_model), tuple(flags))


def exp_shift_sweep(c: SpcConfig, distances=None, pattern=None, n_views=N_VIEWS,
                    coarse=0.05, fine=0.005, inverse=True) -> list[SweepRecord]:
    """Measure the sharpest refocus shift for a pattern at each distance.

    ``II`` records compare the measured shift with the model.  ``II-inverse``
    records fix the model shift of each distance and search for the object
    distance whose light field it renders sharpest.
    """
    distances = list(default_distances(c) if distances is None else distances)
    pattern = pattern or PatternSpec()
    lo, hi = shift_range(c, distances)

    def measure(o):
        flags = []
        try:
            lf = synth_lightfield(c, pattern, o, n_views)
            flags += lf.flags
            rep = best_shift(lf, lo, hi, coarse, fine)
            flags += rep.flags
            s_meas = rep.shift
        except PupilFieldError as exc:
            flags.append("failed:" + str(exc).replace(";", ","))
            s_meas = math.nan
        o_model = spc.distance_from_shift(c, s_meas)
        return _record(c, "II", o, s_meas, (o_model - o) / o, 0.0, flags)

    out = _map(measure, distances)
    if inverse:
        o_lo, o_hi = min(distances), max(distances)

        def invert(o):
            s = spc.shift_from_distance(c, o)
            o_found, flags = best_distance(c, s, o_lo, o_hi, pattern, n_views)
            rec = _record(c, "II-inverse", o, s, (o_found - o) / o, 0.0, flags)
            return replace(rec, o_from_s_model=o_found)

        out += _map(invert, distances)
    return out


def _map(fn, items):
    # grid order is kept whatever the thread count
    n = _threads()
    if n > 1 and len(items) > 1:
        with ThreadPoolExecutor(min(n, len(items))) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def best_distance(c: SpcConfig, S, o_lo, o_hi, pattern=None, n_views=N_VIEWS,
                  n_coarse=31, widen=2.0, xatol=1e-7):
    """Object distance whose synthetic light field is sharpest at shift ``S``.

    Candidates are uniform in ``1/o`` over ``[o_lo / widen, o_hi * widen]``
    (never closer than ``1.05 f_M``); the best one is refined by a bounded
    scalar search between its grid neighbours.  Returns ``(o, flags)``.
    """
    pattern = pattern or PatternSpec()
    inv_lo = 1.0 / (o_hi * widen)
    inv_hi = 1.0 / max(o_lo / widen, 1.05 * c.f_M)

    lf0 = synth_lightfield(c, pattern, 1.0 / inv_hi, n_views)
    window = refocus_support(lf0, S, True)

    def score(inv_o):
        lf = synth_lightfield(c, pattern, 1.0 / inv_o, n_views)
        return -focus_measure(refocus(lf, S, window, True))

    grid = np.linspace(inv_lo, inv_hi, n_coarse)
    vals = np.array([score(v) for v in grid])
    b = int(np.argmin(vals))
    flags = []
    if b in (0, n_coarse - 1):
        flags.append("at-search-bound")
    a = grid[max(b - 1, 0)]
    z = grid[min(b + 1, n_coarse - 1)]
    res = optimize.minimize_scalar(score, bounds=(a, z), method="bounded",
                                   options={"xatol": xatol * inv_hi})
    best = res.x if res.fun <= vals[b] else grid[b]
    return float(1.0 / best), flags


# ---------------------------------------------------------------------------
# III / IV


def exp_error_sweeps(c: SpcConfig, distances=None, pattern=None, n_views=N_VIEWS,
                     shift_records=None) -> list[SweepRecord]:
    """Measured versus analytic errors of the two naive pipelines.

    ``III``: the measured shift fed through the naive distance formula.
    ``IV``: the naive shift used for refocusing, then the sharpest distance
    is searched among rendered candidates.
    """
    distances = list(default_distances(c) if distances is None else distances)
    pattern = pattern or PatternSpec()
    if shift_records is None:
        shift_records = exp_shift_sweep(c, distances, pattern, n_views, inverse=False)
    measured = {r.o: r for r in shift_records if r.experiment == "II"}
    out = []
    for o in distances:
        r = measured[o]
        e_meas = (r.o_from_s_naive - o) / o
        out.append(_record(c, "III", o, r.s_measured, e_meas,
                           em.distance_error_naive_model(c, o), r.flags))
    o_lo, o_hi = min(distances), max(distances)

    def naive_refocus(o):
        s_naive = spc.shift_from_distance(c, o, "naive")
        o_found, flags = best_distance(c, s_naive, o_lo, o_hi, pattern, n_views)
        rec = _record(c, "IV", o, s_naive, (o_found - o) / o,
                      em.distance_error_naive_shift(c, o), flags)
        return replace(rec, o_from_s_model=o_found)

    return out + _map(naive_refocus, distances)


# ---------------------------------------------------------------------------
# V


def _rmse(a0, a1, o_f, rho, o):
    """RMSE for broadcast parameter arrays; non-finite predictions give inf."""
    a0 = np.asarray(a0, dtype=float)[..., None]
    a1 = np.asarray(a1, dtype=float)[..., None]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        pred = o_f * (1.0 - a0 * rho) / (1.0 - a1 * rho)
        err = np.sqrt(np.mean((pred - o) ** 2, axis=-1))
    return np.where(np.isfinite(err), err, np.inf)


def _axis_values(calc, n=201, span=4.0):
    mags = np.geomspace(1.0 / span, span, n)
    vals = [0.0, *calc]
    for v in calc:
        if v != 0 and math.isfinite(v):
            vals.extend(abs(v) * mags)
            vals.extend(-abs(v) * mags)
    return np.unique(np.array(vals))


def exp_pertuz_fit(c: SpcConfig, sweep, rel_tol=1e-6) -> FitReport:
    """Fit ``a0, a1`` of the two-parameter distance model to measured shifts.

    The grid holds 201 log-spaced magnitudes spanning a quarter to four
    times each calculated parameter, both signs, the calculated values
    themselves and zero.  Coordinate descent from the grid optimum refines
    the fit until the step falls below ``rel_tol`` relative.
    """
    pts = [r for r in sweep if r.experiment == "II" and math.isfinite(r.s_measured)]
    if len(pts) < 5:
        raise DomainError("need at least 5 measured sweep points")
    o = np.array([r.o for r in pts])
    if np.all(o == o[0]):
        raise DomainError("all sweep points share one distance")
    rho = -np.array([r.s_measured for r in pts])
    o_f = c.o_f_finite
    po = spc.pertuz_params(c, "original")
    pc = spc.pertuz_params(c, "corrected")
    a0_axis = _axis_values([po.a0, pc.a0])
    a1_axis = _axis_values([po.a1, pc.a1])
    err = np.empty((a0_axis.size, a1_axis.size))
    for i in range(0, a0_axis.size, 64):
        err[i:i + 64] = _rmse(a0_axis[i:i + 64, None], a1_axis[None, :], o_f, rho, o)
    i, j = np.unravel_index(int(np.argmin(err)), err.shape)
    best = np.array([a0_axis[i], a1_axis[j]])
    best_err = float(err[i, j])

    steps = np.maximum(np.abs(best) * 0.01, 1e-6)
    while True:
        improved = False
        for k in range(2):
            for sign in (1.0, -1.0):
                trial = best.copy()
                trial[k] += sign * steps[k]
                e = float(_rmse(trial[0], trial[1], o_f, rho, o))
                if e < best_err:
                    best, best_err, improved = trial, e, True
                    break
        if not improved:
            steps *= 0.5
            scale = np.maximum(np.abs(best), 1e-12)
            if np.all(steps <= rel_tol * scale):
                break
    return FitReport(po.a0, po.a1, pc.a0, pc.a1, float(best[0]), float(best[1]),
                     float(_rmse(po.a0, po.a1, o_f, rho, o)),
                     float(_rmse(pc.a0, pc.a1, o_f, rho, o)), best_err, o_f, len(pts))


# ---------------------------------------------------------------------------
# serialisation


def sweep_comments(c: SpcConfig, **params):
    items = [f"preset={c.name}", f"f_M={c.f_M!r}", f"X={c.X!r}",
             f"o_f={'inf' if c.infinite_focus else repr(c.o_f)}", f"d={c.d!r}",
             f"f_m={c.f_m!r}", f"d_ML={c.d_ML!r}", f"s_px={c.s_px!r}"]
    items += [f"{k}={v}" for k, v in sorted(params.items())]
    return [" ".join(items)]


def dumps_sweep(records, comments=()) -> str:
    return dumps_csv(SWEEP_HEADER, [r.row() for r in records], comments)


def loads_sweep(text):
    """Parse sweep CSV text; returns ``(records, comments)``."""
    comments, header, rows = read_csv(text, from_text=True)
    if tuple(header) != SWEEP_HEADER:
        raise InputParseError(f"unexpected sweep header {header}")
    out = []
    for row in rows:
        if len(row) != len(SWEEP_HEADER):
            raise InputParseError(f"bad sweep row {row}")
        out.append(SweepRecord(row[0], *(float(v) for v in row[1:10]), parse_flags(row[10])))
    return out, comments


def dumps_fit(rep: FitReport, comments=()) -> str:
    return dumps_csv(FitReport.FIELDS, [rep.row()], comments)


def mean_abs(values) -> float:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=float)
    return float(np.mean(np.abs(v))) if v.size else math.nan


def plot_sweep_svg(c: SpcConfig, records, path, experiment="II"):
    """Model curve with measured points for one experiment."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recs = [r for r in records if r.experiment == experiment]
    o = np.array([r.o for r in recs])
    fig, ax = plt.subplots(figsize=(6, 4))
    grid = np.linspace(o.min(), o.max(), 200)
    if experiment in ("II", "II-inverse"):
        ax.plot(grid, spc.shift_from_distance(c, grid), label="model S(o)")
        ax.plot(o, [r.s_measured for r in recs], "o", label="measured")
        ax.set_ylabel("shift (px)")
    else:
        fn = em.distance_error_naive_model if experiment == "III" else em.distance_error_naive_shift
        ax.plot(grid, fn(c, grid), label="analytic error")
        ax.plot(o, [r.e_measured for r in recs], "o", label="measured")
        ax.set_ylabel("relative error")
    ax.set_xlabel("o (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
