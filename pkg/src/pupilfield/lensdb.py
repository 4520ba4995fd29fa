"""Batch paraxial analysis of a directory of lens prescriptions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .exceptions import DomainError, InputParseError, PupilFieldError
from .optics import load_prescription, paraxial_summary
from .tables import dumps_csv

CENSUS_BINS = ("lt_0.05", "gt_0.25", "gt_0.5")


@dataclass(frozen=True)
class LensRecord:
    name: str
    f_M: float
    X: float

    @property
    def ratio(self) -> float:
        return self.X / self.f_M


@dataclass(frozen=True)
class RegressionReport:
    n: int
    slope: float
    intercept: float
    pearson_r: float
    r_squared: float
    census: tuple[int, int, int]  # |X| < 0.05 f_M, > 0.25 f_M, > 0.5 f_M

    def summary_line(self) -> str:
        sign = "-" if self.intercept < 0 else "+"
        return (f"X(f_M) = {self.slope:.4f}*f_M {sign} {abs(self.intercept):.4f}; "
                f"r = {self.pearson_r:.4f}; R^2 = {self.r_squared:.4f}; "
                f"|X|<0.05f: {self.census[0]}, |X|>0.25f: {self.census[1]}, "
                f"|X|>0.5f: {self.census[2]} of {self.n}")


def analyze_collection(directory, pattern="*.json"):
    """Paraxial summary of every prescription file in ``directory``.

    Returns ``(records, failures)``; files are processed in name order and
    ``failures`` lists ``(file name, reason)`` for files that could not be
    loaded or analysed.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise InputParseError(f"{directory} is not a directory")
    records, failures = [], []
    for path in sorted(directory.glob(pattern)):
        try:
            s = paraxial_summary(load_prescription(path))
        except PupilFieldError as exc:
            failures.append((path.name, f"{type(exc).__name__}: {exc}"))
            continue
        records.append(LensRecord(s.name or path.stem, s.f_M, s.X))
    if not records:
        raise InputParseError(f"no loadable prescription in {directory}")
    return records, failures


def census(records) -> tuple[int, int, int]:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs([rec.X for rec in records]) / np.abs([rec.f_M for rec in records])
    return int((r < 0.05).sum()), int((r > 0.25).sum()), int((r > 0.5).sum())


def regression(records) -> RegressionReport:
    """Least-squares line ``X = slope * f_M + intercept``."""
    f = np.array([r.f_M for r in records], dtype=float)
    x = np.array([r.X for r in records], dtype=float)
    if f.size < 2:
        raise DomainError("regression needs at least two records")
    if np.all(f == f[0]):
        raise DomainError("all focal lengths are equal: slope undefined")
    fit = stats.linregress(f, x)
    resid = x - (fit.slope * f + fit.intercept)
    ss_tot = float(((x - x.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else math.nan
    return RegressionReport(int(f.size), float(fit.slope), float(fit.intercept),
                            float(fit.rvalue), r2, census(records))


RECORD_HEADER = ("name", "f_M_mm", "X_mm", "ratio")
REPORT_HEADER = ("n", "slope", "intercept_mm", "pearson_r", "r_squared",
                 "census_lt_0.05", "census_gt_0.25", "census_gt_0.5")


def dumps_records(records) -> str:
    return dumps_csv(RECORD_HEADER, [(r.name, r.f_M, r.X, r.ratio) for r in records])


def dumps_report(rep: RegressionReport, failures=()) -> str:
    text = dumps_csv(REPORT_HEADER, [(rep.n, rep.slope, rep.intercept, rep.pearson_r,
                                      rep.r_squared, *rep.census)])
    for name, reason in failures:
        text += f"# skipped {name}: {reason}\n"
    return text


def plot_svg(records, rep: RegressionReport, path):
    """Scatter of X over f_M with the fitted line; log-scaled f_M axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    f = np.array([r.f_M for r in records])
    x = np.array([r.X for r in records])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(f, x, s=8, label="lenses")
    grid = np.geomspace(max(f.min(), 1e-3), f.max(), 200)
    ax.plot(grid, rep.slope * grid + rep.intercept, color="C3",
            label=f"{rep.slope:.4f} f_M {rep.intercept:+.4f}")
    ax.set_xscale("log")
    ax.set_xlabel("f_M (mm)")
    ax.set_ylabel("X (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
