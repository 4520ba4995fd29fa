"""Closed-form geometry of a standard plenoptic camera with an exit pupil.

All distances are in millimetres, shifts in pixels.  The scalar functions
accept numpy arrays for the object distance ``o`` or the shift ``S`` and
evaluate element-wise; scalars come back as Python floats.

Shift models
------------
``"exit_pupil"``
    the two-plane spacing is ``F = d - X`` (exit pupil to MLA).
``"naive"``
    the exit pupil is assumed to sit on the camera-side principal plane
    (``X = 0``), which is what a thin-lens main lens model implies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import AlignmentError, DomainError, InputParseError
from .optics import ParaxialSummary, image_distance, load_prescription, paraxial_summary

# Stand-in focus distance for formulas that need a finite o_f (1000 km).
INFINITE_FOCUS_SUBSTITUTE = 1e9

MODELS = ("exit_pupil", "naive")


@dataclass(frozen=True)
class SpcConfig:
    """Full description of a standard plenoptic camera.

    ``d`` is the distance from the main lens H_cam to the scene-side
    principal plane of the MLA, ``f_m`` the distance from the camera-side
    principal plane of a microlens to the sensor.  ``mla_thickness`` only
    separates the two microlens principal planes and never enters the
    refocusing equations.
    """

    f_M: float
    X: float
    o_f: float
    d: float
    f_m: float
    d_ML: float
    s_px: float
    sensor_px: tuple[int, int] = (0, 0)
    micro_count: tuple[int, int] = (0, 0)
    mla_thickness: float = 0.0
    name: str = ""
    prescription: str | None = None

    def __post_init__(self):
        for attr in ("d", "f_m", "d_ML", "s_px"):
            if not getattr(self, attr) > 0:
                raise DomainError(f"{attr} must be > 0, got {getattr(self, attr)}")
        if self.mla_thickness < 0:
            raise DomainError("mla_thickness must be >= 0")
        if self.f_M == 0:
            raise DomainError("f_M must be nonzero")
        if self.d == self.X:
            raise DomainError("d == X: the exit pupil coincides with the MLA (F = 0)")
        if math.isinf(self.o_f):
            if self.o_f < 0 or self.d != self.f_M:
                raise DomainError("for infinite focus d must equal f_M")
        else:
            if not self.o_f > self.f_M:
                raise DomainError(f"focus distance o_f={self.o_f} must exceed f_M={self.f_M}")
            expected = self.f_M * self.o_f / (self.o_f - self.f_M)
            if not math.isclose(self.d, expected, rel_tol=1e-9):
                raise DomainError(f"d={self.d} inconsistent with thin lens value {expected}")
        sensor = tuple(int(v) for v in self.sensor_px)
        count = tuple(int(v) for v in self.micro_count)
        if any(c > s for c, s in zip(count, sensor)):
            raise DomainError("micro_count does not fit on the sensor")
        object.__setattr__(self, "sensor_px", sensor)
        object.__setattr__(self, "micro_count", count)

    @classmethod
    def from_main_lens(cls, f_M, X, o_f, f_m, d_ML, s_px, sensor_px=(0, 0),
                       micro_count=(0, 0), mla_thickness=0.0, name="", prescription=None):
        """Build a config, placing the MLA at the image of the focus plane."""
        o_f = float(o_f)
        d = float(f_M) if math.isinf(o_f) else image_distance(f_M, o_f)
        return cls(float(f_M), float(X), o_f, d, float(f_m), float(d_ML), float(s_px),
                   tuple(sensor_px), tuple(micro_count), float(mla_thickness), name, prescription)

    def with_changes(self, **changes) -> SpcConfig:
        """Copy with changed fields; ``d`` follows ``f_M`` and ``o_f``."""
        if "d" not in changes and ({"f_M", "o_f"} & changes.keys()):
            f_M = changes.get("f_M", self.f_M)
            o_f = changes.get("o_f", self.o_f)
            changes["d"] = float(f_M) if math.isinf(o_f) else image_distance(f_M, o_f)
        return replace(self, **changes)

    @property
    def infinite_focus(self) -> bool:
        return math.isinf(self.o_f)

    @property
    def o_f_finite(self) -> float:
        """Focus distance, with the large finite stand-in for infinity."""
        return INFINITE_FOCUS_SUBSTITUTE if self.infinite_focus else self.o_f

    @property
    def d_finite(self) -> float:
        """``d`` consistent with :attr:`o_f_finite`."""
        if not self.infinite_focus:
            return self.d
        return self.f_M + self.d_minus_f_M

    @property
    def d_minus_f_M(self) -> float:
        # f_M**2 / (o_f - f_M) avoids the cancellation in d - f_M
        o_f = self.o_f_finite
        return self.f_M * self.f_M / (o_f - self.f_M)


@dataclass(frozen=True)
class TwoPlaneGeometry:
    F: float
    delta_st: float
    delta_uv: float
    delta: float
    delta_naive: float
    d_mli: float
    m_proj_correct: float
    m_proj_naive: float

    @property
    def d_mli_naive(self) -> float:
        return self.delta_st / self.m_proj_naive


@dataclass(frozen=True)
class PertuzParams:
    a0: float
    a1: float
    variant: str


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _check_model(model):
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")


def geometry(c: SpcConfig) -> TwoPlaneGeometry:
    F = c.d - c.X
    delta_uv = c.s_px * F / c.f_m
    return TwoPlaneGeometry(
        F=F,
        delta_st=c.d_ML,
        delta_uv=delta_uv,
        delta=delta_uv / c.d_ML,
        delta_naive=c.s_px * c.d / (c.f_m * c.d_ML),
        d_mli=c.d_ML * (1.0 + c.f_m / F),
        m_proj_correct=1.0 / (1.0 + c.f_m / F),
        m_proj_naive=1.0 / (1.0 + c.f_m / c.d),
    )


def microimage_pixels(c: SpcConfig, tol=1e-9) -> int | None:
    """Microimage pitch in whole pixels, or None when it is not an integer."""
    ratio = geometry(c).d_mli / c.s_px
    k = round(ratio)
    return k if k >= 1 and abs(ratio - k) <= tol * ratio else None


def in_object_range(c: SpcConfig, o):
    """True where ``o`` is a real object distance in front of the lens (o > f_M)."""
    o = np.asarray(o, dtype=float)
    return _out(np.isfinite(o) & (o > c.f_M) | np.isposinf(o))


def alpha(c: SpcConfig, o):
    """Refocusing parameter F'/F for an object at distance ``o``."""
    o = np.asarray(o, dtype=float)
    if np.any(~(o > c.f_M)):
        raise DomainError("alpha requires o > f_M")
    with np.errstate(invalid="ignore"):
        a = (o * (c.f_M - c.X) + c.f_M * c.X) / ((o - c.f_M) * (c.d - c.X))
    # o = inf: limit (f_M - X) / (d - X)
    a = np.where(np.isinf(o), (c.f_M - c.X) / (c.d - c.X), a)
    return _out(a)


def shift_from_alpha(c: SpcConfig, a):
    a = np.asarray(a, dtype=float)
    return _out(geometry(c).delta * (1.0 - 1.0 / a))


def shift_from_distance(c: SpcConfig, o, model="exit_pupil"):
    """Sub-aperture image shift (px) that refocuses onto distance ``o``."""
    _check_model(model)
    o = np.asarray(o, dtype=float)
    if np.any(~(o > c.f_M)):
        raise DomainError("shift_from_distance requires o > f_M")
    g = geometry(c)
    f_M, d, X = c.f_M, c.d, c.X
    with np.errstate(invalid="ignore", divide="ignore"):
        num = o * (f_M - d) + f_M * d
        if model == "exit_pupil":
            den = o * (f_M - X) + f_M * X
            s = g.delta * num / den
            s_inf = g.delta * (f_M - d) / (f_M - X)
        else:
            s = g.delta_naive * num / (o * f_M)
            s_inf = g.delta_naive * (f_M - d) / f_M
    s = np.where(np.isinf(o), s_inf, s)
    s = np.where(o == c.o_f, 0.0, s)
    return _out(s)


def distance_from_shift(c: SpcConfig, S, model="exit_pupil"):
    """Object distance brought into focus by shift ``S``.

    Shifts outside the physical range give ``o <= f_M`` or negative values;
    they are returned as is (see :func:`in_object_range`).  A shift that maps
    to infinity returns ``inf``.
    """
    _check_model(model)
    S = np.asarray(S, dtype=float)
    g = geometry(c)
    f_M, d, X = c.f_M, c.d, c.X
    with np.errstate(invalid="ignore", divide="ignore"):
        if model == "exit_pupil":
            den = S * (f_M - X) - g.delta * (f_M - d)
            o = f_M * (d * g.delta - S * X) / den
        else:
            den = S * f_M - g.delta_naive * (f_M - d)
            o = f_M * d * g.delta_naive / den
    o = np.where(den == 0, np.inf, o)
    o = np.where(S == 0, c.o_f, o)
    return _out(o)


def hahne_distance_from_shift(c: SpcConfig, S):
    """Object distance from intersecting two chief-ray lines behind the MLA.

    One ray runs along the optical axis through the on-axis microlens; the
    other starts at the pixel ``d_mli + s_hat`` from it and passes through
    the neighbouring microlens centre.  Their crossing at distance ``z_i``
    in front of the MLA is the virtual image, and the thin lens equation
    carries it into the scene.  ``S = 0`` returns ``o_f``.
    """
    S = np.asarray(S, dtype=float)
    g = geometry(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        s_hat = -c.s_px / S  # metric disparity on the sensor
        # f(z) = 0 and f2(z) = slope * z + d_ML
        slope = (c.d_ML - (g.d_mli + s_hat)) / c.f_m
        z_i = -c.d_ML / slope
        i = c.d - z_i
        o = 1.0 / (1.0 / c.f_M - 1.0 / i)
    o = np.where(S == 0, c.o_f, o)
    return _out(o)


def pertuz_params(c: SpcConfig, variant="corrected") -> PertuzParams:
    """Parameters ``a0, a1`` of ``o = o_f (1 - a0 rho) / (1 - a1 rho)``.

    ``original`` uses the published thin-lens interpretation, ``corrected``
    the exit-pupil model.  Infinite focus is evaluated at
    :data:`INFINITE_FOCUS_SUBSTITUTE` with the matching ``d``.
    """
    o_f = c.o_f_finite
    d = c.d_finite
    d_minus_f = c.d_minus_f_M if c.infinite_focus else c.d - c.f_M
    if d_minus_f == 0:
        raise DomainError("d == f_M with a finite focus distance")
    if variant == "original":
        a0 = c.f_m * c.d_ML / (c.s_px * d)
        a1 = o_f * a0 / c.f_M
    elif variant == "corrected":
        delta = c.s_px * (d - c.X) / (c.f_m * c.d_ML)
        a0 = -c.X / (delta * d)
        a1 = (c.f_M - c.X) / (delta * d_minus_f)
    else:
        raise ValueError(f"variant must be 'original' or 'corrected', got {variant!r}")
    return PertuzParams(float(a0), float(a1), variant)


def pertuz_distance(p: PertuzParams, o_f, rho):
    """Evaluate the two-parameter distance model; ``rho = -S``.

    At the pole ``rho = 1/a1`` the result is ``inf``.
    """
    rho = np.asarray(rho, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        den = 1.0 - p.a1 * rho
        o = o_f * (1.0 - p.a0 * rho) / den
    o = np.where(den == 0, np.inf, o)
    return _out(o)


# ---------------------------------------------------------------------------
# automatic design


def align_to_pixels(c: SpcConfig, max_perturbation=0.02) -> SpcConfig:
    """Snap the MIC pitch to a whole number of pixels.

    ``d_ML`` is rescaled first; if that needs more than ``max_perturbation``
    relative change, ``f_m`` is adjusted instead.  Among candidate pitches
    the smallest perturbation wins.
    """
    F = c.d - c.X
    if F <= 0:
        raise DomainError("exit pupil must lie in front of the MLA (d - X > 0)")
    ratio = geometry(c).d_mli / c.s_px
    candidates = sorted({max(1, math.floor(ratio)), max(1, math.ceil(ratio))})
    best = None
    for k in candidates:
        target = k * c.s_px
        d_ML = target / (1.0 + c.f_m / F)
        rel = abs(d_ML / c.d_ML - 1.0)
        if rel <= max_perturbation and (best is None or rel < best[0]):
            best = (rel, {"d_ML": d_ML})
    if best is None:
        for k in candidates:
            target = k * c.s_px
            f_m = F * (target / c.d_ML - 1.0)
            if f_m <= 0:
                continue
            rel = abs(f_m / c.f_m - 1.0)
            if rel <= max_perturbation and (best is None or rel < best[0]):
                best = (rel, {"f_m": f_m})
    if best is None:
        closest = min(candidates, key=lambda k: abs(k - ratio)) * c.s_px
        raise AlignmentError(
            f"no pixel-aligned MLA within {max_perturbation:.0%}; "
            f"closest achievable d_mli is {closest:.7g} mm", closest_d_mli=closest)
    return c.with_changes(**best[1])


def design_spc(summary: ParaxialSummary, o_f, s_px, sensor_px, micro_count,
               mla_thickness=0.0, name="") -> SpcConfig:
    """Configure MLA and sensor for a main lens.

    The microlens f-number matches the working f-number ``(d - X) / (2 r_xp)``
    of the main lens, the microimages tile the sensor width, and the MIC
    pitch is snapped onto whole pixels.
    """
    f_M, X = summary.f_M, summary.X
    o_f = float(o_f)
    if not math.isinf(o_f) and o_f <= f_M:
        raise DomainError(f"focus distance {o_f} must exceed f_M={f_M}")
    if any(int(m) < 1 or int(m) > int(s) for m, s in zip(micro_count, sensor_px)):
        raise DomainError("micro_count must be >= 1 and fit on the sensor")
    d = f_M if math.isinf(o_f) else image_distance(f_M, o_f)
    F = d - X
    if F <= 0:
        raise DomainError("exit pupil must lie in front of the MLA (d - X > 0)")
    n_work = F / (2.0 * summary.exit_pupil_radius)
    pitch = sensor_px[0] * s_px / micro_count[0]
    # d_ML * (1 + n_work * d_ML / F) = pitch
    q = n_work / F
    d_ML = (math.sqrt(1.0 + 4.0 * q * pitch) - 1.0) / (2.0 * q)
    c = SpcConfig.from_main_lens(f_M, X, o_f, n_work * d_ML, d_ML, s_px, sensor_px,
                                 micro_count, mla_thickness, name or summary.name)
    return align_to_pixels(c)


# ---------------------------------------------------------------------------
# config files

_FIELDS = ("o_f", "f_m", "d_ML", "mla_thickness", "s_px", "sensor_px", "micro_count")


def config_from_dict(data: dict, base_dir=None) -> SpcConfig:
    try:
        o_f = data["o_f"]
        if isinstance(o_f, str):
            if o_f.strip().lower() not in ("inf", "infinity"):
                raise InputParseError(f"bad o_f {o_f!r}")
            o_f = math.inf
        prescription = data.get("prescription")
        if prescription is not None:
            path = Path(prescription)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            summary = paraxial_summary(load_prescription(path))
            f_M, X = summary.f_M, summary.X
        else:
            f_M, X = data["f_M"], data["X"]
        return SpcConfig.from_main_lens(
            f_M, X, o_f, data["f_m"], data["d_ML"], data["s_px"],
            tuple(data.get("sensor_px", (0, 0))), tuple(data.get("micro_count", (0, 0))),
            data.get("mla_thickness", 0.0), data.get("name", ""), prescription)
    except (KeyError, TypeError) as exc:
        raise InputParseError(f"malformed SPC config: {exc!r}") from exc


def config_to_dict(c: SpcConfig) -> dict:
    out = {"name": c.name}
    if c.prescription is not None:
        out["prescription"] = c.prescription
    else:
        out["f_M"] = c.f_M
        out["X"] = c.X
    out["o_f"] = "inf" if c.infinite_focus else c.o_f
    out.update(f_m=c.f_m, d_ML=c.d_ML, mla_thickness=c.mla_thickness, s_px=c.s_px,
               sensor_px=list(c.sensor_px), micro_count=list(c.micro_count))
    return out


def dumps_config(c: SpcConfig) -> str:
    return json.dumps(config_to_dict(c), indent=2) + "\n"


def load_config(path) -> SpcConfig:
    path = Path(path)
    if not path.exists() and path.suffix == "" and path.name in list_presets():
        return preset(path.name)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputParseError(f"cannot read SPC config {path}: {exc}") from exc
    c = config_from_dict(data, base_dir=path.parent)
    return c if c.name else replace(c, name=path.stem)


def save_config(c: SpcConfig, path):
    Path(path).write_text(dumps_config(c))


def _data_dir(kind):
    return resources.files("pupilfield") / "data" / kind


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in _data_dir("configs").iterdir() if p.name.endswith(".json"))


def preset(name: str) -> SpcConfig:
    """A bundled SPC configuration by name."""
    path = _data_dir("configs") / f"{name}.json"
    if not path.is_file():
        raise InputParseError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    with resources.as_file(path) as real:
        return load_config(real)


def bundled_prescription(name: str):
    path = _data_dir("prescriptions") / f"{name}.json"
    if not path.is_file():
        raise InputParseError(f"unknown bundled prescription {name!r}")
    with resources.as_file(path) as real:
        return load_prescription(real)


def bundled_prescription_dir():
    return Path(str(_data_dir("prescriptions")))
