"""Paraxial and exact meridional ray tracing over lens prescriptions.

Axial positions increase toward the sensor and are measured from the vertex
of the first surface unless stated otherwise.  A radius is positive when the
centre of curvature lies on the sensor side of the vertex.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import AfocalSystemError, DomainError, FocusAtInfinityError, InputParseError

__all__ = [
    "OpticalSurface",
    "LensPrescription",
    "Ray2D",
    "MeridionalTrace",
    "ParaxialSummary",
    "BlurSpotReport",
    "image_distance",
    "paraxial_summary",
    "trace_meridional",
    "trace_bundle",
    "bundle_axis_stats",
    "min_blur_spot",
    "load_prescription",
    "save_prescription",
    "prescription_to_dict",
    "prescription_from_dict",
]


@dataclass(frozen=True)
class OpticalSurface:
    """One refracting (or purely limiting) surface.

    ``radius=None`` encodes a planar surface.
    """

    radius: float | None
    thickness: float
    ior_after: float
    semi_aperture: float
    is_stop: bool = False

    def __post_init__(self):
        if self.radius is not None and (self.radius == 0 or not math.isfinite(self.radius)):
            raise DomainError("radius must be finite and nonzero (use None for planar)")
        if not self.thickness >= 0:
            raise DomainError(f"thickness_to_next must be >= 0, got {self.thickness}")
        if not self.ior_after >= 1:
            raise DomainError(f"refractive index must be >= 1, got {self.ior_after}")
        if not self.semi_aperture > 0:
            raise DomainError(f"semi_aperture must be > 0, got {self.semi_aperture}")

    @property
    def curvature(self) -> float:
        return 0.0 if self.radius is None else 1.0 / self.radius


@dataclass(frozen=True)
class LensPrescription:
    """Ordered surfaces from the scene side to the sensor side.

    If no surface is flagged as the stop, the first surface becomes a virtual
    stop and ``stop_synthesized`` is set.
    """

    surfaces: tuple[OpticalSurface, ...]
    ambient_index: float = 1.0
    name: str = ""
    stop_synthesized: bool = False

    def __post_init__(self):
        surfaces = tuple(self.surfaces)
        if not surfaces:
            raise DomainError("a prescription needs at least one surface")
        if not self.ambient_index >= 1:
            raise DomainError(f"ambient index must be >= 1, got {self.ambient_index}")
        n_stops = sum(s.is_stop for s in surfaces)
        if n_stops > 1:
            raise DomainError(f"at most one stop allowed, found {n_stops}")
        synthesized = self.stop_synthesized
        if n_stops == 0:
            s0 = surfaces[0]
            surfaces = (OpticalSurface(s0.radius, s0.thickness, s0.ior_after,
                                       s0.semi_aperture, True),) + surfaces[1:]
            synthesized = True
        object.__setattr__(self, "surfaces", surfaces)
        object.__setattr__(self, "stop_synthesized", synthesized)

    def __len__(self):
        return len(self.surfaces)

    @property
    def stop_index(self) -> int:
        return next(i for i, s in enumerate(self.surfaces) if s.is_stop)

    @property
    def vertices(self) -> np.ndarray:
        """Axial vertex positions, first surface at 0."""
        gaps = [s.thickness for s in self.surfaces[:-1]]
        return np.concatenate([[0.0], np.cumsum(gaps)])

    def index_before(self, j: int) -> float:
        return self.ambient_index if j == 0 else self.surfaces[j - 1].ior_after

    def reversed(self) -> LensPrescription:
        """The same system traversed from the sensor side.

        Its first vertex sits at the original last vertex, with the axis
        mirrored.
        """
        n = len(self.surfaces)
        out = []
        for r in range(n):
            j = n - 1 - r
            s = self.surfaces[j]
            gap = self.surfaces[j - 1].thickness if j > 0 else 0.0
            out.append(OpticalSurface(
                None if s.radius is None else -s.radius,
                gap, self.index_before(j), s.semi_aperture, s.is_stop))
        return LensPrescription(tuple(out), self.surfaces[-1].ior_after,
                                self.name + " (reversed)", self.stop_synthesized)

    def subsystem(self, start: int) -> LensPrescription:
        """Surfaces ``start..`` with the medium in front of ``start`` as ambient."""
        surfaces = self.surfaces[start:]
        if not any(s.is_stop for s in surfaces):
            s0 = surfaces[0]
            surfaces = (OpticalSurface(s0.radius, s0.thickness, s0.ior_after,
                                       s0.semi_aperture, True),) + surfaces[1:]
        return LensPrescription(surfaces, self.index_before(start), self.name)


@dataclass(frozen=True)
class Ray2D:
    """Meridional ray state; ``angle`` is in radians from the axis."""

    height: float
    angle: float
    axial_position: float

    def __post_init__(self):
        if not (math.isfinite(self.height) and math.isfinite(self.angle)
                and math.isfinite(self.axial_position)):
            raise DomainError("ray fields must be finite")
        if not abs(self.angle) < math.pi / 2:
            raise DomainError("|angle| must be < pi/2")

    @property
    def slope(self) -> float:
        return math.tan(self.angle)

    def height_at(self, z):
        return self.height + math.tan(self.angle) * (np.asarray(z) - self.axial_position)


@dataclass(frozen=True)
class MeridionalTrace:
    """Ray state after every surface that was reached."""

    states: list[Ray2D]
    clipped: tuple[int, ...] = ()
    terminated: str | None = None

    @property
    def ok(self) -> bool:
        return self.terminated is None

    @property
    def final(self) -> Ray2D:
        return self.states[-1]


@dataclass(frozen=True)
class ParaxialSummary:
    """Cardinal data of a main lens.

    Principal-plane and pupil positions are measured from the stop:
    ``h_scene`` positive toward the scene, ``h_cam`` and
    ``exit_pupil_position`` positive toward the sensor.
    ``X = exit_pupil_position - h_cam`` is positive when the exit pupil lies
    on the sensor side of the camera-side principal plane.
    """

    f_M: float
    h_scene: float
    h_cam: float
    exit_pupil_position: float
    exit_pupil_radius: float
    X: float
    stop_position: float = 0.0  # stop vertex, from the first vertex
    name: str = ""

    def __post_init__(self):
        if self.f_M == 0:
            raise DomainError("f_M must be nonzero")
        if not self.exit_pupil_radius > 0:
            raise DomainError("exit pupil radius must be > 0")
        if not math.isclose(self.X, self.exit_pupil_position - self.h_cam,
                            rel_tol=1e-12, abs_tol=1e-9):
            raise DomainError("X must equal exit_pupil_position - h_cam")

    @property
    def h_cam_position(self) -> float:
        """Camera-side principal plane, from the first vertex."""
        return self.stop_position + self.h_cam

    @property
    def exit_pupil_z(self) -> float:
        """Exit pupil, from the first vertex."""
        return self.stop_position + self.exit_pupil_position


@dataclass(frozen=True)
class BlurSpotReport:
    best_axial_position: float
    rms_radius_at_best: float
    axis_intersection_mean: float
    axis_intersection_variance: float
    flags: tuple[str, ...] = field(default=())


def image_distance(f, o):
    """Thin-lens image distance ``i`` with ``1/f = 1/o + 1/i``.

    ``o`` may be ``math.inf``; then ``i = f``.
    """
    if f == 0:
        raise DomainError("focal length must be nonzero")
    if math.isinf(o):
        return float(f)
    if not o > 0:
        raise DomainError(f"object distance must be > 0, got {o}")
    if o == f:
        raise FocusAtInfinityError("o == f: the image lies at infinity")
    return o * f / (o - f)


# ---------------------------------------------------------------------------
# paraxial (reduced-angle ray transfer matrices acting on (y, n*u))


def _refraction(n1, n2, curvature):
    return np.array([[1.0, 0.0], [-(n2 - n1) * curvature, 1.0]])


def _translation(t, n):
    return np.array([[1.0, t / n], [0.0, 1.0]])


def _group_matrix(p: LensPrescription, start: int, stop: int, include_first_refraction=True):
    """Matrix from the vertex of ``start`` to the vertex of ``stop - 1``."""
    m = np.eye(2)
    for j in range(start, stop):
        s = p.surfaces[j]
        if j > start:
            prev = p.surfaces[j - 1]
            m = _translation(prev.thickness, prev.ior_after) @ m
        if j > start or include_first_refraction:
            m = _refraction(p.index_before(j), s.ior_after, s.curvature) @ m
    return m


def paraxial_summary(p: LensPrescription) -> ParaxialSummary:
    n = len(p.surfaces)
    n_in = p.ambient_index
    n_out = p.surfaces[-1].ior_after
    z = p.vertices
    (A, B), (C, D) = _group_matrix(p, 0, n)
    if abs(C) < 1e-14 * max(1.0, abs(A), abs(D)):
        raise AfocalSystemError(f"{p.name or 'prescription'} is afocal (zero power)")
    f_M = -n_out / C
    z_h_cam = z[-1] + n_out * (1.0 - A) / C
    z_h_scene = n_in * (D - 1.0) / C

    k = p.stop_index
    stop = p.surfaces[k]
    (Ar, Br), (Cr, Dr) = _group_matrix(p, k, n, include_first_refraction=False)
    if abs(Dr) < 1e-14:
        raise DomainError("exit pupil at infinity (image-side telecentric)")
    z_xp = z[-1] - n_out * Br / Dr
    r_xp = stop.semi_aperture * abs(1.0 / Dr)

    _check_marginal_ray(p)

    z_stop = z[k]
    return ParaxialSummary(
        f_M=float(f_M),
        h_scene=float(z_stop - z_h_scene),
        h_cam=float(z_h_cam - z_stop),
        exit_pupil_position=float(z_xp - z_stop),
        exit_pupil_radius=float(r_xp),
        X=float((z_xp - z_stop) - (z_h_cam - z_stop)),
        stop_position=float(z_stop),
        name=p.name,
    )


def _check_marginal_ray(p: LensPrescription):
    """Warn when the axial marginal ray from infinity exceeds a semi-aperture."""
    y, nu = 1.0, 0.0
    heights = []
    for j, s in enumerate(p.surfaces):
        if j > 0:
            prev = p.surfaces[j - 1]
            y += prev.thickness * nu / prev.ior_after
        heights.append(y)
        nu -= (s.ior_after - p.index_before(j)) * s.curvature * y
    heights = np.array(heights)
    y_stop = heights[p.stop_index]
    if y_stop == 0:
        return
    heights *= p.surfaces[p.stop_index].semi_aperture / y_stop
    limits = np.array([s.semi_aperture for s in p.surfaces])
    blocked = np.flatnonzero(np.abs(heights) > limits * (1 + 1e-9))
    if blocked.size:
        warnings.warn(f"{p.name or 'prescription'}: paraxial marginal ray exceeds the "
                      f"semi-aperture at surfaces {blocked.tolist()}", stacklevel=3)


# ---------------------------------------------------------------------------
# exact meridional trace

TIR = "total internal reflection"
MISSED = "missed surface"


def trace_bundle(p: LensPrescription, heights, angles, axial_positions):
    """Vectorised exact trace of many rays.

    Returns ``(y, theta, z, clipped, status)`` where the first four have shape
    ``(n_surfaces, n_rays)`` and ``status`` holds ``None`` or a termination
    reason per ray.  States after a termination are NaN.
    """
    y = np.array(heights, dtype=float, ndmin=1)
    th = np.array(angles, dtype=float, ndmin=1)
    z = np.broadcast_to(np.asarray(axial_positions, dtype=float), y.shape).copy()
    n_rays = y.size
    n_surf = len(p.surfaces)
    out_y = np.full((n_surf, n_rays), np.nan)
    out_t = np.full((n_surf, n_rays), np.nan)
    out_z = np.full((n_surf, n_rays), np.nan)
    clipped = np.zeros((n_surf, n_rays), dtype=bool)
    status = np.array([None] * n_rays, dtype=object)
    alive = np.ones(n_rays, dtype=bool)
    vertices = p.vertices

    dz, dy = np.cos(th), np.sin(th)
    for j, s in enumerate(p.surfaces):
        c = s.curvature
        with np.errstate(invalid="ignore", divide="ignore"):
            t0 = (vertices[j] - z) / dz
            y0 = y + t0 * dy
            F = c * y0 * y0
            G = dz - c * y0 * dy
            disc = G * G - c * F
            missed = alive & ~(disc >= 0)
            denom = G + np.sqrt(np.where(disc >= 0, disc, 0.0))
            missed |= alive & ~(denom > 0) & (F != 0)
            delta = np.where(F == 0, 0.0, F / denom)
        hz = vertices[j] + delta * dz
        hy = y0 + delta * dy
        nz = 1.0 - c * (hz - vertices[j])
        ny = -c * hy
        mu = p.index_before(j) / s.ior_after
        cos_i = dz * nz + dy * ny
        k = 1.0 - mu * mu * (1.0 - cos_i * cos_i)
        tir = alive & ~missed & (k < 0)
        cos_t = np.sqrt(np.where(k >= 0, k, 0.0))
        tz = mu * dz + (cos_t - mu * cos_i) * nz
        ty = mu * dy + (cos_t - mu * cos_i) * ny

        status[missed] = MISSED
        status[tir] = TIR
        alive &= ~(missed | tir)

        y, z = np.where(alive, hy, np.nan), np.where(alive, hz, np.nan)
        th = np.where(alive, np.arctan2(ty, tz), np.nan)
        dz, dy = np.cos(th), np.sin(th)
        out_y[j], out_z[j], out_t[j] = y, z, th
        clipped[j] = alive & (np.abs(hy) > s.semi_aperture)
    return out_y, out_t, out_z, clipped, status


def trace_meridional(p: LensPrescription, r: Ray2D) -> MeridionalTrace:
    """Exact trace of one ray; the state after each surface is returned.

    Rays beyond a semi-aperture are still traced but their surface indices
    are listed in ``clipped``.
    """
    first = p.surfaces[0]
    reach = 0.0 if first.radius is None else abs(first.radius)
    if r.axial_position > reach + 1e-9:
        raise DomainError("ray must start before the first surface")
    ys, ts, zs, clipped, status = trace_bundle(p, [r.height], [r.angle], [r.axial_position])
    states = []
    for j in range(len(p.surfaces)):
        if not np.isfinite(ys[j, 0]):
            break
        states.append(Ray2D(float(ys[j, 0]), float(ts[j, 0]), float(zs[j, 0])))
    return MeridionalTrace(states, tuple(np.flatnonzero(clipped[:, 0]).tolist()), status[0])


# ---------------------------------------------------------------------------
# bundle statistics


def _as_arrays(rays):
    y = np.array([r.height for r in rays], dtype=float)
    slope = np.tan(np.array([r.angle for r in rays], dtype=float))
    z = np.array([r.axial_position for r in rays], dtype=float)
    return y, slope, z


def bundle_axis_stats(rays) -> tuple[float, float]:
    """Mean and population variance of the rays' optical-axis crossings.

    Rays parallel to the axis (|slope| <= 1e-12) never cross it at a
    well-defined point; they are skipped with a warning.
    """
    y, slope, z = _as_arrays(rays)
    usable = np.abs(slope) > 1e-12
    n_skipped = int((~usable).sum())
    if not usable.any():
        raise DomainError("no ray in the bundle intersects the optical axis")
    if n_skipped:
        warnings.warn(f"{n_skipped} ray(s) parallel to the axis excluded", stacklevel=2)
    crossings = z[usable] - y[usable] / slope[usable]
    return float(crossings.mean()), float(crossings.var())


def _rms_at(y, slope, z, planes):
    h = y[None, :] + slope[None, :] * (np.asarray(planes, dtype=float)[:, None] - z[None, :])
    return np.sqrt(np.mean(h * h, axis=1))


def min_blur_spot(rays, z_min, z_max, samples=1024, tol=1e-4) -> BlurSpotReport:
    """Line search for the axial plane with the smallest RMS ray height.

    A coarse scan is refined by successive parabolic fits of the squared
    RMS radius until the bracket is narrower than ``tol``.
    """
    if not z_min < z_max:
        raise DomainError("z_min must be < z_max")
    rays = list(rays)
    if len(rays) < 2:
        raise DomainError("need at least two rays")
    y, slope, z = _as_arrays(rays)
    flags = []
    if np.all(y == y[0]) and np.all(slope == slope[0]) and np.all(z == z[0]):
        flags.append("degenerate")

    grid = np.linspace(z_min, z_max, samples)
    rms = _rms_at(y, slope, z, grid)
    i = int(np.argmin(rms))
    step = grid[1] - grid[0]
    best = grid[i]
    while step > tol:
        zs = np.clip(np.array([best - step, best, best + step]), z_min, z_max)
        e = _rms_at(y, slope, z, zs) ** 2
        curv = e[0] - 2 * e[1] + e[2]
        if curv > 0 and zs[0] < zs[1] < zs[2]:
            best = float(np.clip(zs[1] + 0.5 * step * (e[0] - e[2]) / curv, z_min, z_max))
        else:
            best = float(zs[int(np.argmin(e))])
        step *= 0.25
    rms_best = float(_rms_at(y, slope, z, [best])[0])

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mean, var = bundle_axis_stats(rays)
    except DomainError:
        mean, var = math.nan, math.nan
        flags.append("no-axis-crossing")
    return BlurSpotReport(best, rms_best, mean, var, tuple(flags))


# ---------------------------------------------------------------------------
# file format


def prescription_to_dict(p: LensPrescription) -> dict:
    d = {"name": p.name, "ambient_index": p.ambient_index}
    if p.stop_synthesized:
        d["stop_synthesized"] = True
    d["surfaces"] = [
        {
            "radius_mm": "planar" if s.radius is None else s.radius,
            "thickness_mm": s.thickness,
            "ior_after": s.ior_after,
            "semi_aperture_mm": s.semi_aperture,
            "is_stop": s.is_stop,
        }
        for s in p.surfaces
    ]
    return d


def prescription_from_dict(d: dict) -> LensPrescription:
    try:
        surfaces = []
        for e in d["surfaces"]:
            radius = e["radius_mm"]
            if radius == "planar":
                radius = None
            elif isinstance(radius, str) or radius is None:
                raise InputParseError(f"bad radius_mm {radius!r}")
            surfaces.append(OpticalSurface(
                None if radius is None else float(radius),
                float(e["thickness_mm"]),
                float(e["ior_after"]),
                float(e["semi_aperture_mm"]),
                bool(e.get("is_stop", False)),
            ))
        return LensPrescription(tuple(surfaces), float(d.get("ambient_index", 1.0)),
                                str(d.get("name", "")), bool(d.get("stop_synthesized", False)))
    except (KeyError, TypeError) as exc:
        raise InputParseError(f"malformed prescription: {exc!r}") from exc


def load_prescription(path) -> LensPrescription:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputParseError(f"cannot read prescription {path}: {exc}") from exc
    p = prescription_from_dict(data)
    if not p.name:
        p = LensPrescription(p.surfaces, p.ambient_index, path.stem, p.stop_synthesized)
    return p


def dumps_prescription(p: LensPrescription) -> str:
    return json.dumps(prescription_to_dict(p), indent=2) + "\n"


def save_prescription(p: LensPrescription, path):
    Path(path).write_text(dumps_prescription(p))
