"""Ground-truth generators for the plenoptic experiments.

The light-field generator works purely from ray geometry: every sample is a
straight line from an exit-pupil point to an MLA point, continued to the
conjugate plane of the object and carried out into the scene by the main
lens magnification.  It never evaluates the refocusing equations, so the
disparity it produces is an independent reference for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import DomainError
from .lightfield import LightField4D, interleave
from .optics import LensPrescription, Ray2D, paraxial_summary, trace_bundle
from .spc import SpcConfig, geometry, microimage_pixels
from .tables import dumps_csv

PATTERN_KINDS = ("siemens_star", "checkerboard", "constant")
BACKGROUND = 0.5


@dataclass(frozen=True)
class PatternSpec:
    """Planar test target.

    ``physical_width`` of ``None`` lets :func:`synth_lightfield` size the
    target to the field of view.  ``smoothing`` is a Gaussian sigma in
    pattern pixels applied after rendering.
    """

    kind: str = "siemens_star"
    spokes: int = 4
    period: float = 32.0
    resolution: int = 1024
    physical_width: float | None = None
    rotation: float = 0.0
    smoothing: float = 4.0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise DomainError(f"pattern kind must be one of {PATTERN_KINDS}")
        if self.resolution < 16:
            raise DomainError("pattern resolution must be >= 16")
        if self.spokes < 2:
            raise DomainError("a star needs at least 2 spokes")
        if not self.period > 0:
            raise DomainError("checker period must be > 0")

    @classmethod
    def parse(cls, text: str, **kw) -> PatternSpec:
        """``star:4``, ``checker:32`` or ``constant``."""
        kind, _, arg = text.partition(":")
        kind = {"star": "siemens_star", "checker": "checkerboard"}.get(kind, kind)
        if kind == "siemens_star" and arg:
            kw["spokes"] = int(arg)
        elif kind == "checkerboard" and arg:
            kw["period"] = float(arg)
        return cls(kind, **kw)


def _snap(x, tol=1e-9):
    r = np.round(x)
    return np.where(np.abs(x - r) <= tol, r, x)


def render_pattern(p: PatternSpec) -> np.ndarray:
    """Evaluate the pattern at pixel centres on a square grid.

    Rows run along the first spatial axis.  A star pixel belongs to sector
    ``floor(spokes * theta / pi)``; a pixel exactly on a sector boundary is
    given to the sector below it.
    """
    n = p.resolution
    if p.kind == "constant":
        return np.ones((n, n))
    c = np.arange(n) + 0.5 - n / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if p.kind == "checkerboard":
        a = np.floor(_snap((yy + n / 2) / p.period))
        b = np.floor(_snap((xx + n / 2) / p.period))
        img = ((a + b) % 2 == 0).astype(float)
    else:
        theta = np.mod(np.arctan2(yy, xx) - p.rotation, 2 * np.pi)
        x = _snap(p.spokes * theta / np.pi)
        sector = np.ceil(x) - 1  # floor, with ties going to the lower sector
        img = (np.mod(sector, 2) == 0).astype(float)
    if p.smoothing > 0:
        img = ndimage.gaussian_filter(img, p.smoothing, mode="nearest")
    return img


def _field_of_view(c: SpcConfig, i_n, j_n, o):
    """Half-width (mm) at the object plane seen by the central view."""
    i_img = o * c.f_M / (o - c.f_M)
    s_max = max(i_n - 1, j_n - 1) / 2 * c.d_ML
    y_img = s_max * (i_img - c.X) / (c.d - c.X)
    return abs(y_img * o / i_img)


def synth_lightfield(c: SpcConfig, p: PatternSpec, o, n_views=None, fov_margin=1.6) -> LightField4D:
    """Light field of a planar pattern at distance ``o`` (mm) from H_scene."""
    o = float(o)
    if not (o > c.f_M and math.isfinite(o)):
        raise DomainError(f"object distance {o} must be finite and exceed f_M={c.f_M}")
    cols, rows = c.micro_count
    if cols < 1 or rows < 1:
        raise DomainError("config has no microlens count")
    if n_views is None:
        n_views = microimage_pixels(c) or int(round(geometry(c).d_mli / c.s_px))
    g = geometry(c)
    k_c = n_views // 2
    i_img = o * c.f_M / (o - c.f_M)

    u = (np.arange(n_views) - k_c) * g.delta_uv
    s = (np.arange(rows) - (rows - 1) / 2) * g.delta_st
    t = (np.arange(cols) - (cols - 1) / 2) * g.delta_st
    scale = (i_img - c.X) / (c.d - c.X)
    # ray from (u, z=X) through (s, z=d), evaluated at z = i_img
    y_s = u[:, None] + (s[None, :] - u[:, None]) * scale
    y_t = u[:, None] + (t[None, :] - u[:, None]) * scale
    # conjugate magnification -i/o takes image heights to the scene
    Y_s = -y_s * o / i_img
    Y_t = -y_t * o / i_img

    width = p.physical_width
    if width is None:
        width = 2 * fov_margin * _field_of_view(c, rows, cols, o)
    img = render_pattern(p)
    n = p.resolution
    to_px = n / width
    rr = Y_s * to_px + n / 2 - 0.5
    cc = Y_t * to_px + n / 2 - 0.5
    K = n_views
    coords = np.empty((2, K, K, rows, cols))
    coords[0] = rr[:, None, :, None]
    coords[1] = cc[None, :, None, :]
    # cubic spline: with a piecewise-bilinear pattern, symmetric view pairs
    # cancel exactly and focus curves grow flat tops near half-pixel shifts
    samples = ndimage.map_coordinates(img, coords.reshape(2, -1), order=3,
                                      mode="constant", cval=BACKGROUND)
    flags = []
    lim = n - 1
    if rr.min() < 0 or cc.min() < 0 or rr.max() > lim or cc.max() > lim:
        flags.append("pattern-does-not-cover-view")
    if abs(i_img - c.d) > c.d - c.X:
        flags.append("conjugate-far-from-mla")
    return LightField4D(samples.reshape(K, K, rows, cols), g.delta_st, g.delta_uv, k_c, k_c,
                        tuple(flags))


def vignetting(c: SpcConfig, shape) -> np.ndarray:
    """Strictly positive cos^4 falloff across the sensor."""
    h, w = shape
    y = (np.arange(h) - (h - 1) / 2) * c.s_px
    x = (np.arange(w) - (w - 1) / 2) * c.s_px
    r2 = y[:, None] ** 2 + x[None, :] ** 2
    L = c.d - c.X
    return (L * L / (L * L + r2)) ** 2


def synth_raw(c: SpcConfig, lf: LightField4D, vignette=False):
    """Interleave a light field into a sensor image; returns ``(raw, white)``."""
    K = microimage_pixels(c)
    k_n, l_n, i_n, j_n = lf.samples.shape
    if K is None or (k_n, l_n) != (K, K):
        raise DomainError("light field views must match the pixel-aligned microimage size")
    cols, rows = c.micro_count
    if (cols, rows) != (0, 0) and (i_n, j_n) != (rows, cols):
        raise DomainError("light field size does not match the microlens count")
    raw = interleave(lf)
    if not vignette:
        return raw, np.ones_like(raw)
    white = vignetting(c, raw.shape)
    return raw * white, white


# ---------------------------------------------------------------------------
# MIC ground truth by exact tracing


@dataclass
class MicGroundTruth:
    ml_index: np.ndarray
    ml_center: np.ndarray  # mm
    mic: np.ndarray  # mm, mean sensor hit
    variance: np.ndarray  # mm^2
    flags: list = field(default_factory=list)  # per microlens
    d: float = 0.0
    f_m: float = 0.0

    CSV_HEADER = ("ml_index", "ml_center_mm", "mic_mm", "variance_mm2")

    def rows(self):
        return [(int(i), float(c), float(m), float(v))
                for i, c, m, v in zip(self.ml_index, self.ml_center, self.mic, self.variance)]

    def to_csv(self) -> str:
        return dumps_csv(self.CSV_HEADER, self.rows())

    def pitch_ratio(self) -> float:
        """Least-squares slope of MIC height against microlens centre."""
        ok = np.isfinite(self.mic)
        return float(np.polyfit(self.ml_center[ok], self.mic[ok], 1)[0])


def _mla_heights(p, thetas, z_mla):
    y, t, z, clipped, status = trace_bundle(p, np.zeros_like(thetas), thetas, 0.0)
    h = y[-1] + np.tan(t[-1]) * (z_mla - z[-1])
    return h, np.tan(t[-1]), clipped.any(axis=0)


def _solve_angles(p, targets, z_mla, iters=80):
    """Stop-centre angles whose rays meet the MLA at ``targets``."""
    eps = 1e-6
    h_eps, _, _ = _mla_heights(p, np.array([eps]), z_mla)
    gain = h_eps[0] / eps
    if gain == 0 or not math.isfinite(gain):
        raise DomainError("chief rays do not reach the MLA plane")
    guess = targets / gain
    width = 0.25 * np.abs(guess) + 1e-9
    lo, hi = guess - width, guess + width
    for _ in range(60):
        h_lo = _mla_heights(p, lo, z_mla)[0] - targets
        h_hi = _mla_heights(p, hi, z_mla)[0] - targets
        bad = ~(np.sign(h_lo) * np.sign(h_hi) <= 0)
        if not bad.any():
            break
        lo = np.where(bad, guess - 2 * (guess - lo), lo)
        hi = np.where(bad, guess + 2 * (hi - guess), hi)
    h_lo = _mla_heights(p, lo, z_mla)[0] - targets
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        h_mid = _mla_heights(p, mid, z_mla)[0] - targets
        same = np.sign(h_mid) == np.sign(h_lo)
        lo = np.where(same, mid, lo)
        h_lo = np.where(same, h_mid, h_lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def mic_forward_trace(p: LensPrescription, c: SpcConfig, rays_per_bundle=16,
                      n_lenses=None, aperture_fraction=1.0) -> MicGroundTruth:
    """Trace chief-ray bundles through the main lens onto the sensor.

    For each microlens along one meridian, rays leave the aperture-stop
    centre toward ``rays_per_bundle`` points spread over the central
    ``aperture_fraction`` of that microlens.  Each is traced exactly to the
    MLA, bent by an ideal thin microlens and carried ``f_m`` to the sensor.
    The mean hit is the MIC.
    """
    if rays_per_bundle < 8:
        raise DomainError("rays_per_bundle must be >= 8")
    summary = paraxial_summary(p)
    if not math.isclose(summary.f_M, c.f_M, rel_tol=0.01) or abs(summary.X - c.X) > 0.01 * abs(c.f_M):
        raise DomainError("prescription and config disagree on f_M or X by more than 1%")
    J = n_lenses or c.micro_count[0]
    if J < 1:
        raise DomainError("need at least one microlens")
    sub = p.subsystem(p.stop_index)
    z_mla = summary.h_cam + c.d  # stop frame

    centers = (np.arange(J) - (J - 1) / 2) * c.d_ML
    frac = (np.arange(rays_per_bundle) + 0.5) / rays_per_bundle - 0.5
    targets = centers[:, None] + aperture_fraction * c.d_ML * frac[None, :]
    thetas = _solve_angles(sub, targets.ravel(), z_mla)
    h, slope, clipped = _mla_heights(sub, thetas, z_mla)
    # ideal thin microlens: the sensor hit depends only on the incoming slope
    hits = (centers[:, None] + c.f_m * slope.reshape(J, -1))
    ok = (~clipped).reshape(J, -1) & np.isfinite(hits)
    mic = np.full(J, np.nan)
    var = np.full(J, np.nan)
    flags = []
    for j in range(J):
        if ok[j].any():
            mic[j] = hits[j, ok[j]].mean()
            var[j] = hits[j, ok[j]].var()
            flags.append(())
        else:
            flags.append(("no-rays",))
    return MicGroundTruth(np.arange(J), centers, mic, var, flags, c.d, c.f_m)


def mic_backtrace(g: MicGroundTruth, c: SpcConfig | None = None) -> list[Ray2D]:
    """One ray per microlens from its MIC through its centre, H_cam frame."""
    d = c.d if c is not None else g.d
    f_m = c.f_m if c is not None else g.f_m
    rays = []
    for center, mic in zip(g.ml_center, g.mic):
        if math.isfinite(mic):
            rays.append(Ray2D(float(center), math.atan((mic - center) / f_m), d))
    if not rays:
        raise DomainError("ground truth holds no traced microlens")
    return rays
