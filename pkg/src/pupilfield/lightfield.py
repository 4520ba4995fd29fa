"""4D light fields of a standard plenoptic camera.

``LightField4D.samples`` is indexed ``[k, l, i, j]``: ``(k, l)`` picks the
sub-aperture view and ``(i, j)`` the microlens.  The first index of each pair
runs along sensor rows.  Raw sensor images are plain 2D float arrays.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage, signal

from .exceptions import DomainError, InputParseError, MisalignedConfigError
from .spc import SpcConfig, geometry, microimage_pixels

MIN_OVERLAP = 8
EQUALIZED_VARIANCE = 0.75  # px^2 per axis


@dataclass
class LightField4D:
    samples: np.ndarray
    delta_st: float
    delta_uv: float
    center_k: int = -1
    center_l: int = -1
    flags: tuple = ()  # generator diagnostics, not stored in files

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4 or min(self.samples.shape) < 1:
            raise DomainError(f"light field samples must be 4D and non-empty, got {self.samples.shape}")
        k_n, l_n = self.samples.shape[:2]
        if self.center_k < 0:
            self.center_k = k_n // 2
        if self.center_l < 0:
            self.center_l = l_n // 2
        if not (0 <= self.center_k < k_n and 0 <= self.center_l < l_n):
            raise DomainError("view centre outside the view grid")

    @property
    def dims(self):
        """``(i_n, j_n, k_n, l_n)``."""
        k, l, i, j = self.samples.shape
        return i, j, k, l

    def view(self, k, l) -> np.ndarray:
        return self.samples[k, l]

    @property
    def central_view(self) -> np.ndarray:
        return self.samples[self.center_k, self.center_l]

    def metric(self, s, t, u, v):
        """Sample at metric coordinates (mm) with multilinear interpolation.

        ``(s, t)`` are MLA-plane positions measured from the central
        microlens, ``(u, v)`` exit-pupil positions measured from the pupil
        centre.
        """
        _, _, i_n, j_n = self.samples.shape
        coords = np.array([
            self.center_k + np.asarray(u, float) / self.delta_uv,
            self.center_l + np.asarray(v, float) / self.delta_uv,
            (i_n - 1) / 2 + np.asarray(s, float) / self.delta_st,
            (j_n - 1) / 2 + np.asarray(t, float) / self.delta_st,
        ])
        coords = np.atleast_2d(coords.reshape(4, -1))
        out = ndimage.map_coordinates(self.samples, coords, order=1, mode="nearest")
        return out.reshape(np.shape(s)) if np.ndim(s) else float(out[0])


class Devignetted(NamedTuple):
    image: np.ndarray
    mask: np.ndarray  # True where the white image was usable


class FocusReport(NamedTuple):
    shift: float
    score: float
    refocused: np.ndarray
    flags: tuple = ()
    shifts: np.ndarray | None = None  # coarse scan positions
    scores: np.ndarray | None = None


def _threads():
    try:
        n = int(os.environ.get("PUPILFIELD_THREADS", "1"))
    except ValueError:
        n = 1
    if n <= 0:
        return os.cpu_count() or 1
    return n


# ---------------------------------------------------------------------------
# raw <-> light field


def devignette(raw, white, eps=1e-12) -> Devignetted:
    raw = np.asarray(raw, dtype=np.float64)
    white = np.asarray(white, dtype=np.float64)
    if raw.shape != white.shape:
        raise DomainError(f"raw {raw.shape} and white {white.shape} differ in size")
    mask = white > eps
    out = np.zeros_like(raw)
    np.divide(raw, white, out=out, where=mask)
    return Devignetted(out, mask)


def decode(raw, c: SpcConfig) -> LightField4D:
    """Split a raw image into sub-aperture views.

    Requires every microimage to cover a whole number of pixels, which
    :func:`pupilfield.spc.design_spc` guarantees.
    """
    raw = np.asarray(raw)
    K = microimage_pixels(c)
    if K is None:
        ratio = geometry(c).d_mli / c.s_px
        raise MisalignedConfigError(
            f"microimage pitch is {ratio:.6g} px, not an integer; "
            "re-run design_spc (or align_to_pixels) to snap the MLA onto the pixel grid")
    h, w = raw.shape
    cols, rows = c.micro_count
    if cols == 0 and rows == 0:
        if h % K or w % K:
            raise DomainError(f"raw size {w}x{h} is not a multiple of the {K} px pitch")
        rows, cols = h // K, w // K
    if (h, w) != (rows * K, cols * K):
        raise DomainError(f"raw size {w}x{h} does not match {cols}x{rows} microimages of {K} px")
    g = geometry(c)
    samples = raw.reshape(rows, K, cols, K).transpose(1, 3, 0, 2)
    return LightField4D(samples, g.delta_st, g.delta_uv)


def interleave(lf: LightField4D) -> np.ndarray:
    """Inverse of :func:`decode`."""
    k, l, i, j = lf.samples.shape
    return lf.samples.transpose(2, 0, 3, 1).reshape(i * k, j * l)


# ---------------------------------------------------------------------------
# refocusing


def _support(offsets, n, margin=0, tol=1e-9):
    lo = max(0, math.ceil(-min(offsets) - tol)) + margin
    hi = min(n - 1, math.floor(n - 1 - max(offsets) + tol)) - margin
    return lo, hi


def refocus_support(lf: LightField4D, S, equalize=False):
    """Index ranges ``((i0, i1), (j0, j1))`` fully supported by every view."""
    k_n, l_n, i_n, j_n = lf.samples.shape
    dk = [S * (k - lf.center_k) for k in range(k_n)]
    dl = [S * (l - lf.center_l) for l in range(l_n)]
    m = 2 if equalize else 0
    return _support(dk, i_n, m), _support(dl, j_n, m)


def can_refocus(lf, S, min_size=MIN_OVERLAP, equalize=False) -> bool:
    (i0, i1), (j0, j1) = refocus_support(lf, S, equalize)
    return i1 - i0 + 1 >= min_size and j1 - j0 + 1 >= min_size


def _taps(frac, equalize):
    if not equalize:
        return (0, (1.0,)) if frac == 0.0 else (0, (1.0 - frac, frac))
    # linear weights followed by a symmetric 5-tap filter that zeroes the
    # Nyquist response and tops the variance up to the same value for every frac
    b = (EQUALIZED_VARIANCE - 0.5 - frac * (1.0 - frac)) / 8.0
    comp = np.array([b, 0.25, 0.5 - 2.0 * b, 0.25, b])
    return -2, tuple(np.convolve(comp, [1.0 - frac, frac]))


def _shift_axis(a, offset, lo, hi, axis, equalize=False):
    # samples a at positions lo..hi + offset along axis
    p = lo + offset
    q = math.floor(p)
    frac = p - q
    # rounding noise from S * (k - k_c) must not reach past the support
    if frac < 1e-9:
        frac = 0.0
    elif frac > 1.0 - 1e-9:
        q, frac = q + 1, 0.0
    n = hi - lo + 1
    start, weights = _taps(frac, equalize)
    out = None
    for t, w in enumerate(weights):
        if w == 0.0 and len(weights) > 1:
            continue
        part = np.take(a, np.arange(q + start + t, q + start + t + n), axis=axis)
        out = part if w == 1.0 and out is None else (w * part if out is None else out + w * part)
    return out


def refocus(lf: LightField4D, S: float, window=None, equalize=False) -> np.ndarray:
    """Shift-and-sum refocus.

    View ``(k, l)`` is sampled at ``(i + S (k - k_c), j + S (l - l_c))`` by
    separable linear interpolation and the views are averaged.  By default
    only output pixels supported by every view are kept;
    ``window = ((i0, i1), (j0, j1))`` selects a smaller inclusive region.

    With ``equalize`` each interpolated view is additionally passed through
    a symmetric 5-tap filter chosen so that every view, whatever its
    fractional offset, carries the same smoothing (variance 3/4 px^2 per
    axis) and no Nyquist response.  Plain linear interpolation smooths views with half-pixel offsets
    and leaves whole-pixel offsets untouched, which pulls focus searches
    toward shifts where ``S (k - k_c)`` is an integer.
    """
    S = float(S)
    (i0, i1), (j0, j1) = refocus_support(lf, S, equalize)
    if window is not None:
        (wi0, wi1), (wj0, wj1) = window
        if wi0 < i0 or wi1 > i1 or wj0 < j0 or wj1 > j1:
            raise DomainError(f"window {window} exceeds the support of shift {S}")
        (i0, i1), (j0, j1) = window
    if i1 - i0 + 1 < MIN_OVERLAP or j1 - j0 + 1 < MIN_OVERLAP:
        raise DomainError(f"shift {S} leaves less than {MIN_OVERLAP}x{MIN_OVERLAP} overlapping pixels")
    k_n, l_n = lf.samples.shape[:2]
    views = []
    for k in range(k_n):
        rows = _shift_axis(lf.samples[k], S * (k - lf.center_k), i0, i1, 1, equalize)
        for l in range(l_n):
            views.append(_shift_axis(rows[l], S * (l - lf.center_l), j0, j1, 1, equalize))
    return np.mean(np.stack(views), axis=0)


def focus_measure(img) -> float:
    """Variance of the 4-neighbour Laplacian over the image interior."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise DomainError("focus_measure needs an image of at least 3x3")
    lap = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
           - 4.0 * img[1:-1, 1:-1])
    return float(np.var(lap))


def _scores(lf, shifts, window, equalize):
    def one(s):
        return focus_measure(refocus(lf, s, window, equalize))

    n = _threads()
    if n > 1 and len(shifts) > 1:
        with ThreadPoolExecutor(n) as ex:
            return np.array(list(ex.map(one, shifts)))
    return np.array([one(s) for s in shifts])


def best_shift(lf: LightField4D, s_min, s_max, coarse=0.05, fine=0.005,
               equalize=True) -> FocusReport:
    """Line search for the sharpest refocus shift in ``[s_min, s_max]``.

    Coarse scan, fine scan of one coarse step either side of the coarse
    maximum, then the vertex of a least-squares parabola through the fine
    samples.  Every candidate is scored on the
    same output window (the support shared by the whole range) so that
    scores are comparable.
    """
    if not s_min < s_max:
        raise DomainError("s_min must be < s_max")
    n = int(math.floor((s_max - s_min) / coarse + 1e-9))
    grid = s_min + coarse * np.arange(n + 1)
    grid = np.array([s for s in grid if can_refocus(lf, s, equalize=equalize)])
    if grid.size == 0:
        raise DomainError("no shift in range leaves enough overlap to refocus")
    (a0, a1), (b0, b1) = refocus_support(lf, grid[0], equalize)
    (c0, c1), (d0, d1) = refocus_support(lf, grid[-1], equalize)
    window = ((max(a0, c0), min(a1, c1)), (max(b0, d0), min(b1, d1)))
    if min(window[0][1] - window[0][0], window[1][1] - window[1][0]) + 1 < MIN_OVERLAP:
        raise DomainError("shift range too wide: common refocus window is too small")
    scores = _scores(lf, grid, window, equalize)
    flags = []
    spread = scores.max() - scores.min()
    if scores.max() <= 1e-20 or spread <= 1e-9 * scores.max():
        flags.append("ambiguous")
    elif len(signal.find_peaks(np.r_[-np.inf, scores, -np.inf], prominence=0.1 * spread)[0]) > 1:
        flags.append("multimodal")
    b = int(np.argmax(scores))

    m = int(round(coarse / fine))
    fine_grid = grid[b] + fine * np.arange(-m, m + 1)
    fine_grid = np.array([s for s in fine_grid if s_min - 1e-12 <= s <= s_max + 1e-12
                          and grid[0] - 1e-12 <= s <= grid[-1] + 1e-12])
    fine_scores = _scores(lf, fine_grid, window, equalize)
    f = int(np.argmax(fine_scores))
    shift = float(fine_grid[f])
    if len(fine_grid) >= 3:
        # least-squares parabola over the whole fine window
        x = fine_grid - grid[b]
        c2, c1, _ = np.polyfit(x, fine_scores / fine_scores.max(), 2)
        if c2 < 0:
            shift = float(grid[b] + np.clip(-c1 / (2.0 * c2), x.min(), x.max()))
    img = refocus(lf, shift, window, equalize)
    return FocusReport(shift, focus_measure(img), img, tuple(flags), grid, scores)


# ---------------------------------------------------------------------------
# files

_LF_MAGIC = b"LF4D"
_LF_HEADER = struct.Struct("<4s4I2I2d")


def dumps_lf4d(lf: LightField4D) -> bytes:
    k, l, i, j = lf.samples.shape
    head = _LF_HEADER.pack(_LF_MAGIC, k, l, i, j, lf.center_k, lf.center_l,
                           float(lf.delta_st), float(lf.delta_uv))
    return head + np.ascontiguousarray(lf.samples, dtype="<f4").tobytes()


def loads_lf4d(data: bytes) -> LightField4D:
    if len(data) < _LF_HEADER.size or data[:4] != _LF_MAGIC:
        raise InputParseError("not an LF4D light-field file")
    _, k, l, i, j, ck, cl, d_st, d_uv = _LF_HEADER.unpack_from(data)
    n = k * l * i * j
    body = data[_LF_HEADER.size:]
    if len(body) != 4 * n:
        raise InputParseError(f"LF4D payload has {len(body)} bytes, expected {4 * n}")
    samples = np.frombuffer(body, dtype="<f4").reshape(k, l, i, j)
    try:
        return LightField4D(samples, d_st, d_uv, ck, cl)
    except DomainError as exc:
        raise InputParseError(str(exc)) from exc


def save_lf4d(lf, path):
    Path(path).write_bytes(dumps_lf4d(lf))


def load_lf4d(path) -> LightField4D:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputParseError(str(exc)) from exc
    return loads_lf4d(data)


def dumps_pgm(img) -> bytes:
    """16-bit binary PGM; float images are read as fractions of full scale."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise DomainError("PGM images must be 2D")
    if img.dtype.kind == "f":
        img = np.round(np.clip(img, 0.0, 1.0) * 65535.0)
    h, w = img.shape
    return f"P5\n{w} {h}\n65535\n".encode() + img.astype(">u2").tobytes()


def loads_pgm(data: bytes) -> np.ndarray:
    """Parse a binary PGM and return values scaled to [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputParseError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise InputParseError("only binary PGM (P5) is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise InputParseError("bad PGM header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    size = w * h * np.dtype(dtype).itemsize
    if len(data) - pos != size:
        raise InputParseError("PGM payload size mismatch")
    return np.frombuffer(data[pos:], dtype=dtype).reshape(h, w) / float(maxval)


def load_raw(path) -> np.ndarray:
    """Raw or white image from PGM or a (1, 1, h, w) LF4D container."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputParseError(str(exc)) from exc
    if data[:4] == _LF_MAGIC:
        lf = loads_lf4d(data)
        if lf.samples.shape[:2] != (1, 1):
            raise InputParseError("raw image containers must have a single view")
        return lf.samples[0, 0]
    return loads_pgm(data)


def save_raw(img, path):
    """Write a raw image; ``.pgm`` quantises to 16 bit, anything else is LF4D."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        path.write_bytes(dumps_pgm(img))
    else:
        save_lf4d(LightField4D(np.asarray(img, float)[None, None], 1.0, 1.0, 0, 0), path)
