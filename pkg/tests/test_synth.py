import math

import numpy as np
import pytest
from skimage.filters import window
from skimage.registration import phase_cross_correlation

from pupilfield import lightfield as lfm
from pupilfield import optics, spc, synth
from pupilfield.exceptions import DomainError
from pupilfield.synth import PatternSpec


def _disparity(a, b):
    """Row and column offset of ``b`` relative to ``a`` (px)."""
    shift, _, _ = phase_cross_correlation(a, b, upsample_factor=200, normalization=None)
    return -shift


def _xcorr(a, b, upsample=1000):
    w = window("hann", a.shape)
    return phase_cross_correlation((a - a.mean()) * w, (b - b.mean()) * w,
                                   upsample_factor=upsample, normalization=None)[0][0]


def _row_disparity(a, b):
    """Row offset of ``b`` relative to ``a``.

    A coarse windowed correlation gives the whole-pixel part; the views are
    then cropped to their overlap and correlated again for the remainder.
    """
    m = int(round(_xcorr(a, b, 10)))
    n = a.shape[0]
    a2, b2 = (a[m:], b[:n - m]) if m >= 0 else (a[:n + m], b[-m:])
    return -(m + _xcorr(a2, b2))


def _view_step_disparity(lf):
    """Least-squares slope of row disparity against view index."""
    ck = lf.center_k
    ks = np.arange(lf.samples.shape[0])
    d = [_row_disparity(lf.view(ck, ck), lf.view(k, ck)) for k in ks]
    return np.polyfit(ks - ck, d, 1)[0]


# -- patterns -------------------------------------------------------------------

def test_pattern_spec_validation():
    for kw in ({"kind": "noise"}, {"resolution": 8}, {"spokes": 1}, {"period": 0}):
        with pytest.raises(DomainError):
            PatternSpec(**kw)
    assert PatternSpec.parse("star:6").spokes == 6
    assert PatternSpec.parse("checker:16").period == 16
    assert PatternSpec.parse("constant").kind == "constant"


def test_constant_pattern_is_uniform():
    assert np.all(synth.render_pattern(PatternSpec("constant", resolution=32)) == 1.0)


def test_star_tie_goes_to_lower_sector():
    # 4 spokes: boundaries every 45 degrees; pixel centres on the diagonal sit on one
    img = synth.render_pattern(PatternSpec(spokes=4, resolution=16, smoothing=0))
    n = 16
    # centre (row 12, col 12) -> (3.5, 3.5): theta = pi/4 exactly, sector 0 (white)
    assert img[12, 12] == 1.0
    # just above the diagonal is sector 1
    assert img[13, 12] == 0.0 and img[12, 13] == 1.0
    assert img.shape == (n, n)


def test_star_rotated_by_one_sector_is_complement():
    p = PatternSpec(spokes=6, resolution=64, smoothing=0)
    a = synth.render_pattern(p)
    b = synth.render_pattern(PatternSpec(spokes=6, resolution=64, smoothing=0, rotation=math.pi / 6))
    # pixels on sector boundaries follow the tie rule in both images and are excluded
    c = np.arange(64) + 0.5 - 32
    yy, xx = np.meshgrid(c, c, indexing="ij")
    x = 6 * np.mod(np.arctan2(yy, xx), 2 * np.pi) / np.pi
    interior = np.abs(x - np.round(x)) > 1e-6
    assert np.array_equal(a[interior], 1.0 - b[interior])


def test_checkerboard_period():
    img = synth.render_pattern(PatternSpec("checkerboard", period=8, resolution=32, smoothing=0))
    assert img[0, 0] == 1.0 and img[0, 8] == 0.0 and img[8, 8] == 1.0 and img[7, 7] == 1.0


# -- light fields ----------------------------------------------------------------

def test_views_agree_at_focus(aligned_a):
    lf = synth.synth_lightfield(aligned_a, PatternSpec(), aligned_a.o_f)
    ref = lf.central_view
    for k, l in ((0, 0), (0, 9), (9, 4), (3, 6)):
        assert np.max(np.abs(_disparity(ref, lf.view(k, l)))) <= 0.01


def test_disparity_at_1000_preset_a(preset_a):
    # the generator works on unaligned configs too; only decode needs whole pixels
    lf = synth.synth_lightfield(preset_a, PatternSpec(), 1000.0)
    assert _view_step_disparity(lf) == pytest.approx(-1.6601563, abs=0.01)


@pytest.mark.parametrize("o", [400.0, 2000.0])
def test_disparity_matches_shift_model(aligned_a, o):
    lf = synth.synth_lightfield(aligned_a, PatternSpec(), o)
    assert _view_step_disparity(lf) == pytest.approx(spc.shift_from_distance(aligned_a, o), abs=0.01)
    ck = lf.center_k
    # moving along l leaves the row coordinate alone
    assert abs(_row_disparity(lf.view(ck, ck), lf.view(ck, ck + 2))) <= 0.01


def test_constant_pattern_views_identical(aligned_a):
    for o in (300.0, 1000.0):
        lf = synth.synth_lightfield(aligned_a, PatternSpec("constant"), o)
        # spline prefiltering leaves one-ulp ripples
        assert np.ptp(lf.samples) <= 1e-12


def test_synth_lightfield_errors_and_flags(aligned_a):
    with pytest.raises(DomainError):
        synth.synth_lightfield(aligned_a, PatternSpec(), 90.0)
    with pytest.raises(DomainError):
        synth.synth_lightfield(aligned_a.with_changes(micro_count=(0, 0)), PatternSpec(), 1000.0)
    lf = synth.synth_lightfield(aligned_a, PatternSpec(physical_width=1.0), 1000.0)
    assert "pattern-does-not-cover-view" in lf.flags


def test_synth_raw_round_trip(aligned_a):
    lf = synth.synth_lightfield(aligned_a, PatternSpec(), 700.0)
    raw, white = synth.synth_raw(aligned_a, lf)
    assert raw.shape == (650, 650) and np.all(white == 1.0)
    assert np.array_equal(lfm.decode(raw, aligned_a).samples, lf.samples)
    assert np.array_equal(synth.synth_raw(aligned_a, lfm.decode(raw, aligned_a))[0], raw)


def test_synth_raw_single_microlens(aligned_a):
    c = aligned_a.with_changes(micro_count=(1, 1))
    lf = lfm.LightField4D(np.random.default_rng(0).random((10, 10, 1, 1)), c.d_ML, 0.01)
    raw, _ = synth.synth_raw(c, lf)
    assert np.array_equal(raw, lf.samples[:, :, 0, 0])


def test_synth_raw_size_mismatch(aligned_a):
    with pytest.raises(DomainError):
        synth.synth_raw(aligned_a, lfm.LightField4D(np.zeros((9, 9, 65, 65)), 0.1, 0.01))


# -- MIC ground truth --------------------------------------------------------------

@pytest.fixture(scope="module")
def displaced():
    return spc.bundled_prescription("displaced_stop"), spc.preset("displaced_stop")


def test_mic_on_axis_is_zero(displaced):
    p, c = displaced
    g = synth.mic_forward_trace(p, c, n_lenses=5)
    assert g.ml_center[2] == 0.0
    assert abs(g.mic[2]) <= 1e-12
    np.testing.assert_allclose(g.mic[:2], -g.mic[:-3:-1], rtol=1e-9)


def test_mic_pitch_stop_at_lens():
    p, c = spc.bundled_prescription("symmetric_biconvex"), spc.preset("symmetric_biconvex")
    assert abs(c.X) < 1e-9
    g = synth.mic_forward_trace(p, c, n_lenses=9)
    assert g.pitch_ratio() * c.d_ML == pytest.approx(c.d_ML * (1 + c.f_m / c.d), rel=1e-3)


def test_mic_pitch_displaced_stop(displaced):
    p, c = displaced
    g = synth.mic_forward_trace(p, c)
    expected = c.d_ML * (1 + c.f_m / (c.d - c.X))
    naive = c.d_ML * (1 + c.f_m / c.d)
    measured = g.pitch_ratio() * c.d_ML
    assert measured == pytest.approx(expected, rel=1e-3)
    assert abs(measured - naive) > 10 * abs(measured - expected)


def test_mic_variance_shrinks_with_fan(displaced):
    p, c = displaced
    wide = synth.mic_forward_trace(p, c, n_lenses=9, aperture_fraction=1.0)
    narrow = synth.mic_forward_trace(p, c, n_lenses=9, aperture_fraction=0.25)
    assert np.all(narrow.variance <= wide.variance)
    assert narrow.variance.max() < wide.variance.max()


def test_mic_csv_and_errors(displaced):
    p, c = displaced
    g = synth.mic_forward_trace(p, c, n_lenses=3)
    lines = g.to_csv().splitlines()
    assert lines[0] == "ml_index,ml_center_mm,mic_mm,variance_mm2" and len(lines) == 4
    with pytest.raises(DomainError):
        synth.mic_forward_trace(p, c, rays_per_bundle=4)
    with pytest.raises(DomainError):
        synth.mic_forward_trace(p, c.with_changes(X=0.0))


def test_backtrace_converges_at_stop_for_zero_x():
    p, c = spc.bundled_prescription("symmetric_biconvex"), spc.preset("symmetric_biconvex")
    rays = synth.mic_backtrace(synth.mic_forward_trace(p, c, n_lenses=9), c)
    rep = optics.min_blur_spot(rays, -20.0, c.d - 1e-3)
    assert abs(rep.best_axial_position) <= 0.01 * c.f_M
    assert rep.rms_radius_at_best <= 1e-4


def test_backtrace_displaced_stop(displaced):
    p, c = displaced
    rays = synth.mic_backtrace(synth.mic_forward_trace(p, c, n_lenses=9), c)
    rep = optics.min_blur_spot(rays, c.X - c.f_M, c.d - 1e-3)
    assert rep.best_axial_position == pytest.approx(c.X, rel=0.01)


def test_backtrace_needs_rays(displaced):
    g = synth.MicGroundTruth(np.arange(1), np.zeros(1), np.full(1, np.nan), np.full(1, np.nan))
    with pytest.raises(DomainError):
        synth.mic_backtrace(g, displaced[1])
