"""Acceptance criteria 1 to 10.

Each test prints a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (also collected into the terminal summary) and then asserts.
"""

import math
import re
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import hand_regression, thick_lens_bfd, thick_lens_focal, thin_lens_focal
from pupilfield import cli
from pupilfield import error_models as em
from pupilfield import experiments as ex
from pupilfield import lensdb, optics, spc, synth
from pupilfield import lightfield as lfm
from pupilfield.optics import LensPrescription, OpticalSurface, Ray2D

S_ = OpticalSurface


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def random_configs(rng, n, infinite=False):
    out = []
    while len(out) < n:
        f_M = rng.uniform(20, 300)
        o_f = math.inf if infinite else rng.uniform(1.5, 100) * f_M
        out.append(spc.SpcConfig.from_main_lens(
            f_M, rng.uniform(-1.0, 0.8) * f_M, o_f, rng.uniform(0.1, 5),
            rng.uniform(0.01, 0.5), rng.uniform(0.001, 0.02)))
    return out


def object_distance(rng, c):
    # spread over both sides of the focus plane, clear of the focal plane
    base = c.o_f_finite if not c.infinite_focus else 100 * c.f_M
    return max(rng.uniform(0.3, 20) * base, rng.uniform(1.05, 2.0) * c.f_M)


def rel(a, b):
    return abs(a - b) / abs(b)


# -- 1 -------------------------------------------------------------------------------------

def test_criterion_1_equivalence():
    rng = np.random.default_rng(1)
    cases = []
    for c in random_configs(rng, 1000):
        o = object_distance(rng, c)
        cases.append((c, o, spc.shift_from_distance(c, o)))
    t0 = time.perf_counter()
    worst = max(abs(spc.hahne_distance_from_shift(c, S) - spc.distance_from_shift(c, S)) / o
                for c, o, S in cases)
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-9 and elapsed < 1.0,
            f"max relative difference {worst:.2e} (<= 1e-9) in {elapsed:.3f} s (< 1 s)")


# -- 2 -------------------------------------------------------------------------------------

def test_criterion_2_identities():
    rng = np.random.default_rng(2)
    worst_rt, worst_focus, worst_x0 = 0.0, 0.0, 0.0
    for infinite in (False, True):
        for c in random_configs(rng, 200, infinite):
            worst_focus = max(worst_focus, abs(spc.shift_from_distance(c, c.o_f)))
            back = spc.distance_from_shift(c, 0.0)
            worst_focus = max(worst_focus, 0.0 if back == c.o_f else rel(back, c.o_f))
            o = object_distance(rng, c)
            worst_rt = max(worst_rt, rel(spc.distance_from_shift(c, spc.shift_from_distance(c, o)), o))

            c0 = c.with_changes(X=0.0)
            g = spc.geometry(c0)
            s, s_n = spc.shift_from_distance(c0, o), spc.shift_from_distance(c0, o, "naive")
            pairs = [(g.delta, g.delta_naive), (g.m_proj_correct, g.m_proj_naive),
                     (g.d_mli, g.d_mli_naive), (s, s_n),
                     (spc.distance_from_shift(c0, s), spc.distance_from_shift(c0, s, "naive"))]
            worst_x0 = max([worst_x0] + [abs(a - b) / max(1.0, abs(b)) for a, b in pairs])
            worst_x0 = max(worst_x0, abs(spc.pertuz_params(c0, "corrected").a0))
    ok = worst_rt <= 1e-9 and worst_focus <= 1e-9 and worst_x0 <= 1e-12
    verdict(2, ok, f"round trip {worst_rt:.1e}, focus plane {worst_focus:.1e} (<= 1e-9); "
                   f"X=0 collapse {worst_x0:.1e} (<= 1e-12)")


# -- 3 -------------------------------------------------------------------------------------

def test_criterion_3_error_closed_forms():
    rng = np.random.default_rng(3)
    pairs = ((em.shift_error, em.shift_error_lambda),
             (em.distance_error_naive_model, em.distance_error_naive_model_lambda),
             (em.distance_error_naive_shift, em.distance_error_naive_shift_lambda))
    worst, used, exact_at_one = 0.0, 0, True
    configs = random_configs(rng, 10_000)
    for c in configs:
        lam = rng.uniform(0.3, 20)
        o = lam * c.o_f
        if o <= 1.05 * c.f_M:
            continue
        used += 1
        for composed, closed in pairs:
            a, b = composed(c, o), closed(c, lam)
            # close to a pole both forms lose digits together; the bound is
            # stated on the non-singular domain
            if abs(b) <= 1.0:
                worst = max(worst, abs(a - b))
        exact_at_one &= all(closed(c, 1.0) == 0.0 for _, closed in pairs)
    limits = []
    for c in configs[:200] + [spc.preset("presetA")]:
        want = c.X / (c.o_f * (c.X / c.d - 1))
        limits.append(abs(em.shift_error_lambda(c, 1e6) - want))
    lim = max(limits)
    ok = worst <= 1e-12 and exact_at_one and lim <= 1e-6
    verdict(3, ok, f"{used} samples, max |closed - composed| {worst:.1e} (<= 1e-12); "
                   f"E(1)=0 exactly: {exact_at_one}; limit gap at 1e6 {lim:.1e} (<= 1e-6)")


# -- 4 -------------------------------------------------------------------------------------

def test_criterion_4_refocusing(sweeps, sweep_cache):
    parts, ok = [], True
    for name in ("presetA", "presetA_inf"):
        recs = sweeps(name)
        mean = ex.mean_abs([r.s_measured - r.s_model for r in recs])
        secs = sweep_cache["seconds", name, "shift"]
        ok &= mean <= 0.02 and secs < 60
        parts.append(f"{name} mean {mean:.4f} px in {secs:.1f} s")
    verdict(4, ok, "; ".join(parts) + " (<= 0.02 px, < 60 s)")


# -- 5 -------------------------------------------------------------------------------------

def test_criterion_5_error_validation(sweeps):
    recs = sweeps("presetA", "errors")
    means = {k: ex.mean_abs([r.e_measured - r.e_model for r in recs if r.experiment == k])
             for k in ("III", "IV")}
    verdict(5, all(m <= 0.01 for m in means.values()),
            f"III mean {means['III']:.4f}, IV mean {means['IV']:.4f} (<= 0.01)")


# -- 6 -------------------------------------------------------------------------------------

def test_criterion_6_pertuz(sweeps):
    gaps = {}
    for name in ("presetA", "presetA_inf"):
        fit = ex.exp_pertuz_fit(spc.preset(name), sweeps(name))
        gaps[name] = fit.rmse_corrected - fit.rmse_fit
    c = spc.preset("presetA_inf")
    po, pc = spc.pertuz_params(c, "original"), spc.pertuz_params(c, "corrected")
    want = (c.d_finite - c.f_M) / (c.f_M - c.X)
    ratio_err = abs((po.a1 / pc.a1 - 1) - want) / want
    ok = all(g <= 2.0 for g in gaps.values()) and ratio_err <= 1e-9
    verdict(6, ok, ", ".join(f"{k} rmse gap {v:.3f} mm" for k, v in gaps.items())
            + f" (<= 2 mm); infinite a1 ratio error {ratio_err:.1e} (<= 1e-9)")


# -- 7 -------------------------------------------------------------------------------------

def test_criterion_7_mic():
    rep = ex.exp_mic_verify(spc.bundled_prescription("displaced_stop"), spc.preset("displaced_stop"))
    off = rep.relative_offset(0.25)
    pitch = rel(rep.pitch_measured, rep.pitch_expected)
    verdict(7, off <= 0.01 and pitch <= 1e-3,
            f"inner 25% min-blur offset {off:.2e} of pupil distance (<= 1%); "
            f"MIC pitch error {pitch:.1e} (<= 0.1%)")


# -- 8 -------------------------------------------------------------------------------------

def test_criterion_8_optics_kernel():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(300):
        r1, r2 = rng.uniform(20, 500), -rng.uniform(20, 500)
        t, n = rng.choice([0.0, rng.uniform(0.5, 15)]), rng.uniform(1.3, 1.9)
        want = thin_lens_focal(n, r1, r2) if t == 0 else thick_lens_focal(n, r1, r2, t)
        p = LensPrescription((S_(r1, t, n, 5.0, True), S_(r2, 0.0, 1.0, 5.0)))
        worst = max(worst, rel(optics.paraxial_summary(p).f_M, want))

    p = LensPrescription((S_(100, 10, 1.5, 20, True), S_(-100, 0.0, 1.0, 20)))
    bfd = thick_lens_bfd(1.5, 100, -100, 10) + p.vertices[-1]
    errs = []
    for h in (2.0, 1.0, 0.5, 0.25):
        r = optics.trace_meridional(p, Ray2D(h, 0.0, -10.0)).final
        errs.append(abs(r.axial_position - r.height / math.tan(r.angle) - bfd))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]

    last = LensPrescription((S_(100, 5.0, 1.5, 10), S_(-100, 20.0, 1.0, 10),
                             S_(None, 0.0, 1.0, 4.0, True)))
    pupil = optics.paraxial_summary(last).exit_pupil_position
    ok = worst <= 1e-9 and min(orders) >= 1.95 and abs(pupil) <= 1e-12
    verdict(8, ok, f"lensmaker max rel error {worst:.1e} (<= 1e-9); convergence order "
                   f"{min(orders):.2f} (>= 2); stop-last pupil offset {abs(pupil):.1e} mm")


# -- 9 -------------------------------------------------------------------------------------

def test_criterion_9_statistics(tmp_path, capsys):
    pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 4.0)]
    rep = lensdb.regression([lensdb.LensRecord(str(i), f, x) for i, (f, x) in enumerate(pts)])
    slope, intercept, r = hand_regression(*zip(*pts))
    oracle = max(abs(rep.slope - slope), abs(rep.intercept - intercept), abs(rep.pearson_r - r))
    oracle = max(oracle, abs(rep.slope - 2), abs(rep.intercept + 1 / 3), abs(rep.pearson_r - 0.96077) - 5e-6)

    f = np.array([20.0, 35.0, 85.0, 200.0, 600.0])
    line = lensdb.regression([lensdb.LensRecord("l", a, 0.7 * a - 50) for a in f])

    # the batch pipeline on a directory of prescriptions
    for name in ("displaced_stop", "symmetric_biconvex", "telephoto_doublet"):
        shutil.copy(spc.bundled_prescription_dir() / f"{name}.json", tmp_path)
    code = cli.main(["lens", "db-stats", str(tmp_path), "--out", str(tmp_path / "out")])
    summary = capsys.readouterr().out
    report = (tmp_path / "out" / "lens_regression.csv").read_text().splitlines()
    fmt_ok = (code == 0 and report[0].split(",") == list(lensdb.REPORT_HEADER)
              and re.search(r"X\(f_M\) = -?\d+\.\d{4}\*f_M [+-] \d+\.\d{4}; r = -?\d\.\d{4}; "
                            r"R\^2 = \d\.\d{4}; \|X\|<0\.05f: \d+, \|X\|>0\.25f: \d+, "
                            r"\|X\|>0\.5f: \d+ of 3", summary) is not None)
    ok = oracle <= 1e-9 and line.r_squared == pytest.approx(1.0, abs=1e-12) and fmt_ok
    verdict(9, ok, f"3-point oracle gap {oracle:.1e} (<= 1e-9); collinear R^2 "
                   f"{line.r_squared:.12f}; report format ok: {fmt_ok}")


# -- 10 ------------------------------------------------------------------------------------

def _stable(load, save, src, tmp):
    a, b = tmp / "a", tmp / "b"
    save(load(src), a)
    save(load(a), b)
    return a.read_bytes() == b.read_bytes()


def test_criterion_10_formats(tmp_path, aligned_a):
    results = {}
    presc = sorted(spc.bundled_prescription_dir().glob("*.json"))
    results["prescription"] = all(
        _stable(optics.load_prescription, optics.save_prescription, p, tmp_path) for p in presc)

    shutil.copytree(spc.bundled_prescription_dir(), tmp_path / "prescriptions")
    (tmp_path / "configs").mkdir()
    ok = True
    for name in spc.list_presets():
        src = tmp_path / "configs" / f"{name}.json"
        spc.save_config(spc.preset(name), src)
        ok &= _stable(spc.load_config, spc.save_config, src, tmp_path / "configs")
    results["SPC config"] = ok

    lf = synth.synth_lightfield(aligned_a, synth.PatternSpec(), 700.0)
    lfm.save_lf4d(lf, tmp_path / "lf.lf4d")
    results["LF4D"] = _stable(lfm.load_lf4d, lfm.save_lf4d, tmp_path / "lf.lf4d", tmp_path)

    recs = ex.exp_shift_sweep(aligned_a, [400.0, 1000.0], inverse=False)
    (tmp_path / "s.csv").write_text(ex.dumps_sweep(recs, ex.sweep_comments(aligned_a, n_views=10)))
    results["sweep CSV"] = _stable(
        lambda p: ex.loads_sweep(p.read_text()),
        lambda rc, p: p.write_text(ex.dumps_sweep(*rc)), tmp_path / "s.csv", tmp_path)

    raw = np.random.default_rng(10).random((650, 650))
    results["decode/interleave"] = (np.array_equal(lfm.interleave(lfm.decode(raw, aligned_a)), raw)
                                    and np.array_equal(lfm.decode(lfm.interleave(lf), aligned_a).samples,
                                                       lf.samples))
    verdict(10, all(results.values()), ", ".join(f"{k} {'ok' if v else 'MISMATCH'}"
                                                 for k, v in results.items()))
