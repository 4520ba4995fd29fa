"""Regenerate the bundled prescriptions and SPC configurations.

Run from the repository root: ``python3 tools/make_presets.py``.
"""

import math
from pathlib import Path

from pupilfield.optics import LensPrescription, OpticalSurface as S, paraxial_summary, save_prescription
from pupilfield.spc import SpcConfig, config_to_dict, design_spc, dumps_config

DATA = Path(__file__).resolve().parents[1] / "src" / "pupilfield" / "data"

PRESCRIPTIONS = {
    # equiconvex singlet split by a central stop: pupils coincide with H
    "symmetric_biconvex": LensPrescription((
        S(100.0, 1.0, 1.5, 15.0),
        S(None, 1.0, 1.5, 6.25, is_stop=True),
        S(-100.0, 0.0, 1.0, 15.0),
    ), name="symmetric_biconvex"),
    # front stop 30 mm ahead of a biconvex singlet: virtual exit pupil in front
    "displaced_stop": LensPrescription((
        S(None, 30.0, 1.0, 6.0, is_stop=True),
        S(100.0, 4.0, 1.5, 15.0),
        S(-100.0, 0.0, 1.0, 15.0),
    ), name="displaced_stop"),
    # positive group, stop, negative group
    "telephoto_doublet": LensPrescription((
        S(52.0, 4.0, 1.5168, 15.0),
        S(-52.0, 10.0, 1.0, 15.0),
        S(None, 10.0, 1.0, 5.0, is_stop=True),
        S(-103.0, 2.0, 1.5168, 10.0),
        S(103.0, 0.0, 1.0, 10.0),
    ), name="telephoto_doublet"),
}

# (name, f_M, X, o_f, f_m, ML pitch um, sensor width mm, microimages per side)
TABLES = [
    ("rodenstock_finite", 99.998, 0.194, 500.0, 1.290, 178.158, 23.220, 129),
    ("zeiss_finite", 82.047, 40.652, 500.0, 2.084, 173.703, 23.220, 129),
    ("ricoh_finite", 167.994, 99.909, 500.0, 3.261, 176.246, 23.220, 129),
    ("canon_finite", 84.998, -28.938, 300.0, 1.779, 177.856, 23.220, 129),
    ("olympus_finite", 85.120, -60.219, 300.0, 0.884, 110.567, 7.222, 65),
    ("rodenstock_infinite", 99.998, 0.194, math.inf, 1.032, 178.158, 23.220, 129),
    ("zeiss_infinite", 82.860, 39.572, math.inf, 0.998, 175.944, 23.220, 129),
    ("ricoh_infinite", 173.115, 91.525, math.inf, 1.230, 177.164, 23.200, 129),
    ("canon_infinite", 84.998, -28.938, math.inf, 1.383, 177.840, 23.220, 129),
    ("olympus_infinite", 85.004, -60.308, math.inf, 1.297, 171.492, 22.320, 129),
]


def write(name, c):
    (DATA / "configs" / f"{name}.json").write_text(dumps_config(c))


def main():
    (DATA / "prescriptions").mkdir(parents=True, exist_ok=True)
    (DATA / "configs").mkdir(parents=True, exist_ok=True)
    for name, p in PRESCRIPTIONS.items():
        save_prescription(p, DATA / "prescriptions" / f"{name}.json")

    write("presetA", SpcConfig.from_main_lens(100.0, 40.0, 500.0, 1.0, 0.1, 0.01, (658, 658), (65, 65),
                                              name="presetA"))
    write("presetA_inf", SpcConfig.from_main_lens(100.0, 40.0, math.inf, 1.0, 0.1, 0.01, (658, 658),
                                                  (65, 65), name="presetA_inf"))
    for name, p in PRESCRIPTIONS.items():
        c = design_spc(paraxial_summary(p), 1000.0, 0.01, (650, 650), (65, 65), name=name)
        d = config_to_dict(c)
        d.pop("f_M"), d.pop("X")
        c = SpcConfig(**{**c.__dict__, "prescription": f"../prescriptions/{name}.json"})
        write(name, c)
    for name, f_M, X, o_f, f_m, pitch, width, count in TABLES:
        px = count * 10
        write(name, SpcConfig.from_main_lens(f_M, X, o_f, f_m, pitch / 1000.0, width / px, (px, px),
                                             (count, count), 0.1, name=name))


if __name__ == "__main__":
    main()
