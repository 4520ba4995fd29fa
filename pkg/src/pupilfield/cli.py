"""Command line interface: ``pupilfield <group> <action> ...``.

Every run writes its tables into ``--out`` together with ``manifest.json``.
Exit codes: 0 success, 2 usage, 3 unreadable input, 4 domain or model error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from . import error_models as em
from . import experiments as ex
from . import lensdb, lightfield, spc, synth
from .exceptions import DomainError, InputParseError, PupilFieldError
from .optics import ParaxialSummary, load_prescription, paraxial_summary
from .tables import dumps_csv, read_csv

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DOMAIN = 0, 2, 3, 4
MANIFEST = "manifest.json"
OVERRIDABLE = ("f_M", "X", "o_f", "f_m", "d_ML", "s_px", "mla_thickness")


@dataclass
class RunManifest:
    subcommand: str
    inputs: list[str]
    overrides: dict
    out: str
    version: str = __version__
    input_hash: str = ""
    parameters: dict = field(default_factory=dict)

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        path = Path(p)
        h.update(str(p).encode())
        h.update(b"\0")
        if path.is_file():
            h.update(path.read_bytes())
        elif path.is_dir():
            for f in sorted(path.glob("*.json")):
                h.update(f.name.encode())
                h.update(f.read_bytes())
    return h.hexdigest()


class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, args, inputs):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.svg = getattr(args, "svg", False)
        self.written = []
        self.manifest = RunManifest(args.command_name, [str(p) for p in inputs],
                                    _overrides(getattr(args, "set", None)), str(args.out),
                                    input_hash=hash_inputs(inputs),
                                    parameters=_parameters(args))

    def text(self, name, content):
        path = self.out / name
        path.write_text(content)
        self.written.append(name)
        return path

    def data(self, name, content: bytes):
        path = self.out / name
        path.write_bytes(content)
        self.written.append(name)
        return path

    def path(self, name):
        self.written.append(name)
        return self.out / name

    def finish(self):
        (self.out / MANIFEST).write_text(self.manifest.dumps())
        for name in self.written:
            print(self.out / name)


def _parameters(args):
    skip = {"func", "command_name", "out", "set", "svg", "inputs"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip or k.startswith("_"):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


# ---------------------------------------------------------------------------
# argument helpers


def _float_or_inf(text):
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'inf', got {text!r}")


def _pair(text):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")


def _range(text):
    try:
        a, b = text.split(":")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}")


def _override(text):
    key, sep, value = text.partition("=")
    if not sep or key not in OVERRIDABLE:
        raise argparse.ArgumentTypeError(
            f"expected KEY=VALUE with KEY in {', '.join(OVERRIDABLE)}, got {text!r}")
    return key, _float_or_inf(value)


def _overrides(items):
    return dict(items or ())


def _config(args):
    c = spc.load_config(args.config)
    changes = _overrides(getattr(args, "set", None))
    if changes:
        if {"f_M", "X"} & changes.keys():
            changes["prescription"] = None
        c = c.with_changes(**changes)
    return c


def _config_inputs(args):
    path = Path(args.config)
    return [path] if path.exists() else []


def _load_summary(path) -> ParaxialSummary:
    """Paraxial summary from a prescription JSON, a summary JSON or summary CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _, header, rows = read_csv(path)
        if not rows:
            raise InputParseError(f"{path} holds no summary row")
        data = dict(zip(header, rows[0]))
    else:
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputParseError(f"cannot read {path}: {exc}") from exc
        if "surfaces" in data:
            return paraxial_summary(load_prescription(path))
    try:
        return ParaxialSummary(float(data["f_M"]), float(data["h_scene"]), float(data["h_cam"]),
                               float(data["exit_pupil_position"]),
                               float(data["exit_pupil_radius"]), float(data["X"]),
                               float(data.get("stop_position", 0.0)), str(data.get("name", "")))
    except (KeyError, ValueError) as exc:
        raise InputParseError(f"malformed lens summary {path}: {exc!r}") from exc


SUMMARY_HEADER = ("name", "f_M", "h_scene", "h_cam", "exit_pupil_position",
                  "exit_pupil_radius", "X", "stop_position")


def _summary_row(s):
    return (s.name, s.f_M, s.h_scene, s.h_cam, s.exit_pupil_position,
            s.exit_pupil_radius, s.X, s.stop_position)


def _config_comment(c):
    return ex.sweep_comments(c)


# ---------------------------------------------------------------------------
# commands


def cmd_lens_summarize(args):
    run = Run(args, [args.prescription])
    s = paraxial_summary(load_prescription(args.prescription))
    run.text("lens_summary.csv", dumps_csv(SUMMARY_HEADER, [_summary_row(s)]))
    print(f"{s.name}: f_M={s.f_M:.6g} mm  X={s.X:.6g} mm  exit pupil radius={s.exit_pupil_radius:.6g} mm")
    return run


def cmd_lens_db_stats(args):
    run = Run(args, [args.directory])
    records, failures = lensdb.analyze_collection(args.directory)
    rep = lensdb.regression(records)
    run.text("lens_records.csv", lensdb.dumps_records(records))
    run.text("lens_regression.csv", lensdb.dumps_report(rep, failures))
    if run.svg:
        lensdb.plot_svg(records, rep, run.path("lens_regression.svg"))
    print(rep.summary_line())
    return run


def cmd_spc_design(args):
    run = Run(args, [args.lens])
    s = _load_summary(args.lens)
    c = spc.design_spc(s, args.focus, args.pixel, args.sensor, args.micro,
                       args.mla_thickness, args.name or s.name)
    if Path(args.lens).suffix.lower() == ".json" and "surfaces" in Path(args.lens).read_text():
        # relative to the written config so the output directory stays portable
        c = replace(c, prescription=os.path.relpath(Path(args.lens).resolve(), run.out.resolve()))
    run.text("spc_config.json", spc.dumps_config(c))
    _write_tables(run, c)
    return run


def _write_tables(run, c):
    g = spc.geometry(c)
    geo_header = ("F", "delta_st", "delta_uv", "delta", "delta_naive", "d_mli", "d_mli_naive",
                  "m_proj_correct", "m_proj_naive", "microimage_px")
    k = spc.microimage_pixels(c)
    run.text("spc_geometry.csv", dumps_csv(
        geo_header, [(g.F, g.delta_st, g.delta_uv, g.delta, g.delta_naive, g.d_mli,
                      g.d_mli_naive, g.m_proj_correct, g.m_proj_naive,
                      "" if k is None else k)], _config_comment(c)))
    rows = [(v, p.a0, p.a1) for v in ("original", "corrected")
            for p in [spc.pertuz_params(c, v)]]
    run.text("spc_pertuz.csv", dumps_csv(("variant", "a0", "a1"), rows, _config_comment(c)))
    print(f"Delta={g.delta:.6g} px  Delta_naive={g.delta_naive:.6g} px  d_mli={g.d_mli:.6g} mm  "
          f"M_proj={g.m_proj_correct:.6g} (naive {g.m_proj_naive:.6g})")
    for v, a0, a1 in rows:
        print(f"pertuz {v}: a0={a0:.6g} a1={a1:.6g}")


def cmd_spc_tables(args):
    run = Run(args, _config_inputs(args))
    _write_tables(run, _config(args))
    return run


def _distances(args, c):
    if args.distances:
        return list(args.distances)
    if args.lambdas:
        return [lam * c.o_f_finite for lam in args.lambdas]
    return ex.default_distances(c)


def _pattern(args):
    return synth.PatternSpec.parse(args.pattern)


def cmd_sweep_shift(args):
    run = Run(args, _config_inputs(args))
    c = _config(args)
    recs = ex.exp_shift_sweep(c, _distances(args, c), _pattern(args), args.views,
                              args.coarse, args.fine, inverse=not args.no_inverse)
    comments = ex.sweep_comments(c, pattern=args.pattern, views=args.views,
                                 coarse=args.coarse, fine=args.fine)
    run.text("sweep_shift.csv", ex.dumps_sweep(recs, comments))
    if run.svg:
        ex.plot_sweep_svg(c, recs, run.path("sweep_shift.svg"), "II")
    err = ex.mean_abs([r.s_measured - r.s_model for r in recs if r.experiment == "II"])
    print(f"mean |s_measured - S(o)| = {err:.6g} px over {len(_distances(args, c))} distances")
    return run


def cmd_sweep_errors(args):
    run = Run(args, _config_inputs(args))
    c = _config(args)
    lambdas = args.lambdas or em.DEFAULT_LAMBDAS
    lambdas = [lam for lam in lambdas if lam * c.o_f_finite > c.f_M]
    recs = em.error_sweep(c, lambdas)
    run.text("sweep_errors.csv", em.dumps_sweep(recs, ex.sweep_comments(c)))
    if args.measured:
        rows = ex.exp_error_sweeps(c, _distances(args, c), _pattern(args), args.views)
        comments = ex.sweep_comments(c, pattern=args.pattern, views=args.views)
        run.text("sweep_errors_measured.csv", ex.dumps_sweep(rows, comments))
        if run.svg:
            for k in ("III", "IV"):
                ex.plot_sweep_svg(c, rows, run.path(f"sweep_errors_{k}.svg"), k)
        for k in ("III", "IV"):
            err = ex.mean_abs([r.e_measured - r.e_model for r in rows if r.experiment == k])
            print(f"{k}: mean |e_measured - e_model| = {err:.6g}")
    return run


def cmd_fit_pertuz(args):
    run = Run(args, _config_inputs(args) + [args.sweep])
    c = _config(args)
    try:
        records, _ = ex.loads_sweep(Path(args.sweep).read_text())
    except OSError as exc:
        raise InputParseError(str(exc)) from exc
    rep = ex.exp_pertuz_fit(c, records)
    run.text("fit_pertuz.csv", ex.dumps_fit(rep, ex.sweep_comments(c)))
    print(f"a0={rep.a0_fit:.6g} a1={rep.a1_fit:.6g} rmse fit={rep.rmse_fit:.6g} mm "
          f"corrected={rep.rmse_corrected:.6g} mm original={rep.rmse_original:.6g} mm")
    return run


def cmd_mic_verify(args):
    run = Run(args, _config_inputs(args))
    c = _config(args)
    if c.prescription is None:
        raise DomainError(f"config {c.name!r} has no prescription to trace")
    p = load_prescription(_prescription_path(args.config, c))
    rep = ex.exp_mic_verify(p, c, rays_per_bundle=args.rays)
    comments = ex.sweep_comments(c) + [
        f"pitch_measured={rep.pitch_measured!r} pitch_expected={rep.pitch_expected!r} "
        f"pitch_naive={rep.pitch_naive!r}"]
    run.text("mic_verify.csv", dumps_csv(rep.HEADER, rep.rows(), comments))
    run.text("mic_ground_truth.csv", rep.ground_truth.to_csv())
    for frac, (n, r) in sorted(rep.subsets.items()):
        print(f"{frac:.0%} ({n} bundles): min blur at {r.best_axial_position:.6g} mm, "
              f"axis mean {r.axis_intersection_mean:.6g} mm, variance {r.axis_intersection_variance:.3g} mm^2")
    print(f"exit pupil X={rep.exit_pupil:.6g} mm; MIC pitch {rep.pitch_measured:.8g} mm "
          f"(model {rep.pitch_expected:.8g}, naive {rep.pitch_naive:.8g})")
    return run


def _prescription_path(config_arg, c):
    path = Path(c.prescription)
    if path.is_absolute():
        return path
    cfg = Path(config_arg)
    if cfg.exists():
        return cfg.parent / path
    return spc.bundled_prescription_dir().parent / "configs" / path


def cmd_lf_decode(args):
    inputs = [args.raw] + ([args.white] if args.white else []) + _config_inputs(args)
    run = Run(args, inputs)
    c = _config(args)
    raw = lightfield.load_raw(args.raw)
    if args.white:
        raw = lightfield.devignette(raw, lightfield.load_raw(args.white)).image
    lf = lightfield.decode(raw, c)
    run.data("lightfield.lf4d", lightfield.dumps_lf4d(lf))
    k, l, i, j = lf.samples.shape
    run.text("decode.csv", dumps_csv(("views_k", "views_l", "rows", "cols", "delta_st_mm",
                                      "delta_uv_mm"), [(k, l, i, j, lf.delta_st, lf.delta_uv)]))
    run.data("central_view.pgm", lightfield.dumps_pgm(lf.central_view))
    return run


def cmd_lf_refocus(args):
    run = Run(args, [args.lightfield])
    lf = lightfield.load_lf4d(args.lightfield)
    img = lightfield.refocus(lf, args.shift, equalize=args.equalize)
    run.data("refocused.pgm", lightfield.dumps_pgm(img))
    run.text("refocus.csv", dumps_csv(("shift", "focus_measure", "rows", "cols"),
                                      [(args.shift, lightfield.focus_measure(img), *img.shape)]))
    return run


def cmd_lf_best_shift(args):
    run = Run(args, [args.lightfield])
    lf = lightfield.load_lf4d(args.lightfield)
    a, b = args.range
    rep = lightfield.best_shift(lf, a, b, args.coarse, args.fine)
    comments = [f"best_shift={rep.shift!r} score={rep.score!r} flags={';'.join(rep.flags)}"]
    run.text("best_shift.csv", dumps_csv(("shift", "focus_measure"),
                                         zip(rep.shifts, rep.scores), comments))
    run.data("refocused.pgm", lightfield.dumps_pgm(rep.refocused))
    print(f"best shift {rep.shift:.6g} px")
    return run


def cmd_synth(args):
    run = Run(args, _config_inputs(args))
    c = _config(args)
    lf = synth.synth_lightfield(c, _pattern(args), args.distance, args.views)
    comments = ex.sweep_comments(c, pattern=args.pattern, distance=args.distance)
    header = ("o_mm", "s_model", "s_naive", "views", "flags")
    row = (args.distance, spc.shift_from_distance(c, args.distance),
           spc.shift_from_distance(c, args.distance, "naive"), lf.samples.shape[0], lf.flags)
    if args.action == "lightfield":
        run.data("lightfield.lf4d", lightfield.dumps_lf4d(lf))
    else:
        raw, white = synth.synth_raw(c, lf, args.vignette)
        run.data("raw.pgm", lightfield.dumps_pgm(raw))
        run.data("white.pgm", lightfield.dumps_pgm(white))
    run.text("synth.csv", dumps_csv(header, [row], comments))
    return run


# ---------------------------------------------------------------------------
# parser


def _common(p, svg=False):
    p.add_argument("--out", default="pupilfield_out", help="output directory (default %(default)s)")
    if svg:
        p.add_argument("--svg", action="store_true", help="also write SVG plots (needs matplotlib)")


def _config_args(p):
    p.add_argument("config", help="SPC config file or bundled preset name")
    p.add_argument("--set", action="append", type=_override, metavar="KEY=VALUE",
                   help=f"override a config value ({', '.join(OVERRIDABLE)})")


def _synth_args(p, views=ex.N_VIEWS):
    p.add_argument("--pattern", default="star:4", help="star:N, checker:PERIOD or constant")
    p.add_argument("--views", type=int, default=views,
                   help="views per axis" + (f" (default {views})" if views else
                                            " (default: one per microimage pixel)"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pupilfield", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    groups = parser.add_subparsers(dest="group", required=True)

    def action(group, name, func, help_text, svg=False):
        p = group.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func, command_name=f"{group_name[group]} {name}")
        _common(p, svg)
        return p

    group_name = {}

    def group(name, help_text):
        g = groups.add_parser(name, help=help_text, description=help_text)
        sub = g.add_subparsers(dest="action", required=True)
        group_name[sub] = name
        return sub

    lens = group("lens", "paraxial lens analysis")
    p = action(lens, "summarize", cmd_lens_summarize, "focal length, principal planes and exit pupil")
    p.add_argument("prescription")
    p = action(lens, "db-stats", cmd_lens_db_stats, "regression of X on f_M over a directory of prescriptions", True)
    p.add_argument("directory")

    g = group("spc", "plenoptic camera configuration")
    p = action(g, "design", cmd_spc_design, "match an MLA and sensor to a main lens")
    p.add_argument("lens", help="prescription JSON, summary JSON or lens_summary.csv")
    p.add_argument("--focus", type=_float_or_inf, required=True, help="focus distance in mm or 'inf'")
    p.add_argument("--pixel", type=float, required=True, help="pixel pitch in mm")
    p.add_argument("--sensor", type=_pair, required=True, metavar="WxH")
    p.add_argument("--micro", type=_pair, required=True, metavar="CxR")
    p.add_argument("--mla-thickness", type=float, default=0.0)
    p.add_argument("--name", default="")
    p = action(g, "tables", cmd_spc_tables, "two-plane geometry and distance-model parameters")
    _config_args(p)

    g = group("sweep", "refocus and error sweeps")
    p = action(g, "shift", cmd_sweep_shift, "measured versus model refocus shift", True)
    _config_args(p)
    _synth_args(p)
    p.add_argument("--lambdas", type=float, nargs="+", help="object distances as multiples of o_f")
    p.add_argument("--distances", type=float, nargs="+", help="object distances in mm")
    p.add_argument("--coarse", type=float, default=0.05, help="coarse shift step (px)")
    p.add_argument("--fine", type=float, default=0.005, help="fine shift step (px)")
    p.add_argument("--no-inverse", action="store_true", help="skip the distance search per shift")
    p = action(g, "errors", cmd_sweep_errors, "analytic (and optionally measured) naive-model errors", True)
    _config_args(p)
    _synth_args(p)
    p.add_argument("--lambdas", type=float, nargs="+", help="values of o / o_f")
    p.add_argument("--distances", type=float, nargs="+", help="measured sweep distances in mm")
    p.add_argument("--measured", action="store_true", help="also run the synthetic measurements")

    g = group("fit", "model fitting")
    p = action(g, "pertuz", cmd_fit_pertuz, "grid search of the two-parameter distance model")
    _config_args(p)
    p.add_argument("sweep", help="sweep_shift.csv")

    g = group("mic", "microlens image centres")
    p = action(g, "verify", cmd_mic_verify, "trace MICs and locate their common origin")
    _config_args(p)
    p.add_argument("--rays", type=int, default=16, help="rays per microlens bundle")

    g = group("lf", "light field processing")
    p = action(g, "decode", cmd_lf_decode, "raw sensor image to LF4D")
    p.add_argument("raw")
    _config_args(p)
    p.add_argument("--white", help="white image for devignetting")
    p = action(g, "refocus", cmd_lf_refocus, "shift-and-sum refocus")
    p.add_argument("lightfield")
    p.add_argument("--shift", type=float, required=True)
    p.add_argument("--equalize", action="store_true", help="equalized interpolation")
    p = action(g, "best-shift", cmd_lf_best_shift, "sharpest refocus shift in a range")
    p.add_argument("lightfield")
    p.add_argument("--range", type=_range, required=True, metavar="a:b")
    p.add_argument("--coarse", type=float, default=0.05)
    p.add_argument("--fine", type=float, default=0.005)

    g = group("synth", "synthetic test data")
    for name, text in (("lightfield", "render a planar pattern into a light field"),
                       ("raw", "render a raw sensor image and white image")):
        p = action(g, name, cmd_synth, text)
        _config_args(p)
        _synth_args(p, views=None)
        p.add_argument("--distance", type=float, required=True, help="object distance in mm")
        if name == "raw":
            p.add_argument("--vignette", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        run = args.func(args)
        run.finish()
    except InputParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PupilFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ImportError as exc:
        print(f"error: {exc} (install the 'plots' extra for --svg)", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
