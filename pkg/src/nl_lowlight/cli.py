"""Command-line entry point: synth, gradcheck, train, ablate, denoise, eval.

Exit codes: 0 success, 1 argument/validation problems, 2 numeric or
internal failures.  Every subcommand accepts --config FILE, a flat JSON
object whose keys mirror the flag names; explicit flags win over the
file.  NL_LOWLIGHT_THREADS caps worker parallelism (0 = auto).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import lowlight, nlblock, segeval
from .errors import ArgumentError, DimensionError, NumericError, ValidationError

_FORM_LABELS = {
    nlblock.NLForm.DOT_PRODUCT: "Dot Product",
    nlblock.NLForm.GAUSSIAN: "Gaussian",
    nlblock.NLForm.EMBEDDED_GAUSSIAN: "Embedded Gaussian",
}

EVAL_COLUMNS = ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


class _CliError(Exception):
    """Usage-level failure; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is exit 1
        raise _CliError(message)


def _parse_shape(text: str):
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected CxHxW")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"bad shape {text!r}, expected CxHxW")
    return dims


def _as_range(value):
    """Accept 'A,B' strings (flags) or [A, B] pairs (config files)."""
    if value is None:
        return None
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    if len(parts) != 2:
        raise _CliError(f"range must have two values, got {value!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except (TypeError, ValueError):
        raise _CliError(f"range must be numeric, got {value!r}")
    return (lo, hi)


def _as_triple(value):
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    if len(parts) != 3:
        raise _CliError(f"expected three comma-separated values, got {value!r}")
    try:
        return tuple(float(p) for p in parts)
    except (TypeError, ValueError):
        raise _CliError(f"values must be numeric, got {value!r}")


def format_metric(v: float) -> str:
    """Fractions render x100 to one decimal; undefined (-1) renders '-'."""
    if v == -1.0:
        return "-"
    return f"{100.0 * v:.1f}"


def report_table(rows, columns=EVAL_COLUMNS) -> str:
    """Aligned text table: Method | metric columns, one decimal, x100."""
    if not rows:
        raise ArgumentError("report_table needs at least one row")
    header = ["Method", *columns]
    body = [[label, *[format_metric(metrics[c]) for c in columns]]
            for label, metrics in rows]
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = [" | ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for r in body:
        cells = [r[0].ljust(widths[0])]
        cells += [r[i].rjust(widths[i]) for i in range(1, len(r))]
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


def render_ablation_table(rows) -> str:
    """Method | loss columns | learned stage weights, fixed formatting."""
    header = ["Method", "InitLoss", "FinalLoss", "Ratio", "w1", "w2", "w3", "w4"]
    body = []
    for row in rows:
        ratio = row.final_loss / row.initial_loss if row.initial_loss > 0 else float("nan")
        body.append([
            _FORM_LABELS[row.form],
            f"{row.initial_loss:.6g}", f"{row.final_loss:.6g}", f"{ratio:.4f}",
            *[f"{w:.4f}" for w in row.weights],
        ])
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = [" | ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for r in body:
        cells = [r[0].ljust(widths[0])]
        cells += [r[i].rjust(widths[i]) for i in range(1, len(r))]
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Subcommand handlers.
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    cfg = lowlight.DegradationConfig(
        exposure=args.exposure, gamma=args.gamma,
        photons_full_scale=args.photons, read_sigma=args.read_sigma,
        wb_gains=_as_triple(args.wb), demosaic=not args.no_demosaic,
        seed=args.seed)
    if args.no_jitter:
        jitter = None
    else:
        jitter = lowlight.DEFAULT_JITTER
        for name, flag in (("exposure", args.exposure_range),
                           ("photons_full_scale", args.photons_range),
                           ("read_sigma", args.read_sigma_range)):
            if flag is not None:
                jitter = replace(jitter, **{name: _as_range(flag)})
    records = lowlight.degrade_dataset(args.input_dir, args.output_dir, cfg, jitter)
    ok = sum(1 for r in records if "error" not in r)
    bad = len(records) - ok
    print(f"degraded {ok} image(s) -> {args.output_dir} "
          f"({bad} skipped); manifest.jsonl written")
    return 0


def _cmd_gradcheck(args) -> int:
    form = nlblock.parse_form(args.form)
    report = nlblock.gradcheck(form, args.shape, args.seed,
                               reduction=args.reduction, tol=args.tol)
    verdict = "PASS" if report.passed else "FAIL"
    shape = "x".join(str(d) for d in report.shape)
    print(f"gradcheck form={form.value} shape={shape} seed={report.seed} "
          f"max_rel_err={report.max_rel_err:.3e} worst={report.worst} {verdict}")
    return 0 if report.passed else 2


def _load_pairs(pairs_dir):
    root = Path(pairs_dir)
    clean_dir = root / "clean"
    deg_dir = root / "degraded"
    if not clean_dir.is_dir() or not deg_dir.is_dir():
        raise ArgumentError(f"{pairs_dir} must contain clean/ and degraded/ subdirectories")
    clean_names = {p.name for p in lowlight.list_images(clean_dir)}
    deg_names = {p.name for p in lowlight.list_images(deg_dir)}
    common = sorted(clean_names & deg_names)
    if not common:
        raise ArgumentError(f"no matching image names under {clean_dir} and {deg_dir}")
    return [(lowlight.read_image(clean_dir / n), lowlight.read_image(deg_dir / n))
            for n in common]


def _train_config(args) -> bb.TrainConfig:
    return bb.TrainConfig(steps=args.steps, batch_size=args.batch,
                          lr=args.lr, seed=args.seed)


def _cmd_train(args) -> int:
    pairs = _load_pairs(args.pairs)
    form = nlblock.parse_form(args.form)
    backbone = bb.build_backbone(form, seed=args.seed)
    result = bb.train_nl_blocks(backbone, pairs, _train_config(args))
    bb.save_checkpoint(result.backbone, args.out)
    if args.curve:
        bb.write_curve(args.curve, result.curve)
    ws = " ".join(f"w{i + 1}={w:.4f}" for i, w in enumerate(result.curve[-1].weights))
    print(f"trained {form.value} on {len(pairs)} pair(s), {args.steps} step(s): "
          f"loss {result.initial_loss:.6g} -> {result.final_loss:.6g}; {ws}")
    print(f"checkpoint -> {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    pairs = _load_pairs(args.pairs)
    cfg = _train_config(args)
    rows = bb.ablate_forms(pairs, cfg, backbone_seed=args.seed)
    table = render_ablation_table(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def _upsample_nearest(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = plane.shape
    rows = (np.arange(h) * ph) // h
    cols = (np.arange(w) * pw) // w
    return plane[rows][:, cols]


def _cmd_denoise(args) -> int:
    if not 1 <= args.stage <= 4:
        raise ArgumentError(f"--stage must be 1..4, got {args.stage}")
    backbone = bb.load_checkpoint(args.ckpt)
    img = lowlight.read_image(args.input_image)
    h, w = img.shape[:2]
    pre = bb.extract(img, backbone, use_nl=False)[args.stage - 1].mean(axis=0)
    post = bb.extract(img, backbone, use_nl=True)[args.stage - 1].mean(axis=0)
    lo = min(pre.min(), post.min())
    hi = max(pre.max(), post.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    panels = [np.clip((_upsample_nearest(p, h, w) - lo) * scale, 0, 255).astype(np.uint8)
              for p in (pre, post)]
    side_by_side = np.concatenate(panels, axis=1)
    lowlight.write_image(args.out, np.repeat(side_by_side[:, :, None], 3, axis=2))
    print(f"stage {args.stage} feature panels (before | after) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    aset = segeval.load_annotations(args.gt)
    preds = segeval.load_predictions(args.pred, images=aset.images)
    report = segeval.evaluate(aset.annotations, preds, images=aset.images)
    if args.out:
        segeval.write_report(report, args.out)
    label = Path(args.pred).name
    print(report_table([(label, report.to_json_dict())]), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and config-file merging.
# ---------------------------------------------------------------------------

def _build_parser():
    parser = _Parser(
        prog="nl-lowlight",
        description="Weighted non-local feature denoising toolkit: synthesize "
                    "low-light data, train and inspect NL blocks, evaluate AP.",
        epilog="Environment: NL_LOWLIGHT_THREADS caps worker parallelism "
               "(0 = auto); NL_LOWLIGHT_NO_NUMBA=1 forces the numpy kernels.")
    subs = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    table = {}

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="flat JSON of flag values; explicit flags win")
        table[name] = p
        return p

    p = sub("synth", "degrade a directory of images into synthetic low light")
    p.add_argument("--in", dest="input_dir", required=True, metavar="DIR")
    p.add_argument("--out", dest="output_dir", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exposure", type=float, default=0.15)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--photons", type=float, default=1500.0,
                   help="photon count at linear full scale; inf = no shot noise")
    p.add_argument("--read-sigma", type=float, default=0.003)
    p.add_argument("--wb", default="1,1,1", help="R,G,B white-balance gains")
    p.add_argument("--no-demosaic", action="store_true")
    p.add_argument("--exposure-range", default=None, metavar="A,B",
                   help="per-image log-uniform exposure jitter")
    p.add_argument("--photons-range", default=None, metavar="A,B")
    p.add_argument("--read-sigma-range", default=None, metavar="A,B")
    p.add_argument("--no-jitter", action="store_true",
                   help="use the base config for every image")
    p.set_defaults(func=_cmd_synth)

    p = sub("gradcheck", "verify analytic gradients against finite differences")
    p.add_argument("--form", required=True,
                   choices=[f.value for f in nlblock.NLForm])
    p.add_argument("--shape", type=_parse_shape, default=(4, 6, 6), metavar="CxHxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reduction", type=int, choices=(2, 4), default=2)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub("train", "train the NL blocks on clean/degraded image pairs")
    p.add_argument("--pairs", required=True, metavar="DIR",
                   help="directory with clean/ and degraded/ subdirectories")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=bb.TrainConfig.lr)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--form", default=nlblock.NLForm.EMBEDDED_GAUSSIAN.value,
                   choices=[f.value for f in nlblock.NLForm])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--curve", default=None, metavar="CSV")
    p.set_defaults(func=_cmd_train)

    p = sub("ablate", "train all three NL forms and tabulate the comparison")
    p.add_argument("--pairs", required=True, metavar="DIR")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=bb.TrainConfig.lr)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, metavar="TABLE")
    p.set_defaults(func=_cmd_ablate)

    p = sub("denoise", "render before/after feature panels for one image")
    p.add_argument("--in", dest="input_image", required=True, metavar="IMG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", type=int, default=1, metavar="K")
    p.add_argument("--out", required=True, metavar="IMG")
    p.set_defaults(func=_cmd_denoise)

    p = sub("eval", "COCO-style instance segmentation AP report")
    p.add_argument("--gt", required=True, metavar="JSON")
    p.add_argument("--pred", required=True, metavar="JSON")
    p.add_argument("--out", default=None, metavar="JSON")
    p.set_defaults(func=_cmd_eval)

    return parser, table


def _apply_config(parser, table, argv):
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        with open(path, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except OSError as e:
        raise _CliError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise _CliError(f"config {path}: JSON parse error at offset {e.pos}: {e.msg}")
    if not isinstance(overrides, dict):
        raise _CliError(f"config {path}: expected a flat JSON object")
    sub = table[args.subcommand]
    alias = {}
    for action in sub._actions:
        alias[action.dest] = action.dest
        for opt in action.option_strings:
            alias[opt.lstrip("-")] = action.dest
    mapped = {}
    for key, value in overrides.items():
        dest = alias.get(key) or alias.get(key.replace("-", "_"))
        if dest is None or dest in ("config", "func", "help"):
            raise _CliError(f"config {path}: unknown key {key!r}")
        mapped[dest] = value
    sub.set_defaults(**mapped)
    return parser.parse_args(argv)  # explicit flags still win


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = _build_parser()
    try:
        args = _apply_config(parser, table, argv)
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except (_CliError, ArgumentError, ValidationError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
