"""Command-line interface: registration, segmentation, evaluation, phantoms, checks.

Exit codes: 0 success, 2 configuration/format error, 3 numerics error.
Failures print a single machine-parseable line `error: <category>: <message>`
to stderr. All commands are deterministic given their inputs and seeds.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import (load_phantom_spec, load_run_config, parse_phantom_spec,
                     parse_run_config, _load_json_object)
from .errors import (ConfigError, CycleRegError, FormatError, NumericsError,
                     PyramidTooCoarse, ShapeError)
from .gradcheck import GRAD_TOL, run_grad_suite, suite_passes
from .metrics import foreground_dice, inverse_consistency_error, summarize_scores
from .objective import TERM_NAMES, LossWeights
from .phantom import gen_phantom, gen_smooth_field, make_pair
from .solver import SolveConfig, SolveTrace
from .transfer import transfer_labels
from .volio import (load_labels, load_scalar, save_field, save_labels, save_scalar)

_TRACE_COLUMNS = ("level", "iteration", "total", "sim", "smooth_f", "smooth_b",
                  "cyc", "trans", "anatomy_cyc", "diff_cyc", "grad_f_norm", "grad_b_norm")

# ablation rows in the spirit of the cycle-supervision study: a plain
# similarity baseline, the image-cycle baseline, then cumulative additions
ABLATION_CONFIGS = (
    ("sim_smooth", dict(cyc=False, trans=False, anatomy_cyc=False, diff_cyc=False)),
    ("cyc", dict(cyc=True, trans=False, anatomy_cyc=False, diff_cyc=False)),
    ("cyc+trans", dict(cyc=True, trans=True, anatomy_cyc=False, diff_cyc=False)),
    ("cyc+anatomy", dict(cyc=True, trans=False, anatomy_cyc=True, diff_cyc=False)),
    ("cyc+trans+anatomy", dict(cyc=True, trans=True, anatomy_cyc=True, diff_cyc=False)),
    ("full", dict(cyc=True, trans=True, anatomy_cyc=True, diff_cyc=True)),
)


def _write_trace_csv(path, trace: SolveTrace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRACE_COLUMNS)
        for row in trace.rows:
            writer.writerow([row.level, row.iteration] +
                            [repr(getattr(row, c)) for c in _TRACE_COLUMNS[2:]])


def _load_config(args) -> SolveConfig:
    if getattr(args, "config", None):
        obj = _load_json_object(args.config, "run config")
    else:
        obj = {}
    if getattr(args, "seed", None) is not None:
        obj["seed"] = args.seed
    return parse_run_config(obj)


def _load_pair(args):
    atlas = load_scalar(args.atlas)
    labels = load_labels(args.atlas_labels)
    target = load_scalar(args.target)
    return atlas, labels, target


def _cmd_register(args) -> int:
    atlas, labels, target = _load_pair(args)
    cfg = _load_config(args)
    result = transfer_labels(atlas, labels, target, cfg)
    out = Path(args.out_dir)
    save_field(out / "fF", result.f_fwd)
    save_field(out / "fB", result.f_bwd)
    _write_trace_csv(out / "trace.csv", result.trace)
    print(f"registered: {len(result.trace.rows)} iterations, "
          f"final total {result.trace.rows[-1].total!r}")
    return 0


def _cmd_segment(args) -> int:
    atlas, labels, target = _load_pair(args)
    cfg = _load_config(args)
    result = transfer_labels(atlas, labels, target, cfg)
    base = Path(args.out)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    save_labels(base, result.segmentation)
    save_field(base.parent / (base.name + ".fF"), result.f_fwd)
    save_field(base.parent / (base.name + ".fB"), result.f_bwd)
    report = result.diagnostics
    with open(base.parent / (base.name + ".report.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name in TERM_NAMES + ("total",):
            writer.writerow([name, repr(report.losses[name])])
        writer.writerow(["ice_mean", repr(report.ice_mean)])
        writer.writerow(["ice_max", repr(report.ice_max)])
    print(f"segmentation written to {base}.json/.raw")
    return 0


def _cmd_eval(args) -> int:
    pred = load_labels(args.pred)
    gt = load_labels(args.gt)
    k = args.classes
    if k is not None:
        if k < 2:
            raise ConfigError(f"--classes must be >= 2, got {k}")
        if max(pred.num_classes, gt.num_classes) > k:
            raise ConfigError(f"volumes declare more classes than --classes {k}")
    else:
        k = max(pred.num_classes, gt.num_classes)
    scores = _padded_dice(pred, gt, k)
    summary = summarize_scores([scores])
    case = Path(args.pred).stem
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "class", "dice"])
        for c, d in enumerate(scores, start=1):
            writer.writerow([case, c, repr(d)])
        writer.writerow([])
        writer.writerow(["stat", "value"])
        for stat, value in summary.percent().items():
            writer.writerow([stat, f"{value:.1f}"])
    print(f"mean Dice {summary.percent()['mean']:.1f} (%)")
    return 0


def _padded_dice(pred, gt, k):
    from .metrics import dice_score
    from .volumes import LabelVolume
    pred = LabelVolume(pred.data, k)
    gt = LabelVolume(gt.data, k)
    return [dice_score(pred, gt, c) for c in range(1, k)]


def _cmd_phantom_gen(args) -> int:
    obj = _load_json_object(args.spec, "phantom spec")
    if args.seed is not None:
        obj["seed"] = args.seed
    spec, deform, target_noise = parse_phantom_spec(obj)
    image, labels = gen_phantom(spec)
    field = gen_smooth_field(spec.shape, deform)
    target, gt = make_pair(image, labels, field, noise_sigma=target_noise,
                           noise_seed=spec.seed + 7)
    out = Path(args.out_dir)
    save_scalar(out / "atlas", image)
    save_labels(out / "atlas_labels", labels)
    save_scalar(out / "target", target)
    save_labels(out / "gt_labels", gt)
    save_field(out / "gt_field", field)
    print(f"phantom case written to {out} (grid {spec.shape.dims}, "
          f"{spec.num_structures} structures)")
    return 0


def _cmd_grad_check(args) -> int:
    results = run_grad_suite(size=args.size, seed=args.seed or 0)
    width = max(len(k) for k in results)
    for name, err in results.items():
        status = "ok" if err <= GRAD_TOL else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
    if not suite_passes(results):
        raise NumericsError(f"gradient check exceeded tolerance {GRAD_TOL}")
    print(f"all gradient checks within {GRAD_TOL}")
    return 0


def _cmd_ablate(args) -> int:
    suite = sorted(p for p in Path(args.suite_dir).iterdir()
                   if (p / "atlas.json").exists())
    if not suite:
        raise ConfigError(f"no phantom cases found under {args.suite_dir}")
    base_cfg = _load_config(args)
    rows = []
    for name, toggles in ABLATION_CONFIGS:
        weights = LossWeights(lambda1=base_cfg.weights.lambda1,
                              lambda2=base_cfg.weights.lambda2, **toggles)
        cfg = SolveConfig(pyramid_levels=base_cfg.pyramid_levels,
                          iters_per_level=base_cfg.iters_per_level,
                          stop_rel_tol=base_cfg.stop_rel_tol, lr=base_cfg.lr,
                          ncc_window_per_level=base_cfg.ncc_window_per_level,
                          seed=base_cfg.seed, weights=weights,
                          charbonnier=base_cfg.charbonnier)
        table, ices = [], []
        for case in suite:
            atlas = load_scalar(case / "atlas")
            labels = load_labels(case / "atlas_labels")
            target = load_scalar(case / "target")
            gt = load_labels(case / "gt_labels")
            result = transfer_labels(atlas, labels, target, cfg)
            table.append(foreground_dice(result.segmentation, gt))
            ices.append(inverse_consistency_error(result.f_fwd, result.f_bwd)[0])
        summary = summarize_scores(table).percent()
        rows.append([name, f"{summary['mean']:.1f}", f"{summary['std']:.1f}",
                     f"{summary['min']:.1f}", f"{summary['max']:.1f}",
                     repr(float(np.mean(ices)))])
        print(f"{name}: mean Dice {rows[-1][1]}%, mean ICE {float(np.mean(ices)):.4f}")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "mean", "std", "min", "max", "mean_ice"])
        writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclereg",
        description="Cycle-consistent pair registration and atlas label transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_pair_flags(p):
        p.add_argument("--atlas", required=True, help="atlas image volume (base path)")
        p.add_argument("--atlas-labels", required=True, help="atlas label volume")
        p.add_argument("--target", required=True, help="target image volume")
        p.add_argument("--config", help="run-config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("register", help="solve a pair and write both fields")
    add_pair_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("segment", help="transfer atlas labels to the target")
    add_pair_flags(p)
    p.add_argument("--out", required=True, help="output segmentation base path")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("eval", help="Dice report of a segmentation against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, help="total class count including background")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, help="accepted for interface uniformity")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("phantom-gen", help="generate one synthetic atlas/target case")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=_cmd_phantom_gen)

    p = sub.add_parser("grad-check", help="finite-difference verification of all gradients")
    p.add_argument("--size", type=int, default=6, help="grid edge length (default 6)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("ablate", help="run the toggle matrix over a phantom suite")
    p.add_argument("--suite-dir", required=True, help="directory of phantom case subdirs")
    p.add_argument("--config", help="base run-config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_ablate)
    return parser


_ERROR_CATEGORY = (
    (NumericsError, "numerics", 3),
    (PyramidTooCoarse, "config", 2),
    (FormatError, "format", 2),
    (ConfigError, "config", 2),
    (ShapeError, "shape", 2),
    (CycleRegError, "config", 2),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CycleRegError as e:
        for cls, category, code in _ERROR_CATEGORY:
            if isinstance(e, cls):
                msg = " ".join(str(e).split())
                print(f"error: {category}: {msg}", file=sys.stderr)
                return code
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())
