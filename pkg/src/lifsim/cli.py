"""Command-line entry point.

Subcommands::

    lifsim train  --strategy S [--scenario F] [--out D]
    lifsim run    --strategy S [--phi-dem X] [--budget-bytes B] ...
    lifsim sweep  --strategy S --phi-dem 1,0.5,0 | --budget-bytes 64,256,none ...
    lifsim report [--strategy no-fusion,late-fusion,...] ...

Without ``--scenario`` the bundled benchmark is used. Head strategies load
``--params`` when given, otherwise they train on the scenario's training
frames and save ``<out>/head_<strategy>.bin``.

``sweep.csv`` (written by ``run`` and ``sweep``) and ``report.csv`` (written
by ``report``) share one column layout, one row per setting:

    strategy              fusion strategy
    policy                uncertainty | objectness
    phi_dem               demand threshold (objectness: score threshold)
    budget_bytes          per-message byte cap, empty when unlimited
    background_priority   0 | 1
    frames                evaluated frames
    mean_payload_bytes    detection payload bytes per frame, summed over senders
    log2_payload_bytes    log2 of the previous column, empty when zero
    mean_preround_bytes   score-map pre-round bytes per frame, reported apart
    total_payload_bytes   exact sum of payload bytes over the suite
    items_2d, items_3d, items_background   transmitted record counts
    ambiguous             transmitted items whose sender score is within 0.1 of phi_i
    mAP, NDS, mATE, mASE, mAOE, AP@0.5, AP@1, AP@2, AP@4

Floats are written with six decimals. Failures print one line to stderr,
``lifsim-error code=<name> message=<json string>``, and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from .comms import CommPolicy
from .head import load_params, save_params
from .metrics import DIST_THRESHOLDS
from .pipeline import HEAD_STRATEGIES, STRATEGIES, Strategy, SweepPoint, run_settings, train_pipeline
from .scenario import Scenario, load_benchmark, load_scenario

log = logging.getLogger("lifsim")

CSV_COLUMNS = (
    "strategy", "policy", "phi_dem", "budget_bytes", "background_priority", "frames",
    "mean_payload_bytes", "log2_payload_bytes", "mean_preround_bytes", "total_payload_bytes",
    "items_2d", "items_3d", "items_background", "ambiguous",
    "mAP", "NDS", "mATE", "mASE", "mAOE",
) + tuple(f"AP@{d:g}" for d in DIST_THRESHOLDS)

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def sweep_rows(points: Sequence[SweepPoint]) -> List[dict]:
    rows = []
    for p in points:
        r = p.report
        row = {
            "strategy": p.strategy,
            "policy": p.policy.kind,
            "phi_dem": float(p.policy.phi_dem),
            "budget_bytes": p.policy.budget_bytes,
            "background_priority": bool(p.policy.background_priority),
            "frames": p.frames,
            "mean_payload_bytes": float(p.mean_payload_bytes),
            "log2_payload_bytes": math.log2(p.mean_payload_bytes) if p.mean_payload_bytes > 0 else None,
            "mean_preround_bytes": float(p.mean_preround_bytes),
            "total_payload_bytes": p.total_payload_bytes,
            "items_2d": p.items_2d,
            "items_3d": p.items_3d,
            "items_background": p.items_background,
            "ambiguous": p.ambiguous,
            "mAP": r.mAP, "NDS": r.NDS, "mATE": r.mATE, "mASE": r.mASE, "mAOE": r.mAOE,
        }
        for d in DIST_THRESHOLDS:
            row[f"AP@{d:g}"] = r.ap_per_threshold.get(d, 0.0)
        rows.append(row)
    return rows


def write_csv(path: Path, points: Sequence[SweepPoint]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in sweep_rows(points):
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    path.write_text(buf.getvalue())


def render_svg(points: Sequence[SweepPoint], title: str = "mAP vs payload") -> str:
    """Line plot of mAP against log2(mean payload bytes).

    Points that transmitted nothing sit one unit left of the smallest
    non-zero abscissa under a "no transmission" tick.
    """
    width, height = 640, 400
    left, right, top, bottom = 70, 30, 40, 60
    xs = [math.log2(p.mean_payload_bytes) if p.mean_payload_bytes > 0 else None for p in points]
    finite = [x for x in xs if x is not None]
    lo = math.floor(min(finite)) if finite else 0.0
    hi = math.ceil(max(finite)) if finite else 1.0
    zero_x = lo - 1.0
    xs = [zero_x if x is None else x for x in xs]
    x_min = zero_x if any(p.mean_payload_bytes <= 0 for p in points) else lo
    x_max = max(hi, x_min + 1.0)
    ys = [p.report.mAP for p in points]
    y_min, y_max = 0.0, max(1.0, max(ys, default=0.0))

    def px(x):
        return left + (x - x_min) / (x_max - x_min) * (width - left - right)

    def py(y):
        return height - bottom - (y - y_min) / (y_max - y_min) * (height - top - bottom)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>']
    for k in range(int(math.ceil(x_min)), int(math.floor(x_max)) + 1):
        label = "no transmission" if (k == zero_x and x_min == zero_x) else str(k)
        out.append(f'<line x1="{px(k):.2f}" y1="{height - bottom}" x2="{px(k):.2f}" '
                   f'y2="{height - bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{px(k):.2f}" y="{height - bottom + 18}" text-anchor="middle">{label}</text>')
    for k in range(0, 11):
        y = y_min + (y_max - y_min) * k / 10
        out.append(f'<line x1="{left - 5}" y1="{py(y):.2f}" x2="{left}" y2="{py(y):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(y) + 4:.2f}" text-anchor="end">{y:.1f}</text>')
    out.append(f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle">'
               f'log2(mean payload bytes per frame)</text>')
    out.append(f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {height / 2:.1f})">mAP</text>')
    series = {}
    for p, x, y in zip(points, xs, ys):
        series.setdefault((p.strategy, p.policy.kind), []).append((x, y))
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    for i, ((strategy, kind), pts) in enumerate(series.items()):
        colour = colours[i % len(colours)]
        pts = sorted(pts)
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="2"/>')
        for x, y in pts:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{colour}"/>')
        out.append(f'<text x="{width - right - 5}" y="{top + 16 * (i + 1)}" text-anchor="end" '
                   f'fill="{colour}">{strategy} / {kind}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_text(points: Sequence[SweepPoint]) -> str:
    blocks = []
    for row, p in zip(sweep_rows(points), points):
        lines = [f"[{row['strategy']} policy={row['policy']} phi_dem={_fmt(row['phi_dem'])} "
                 f"budget_bytes={_fmt(row['budget_bytes']) or 'none'} "
                 f"background_priority={_fmt(row['background_priority'])}]"]
        lines.append(p.report.to_text().rstrip("\n"))
        for key in ("mean_payload_bytes", "mean_preround_bytes", "total_payload_bytes",
                    "items_2d", "items_3d", "items_background", "ambiguous"):
            lines.append(f"{key}={_fmt(row[key])}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


# --------------------------------------------------------------------------
# argument handling


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _budget_list(text: str) -> List[Optional[int]]:
    out = []
    for t in text.split(","):
        t = t.strip().lower()
        if not t:
            continue
        if t in ("none", "inf", "unlimited"):
            out.append(None)
            continue
        try:
            v = int(t)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected integer budgets or 'none', got {t!r}")
        if v < 0:
            raise argparse.ArgumentTypeError("budgets must be non-negative")
        out.append(v)
    return out


def _strategy_list(text: str) -> List[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    for n in names:
        if n not in STRATEGIES:
            raise argparse.ArgumentTypeError(f"unknown strategy {n!r}; choose from {', '.join(STRATEGIES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lifsim", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, strategies_default):
        p.add_argument("--scenario", type=Path, help="scenario JSON file (default: bundled benchmark)")
        p.add_argument("--strategy", type=_strategy_list, default=strategies_default,
                       help=f"one of {', '.join(STRATEGIES)}")
        p.add_argument("--seed", type=int, help="override the scenario's base seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for frame execution")
        p.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for per-frame timing)")

    def comm(p):
        p.add_argument("--phi-dem", type=_float_list, help="demand threshold(s), comma separated")
        p.add_argument("--budget-bytes", type=_budget_list, help="per-message byte budget(s); 'none' for unlimited")
        p.add_argument("--policy", choices=("uncertainty", "objectness"))
        p.add_argument("--background-priority", action="store_true",
                       help="fill spare budget with background assertions (uncertainty policy)")
        p.add_argument("--params", type=Path, help="head parameter file (default: train one)")
        p.add_argument("--frames", type=int, help="override the number of evaluation frames")

    p = sub.add_parser("train", help="train a head and save its parameters")
    common(p, None)
    p.add_argument("--frames", type=int, help="override the number of training frames")
    p = sub.add_parser("run", help="evaluate one strategy under one communication setting")
    common(p, None)
    comm(p)
    p = sub.add_parser("sweep", help="evaluate one strategy over several thresholds or budgets")
    common(p, None)
    comm(p)
    p = sub.add_parser("report", help="compare fusion strategies under one communication setting")
    common(p, list(STRATEGIES))
    comm(p)
    return parser


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario) if args.scenario else load_benchmark()
    if args.seed is not None:
        sc = replace(sc, train_seed=args.seed) if args.command == "train" else replace(sc, seed=args.seed)
    frames = getattr(args, "frames", None)
    if frames is not None:
        if frames < 1:
            raise CliError("usage", "--frames must be positive", EXIT_USAGE)
        sc = replace(sc, train_frames=frames) if args.command == "train" else replace(sc, frames=frames)
    return sc


def _single_strategy(args) -> str:
    if not args.strategy:
        raise CliError("usage", "--strategy is required", EXIT_USAGE)
    if len(args.strategy) != 1:
        raise CliError("usage", f"{args.command} takes exactly one strategy", EXIT_USAGE)
    return args.strategy[0]


def _policies(args, base: CommPolicy, single: bool) -> List[CommPolicy]:
    if args.policy:
        base = replace(base, kind=args.policy)
    if args.background_priority:
        base = replace(base, background_priority=True)
    phis = args.phi_dem if args.phi_dem is not None else [base.phi_dem]
    budgets = args.budget_bytes if args.budget_bytes is not None else [base.budget_bytes]
    if not phis or not budgets:
        raise CliError("empty-sweep", "sweep needs at least one value")
    if single and (len(phis) > 1 or len(budgets) > 1):
        raise CliError("usage", f"{args.command} takes a single --phi-dem and --budget-bytes; use sweep",
                       EXIT_USAGE)
    return [replace(base, phi_dem=phi, budget_bytes=b) for phi in phis for b in budgets]


def _head(args, sc: Scenario, kind: str):
    if kind not in HEAD_STRATEGIES:
        return None
    if args.params is not None:
        return load_params(args.params)
    t0 = time.perf_counter()
    result = train_pipeline(sc, kind, threads=args.threads)
    path = args.out / f"head_{kind}.bin"
    save_params(result.params, path)
    log.info("trained %s head in %.1fs, final loss %.6f -> %s", kind, time.perf_counter() - t0,
             result.losses[-1], path)
    return result.params


def cmd_train(args) -> None:
    sc = _scenario(args)
    kind = _single_strategy(args)
    if kind not in HEAD_STRATEGIES:
        raise CliError("usage", f"strategy {kind} has no trainable head", EXIT_USAGE)
    result = train_pipeline(sc, kind, threads=args.threads)
    path = args.out / f"head_{kind}.bin"
    save_params(result.params, path)
    losses = "\n".join(f"{i}\t{v:.9f}" for i, v in enumerate(result.losses))
    (args.out / f"train_{kind}.tsv").write_text("epoch\tloss\n" + losses + "\n")
    print(f"strategy={kind} epochs={len(result.losses)} final_loss={result.losses[-1]:.6f} params={path}")


def _evaluate(args, settings: List[Strategy], sc: Scenario, csv_name: str, svg: bool) -> List[SweepPoint]:
    t0 = time.perf_counter()
    points = run_settings(sc, settings, threads=args.threads)
    log.info("evaluated %d settings on %d frames in %.1fs", len(settings), sc.frames, time.perf_counter() - t0)
    write_csv(args.out / csv_name, points)
    if svg:
        title = f"{settings[0].kind}: mAP vs payload"
        (args.out / "sweep.svg").write_text(render_svg(points, title))
    (args.out / "report.txt").write_text(report_text(points))
    for row in sweep_rows(points):
        print(" ".join(f"{k}={_fmt(row[k]) or 'none'}" for k in
                       ("strategy", "policy", "phi_dem", "budget_bytes", "mean_payload_bytes", "mAP", "NDS")))
    return points


def cmd_run(args, single: bool = True) -> None:
    sc = _scenario(args)
    kind = _single_strategy(args)
    policies = _policies(args, sc.comm, single=single)
    params = _head(args, sc, kind)
    _evaluate(args, [Strategy(kind, p, params) for p in policies], sc, "sweep.csv", svg=not single)


def cmd_report(args) -> None:
    sc = _scenario(args)
    if args.params is not None and len(args.strategy) != 1:
        raise CliError("usage", "--params applies to a single strategy", EXIT_USAGE)
    (policy,) = _policies(args, sc.comm, single=True)
    settings = [Strategy(kind, policy, _head(args, sc, kind)) for kind in args.strategy]
    _evaluate(args, settings, sc, "report.csv", svg=False)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                            stream=sys.stderr)
        if args.threads < 1:
            raise CliError("usage", "--threads must be at least 1", EXIT_USAGE)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            cmd_train(args)
        elif args.command == "run":
            cmd_run(args, single=True)
        elif args.command == "sweep":
            cmd_run(args, single=False)
        else:
            cmd_report(args)
        return 0
    except CliError as exc:
        err = exc
    except (ValueError, OSError, RuntimeError) as exc:
        err = CliError(type(exc).__name__, str(exc))
    print(f"lifsim-error code={err.code} message={json.dumps(str(err))}", file=sys.stderr)
    return err.status


if __name__ == "__main__":
    sys.exit(main())
