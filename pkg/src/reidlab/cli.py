"""Command-line surface.

Machine-readable JSON goes to stdout, human-readable summaries to stderr.
Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import tempfile

import numpy as np

from . import arch, data, evaluation, gradcheck, schedule, swag, tracking
from .training import (RunConfig, TrainingDiverged, config_from_mapping,
                       parse_config_file, train)


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True, default=_jsonable)
    sys.stdout.write("\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _note(text: str) -> None:
    print(text, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands

def cmd_grad_check(args) -> int:
    cases = gradcheck.default_suite()
    if args.op:
        cases = [c for c in cases if args.op in c.name]
        if not cases:
            _note(f"no gradient-check case matches {args.op!r}")
            return 1
    results = gradcheck.run_suite(cases, seeds=range(args.seeds))
    all_passed = all(r["passed"] for r in results)
    for r in results:
        status = "pass" if r["passed"] else "FAIL"
        _note(f"{status:4s}  {r['name']:32s} max_rel_error={r['max_rel_error']:.3e}")
    _emit({"checks": results, "all_passed": all_passed})
    return 0 if all_passed else 1


def cmd_schedule_dump(args) -> int:
    rows = schedule.dump_schedule(args.phase)
    sys.stdout.write("epoch,lr\n")
    for epoch, lr in rows:
        sys.stdout.write(f"{epoch},{lr:.17g}\n")
    return 0


def cmd_archcalc(args) -> int:
    spec = arch.build_net_spec(args.variant)
    arch.check_shape_chain(spec)
    params = arch.count_params(spec)
    flops = arch.count_flops(spec, convention=args.flops_convention,
                             fused_bn=args.fused_bn)
    payload = {
        "variant": spec.variant,
        "feature_dim": spec.feature_dim,
        "params_total": params,
        "flops_total": flops,
        "flops_convention": args.flops_convention,
        "fused_bn": args.fused_bn,
    }
    if args.breakdown:
        payload["breakdown"] = arch.net_accounting(spec, fused_bn=args.fused_bn)
    _note(f"{spec.variant}: {params / 1e6:.2f}M params, {flops / 1e9:.2f}B flops")
    _emit(payload)
    return 0


def cmd_eval(args) -> int:
    queries = data.load_embeddings(args.queries, split="query")
    gallery = data.load_embeddings(args.gallery, split="gallery")
    dist = evaluation.distance_matrix(queries.samples, gallery.samples,
                                      metric=args.metric)
    result = evaluation.evaluate_reid(dist, queries.ids, gallery.ids,
                                      queries.cams, gallery.cams,
                                      k_max=args.kmax)
    _note(f"mAP={result.mean_ap:.4f} rank-1={result.cmc[0]:.4f} "
          f"valid_queries={result.valid_queries}")
    _emit(result.to_dict())
    return 0


def cmd_track_sim(args) -> int:
    scenario = tracking.gen_scenario(args.people, args.duration, args.reentry,
                                     args.sigma, args.seed)
    embedder = lambda obs: obs  # appearance space doubles as embedding space
    if args.sweep:
        lo, hi, n = args.sweep
        taus = np.linspace(lo, hi, int(n))
        rows = tracking.sweep_tau(scenario, embedder, taus)
        best = max(rows, key=lambda r: r["idf1"])
        _note(f"best tau={best['tau']:.3f} idf1={best['idf1']:.4f}")
        _emit({"sweep": rows, "best": best})
        return 0
    assignment = tracking.run_gate(scenario, embedder, args.tau)
    payload = {
        "mota": tracking.mota(scenario, assignment),
        "idf1": tracking.idf1(scenario, assignment),
        "tracks_opened": assignment.tracks_opened,
        "reid_hits": assignment.reid_hits,
        "reid_misses": assignment.reid_misses,
    }
    _note(f"MOTA={payload['mota']:.4f} IDF1={payload['idf1']:.4f} "
          f"tracks={payload['tracks_opened']}")
    _emit(payload)
    return 0


def cmd_swag_demo(args) -> int:
    layout = swag.WeightLayout((("w", (3,)),))
    posterior = swag.SwagPosterior(layout=layout)
    rng = np.random.default_rng(args.seed)
    snapshots = [np.array([1.0, 2.0, 3.0]) + 0.5 * rng.standard_normal(3)
                 for _ in range(args.snapshots)]
    for snap in snapshots:
        swag.collect_snapshot(posterior, swag.WeightVector(snap, layout))
    mean = swag.swa_weights(posterior).values
    offline_mean = np.mean(snapshots, axis=0)
    zero_scale = swag.swag_sample(posterior, 0.0, seed=0).values
    sample = swag.swag_sample(posterior, args.scale, seed=args.seed).values
    path = args.out or tempfile.mktemp(suffix=".bin")
    swag.save_posterior(posterior, path)
    loaded = swag.load_posterior(path)
    payload = {
        "snapshots": posterior.count,
        "mean": mean,
        "offline_mean_gap": float(np.abs(mean - offline_mean).max()),
        "diag_variance": posterior.diag_variance(),
        "floor_hits": posterior.floor_hits(),
        "scale0_is_mean": bool(np.array_equal(zero_scale, mean)),
        "sample": sample,
        "roundtrip_ok": bool(np.array_equal(loaded.mean, posterior.mean)
                             and loaded.count == posterior.count),
        "path": path,
    }
    _note(f"{posterior.count} snapshots, floor_hits={payload['floor_hits']}, "
          f"roundtrip_ok={payload['roundtrip_ok']}")
    _emit(payload)
    return 0


def cmd_rea_check(args) -> int:
    params = data.ReaParams()
    stats = data.ReaStats()
    rng = np.random.default_rng(args.seed)
    area_violations = aspect_violations = 0
    for _ in range(args.trials):
        img = rng.random((args.height, args.width, 3))
        out = data.random_erase(img, params, rng, stats=stats)
        if out is img:
            continue
        box = _changed_box(img, out)
        if box is not None:
            h, w = box
            ratio = h * w / (args.height * args.width)
            if not params.area_lo < ratio < params.area_hi:
                area_violations += 1
            if not params.aspect_lo < h / w < params.aspect_hi:
                aspect_violations += 1
    rate = stats.applied / args.trials
    payload = {
        "trials": args.trials,
        "erase_rate": rate,
        "applied": stats.applied,
        "skipped": stats.skipped,
        "placement_failures": stats.failed,
        "area_violations": area_violations,
        "aspect_violations": aspect_violations,
    }
    _note(f"erase rate {rate:.4f} over {args.trials} trials; "
          f"violations area={area_violations} aspect={aspect_violations}")
    _emit(payload)
    ok = (area_violations == 0 and aspect_violations == 0
          and abs(rate - params.probability) <= 0.02)
    return 0 if ok else 1


def _changed_box(before: np.ndarray, after: np.ndarray) -> tuple[int, int] | None:
    changed = np.argwhere((before != after).any(axis=2))
    if changed.size == 0:
        return None
    h = int(changed[:, 0].max() - changed[:, 0].min() + 1)
    w = int(changed[:, 1].max() - changed[:, 1].min() + 1)
    return h, w


def cmd_train_toy(args) -> int:
    values: dict = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for field in dataclasses.fields(RunConfig):
        cli_value = getattr(args, field.name, None)
        if cli_value is not None:
            values[field.name] = cli_value
    cfg = config_from_mapping(values)
    try:
        result = train(cfg)
    except TrainingDiverged as exc:
        _note(str(exc))
        return 1
    payload = {
        "baseline": result.baseline,
        "final": result.final,
        "snapshots": result.snapshots,
        "epochs_run": len(result.trace),
        "out_dir": cfg.out_dir or None,
    }
    _note(f"untrained rank-1={result.baseline['rank1']:.3f} "
          f"map={result.baseline['map']:.3f}")
    _note(f"final     rank-1={result.final['rank1']:.3f} "
          f"map={result.final['map']:.3f}")
    _emit(payload)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reidlab",
        description="Metric-learning mechanisms lab: losses, schedules, "
                    "pooling, weight averaging, retrieval metrics, and a "
                    "tracking simulator at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--all", action="store_true", help="run every case (default)")
    p.add_argument("--op", help="substring filter on case names")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("schedule-dump", help="emit (epoch,lr) CSV")
    p.add_argument("--phase", choices=("warmup", "cyclic"), required=True)
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("archcalc", help="parameter and FLOP accounting")
    p.add_argument("--variant", choices=("1x", "2x"), required=True)
    p.add_argument("--breakdown", action="store_true")
    p.add_argument("--flops-convention", choices=("mac", "2mac"), default="mac")
    p.add_argument("--fused-bn", action="store_true")
    p.set_defaults(func=cmd_archcalc)

    p = sub.add_parser("eval", help="CMC/mAP for query and gallery CSVs")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--metric", choices=evaluation.METRICS, default="euclidean")
    p.add_argument("--kmax", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track-sim", help="simulated room with a ReID gate")
    p.add_argument("--people", type=int, default=7)
    p.add_argument("--duration", type=float, default=750.0)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--reentry", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--sweep", nargs=3, type=float, metavar=("LO", "HI", "N"),
                   help="sweep tau instead of a single run")
    p.set_defaults(func=cmd_track_sim)

    p = sub.add_parser("swag-demo", help="posterior moments, sampling, roundtrip")
    p.add_argument("--snapshots", type=int, default=15)
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="posterior output path")
    p.set_defaults(func=cmd_swag_demo)

    p = sub.add_parser("rea-check", help="random-erasing statistics")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=160)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_rea_check)

    p = sub.add_parser("train-toy", help="toy end-to-end training run")
    p.add_argument("--config", help="key=value config file")
    for field in dataclasses.fields(RunConfig):
        flag = "--" + field.name.replace("_", "-")
        p.add_argument(flag, dest=field.name, default=None,
                       help=f"override {field.name} (default {field.default})")
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        _note(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
