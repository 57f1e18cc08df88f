"""Command-line surface.

Subcommands: analyze (spectral metrics of checkpoint pairs), train
(synthetic teacher-student runs), verify (numerical verifiers), bench
(timing comparisons). Reports are written atomically as <out>.json and
<out>.csv; both carry the same numbers.

Exit codes: 0 success, 1 I/O-or-precheck failure (or a failed benchmark
assertion), 2 degenerate-only input, 3 divergence, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, adapters, bench, matio, spectral, theorems, train
from .adapters import AdapterConfig, Method, SpPolicy
from .backend import BACKEND
from .errors import (
    ConfigError,
    DivergenceError,
    EqualityPrecheckError,
    ManifestError,
    MatrixFileError,
    ShapeError,
    WclabError,
)

_VERIFY_CHOICES = ("theorem1", "theorem2", "expbound", "weyl", "equivalence")
_BENCH_CHOICES = ("dora-forms", "rotation-reorder", "rotation-sweep", "train-step", "backends")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Method):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _write_report(out: str, fmt: str, doc: dict, header, rows) -> dict:
    paths = {}
    if fmt in ("both", "json"):
        p = Path(f"{out}.json")
        _atomic_write(p, json.dumps(_jsonable(doc), indent=2) + "\n")
        paths["json"] = str(p)
    if fmt in ("both", "csv"):
        p = Path(f"{out}.csv")
        _atomic_write(p, _csv_text(header, rows))
        paths["csv"] = str(p)
    return paths


def _envelope(args, seed, started: float) -> dict:
    return {
        "command": "wclab " + " ".join(args._argv),
        "seed": seed,
        "version": __version__,
        "backend": BACKEND,
        "wall_time_s": time.monotonic() - started,
    }


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}")
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _adapter_config(args) -> AdapterConfig:
    policy = (SpPolicy.fixed(args.sp_fixed) if args.sp_fixed is not None
              else SpPolicy.epsilon(args.epsilon))
    return AdapterConfig(
        method=Method(args.method),
        rank_r=args.rank,
        scale_s=args.scale,
        rotation_rank_rp=args.rp,
        sp_policy=policy,
    )


def cmd_analyze(args) -> int:
    started = time.monotonic()
    manifest = matio.load_manifest(args.manifest)
    pairs = matio.delta_pairs(manifest)
    reports = [spectral.layer_report(name, dw) for name, dw in pairs]
    agg = spectral.aggregate_reports(reports)
    header = ["layer", "stable_rank", "svd_entropy_nats", "sigma_max", "num_sv"]
    rows = [
        [r.layer_name, r.stable_rank, r.svd_entropy_nats, r.sigma_max, r.num_singular_values]
        for r in reports
    ]
    doc = _envelope(args, None, started)
    doc["layers"] = [
        {
            "layer": r.layer_name,
            "degenerate": r.degenerate,
            "stable_rank": r.stable_rank,
            "svd_entropy_nats": r.svd_entropy_nats,
            "sigma_max": r.sigma_max,
            "num_sv": r.num_singular_values,
            "normalized_spectrum": r.normalized_spectrum,
        }
        for r in reports
    ]
    doc["aggregate"] = vars(agg).copy()
    if args.out:
        _write_report(args.out, args.format, doc, header, rows)
    degenerate_only = (not reports) or all(r.degenerate for r in reports)
    if degenerate_only:
        print("analyze: every layer update is degenerate (zero)", file=sys.stderr)
        return 2
    print(f"analyze: {len(reports)} layers, "
          f"median entropy {agg.entropy_median:.4f} nats, "
          f"median stable rank {agg.stable_rank_median:.4f}")
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    seeds = _parse_seeds(args.seeds)
    config = _adapter_config(args)
    task = train.TaskSpec(
        m=args.m, n=args.n, num_samples=args.samples,
        lowrank_rank=args.lowrank_rank, lowrank_scale=args.lowrank_scale,
        diag_scale_spread=args.diag_spread, noise_sigma=args.noise,
    )
    train_cfg = train.TrainConfig(
        optimizer=args.optimizer, lr=args.lr, steps=args.steps, batch=args.batch,
    )
    out = Path(args.out) if args.out else None
    runs_doc = []
    rows = []
    manifest_layers = []
    for s in seeds:
        run = train.run_experiment(replace(task, seed=s), config, replace(train_cfg, seed=s))
        rep = run.spectral
        files = {}
        if out is not None:
            before = out.parent / f"{out.name}_seed{s}_before.mtx"
            after = out.parent / f"{out.name}_seed{s}_after.mtx"
            delta = out.parent / f"{out.name}_seed{s}_delta.mtx"
            matio.write_matrix(before, run.final_state.w_pre)
            matio.write_matrix(after, adapters.merged_weight(run.final_state, config))
            matio.write_matrix(delta, run.final_delta)
            files = {"before": str(before), "after": str(after), "delta": str(delta)}
            manifest_layers.append(
                {"name": f"seed{s}", "before_path": before.name, "after_path": after.name}
            )
        rows.append([
            s,
            float(run.loss_trajectory[-1]),
            rep.stable_rank if rep else None,
            rep.svd_entropy_nats if rep else None,
            rep.sigma_max if rep else None,
            rep.num_singular_values if rep else None,
            run.resolved_sp,
        ])
        runs_doc.append({
            "seed": s,
            "final_loss": float(run.loss_trajectory[-1]),
            "initial_loss": float(run.loss_trajectory[0]),
            "degenerate": rep is None,
            "stable_rank": rep.stable_rank if rep else None,
            "svd_entropy_nats": rep.svd_entropy_nats if rep else None,
            "sigma_max": rep.sigma_max if rep else None,
            "num_sv": rep.num_singular_values if rep else None,
            "resolved_sp": run.resolved_sp,
            "files": files,
        })
    doc = _envelope(args, seeds, started)
    doc["method"] = config.method.value
    doc["adapter"] = {
        "rank_r": config.rank_r, "scale_s": config.scale_s,
        "rotation_rank_rp": config.rotation_rank_rp,
        "sp_policy": {"mode": config.sp_policy.mode, "value": config.sp_policy.value},
    }
    doc["task"] = vars(task).copy()
    doc["train"] = vars(train_cfg).copy()
    doc["runs"] = runs_doc
    header = ["seed", "final_loss", "stable_rank", "svd_entropy_nats",
              "sigma_max", "num_sv", "resolved_sp"]
    if out is not None:
        manifest_path = out.parent / f"{out.name}_manifest.json"
        _atomic_write(manifest_path, json.dumps(
            {"layers": manifest_layers, "metadata": {"method": config.method.value}},
            indent=2) + "\n")
        _write_report(args.out, args.format, doc, header, rows)
    for row in rows:
        print(f"train: seed {row[0]} final_loss {row[1]:.6e}"
              + (f" entropy {row[3]:.4f}" if row[3] is not None else " (degenerate delta)"))
    return 0


def cmd_verify(args) -> int:
    started = time.monotonic()
    which = args.which
    if which == "theorem1":
        rep = theorems.verify_theorem1(args.trials, seed=args.seed)
        rows = [["theorem1", rep.trials, rep.passes, rep.min_gap, rep.max_closed_form_error]]
        payload = {"trials": rep.trials, "passes": rep.passes, "min_gap": rep.min_gap,
                   "max_closed_form_error": rep.max_closed_form_error,
                   "counterexample": rep.counterexample}
        ok = rep.ok
    elif which == "theorem2":
        rep = theorems.verify_theorem2(args.trials, epsilon=args.epsilon, seed=args.seed)
        rows = [
            ["skew_norm_bound", rep.trials, rep.passes_skew_norm, None, None],
            ["identity_distance", rep.trials, rep.passes_identity_distance,
             rep.worst_identity_distance, None],
            ["first_order_bound", rep.trials, rep.passes_first_order, None, None],
        ] + [[f"taylor_k{k}", rep.trials, v, rep.worst_taylor_slack, None]
             for k, v in rep.taylor_passes.items()]
        payload = {
            "trials": rep.trials, "epsilon": rep.epsilon,
            "passes_skew_norm": rep.passes_skew_norm,
            "passes_identity_distance": rep.passes_identity_distance,
            "passes_first_order": rep.passes_first_order,
            "taylor_passes": rep.taylor_passes,
            "worst_identity_distance": rep.worst_identity_distance,
            "worst_taylor_slack": rep.worst_taylor_slack,
            "counterexample": rep.counterexample,
        }
        ok = rep.ok
    elif which == "expbound":
        rep = theorems.verify_expbound(args.trials, seed=args.seed)
        rows = [[f"taylor_k{k}", rep.trials, v, rep.worst_slack, None]
                for k, v in rep.taylor_passes.items()]
        payload = {"trials": rep.trials, "taylor_passes": rep.taylor_passes,
                   "worst_slack": rep.worst_slack, "counterexample": rep.counterexample}
        ok = rep.ok
    elif which == "weyl":
        rep = spectral.verify_weyl_bound(args.trials, seed=args.seed)
        rows = [["weyl_margin", rep.trials, rep.passes, rep.min_margin, None]]
        payload = {"trials": rep.trials, "passes": rep.passes,
                   "min_margin": rep.min_margin, "counterexample": rep.counterexample}
        ok = rep.ok
    else:  # equivalence
        rep = adapters.verify_dora_equivalence(args.trials, seed=args.seed)
        rows = [["dora_equivalence", rep.trials, rep.passes, rep.max_rel_deviation, None]]
        payload = {"trials": rep.trials, "passes": rep.passes,
                   "max_rel_deviation": rep.max_rel_deviation,
                   "tolerance": rep.tolerance, "counterexample": rep.counterexample}
        ok = rep.ok
    doc = _envelope(args, args.seed, started)
    doc["which"] = which
    doc["result"] = payload
    doc["ok"] = bool(ok)
    header = ["check", "trials", "passes", "worst_slack_or_gap", "extra"]
    if args.out:
        _write_report(args.out, args.format, doc, header, rows)
    for row in rows:
        print(f"verify {which}: {row[0]} {row[2]}/{row[1]} passes")
    if not ok:
        print(f"verify {which}: FAILURES detected", file=sys.stderr)
        return 1
    return 0


def _bench_rows(results) -> list[list]:
    rows = []
    for r in results:
        rows.append([
            r.name, r.sizes.get("m"), r.sizes.get("n"), r.sizes.get("r"),
            r.sizes.get("r_p"), r.repeats, r.warmup,
            r.median_ns, r.p10_ns, r.p90_ns, r.speedup_vs_baseline,
        ])
    return rows


def cmd_bench(args) -> int:
    started = time.monotonic()
    which = args.which
    assertions = []
    results = []
    if which == "dora-forms":
        pair = bench.bench_dora_forms(args.m, args.n, args.rank, repeats=args.repeats,
                                      seed=args.seed)
        results = [pair.baseline, pair.candidate]
        if bench.asserts_dora_forms(args.m, args.n):
            assertions.append(("matrix_form_faster", pair.speedup > 1.0,
                               f"speedup {pair.speedup:.2f}"))
    elif which == "rotation-reorder":
        pair = bench.bench_rotation_reorder(args.m, args.n, args.rp, repeats=args.repeats,
                                            seed=args.seed)
        results = [pair.baseline, pair.candidate]
        if bench.asserts_rotation_reorder(args.m, args.n, args.rp):
            assertions.append(("reorder_speedup_3x", pair.speedup >= 3.0,
                               f"speedup {pair.speedup:.2f}"))
    elif which == "rotation-sweep":
        sizes = [int(tok) for tok in args.sweep_sizes.split(",")]
        pairs = bench.bench_rotation_sweep(sizes, r_p=args.rp, repeats=args.repeats,
                                           seed=args.seed)
        for pair in pairs:
            results.extend([pair.baseline, pair.candidate])
        speedups = [p.speedup for p in pairs]
        if bench.asserts_rotation_sweep(sizes):
            monotone = all(b >= 0.9 * a for a, b in zip(speedups, speedups[1:]))
            assertions.append(("speedup_monotone_in_n", monotone,
                               " -> ".join(f"{s:.2f}" for s in speedups)))
    elif which == "train-step":
        per_method = bench.bench_train_step(args.m, args.n, args.rank, args.rp,
                                            repeats=args.repeats, seed=args.seed)
        results = list(per_method.values())
        if min(args.m, args.n) >= bench.ASSERT_MIN_DIM:
            cost = {m: r.median_ns for m, r in per_method.items()}
            assertions.append(("lora_fastest",
                               cost[Method.LORA] == min(cost.values()), ""))
            assertions.append(("prediag_faster_than_dora",
                               cost[Method.PRE_DIAG] < cost[Method.DORA], ""))
            assertions.append(("sora_faster_than_dora",
                               cost[Method.SORA] < cost[Method.DORA], ""))
    else:  # backends
        pairs = bench.bench_backends(args.m, args.n, args.rp, repeats=args.repeats,
                                     seed=args.seed)
        for pair in pairs:
            results.extend([pair.baseline, pair.candidate])
    doc = _envelope(args, args.seed, started)
    doc["which"] = which
    doc["results"] = [
        {"name": r.name, **r.sizes, "repeats": r.repeats, "warmup": r.warmup,
         "median_ns": r.median_ns, "p10_ns": r.p10_ns, "p90_ns": r.p90_ns,
         "speedup_vs_baseline": r.speedup_vs_baseline}
        for r in results
    ]
    doc["assertions"] = [{"name": n, "passed": p, "detail": d} for n, p, d in assertions]
    header = ["name", "m", "n", "r", "r_p", "repeats", "warmup",
              "median_ns", "p10_ns", "p90_ns", "speedup_vs_baseline"]
    if args.out:
        _write_report(args.out, args.format, doc, header, _bench_rows(results))
    for r in results:
        extra = f" speedup {r.speedup_vs_baseline:.2f}" if r.speedup_vs_baseline else ""
        print(f"bench {which}: {r.name} median {r.median_ns / 1e6:.3f} ms{extra}")
    failed = [n for n, p, _ in assertions if not p]
    if failed:
        print(f"bench {which}: failed assertions: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wclab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="spectral metrics of before/after checkpoint pairs")
    pa.add_argument("--manifest", required=True)
    pa.add_argument("--out", default=None, help="report base path (writes .json/.csv)")
    pa.add_argument("--format", choices=("both", "csv", "json"), default="both")
    pa.set_defaults(func=cmd_analyze)

    pt = sub.add_parser("train", help="synthetic teacher-student training runs")
    pt.add_argument("--method", required=True, choices=[m.value for m in Method])
    pt.add_argument("--m", type=int, default=64)
    pt.add_argument("--n", type=int, default=64)
    pt.add_argument("--rank", type=int, default=4)
    pt.add_argument("--rp", type=int, default=1)
    pt.add_argument("--scale", type=float, default=2.0)
    pt.add_argument("--epsilon", type=float, default=0.01)
    pt.add_argument("--sp-fixed", type=float, default=None,
                    help="use a fixed rotation strength instead of the epsilon rule")
    pt.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    pt.add_argument("--lr", type=float, default=0.02)
    pt.add_argument("--steps", type=int, default=400)
    pt.add_argument("--batch", type=int, default=32)
    pt.add_argument("--samples", type=int, default=256)
    pt.add_argument("--lowrank-rank", type=int, default=2)
    pt.add_argument("--lowrank-scale", type=float, default=0.5)
    pt.add_argument("--diag-spread", type=float, default=0.3)
    pt.add_argument("--noise", type=float, default=0.0)
    pt.add_argument("--seeds", default="0")
    pt.add_argument("--out", default=None)
    pt.add_argument("--format", choices=("both", "csv", "json"), default="both")
    pt.set_defaults(func=cmd_train)

    pv = sub.add_parser("verify", help="run a numerical verifier")
    pv.add_argument("--which", required=True, choices=_VERIFY_CHOICES)
    pv.add_argument("--trials", type=int, default=1000)
    pv.add_argument("--seed", type=int, default=0)
    pv.add_argument("--epsilon", type=float, default=0.01)
    pv.add_argument("--out", default=None)
    pv.add_argument("--format", choices=("both", "csv", "json"), default="both")
    pv.set_defaults(func=cmd_verify)

    pb = sub.add_parser("bench", help="timing comparisons")
    pb.add_argument("--which", required=True, choices=_BENCH_CHOICES)
    pb.add_argument("--m", type=int, default=1024)
    pb.add_argument("--n", type=int, default=1024)
    pb.add_argument("--rank", type=int, default=8)
    pb.add_argument("--rp", type=int, default=1)
    pb.add_argument("--repeats", type=int, default=20)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--sweep-sizes", default="256,512,1024,2048")
    pb.add_argument("--out", default=None)
    pb.add_argument("--format", choices=("both", "csv", "json"), default="both")
    pb.set_defaults(func=cmd_bench)
    return parser


def _validate(args) -> str | None:
    if args.command == "verify" and args.trials < 1:
        return "--trials must be >= 1"
    if args.command == "bench":
        if args.repeats < 10:
            return "--repeats must be >= 10"
        if min(args.m, args.n) < 1 or args.rank < 1 or args.rp < 1:
            return "sizes must be positive"
    if args.command == "train" and (args.m < 1 or args.n < 1 or args.rank < 1):
        return "sizes must be positive"
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems; remap usage to 64
        return 0 if exc.code == 0 else 64
    problem = _validate(args)
    if problem is not None:
        print(f"wclab {args.command}: {problem}", file=sys.stderr)
        return 64
    args._argv = argv
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"wclab: {exc}", file=sys.stderr)
        return 3
    except (EqualityPrecheckError, ManifestError, MatrixFileError, ShapeError,
            ConfigError, WclabError, OSError) as exc:
        print(f"wclab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
