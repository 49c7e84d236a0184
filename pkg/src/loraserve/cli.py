"""Command-line entry points: verify-sgmv, roofline, simulate, compare.

Exit status: 0 when every check passes, 1 on a verification failure,
2 on a configuration error.
"""
import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from loraserve import costmodel, sgmv, simulator
from loraserve.config import ConfigError, load_config
from loraserve.costmodel import CostParams, SgmvShape
from loraserve.workload import POPULARITIES, assign_models

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
TOLERANCE = 1e-10

HIDDEN_CHOICES = (8, 64, 128)
RANK_CHOICES = (8, 16, 32, 64)
ROOFLINE_HEADER = ("batch_size", "distribution", "flop", "io_bytes", "intensity", "est_latency")
COMPARE_HEADER = ("distribution", "punica_tok_s", "baseline_tok_s", "ratio",
                  "punica_p50_ms", "baseline_p50_ms", "latency_delta_ms",
                  "punica_median_batch", "baseline_median_batch")


# verify-sgmv

def random_case(rng, popularity):
    """A random SGMV batch whose segments follow one popularity grouping.

    Shapes stay small: at most 8 segments and 64 rows.
    """
    h1 = int(rng.choice(HIDDEN_CHOICES))
    h2 = int(rng.choice(HIDDEN_CHOICES))
    ranks = [r for r in RANK_CHOICES if r <= min(h1, h2)]
    rank = int(rng.choice(ranks))
    s_n = int(rng.integers(1, 9 if popularity == "distinct" else 65))
    ids = assign_models(s_n, popularity, None, rng=rng)
    sizes = np.bincount(ids)
    sizes = [int(s) for s in sizes if s > 0]
    return sgmv.random_batch(rng, sizes, h1, h2, rank, scale=1.0 / np.sqrt(h1))


def check_case(batch, fault=False):
    """Max abs deviation of the segmented kernel from both oracles."""
    y = sgmv.lora_addon(batch)
    if fault:
        y = y.copy()
        y.flat[0] += 1e-6
    loop = sgmv.lora_loop_oracle(batch)
    bmm = sgmv.gather_bmm_oracle(batch)
    if y.size == 0:
        return 0.0
    return float(max(np.abs(y - loop).max(), np.abs(y - bmm).max(), np.abs(loop - bmm).max()))


def verify_sgmv(trials, seed, inject_fault=False, out=None):
    """Run the three-way equivalence suite; returns (failures, max deviation)."""
    out = out or sys.stdout
    rng = np.random.default_rng(seed)
    failures, worst = 0, 0.0
    for t in range(trials):
        pop = POPULARITIES[t % len(POPULARITIES)]
        batch = random_case(rng, pop)
        dev = check_case(batch, fault=inject_fault and t == 0)
        worst = max(worst, dev)
        if not dev < TOLERANCE:
            failures += 1
            m = batch.models[0]
            print(f"FAIL trial={t} popularity={pop} n={batch.segments.n} s_n={batch.segments.total} "
                  f"h1={m.h1} h2={m.h2} r={m.rank} max_dev={dev:.3e}", file=out)
    return failures, worst


def cmd_verify_sgmv(args, cfg):
    if args.trials == 0:
        print("warning: 0 trials requested, nothing verified", file=sys.stderr)
        return EXIT_OK
    t0 = time.perf_counter()
    failures, worst = verify_sgmv(args.trials, args.seed if args.seed is not None else 0,
                                  args.inject_fault)
    status = "PASS" if failures == 0 else "FAIL"
    print(f"{status} verify-sgmv backend={sgmv.BACKEND} trials={args.trials} failures={failures} "
          f"max_dev={worst:.3e} tol={TOLERANCE:.0e} elapsed={time.perf_counter() - t0:.2f}s")
    return EXIT_OK if failures == 0 else EXIT_FAIL


# roofline

def roofline_rows(params, h_in=16, h_out=4096, max_batch=64, alpha=1.5):
    rows = []
    for dist in POPULARITIES:
        for bs in range(1, max_batch + 1):
            shape = SgmvShape(costmodel.models_for_distribution(dist, bs, alpha), bs, h_in, h_out)
            rows.append((bs, dist, costmodel.sgmv_flop(shape),
                         costmodel.sgmv_io_bytes(shape, params.elem_bytes),
                         costmodel.arithmetic_intensity(shape, params.elem_bytes),
                         costmodel.sgmv_latency(shape, params)))
    return rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_roofline(args, cfg):
    params = CostParams.from_dict(cfg["cost_model"])
    rows = roofline_rows(params, args.h_in, args.h_out, args.max_batch, cfg["workload"]["alpha"])
    path = os.path.join(args.out, "roofline.csv")
    write_csv(path, ROOFLINE_HEADER, [(b, d, f, i, repr(a), repr(l)) for b, d, f, i, a, l in rows])
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


# simulate / compare

def write_run(log, out_dir, cfg, prefix=""):
    o = cfg["output"]
    steps = os.path.join(out_dir, prefix + o["steps_csv"])
    with open(steps, "w", newline="") as fh:
        fh.write(log.steps_csv())
    summary = os.path.join(out_dir, prefix + o["summary"])
    with open(summary, "w") as fh:
        fh.write(log.summary_json())
    write_csv(os.path.join(out_dir, prefix + "throughput.csv"), ("window_start", "tokens_per_s"),
              [(f"{t:.6f}", repr(r)) for t, r in log.windowed_throughput(o["throughput_window"])])
    return steps, summary


def cmd_simulate(args, cfg):
    log = simulator.run(cfg, mode=args.mode)
    steps, summary = write_run(log, args.out, cfg, f"{args.mode}_" if args.prefix else "")
    s = log.summary()
    print(f"{args.mode}: {s['finished']} finished, {s['total_tokens']} tokens, "
          f"{s['throughput_tok_s']:.1f} tok/s, p50 {1e3 * s['p50_token_latency_s']:.2f} ms/token, "
          f"p99 {1e3 * s['p99_token_latency_s']:.2f} ms/token, median batch {s['median_batch_size']:g}, "
          f"migrations {s['migrations']}, peak GPUs busy {s['peak_gpus_busy']}")
    print(f"wrote {steps} and {summary}")
    return EXIT_OK


def _with_popularity(cfg, pop):
    return dict(cfg, workload=dict(cfg["workload"], popularity=pop))


def _run_summary(job):
    cfg, mode = job
    return simulator.run(cfg, mode=mode).summary()


def compare(cfg, distributions=POPULARITIES, jobs=1):
    """Summaries of both modes per distribution, on identical workloads."""
    work = [(_with_popularity(cfg, d), m) for d in distributions for m in ("punica", "baseline")]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_summary, work))
    else:
        results = [_run_summary(w) for w in work]
    out = {}
    for i, d in enumerate(distributions):
        out[d] = {"punica": results[2 * i], "baseline": results[2 * i + 1]}
    return out


def compare_rows(results):
    rows = []
    for d, r in results.items():
        p, b = r["punica"], r["baseline"]
        ratio = p["throughput_tok_s"] / b["throughput_tok_s"] if b["throughput_tok_s"] else float("inf")
        pl, bl = 1e3 * p["p50_token_latency_s"], 1e3 * b["p50_token_latency_s"]
        rows.append((d, round(p["throughput_tok_s"], 3), round(b["throughput_tok_s"], 3), round(ratio, 4),
                     round(pl, 4), round(bl, 4), round(pl - bl, 4),
                     p["median_batch_size"], b["median_batch_size"]))
    return rows


def cmd_compare(args, cfg):
    dists = args.distributions or list(POPULARITIES)
    rows = compare_rows(compare(cfg, dists, args.jobs))
    path = os.path.join(args.out, "compare.csv")
    write_csv(path, COMPARE_HEADER, rows)
    print(f"{'distribution':<12} {'punica tok/s':>13} {'baseline tok/s':>15} {'ratio':>7} "
          f"{'delta ms/tok':>13} {'batch p/b':>10}")
    for r in rows:
        print(f"{r[0]:<12} {r[1]:>13.1f} {r[2]:>15.1f} {r[3]:>7.2f} {r[6]:>13.2f} "
              f"{r[7]:>5g}/{r[8]:<4g}")
    print(f"wrote {path}")
    return EXIT_OK


# plumbing

def build_parser():
    parser = argparse.ArgumentParser(prog="loraserve", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="YAML experiment config layered over the defaults")
    parser.add_argument("--seed", type=int, help="override workload.seed")
    parser.add_argument("--out", help="output directory (default: output.dir)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-sgmv", help="three-way SGMV oracle equivalence suite")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--inject-fault", action="store_true",
                   help="perturb one output element to exercise the failure path")
    p.set_defaults(func=cmd_verify_sgmv)

    p = sub.add_parser("roofline", help="SGMV roofline sweep to roofline.csv")
    p.add_argument("--h-in", type=int, default=16)
    p.add_argument("--h-out", type=int, default=4096)
    p.add_argument("--max-batch", type=int, default=64)
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("simulate", help="simulate one serving mode")
    p.add_argument("--mode", choices=("punica", "baseline"), default="punica")
    p.add_argument("--prefix", action="store_true", help="prefix output files with the mode name")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="both modes on the same workload, per distribution")
    p.add_argument("--distributions", nargs="+", choices=POPULARITIES)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "trials", 0) < 0:
        print("error: --trials must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        overrides = {"workload": {"seed": args.seed}} if args.seed is not None else None
        cfg = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out = args.out or cfg["output"]["dir"]
    if args.command != "verify-sgmv":
        os.makedirs(args.out, exist_ok=True)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
