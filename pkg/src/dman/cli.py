"""``dman`` command line: gen-data, train, eval, bench, ablate.

Exit status is 0 on success, 1 for invalid input (arguments, config,
data, checkpoint) and 2 when a run fails (non-finite loss, I/O).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate_synthetic, ingest, segment, write_log
from .estimator import DMANRecommender
from .evaluation import efficiency_bench
from .validation import check_count, check_fraction

logger = logging.getLogger("dman")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _name_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def write_flat(path, values: dict):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


def write_loss_log(path, rows):
    lines = ["epoch\tsegment\tmain_loss\taux_loss\n"]
    lines += [f"{e}\t{n}\t{m:.10g}\t{a:.10g}\n" for e, n, m, a in rows]
    Path(path).write_text("".join(lines), encoding="utf-8")


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args):
    users = check_count(args.users, "--users")
    segments = check_count(args.segments, "--segments")
    window = check_count(args.window, "--window", 2)
    vocab = check_count(args.vocab, "--vocab")
    strength = check_fraction(args.period_strength, "--period-strength")
    log, _ = generate_synthetic(users, segments, window, vocab, strength, seed=args.seed)
    write_log(log, args.out)
    print(f"wrote {len(log)} interactions for {users} users to {args.out}")
    return EXIT_OK


def _load_run(args):
    cfg = RunConfig.load(args.config)
    if getattr(args, "data", None):
        cfg.data_path = args.data
    if getattr(args, "out", None):
        cfg.out_path = args.out
    if not cfg.data_path:
        raise ValueError("no data: set data_path in the config or pass --data")
    return cfg


def _fit(cfg, histories, n_items, **overrides):
    params = {**cfg.estimator_params(), **overrides}
    t0 = time.perf_counter()
    est = DMANRecommender(**params).fit(histories, n_items=n_items)
    return est, time.perf_counter() - t0


def cmd_train(args):
    cfg = _load_run(args)
    if not cfg.out_path:
        raise ValueError("no output path: set out_path in the config or pass --out")
    log = ingest(cfg.data_path)
    hist = segment(log, cfg.window_t)
    est, secs = _fit(cfg, hist, log.n_items)
    est.save(cfg.out_path)
    loss_path = cfg.out_path + ".loss.tsv"
    write_loss_log(loss_path, est.loss_log_)
    for e in range(cfg.epochs):
        rows = [r for r in est.loss_log_ if r[0] == e]
        if rows:
            print(f"epoch {e}\tmain {np.mean([r[2] for r in rows]):.5f}\t"
                  f"aux {np.mean([r[3] for r in rows]):.5f}")
    print(f"trained {cfg.variant} on {len(hist)} users in {secs:.1f}s; "
          f"checkpoint {cfg.out_path}; loss log {loss_path}")
    return EXIT_OK


def cmd_eval(args):
    est = DMANRecommender.load(args.checkpoint)
    log = ingest(args.data)
    if log.n_items > est.n_items_:
        raise ValueError(f"data uses item id {log.n_items} but the checkpoint knows {est.n_items_} items")
    hist = segment(log, est.window_t)
    metrics = est.evaluate(hist, ks=args.k, candidate_mode=args.candidates, target=args.target)
    for line in metrics.lines():
        print(line)
    if args.metrics_out:
        write_flat(args.metrics_out, metrics.as_flat())
    return EXIT_OK


def cmd_bench(args):
    est = DMANRecommender.load(args.checkpoint)
    reports = efficiency_bench(est.model_, args.variants, args.history_segments,
                               users=args.users, repeats=args.repeats, seed=args.seed)
    flat = {}
    for r in reports:
        print(r.line())
        flat[f"{r.variant}.N{r.history_segments}.seconds_per_1024_users"] = r.seconds_per_1024_users
        flat[f"{r.variant}.N{r.history_segments}.scores_per_user"] = r.scores_computed
    if args.out:
        write_flat(args.out, flat)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_run(args)
    variants = ["dman"] + [v for v in args.variants if v != "dman"]
    seeds = args.seeds or [cfg.seed]
    log = ingest(cfg.data_path)
    hist = segment(log, cfg.window_t)
    ks = args.k
    rows = []
    for variant in variants:
        for seed in seeds:
            est, secs = _fit(cfg, hist, log.n_items, variant=variant, seed=seed)
            metrics = est.evaluate(ks=ks)
            rows.append((variant, seed, metrics, secs))
            logger.info("%s seed %d: HR@%d %.4f (%.1fs)", variant, seed, ks[0],
                        metrics.hit_rate[ks[0]], secs)
    header = ["variant", "seeds"] + [f"{m}@{k}" for k in ks for m in ("HR", "NDCG")] + ["train_s"]
    print("\t".join(header))
    flat = {}
    for variant in variants:
        got = [r for r in rows if r[0] == variant]
        cells = [variant, ",".join(str(r[1]) for r in got)]
        for k in ks:
            hr = float(np.mean([r[2].hit_rate[k] for r in got]))
            nd = float(np.mean([r[2].ndcg[k] for r in got]))
            cells += [f"{hr:.4f}", f"{nd:.4f}"]
            flat[f"{variant}.hr@{k}"] = hr
            flat[f"{variant}.ndcg@{k}"] = nd
        cells.append(f"{sum(r[3] for r in got):.1f}")
        print("\t".join(cells))
    if args.out:
        write_flat(args.out, flat)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="dman", description="Memory-augmented sequential recommender.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic behaviour log")
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--segments", type=int, default=6)
    g.add_argument("--window", type=int, default=20)
    g.add_argument("--vocab", type=int, default=5000)
    g.add_argument("--period-strength", type=float, default=0.9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="overrides data_path")
    t.add_argument("--out", help="checkpoint path; overrides out_path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rank held-out items with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=_int_list, default=[10, 50, 100])
    e.add_argument("--candidates", choices=("all", "sampled"), default="all")
    e.add_argument("--target", choices=("test", "valid"), default="test")
    e.add_argument("--metrics-out", help="also write key=value metrics here")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference time per 1024 users vs history length")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--history-segments", type=_int_list, default=[4, 16, 64])
    b.add_argument("--variants", type=_name_list, default=["dman", "full_scan"])
    b.add_argument("--users", type=int, default=1024)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="also write key=value results here")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train dman and its variants with shared seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--data", help="overrides data_path")
    a.add_argument("--variants", type=_name_list, default=["xl", "fifo", "nran"])
    a.add_argument("--seeds", type=_int_list_or_zero, default=None)
    a.add_argument("--k", type=_int_list, default=[10])
    a.add_argument("--out", help="also write key=value results here")
    a.set_defaults(func=cmd_ablate)
    return p


def _int_list_or_zero(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return vals


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, LookupError) as exc:
        print(f"dman {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, OSError, RuntimeError) as exc:
        print(f"dman {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
