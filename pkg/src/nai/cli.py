"""Command-line entry point: ``nai gen | train | distill | infer | bench | sweep``.

Any flag can also come from ``--config FILE`` holding ``key = value`` lines
(keys are flag names without the leading dashes); flags given on the command
line win over file values.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .datasets import PRESETS, generate_sbm, load_dataset_dir, write_dataset
from .distill import ClassifierBank, DistillConfig, independent_bank, load_bank, offline_distill, online_distill, save_bank
from .engine import NapConfig, make_grid, pareto_front, render_report, write_predictions_csv
from .errors import ConfigError, InputError, NumericError
from .metering import MethodResult, benchmark, comparison_table
from .propagation import BACKENDS
from .training import TrainConfig, default_hidden

log = logging.getLogger("nai")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    """Raised instead of argparse's own ``sys.exit`` so exit codes stay ours."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _hidden(text: str) -> tuple[int, ...]:
    return tuple(_ints(text)) if text.strip() else ()


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="text file of 'key = value' lines; flags override it")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory written by 'gen' (or in the same format)")


def _add_bank(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bank", required=True, help="classifier bank directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nai", description="Node-adaptive inference for linear-propagation GNNs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a planted-partition dataset")
    _add_common(p)
    p.add_argument("--preset", default="sbm-calibrated", choices=sorted(PRESETS), help="base generator settings")
    p.add_argument("--n", type=int, help="node count")
    p.add_argument("--blocks", type=int, help="number of blocks (classes)")
    p.add_argument("--p-in", type=float, help="intra-block edge probability")
    p.add_argument("--p-out", type=float, help="inter-block edge probability")
    p.add_argument("--f", type=int, help="feature dimension")
    p.add_argument("--mu", type=float, help="class-mean separation")
    p.add_argument("--sigma", type=float, help="feature noise scale")
    p.add_argument("--fractions", type=_floats,
                   help="labeled,unlabeled,validation,test fractions, comma separated")

    p = sub.add_parser("train", help="train the top-order classifier f^(k)")
    _add_common(p)
    _add_data(p)
    p.add_argument("--backend", default="sgc", choices=BACKENDS)
    p.add_argument("--k", type=int, default=5, help="propagation order of the teacher")
    p.add_argument("--r-coef", type=float, default=0.5, help="convolution coefficient r in [0, 1]")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--hidden", type=_hidden, help="hidden widths, comma separated (default: backend's)")

    p = sub.add_parser("distill", help="offline then online distillation into orders 1..k-1")
    _add_common(p)
    _add_data(p)
    _add_bank(p)
    p.add_argument("--backend", choices=BACKENDS, help="expected backend of the bank")
    p.add_argument("--k", type=int, help="expected teacher order of the bank")
    p.add_argument("--temp", type=float, default=1.2, help="distillation temperature T")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="balance between hard and soft loss")
    p.add_argument("--r-ens", type=int, default=3, help="number of top-order classifiers in the ensemble teacher")
    p.add_argument("--epochs", type=int, default=200, help="offline epochs")
    p.add_argument("--online-epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--activation", default="tanh", choices=("tanh", "sigmoid"))
    p.add_argument("--teacher-mix", default="probs", choices=("probs", "logits"))
    p.add_argument("--stop-teacher-grad", action="store_true")

    for name, text in (("infer", "adaptive inference with one threshold setting"),
                       ("bench", "compare vanilla and adaptive inference (MACs and time)"),
                       ("sweep", "evaluate a threshold grid and report the Pareto front")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_data(p)
        _add_bank(p)
        p.add_argument("--batch-size", type=int, default=500)
        p.add_argument("--normalize", action="store_true", help="row-normalise before measuring distances")
        p.add_argument("--split", default="validation" if name == "sweep" else "test",
                       choices=("validation", "test"), help="which nodes to predict")
        if name == "infer":
            p.add_argument("--ts", type=float, required=True, help="distance threshold T_s")
            p.add_argument("--tmin", type=int, default=1)
            p.add_argument("--tmax", type=int, help="default: bank order k")
        elif name == "bench":
            p.add_argument("--nai", action="append", default=[], metavar="TS,TMIN,TMAX",
                           help="an adaptive setting to compare; repeatable")
            p.add_argument("--repetitions", type=int, default=3)
            p.add_argument("--warmup", type=int, default=1)
        else:
            p.add_argument("--ts", type=_floats, help="thresholds (default: quantiles of observed distances)")
            p.add_argument("--tmin", type=_ints, default=[1])
            p.add_argument("--tmax", type=_ints, help="default: 1..k")
            p.add_argument("--max-fp-macs", type=float, help="drop settings above this FP MACs total")
    return parser


def _config_tokens(path: str) -> list[str]:
    """Turn a ``key = value`` file into argv tokens placed before the real flags."""
    tokens = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            key, sep, value = s.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {s!r}")
            flag = "--" + key.strip().replace("_", "-")
            value = value.strip()
            if value.lower() in ("true", "yes", "on"):
                tokens.append(flag)
            elif value.lower() not in ("false", "no", "off"):
                tokens += [flag, value]
    return tokens


def parse_args(argv: list[str]) -> argparse.Namespace:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if known.config and argv:
        argv = [argv[0]] + _config_tokens(known.config) + list(argv[1:])
    return build_parser().parse_args(argv)


def _out_dir(args, default: str) -> Path:
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_gen(args) -> int:
    cfg = PRESETS[args.preset]
    overrides = {k: getattr(args, k) for k in ("n", "blocks", "p_in", "p_out", "f", "mu", "sigma")
                 if getattr(args, k) is not None}
    if args.fractions is not None:
        overrides["fractions"] = tuple(args.fractions)
    cfg = dataclasses.replace(cfg, seed=args.seed, **overrides)
    bundle = generate_sbm(cfg, name=args.preset)
    paths = write_dataset(bundle, _out_dir(args, "data"))
    g = bundle.graph
    print(f"wrote {bundle.name}: n={g.n} m={g.m} f={bundle.features.shape[1]} classes={bundle.n_classes}")
    for p in paths.values():
        print(f"  {p}")
    return EXIT_OK


def _context(args, r: float):
    return pipeline.prepare(load_dataset_dir(args.data), r)


def _print_val_acc(bank: ClassifierBank) -> None:
    for l in sorted(bank.val_acc):
        print(f"order {l}: validation accuracy {bank.val_acc[l]:.4f}")


def cmd_train(args) -> int:
    hidden = default_hidden(args.backend) if args.hidden is None else args.hidden
    cfg = TrainConfig(args.epochs, args.lr, args.weight_decay, args.dropout, None, args.seed, hidden)
    cfg.validate()
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    ctx = _context(args, args.r_coef)
    stack = pipeline.train_stack(ctx, args.k, args.backend)
    val = pipeline.validation_set(ctx, args.k, args.backend)
    teacher = pipeline.fit_teacher(ctx, stack, cfg, val)
    bank = ClassifierBank(args.backend, {args.k: teacher}, {args.k: val.accuracy(teacher)},
                          meta={"r": repr(ctx.r), "mode": "teacher", "seed": str(args.seed)})
    out = _out_dir(args, "bank")
    save_bank(bank, out)
    _print_val_acc(bank)
    print(f"bank written to {out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    bank = load_bank(args.bank)
    k = bank.k
    if args.k is not None and args.k != k:
        raise ConfigError(f"--k {args.k} does not match the bank's teacher order {k}")
    if args.backend is not None and args.backend != bank.backend:
        raise ConfigError(f"--backend {args.backend} does not match the bank's backend {bank.backend}")
    cfg = DistillConfig(args.temp, args.lam, args.r_ens, args.epochs, args.online_epochs, args.lr,
                        args.weight_decay, 0.0, args.seed, args.activation, args.teacher_mix,
                        args.stop_teacher_grad)
    cfg.validate(k)
    r = float(bank.meta.get("r", 0.5))
    ctx = _context(args, r)
    teacher = bank[k]
    hidden = tuple(w.shape[1] for w in teacher.weights[:-1])
    stack = pipeline.train_stack(ctx, k, bank.backend)
    val = pipeline.validation_set(ctx, k, bank.backend)
    labels, split = ctx.labels[: ctx.n_train], ctx.train_split()
    if cfg.lam == 0.0:
        # no teacher signal at all: the bank is plain per-order training
        new = independent_bank(stack, labels, split, cfg.train_config(hidden), k, val, ctx.bundle.n_classes)
        new.classifiers[k], new.val_acc[k] = teacher, val.accuracy(teacher)
        mode = "none"
    else:
        new = offline_distill(teacher, stack, labels, split, cfg, val, hidden)
        new, _ = online_distill(new, None, stack, labels, split, cfg, val)
        mode = "full"
    new.meta.update(bank.meta)
    new.meta.update(mode=mode, temperature=str(cfg.temperature), lam=str(cfg.lam), r_ens=str(cfg.r_ens),
                    seed=str(cfg.seed))
    out = Path(args.out) if args.out else Path(args.bank)
    save_bank(new, out)
    _print_val_acc(new)
    print(f"bank written to {out}")
    return EXIT_OK


def _inference_setup(args):
    bank = load_bank(args.bank)
    bank.check_complete()
    ctx = _context(args, float(bank.meta.get("r", 0.5)))
    nodes = getattr(ctx.split, args.split)
    if len(nodes) == 0:
        raise InputError(f"the {args.split} section is empty")
    return bank, ctx, nodes


def cmd_infer(args) -> int:
    bank, ctx, nodes = _inference_setup(args)
    tmax = bank.k if args.tmax is None else args.tmax
    cfg = NapConfig(args.ts, args.tmin, tmax, args.batch_size, args.normalize)
    cfg.validate(bank.k)
    outcome = pipeline.run_nai(ctx, bank, cfg, nodes)
    out = _out_dir(args, "infer")
    write_predictions_csv(outcome, out / "predictions.csv", ids=ctx.arrival)
    report = render_report(outcome, bank.k, ctx.labels)
    (out / "report.txt").write_text(report + "\n")
    print(report)
    return EXIT_OK


def _parse_setting(text: str) -> tuple[float, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--nai expects TS,TMIN,TMAX, got {text!r}")
    try:
        return float(parts[0]), int(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError(f"--nai expects TS,TMIN,TMAX, got {text!r}") from None


def _method_result(name, outcome, timing, labels) -> MethodResult:
    n = len(outcome.nodes)
    m = outcome.macs
    return MethodResult(name, outcome.accuracy(labels), m.total / n / 1e6, m.fp / n / 1e6,
                        timing.per_node_ms, timing.fp_per_node_ms)


def cmd_bench(args) -> int:
    bank, ctx, nodes = _inference_setup(args)
    settings = [_parse_setting(s) for s in args.nai]
    for ts, tmin, tmax in settings:
        NapConfig(ts, tmin, tmax, args.batch_size, args.normalize).validate(bank.k)
    runs = [("vanilla", lambda: pipeline.run_vanilla(ctx, bank, nodes, args.batch_size))]
    for ts, tmin, tmax in settings:
        cfg = NapConfig(ts, tmin, tmax, args.batch_size, args.normalize)
        runs.append((f"NAI(ts={ts:g},tmin={tmin},tmax={tmax})",
                     lambda cfg=cfg: pipeline.run_nai(ctx, bank, cfg, nodes)))
    results = []
    for name, run in runs:
        outcome = run()
        timing = benchmark(run, args.repetitions, args.warmup, len(nodes), args.batch_size)
        results.append(_method_result(name, outcome, timing, ctx.labels))
    table = comparison_table(results)
    out = _out_dir(args, "bench")
    (out / "comparison.csv").write_text(table.to_csv())
    (out / "comparison.txt").write_text(table.render() + "\n")
    print(table.render())
    return EXIT_OK


SWEEP_HEADER = ("ts", "tmin", "tmax", "acc", "mmacs", "fp_mmacs", "histogram")


def _candidate_row(c, n: int) -> list[str]:
    return [f"{c.ts:.9g}", str(c.tmin), str(c.tmax), f"{c.accuracy:.6f}", f"{c.macs.total / n / 1e6:.6f}",
            f"{c.fp_macs / n / 1e6:.6f}", " ".join(str(v) for v in c.histogram)]


def cmd_sweep(args) -> int:
    from .engine import sweep

    bank, ctx, nodes = _inference_setup(args)
    tmax_values = args.tmax or list(range(1, bank.k + 1))
    if max(tmax_values) > bank.k:
        raise ConfigError(f"tmax={max(tmax_values)} exceeds bank order k={bank.k}")
    ts_values = args.ts if args.ts is not None else pipeline.default_ts_grid(ctx, nodes, max(tmax_values))
    grid = make_grid(ts_values, args.tmin, tmax_values)
    if not grid:
        raise ConfigError("threshold grid is empty (every tmin exceeds every tmax)")
    for ts, tmin, tmax in grid:
        NapConfig(ts, tmin, tmax, args.batch_size).validate(bank.k)
    cands = sweep(ctx.graph, ctx.features, bank, ctx.summary, grid, nodes, ctx.labels, args.batch_size,
                  max_fp_macs=args.max_fp_macs, normalize=args.normalize)
    out = _out_dir(args, "sweep")
    n = len(nodes)
    for name, rows in (("candidates.csv", cands), ("pareto.csv", pareto_front(cands))):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            w.writerows(_candidate_row(c, n) for c in rows)
    print(f"{len(cands)} settings evaluated on {n} {args.split} nodes; best first:")
    print(",".join(SWEEP_HEADER))
    for c in cands[:10]:
        print(",".join(_candidate_row(c, n)))
    print(f"Pareto front written to {out / 'pareto.csv'}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "distill": cmd_distill, "infer": cmd_infer,
            "bench": cmd_bench, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(invalid="raise"):
            return COMMANDS[args.command](args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
