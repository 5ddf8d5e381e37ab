"""Command-line entry point: ``mladv <subcommand> ...``.

Exit status is 0 on success, 1 for bad arguments or unreadable inputs and 2
when a run fails for any other reason.
"""

import argparse
import os
import sys

from . import __version__, harness, kernels, metrics
from .attacks import METHODS, OPTIMIZERS, AttackConfig
from .defense import CompressionConfig, defense_eval, parse_grid
from .errors import ParseError, UsageError
from .netcore import TrainConfig, load_model, save_model, train, train_val_split
from .targets import OMEGA_MODES, parse_index_list

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

TRAIN_HEADER = "# MLADV-TRAIN v1"
DEFENSE_HEADER = "# MLADV-DEFENSE v1"
DEFENSE_SUMMARY_HEADER = "# MLADV-DEFENSE-SUMMARY v1"
VICTIM_HEADER = "# MLADV-VICTIM v1"

DEFENSE_COLUMNS = ("method", "uid", "success_before", "success_after", "count_before",
                   "count_after", "tau_before", "tau_after")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(out_dir, name):
    path = name if os.path.isabs(name) else os.path.join(out_dir, name)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _fmt(v):
    return metrics.format_value(v)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    ds = harness.synth_dataset(args.d, args.l, args.n, args.seed, amplitude=args.amplitude,
                               noise=args.noise)
    path = _out_path(args.out_dir, args.out)
    harness.save_dataset(ds, path)
    print(f"wrote {len(ds.instances)} instances (d={ds.d}, l={ds.l}) to {path}")


def _victim_rows(report):
    return [[k, _fmt(v) if isinstance(v, float) else str(v)] for k, v in report.items()]


def cmd_train(args):
    ds = harness.load_dataset(args.data)
    cfg = TrainConfig(args.lambda_tradeoff, args.batch_size, args.lr, args.epochs, args.seed,
                      tuple(args.hidden), args.activation)
    tr, val = train_val_split(ds.instances, 1.0 - args.val_fraction, args.seed)
    history = []
    p = train(tr, cfg, log=lambda e, j: history.append((e, j)))
    model_path = _out_path(args.out_dir, args.out)
    save_model(p, model_path)
    report = harness.victim_report(p, val)
    rows = [["epoch", str(e), _fmt(j)] for e, j in history]
    rows += [["validation"] + r for r in _victim_rows(report)]
    harness.write_table(_out_path(args.out_dir, args.report), TRAIN_HEADER,
                        ("kind", "key", "value"), rows)
    print(f"model -> {model_path}")
    print(f"held-out micro-F1 {report['micro_f1']:.4f}  ranking loss {report['ranking_loss']:.4f}"
          f"  attackable {report['attackable']}/{report['n']}")


def _attack_config(args):
    grid = None
    if args.epsilon_grid:
        try:
            grid = tuple(float(t) for t in args.epsilon_grid.split(","))
        except ValueError:
            raise UsageError(f"bad epsilon grid {args.epsilon_grid!r}") from None
    return AttackConfig(lambda_init=args.lambda_init, binary_search_steps=args.search_steps,
                        max_iter=args.max_iter, learning_rate=args.attack_lr,
                        mldp_max_iter=args.mldp_max_iter, epsilon_grid=grid,
                        rmsd_cap=args.rmsd_cap, threshold=args.threshold,
                        optimizer=args.optimizer, mldp_update=args.mldp_update)


def _methods(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if methods == ["all"]:
        return list(METHODS)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"methods must be drawn from {', '.join(METHODS)} (or 'all')")
    return methods


def cmd_attack(args):
    if args.strategy == "fixed" and not args.flip:
        raise UsageError("--strategy fixed needs --flip")
    if args.strategy != "fixed" and (args.flip or args.hold):
        raise UsageError("--flip/--hold only apply to --strategy fixed")
    strategy = harness.StrategySpec(args.strategy, args.samples, args.label, args.seed,
                                    args.omega, parse_index_list(args.flip),
                                    parse_index_list(args.hold))
    cfg = _attack_config(args)
    model_path, data_path = os.path.abspath(args.model), os.path.abspath(args.data)
    p = load_model(model_path)
    ds = harness.load_dataset(data_path)
    results = _out_path(args.out_dir, args.out)
    reports, _ = harness.run_experiment(p, ds, strategy, _methods(args.method), cfg,
                                        os.path.dirname(results) or ".", args.workers,
                                        model_path, data_path, os.path.basename(results))
    print(_render(reports))


def cmd_evaluate(args):
    if args.results is None and args.model is None:
        raise UsageError("evaluate needs --model/--data or --results")
    if args.model is not None:
        if args.data is None:
            raise UsageError("--model needs --data")
        p = load_model(args.model)
        ds = harness.load_dataset(args.data)
        report = harness.victim_report(p, ds.instances, args.threshold)
        harness.write_table(_out_path(args.out_dir, "victim.tsv"), VICTIM_HEADER,
                            ("key", "value"), _victim_rows(report))
        for k, v in report.items():
            print(f"{k:>14}  {_fmt(v) if isinstance(v, float) else v}")
    if args.results is not None:
        records = harness.load_results(args.results)
        reports = harness.aggregate_from_results(args.strategy_name, records)
        harness.write_table(_out_path(args.out_dir, args.out), harness.AGGREGATE_HEADER,
                            harness.AGGREGATE_COLUMNS,
                            [harness._aggregate_row(r) for r in reports])
        print(_render(reports))


def _manifest_inputs(args):
    model, data = args.model, args.data
    if model is None or data is None:
        mpath = os.path.join(os.path.dirname(os.path.abspath(args.results)), "manifest.json")
        if not os.path.exists(mpath):
            raise UsageError("no manifest.json next to the results; pass --model and --data")
        manifest = harness.load_manifest(mpath)
        model = model or manifest["model"]["path"]
        data = data or manifest["data"]["path"]
        if not model or not data:
            raise UsageError("manifest does not record model and data paths")
    return model, data


def cmd_defend(args):
    model, data = _manifest_inputs(args)
    p = load_model(model)
    ds = harness.load_dataset(data)
    records = [r for r in harness.load_results(args.results, ds) if r.ok]
    if not records:
        raise UsageError("results file has no successful rows")
    cfg = CompressionConfig(args.quality, args.block_size, parse_grid(args.grid))
    rows, summary, hist = defense_eval(records, p, cfg, args.threshold)
    harness.write_table(_out_path(args.out_dir, args.out), DEFENSE_HEADER, DEFENSE_COLUMNS,
                        [[r.method, str(r.uid), str(int(r.success_before)),
                          str(int(r.success_after)), str(r.count_before), str(r.count_after),
                          _fmt(r.tau_before), _fmt(r.tau_after)] for r in rows])
    stem = os.path.splitext(args.out)[0]
    harness.write_table(_out_path(args.out_dir, stem + "_summary.tsv"), DEFENSE_SUMMARY_HEADER,
                        ("method", "n", "success_before", "success_after", "tau_before",
                         "tau_after"),
                        [[m, str(s["n"])] + [_fmt(s[k]) for k in
                                              ("success_before", "success_after",
                                               "tau_before", "tau_after")]
                         for m, s in summary.items()])
    by_series = {}
    for (series, j), vals in hist.items():
        by_series.setdefault(series, {})[j] = vals
    hrows = []
    for series, values in by_series.items():
        hrows += harness._hist_rows(series, ds.label_names, values)
    harness.write_table(_out_path(args.out_dir, stem + "_histograms.tsv"),
                        harness.HISTOGRAM_HEADER,
                        ("series", "label", "bin_lo", "bin_hi", "count"), hrows)
    print(f"{'method':<8} {'n':>5} {'success':>9} {'after':>9} {'tau':>9} {'tau after':>9}")
    for m, s in summary.items():
        print(f"{m:<8} {s['n']:>5} {s['success_before']:>9.4f} {s['success_after']:>9.4f} "
              f"{s['tau_before']:>9.4f} {s['tau_after']:>9.4f}")


def _render(reports):
    cols = ("method", "n", "fail", "success", "rmsd", "ham_A", "ham_B", "F1", "rankloss",
            "mAP", "AUC", "tau_b", "lw_mAP")
    lines = [f"strategy: {reports[0].strategy}" if reports else "no results",
             "".join(f"{c:>10}" for c in cols)]
    for r in reports:
        vals = [r.method, r.n, r.n_failed] + r.values()[4:]
        cells = [f"{v:>10}" if isinstance(v, (str, int)) else
                 f"{'N.A.':>10}" if metrics.is_undefined(v) else f"{v:>10.4f}" for v in vals]
        lines.append("".join(cells))
    return "\n".join(lines)


def _reports_from_aggregate(path):
    _, rows = harness.read_table(path, harness.AGGREGATE_HEADER)
    reports = []
    for row in rows:
        vals = []
        for k in harness.AGGREGATE_COLUMNS:
            v = row[k]
            vals.append(v if k in ("strategy", "method") else
                        int(v) if k in ("n", "n_failed") else harness._num(v))
        reports.append(metrics.EvalReport(*vals))
    return reports


def cmd_report(args):
    if args.verify:
        bad = harness.rerun_experiment(args.verify, args.out_dir, args.workers)
        if bad:
            print("rerun differs in: " + ", ".join(bad))
            return EXIT_RUNTIME
        print("rerun reproduced every output byte for byte")
        return EXIT_OK
    if not args.aggregate:
        raise UsageError("report needs aggregate files or --verify MANIFEST")
    for path in args.aggregate:
        print(_render(_reports_from_aggregate(path)))
        print()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = _Parser(prog="mladv", description="Targeted multi-label adversarial perturbations.")
    parser.add_argument("--version", action="version",
                        version=f"mladv {__version__} ({kernels.BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=".")
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic multi-label dataset"))
    sp.add_argument("--d", type=int, default=400)
    sp.add_argument("--l", type=int, default=20)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--amplitude", type=float, default=2.0)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--out", default="data.txt")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train the victim predictor"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    sp.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    sp.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    sp.add_argument("--lambda-tradeoff", type=float, default=TrainConfig.lambda_tradeoff)
    sp.add_argument("--hidden", type=int, nargs="*", default=list(TrainConfig.hidden))
    sp.add_argument("--activation", default=TrainConfig.hidden_activation)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--out", default="model.txt")
    sp.add_argument("--report", default="train.tsv")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("attack", help="run attacks on sampled targets"))
    sp.add_argument("--method", required=True,
                    help=f"comma list from {','.join(METHODS)} or 'all'")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--strategy", required=True, choices=harness.STRATEGIES)
    sp.add_argument("--label", help="label name or index for reduce_label/augment_label")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--flip", default="")
    sp.add_argument("--hold", default="")
    sp.add_argument("--omega", default="C", choices=OMEGA_MODES)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", default="results.tsv")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--lambda-init", type=float, default=AttackConfig.lambda_init)
    sp.add_argument("--search-steps", type=int, default=AttackConfig.binary_search_steps)
    sp.add_argument("--max-iter", type=int, default=AttackConfig.max_iter)
    sp.add_argument("--attack-lr", type=float, default=AttackConfig.learning_rate)
    sp.add_argument("--mldp-max-iter", type=int, default=AttackConfig.mldp_max_iter)
    sp.add_argument("--mldp-update", default="printed", choices=("printed", "accumulate"))
    sp.add_argument("--epsilon-grid", help="comma list of step sizes for fgs/fg")
    sp.add_argument("--rmsd-cap", type=float)
    sp.add_argument("--optimizer", default="normalized", choices=tuple(OPTIMIZERS))
    sp.set_defaults(func=cmd_attack)

    sp = common(sub.add_parser("evaluate", help="victim quality or attack aggregates"))
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--results")
    sp.add_argument("--strategy-name", default="results")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", default="evaluation.tsv")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("defend", help="re-score adversarial examples after compression"))
    sp.add_argument("--results", required=True)
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--quality", type=int, default=75)
    sp.add_argument("--grid", default="20x20")
    sp.add_argument("--block-size", type=int, default=8)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", default="defense.tsv")
    sp.set_defaults(func=cmd_defend)

    sp = common(sub.add_parser("report", help="print aggregate tables or verify a rerun"))
    sp.add_argument("aggregate", nargs="*")
    sp.add_argument("--verify", metavar="MANIFEST")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        code = args.func(args)
    except (UsageError, ParseError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"mladv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"mladv: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
