"""``flowline-bench`` command line entry point.

Exit status is 0 on success, 2 for a bad pipeline description or arguments,
and 3 when the pipeline fails at run time.
"""

from __future__ import annotations

import argparse
import json
import sys

from flowline.bench import harness
from flowline.bench.spec import load_spec, parse_spec, _parse_grid_token, _Line
from flowline.errors import FlowlineError, GridTooLarge, RunFailed, SpecError
from flowline.optimizer import RULE_NAMES
from flowline.serialization import fingerprint

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_RUNTIME = 3


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True, help="pipeline description file")
    common.add_argument("--mode", choices=harness.MODES, default=None,
                        help="run mode (default: hand-tuned; tuned for dump-graph and fingerprint)")
    common.add_argument("--epochs", type=int, default=None, help="measured epochs (default 5)")
    common.add_argument("--budget-cpu", type=float, default=None, help="tuner CPU budget in parallelism units")
    common.add_argument("--budget-ram-mb", type=float, default=None, help="tuner RAM budget in MiB")
    common.add_argument("--disable-rule", action="append", default=[], metavar="NAME",
                        help="disable a static rewrite; repeatable")
    common.add_argument("--deterministic", type=_bool, default=None, metavar="BOOL",
                        help="force deterministic (true) or nondeterministic (false) ordering")
    common.add_argument("--seed", type=int, default=None, help="override every shuffle seed")
    common.add_argument("--cost-mode", choices=("sleep", "spin"), default=None,
                        help="how synthetic costs are spent")
    common.add_argument("--report", default=None, metavar="PATH", help="write a JSON report here")
    common.add_argument("--tuner-dump", action="store_true", help="include the tuner's model dump")

    p = argparse.ArgumentParser(prog="flowline-bench", description="Run and compare input pipelines.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one mode and report timings")
    sub.add_parser("compare", parents=[common], help="sequential vs hand-tuned vs tuned")
    g = sub.add_parser("gridsearch", parents=[common], help="measure every point of a knob grid")
    g.add_argument("--grid", action="append", default=[], metavar="LABEL.ATTR=VALUES",
                   help="grid axis such as map2.parallel=1,2,4 or prefetch3.size=1..8; repeatable")
    sub.add_parser("dump-graph", parents=[common], help="print the dataset graph and applied rewrites")
    sub.add_parser("fingerprint", parents=[common], help="print the graph fingerprint")
    return p


def _check_rules(names) -> None:
    for n in names:
        if n not in RULE_NAMES:
            raise SpecError(0, 0, f"unknown rewrite rule {n!r} (known: {', '.join(RULE_NAMES)})")


def _grid(spec, entries):
    if not entries:
        return None
    grid = {}
    for i, entry in enumerate(entries, 1):
        line = _Line(i, entry)
        key, values = _parse_grid_token(line, entry, 1)
        try:
            op = spec.op(key[0])
        except KeyError:
            raise SpecError(0, 0, f"--grid refers to unknown label {key[0]!r}") from None
        if not isinstance(op.attrs.get(key[1]), harness.Knob):
            raise SpecError(0, 0, f"--grid: {key[0]}.{key[1]} is not a tunable attribute")
        grid[key] = values
    return grid


def _write_report(path: str | None, payload) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _run_kwargs(args) -> dict:
    return dict(epochs=args.epochs, budget_cpu=args.budget_cpu, budget_ram_mb=args.budget_ram_mb,
                disabled_rules=args.disable_rule, deterministic=args.deterministic, seed=args.seed,
                cost_mode=args.cost_mode)


def _print_run(rep: harness.RunReport, out) -> None:
    lat = rep.per_batch_latency
    print(f"mode {rep.mode}: {rep.epochs} epochs of {rep.elements_per_epoch} elements", file=out)
    print(f"epoch wall time (median) {rep.epoch_wall_time:.4f}s, per element {rep.per_element_time * 1e3:.3f}ms",
          file=out)
    print(f"latency ms: mean {lat['mean'] * 1e3:.3f} p50 {lat['p50'] * 1e3:.3f} p90 {lat['p90'] * 1e3:.3f} "
          f"p99 {lat['p99'] * 1e3:.3f}", file=out)
    if rep.applied_rewrites:
        print("rewrites: " + ", ".join(f"{r}@{p}" for r, p in rep.applied_rewrites), file=out)
    if rep.tuned_parameters:
        print("parameters: " + json.dumps(rep.tuned_parameters, sort_keys=True), file=out)
    if rep.tuner.get("dump"):
        print(rep.tuner["dump"], file=out)


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_SPEC
    try:
        spec = load_spec(args.spec)
        _check_rules(args.disable_rule)
        if args.epochs is not None and args.epochs < 1:
            raise SpecError(0, 0, "--epochs must be >= 1")
        cmd = args.command
        if cmd == "run":
            rep = harness.run(spec, args.mode or "hand-tuned", tuner_dump=args.tuner_dump, **_run_kwargs(args))
            _print_run(rep, out)
            _write_report(args.report, rep.to_dict())
        elif cmd == "compare":
            table = harness.compare(spec, tuner_dump=args.tuner_dump, **_run_kwargs(args))
            print(table.to_text(), file=out)
            _write_report(args.report, table.to_dict())
        elif cmd == "gridsearch":
            grid = _grid(spec, args.grid)
            kw = _run_kwargs(args)
            result = harness.gridsearch(spec, grid, **kw)
            print(result.to_text(), file=out)
            _write_report(args.report, result.to_dict())
        elif cmd in ("dump-graph", "fingerprint"):
            node, report, _ = harness.prepare(spec, args.mode or "tuned", disabled_rules=args.disable_rule)
            if cmd == "dump-graph":
                print(harness._describe_graph(node), file=out)
                if report is not None:
                    print(report.to_text(), file=out)
                _write_report(args.report, {"graph": harness._describe_graph(node),
                                            "rewrites": report.to_dict() if report else None})
            else:
                fp = fingerprint(node).hex
                print(fp, file=out)
                _write_report(args.report, {"fingerprint": fp})
    except (SpecError, GridTooLarge) as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except OSError as exc:
        print(f"spec error: cannot read {args.spec}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_SPEC
    except RunFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except FlowlineError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
