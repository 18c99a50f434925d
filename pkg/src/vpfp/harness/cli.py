"""``vpfp`` command line: run configured experiments, summarize manifests, list the registry."""

import argparse
import sys
from pathlib import Path

import tomli

from .config import ConfigError, validate_config
from .experiments import CRITERIA, REGISTRY
from .manifest import MANIFEST_NAME, Manifest, ManifestError, emit_report
from .runner import ExperimentFailed, resolve_seed, run_experiment

EXIT_OK, EXIT_CHECKS, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _nonnegative_seed(text):
    try:
        seed = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return seed


def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return n


def build_parser():
    p = _Parser(prog="vpfp", description="Vlasov-Poisson-Fokker-Planck verification harness.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run the experiment named in a TOML config")
    r.add_argument("config", type=Path)
    r.add_argument("--out", type=Path, help="output directory (default: config 'out' or runs/<experiment>)")
    r.add_argument("--seed", type=_nonnegative_seed, help="overrides VPFP_SEED and the config seed")
    r.add_argument("--jobs", type=_positive_int, default=1, help="worker threads; results do not depend on it")
    rep = sub.add_parser("report", help="summarize one or more run directories")
    rep.add_argument("dirs", nargs="+", type=Path)
    rep.add_argument("--csv", type=Path, help="summary CSV path (default: report.csv in the first directory)")
    sub.add_parser("list", help="list registered experiments and the criteria they cover")
    return p


def _cmd_run(args, out, err):
    try:
        text = args.config.read_text()
    except OSError as e:
        print(f"vpfp: cannot read {args.config}: {e.strerror}", file=err)
        return EXIT_USAGE
    try:
        cfg = validate_config(text, str(args.config))
        seed, source = resolve_seed(cfg, args.seed, config_has_seed="seed" in tomli.loads(text))
    except (ConfigError, ValueError) as e:
        print(f"vpfp: {e}", file=err)
        return EXIT_USAGE
    cfg = cfg.with_seed(seed)
    try:
        man = run_experiment(cfg, args.out, args.jobs, source)
    except ExperimentFailed as e:
        print(f"vpfp: run failed: {e}", file=err)
        print(f"partial manifest: {Path(e.manifest.out_dir) / MANIFEST_NAME}", file=err)
        return EXIT_CHECKS
    for c in man.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} [{c.criterion or '-'}] {c.name}: {c.value} {c.relation} {c.tolerance}", file=out)
    print(f"manifest: {Path(man.out_dir) / MANIFEST_NAME}", file=out)
    return EXIT_OK if man.passed else EXIT_CHECKS


def _cmd_report(args, out, err):
    try:
        mans = [Manifest.load(d) for d in args.dirs]
    except ManifestError as e:
        print(f"vpfp: {e}", file=err)
        return EXIT_USAGE
    csv_path = args.csv or (args.dirs[0] / "report.csv")
    text, ok = emit_report(mans, csv_path)
    print(text, file=out)
    return EXIT_OK if ok else EXIT_CHECKS


def _cmd_list(out):
    for name, exp in REGISTRY.items():
        crit = ", ".join(str(c) for c in exp.criteria)
        print(f"{name:18s} criteria {crit:14s} {exp.summary}", file=out)
    missing = sorted(set(CRITERIA) - {c for e in REGISTRY.values() for c in e.criteria})
    if missing:
        print(f"uncovered criteria: {missing}", file=out)
    return EXIT_OK


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if args.command == "run":
        return _cmd_run(args, out, err)
    if args.command == "report":
        return _cmd_report(args, out, err)
    return _cmd_list(out)


if __name__ == "__main__":
    sys.exit(main())
