"""``hetdetect`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .cli_io import (
    COMMANDS,
    FORMATS,
    RunConfig,
    emit,
    execute,
    load_config_file,
    resolve_threads,
)
from .errors import HetDetectError

log = logging.getLogger("hetdetect")


def _levels(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text!r} is not an unsigned 64-bit integer")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _stats_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("linear", "logistic"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float, help="fraction of each block used for testing")
    p.add_argument("--weight", choices=("theory", "simulation"))


def _sim_flags(p: argparse.ArgumentParser, with_beta: bool) -> None:
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    if with_beta:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--beta", type=float)
        g.add_argument("--null", action="store_true", default=argparse.SUPPRESS,
                       help="homogeneous null (the default)")
    p.add_argument("--replicates", "--B", type=int, dest="replicates")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--threads", type=int)
    p.add_argument("--levels", type=_levels, help="comma separated nominal levels")
    p.add_argument("--hetero-dim", type=int, dest="hetero_dim")
    p.add_argument("--shift-scale", type=float, dest="shift_scale")
    if with_beta:
        p.add_argument("--calibration", choices=("nominal", "empirical"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetdetect",
        description="Detect heterogeneity across data blocks in distributed M-estimation.",
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument("--version", action="version", version=f"hetdetect {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", argument_default=argparse.SUPPRESS,
                       help="test real block-partitioned data")
    _common(t)
    t.add_argument("--blocks", help="block manifest (JSON)")
    _stats_flags(t)
    t.add_argument("--seed", type=_u64)
    t.add_argument("--shuffle-seed", type=_u64, dest="shuffle_seed",
                   help="shuffle rows before splitting instead of using the file order")
    t.add_argument("--threads", type=int)

    s = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="Monte Carlo FWER and power")
    _common(s)
    _stats_flags(s)
    _sim_flags(s, with_beta=True)

    c = sub.add_parser("coverage", argument_default=argparse.SUPPRESS,
                       help="null coverage of W and TW at nominal levels")
    _common(c)
    _stats_flags(c)
    _sim_flags(c, with_beta=False)

    pc = sub.add_parser("power-calc", argument_default=argparse.SUPPRESS,
                        help="local-alternative SNR and regime classification")
    _common(pc)
    pc.add_argument("--K", type=int, dest="K")
    pc.add_argument("--n", type=int)
    pc.add_argument("--beta", type=float)
    pc.add_argument("--c", type=float)
    pc.add_argument("--sigma", type=float)
    pc.add_argument("--sigma-minus", type=float, dest="sigma_minus")
    pc.add_argument("--sigma-plus", type=float, dest="sigma_plus")
    pc.add_argument("--gamma", type=float)

    go = sub.add_parser("gamma-opt", argument_default=argparse.SUPPRESS,
                        help="split fraction minimizing the ECT error bound")
    _common(go)
    go.add_argument("--n", type=int)
    go.add_argument("--mu", type=float)
    go.add_argument("--K", type=int, dest="K")
    go.add_argument("--eps", type=float)
    return parser


def config_from_args(ns: argparse.Namespace, env=None) -> RunConfig:
    values = vars(ns).copy()
    command = values.pop("command")
    values.pop("verbose", None)
    path = values.pop("config", None)
    merged = load_config_file(path) if path else {}
    if values.pop("null", False):
        values["beta"] = None
    merged.update(values)
    merged["threads"] = resolve_threads(merged.get("threads"), env)
    assert command in COMMANDS
    return RunConfig.from_mapping(command, merged)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = config_from_args(ns)
        doc = execute(config)
        emit(doc, config.format, config.out, stream=sys.stdout)
    except HetDetectError as exc:
        print(f"hetdetect: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
