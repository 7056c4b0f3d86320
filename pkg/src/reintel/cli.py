"""Command-line entry point.

    reintel <stage> --config PATH [--variant N] [--inputs a,b] [--seed S] [--out DIR]
    reintel generate --out DIR [--n 256] [--test-n 64] [--seed S]

Exit codes: 0 ok, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from reintel import ReintelError
from reintel.pipeline import STAGES, ConfigError, load_config, run_stage, write_config_file
from reintel.synthetic import SyntheticSpec, generate_synthetic

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# Desk-scale settings written next to generated data: small stub encoders,
# default layer widths kept.
SYNTHETIC_CONFIG = {
    "train_path": "train.csv",
    "test_path": "test.csv",
    "out_dir": "run",
    "max_len": 32,
    "text_dim": 64,
    "image_size": 32,
    "epochs": 200,
    "patience": 10,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reintel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--variant", type=int, choices=(1, 2, 3))
        p.add_argument("--inputs", help="comma-separated prediction files")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (config key out_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    gen = sub.add_parser("generate", help="write a synthetic dataset and a matching config")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, default=256)
    gen.add_argument("--test-n", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--missing-rate", type=float, default=0.2)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = value
    for key, value in (("variant", args.variant), ("inputs", args.inputs), ("seed", args.seed), ("out_dir", args.out)):
        if value is not None:
            out[key] = str(value)
    return out


def _generate(args) -> None:
    from pathlib import Path

    if args.n < 8 or args.test_n < 8:
        raise UsageError("--n and --test-n must be at least 8")
    out = Path(args.out)
    spec = SyntheticSpec(missing_rate_counts=args.missing_rate, missing_rate_timestamp=args.missing_rate)
    generate_synthetic(args.n, args.seed, out, spec, filename="train.csv", prefix="tr")
    generate_synthetic(args.test_n, args.seed + 1, out, spec, filename="test.csv", prefix="te")
    write_config_file(out / "reintel.cfg", {**SYNTHETIC_CONFIG, "seed": args.seed})
    print(out / "reintel.cfg")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.stage == "generate":
            _generate(args)
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        artifact = run_stage(args.stage, cfg)
        print(artifact)
    except (UsageError, ConfigError) as exc:
        print(f"reintel: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ReintelError, OSError, ValueError) as exc:
        print(f"reintel {args.stage}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
