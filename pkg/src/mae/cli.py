"""Command-line entry point: ``mae <command> --config FILE [--seed N] [--out DIR]``."""
import argparse
import logging
import os
import sys

from . import experiments
from .config import ConfigError, ExperimentConfig, dump_config, load_config

COMMANDS = ("init-train", "online-learn", "estimate-eval", "control-eval", "simulate-eval", "report")


def build_parser():
    parser = argparse.ArgumentParser(prog="mae", description="Musculoskeletal autoencoder experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat 'section.key = value' file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="mae_out", help="artifact directory (default: mae_out)")
    parser.add_argument("--freeze", action="store_true", help="online-learn without updating the network")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"mae: config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config_effective.txt"), "w") as fh:
        fh.write(dump_config(cfg))
    try:
        if args.command == "report":
            ok, rows = experiments.run_report(args.out)
            for name, check, result in rows:
                print(f"{result}  {name}: {check}")
            return 0 if ok else 1
        run = {
            "init-train": lambda: experiments.run_init_train(cfg, args.out),
            "online-learn": lambda: experiments.run_online_learn(cfg, args.out, freeze=args.freeze),
            "estimate-eval": lambda: experiments.run_estimate_eval(cfg, args.out),
            "control-eval": lambda: experiments.run_control_eval(cfg, args.out),
            "simulate-eval": lambda: experiments.run_simulate_eval(cfg, args.out),
        }[args.command]
        metrics = run()
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"mae {args.command}: {exc}", file=sys.stderr)
        return 3
    for check, passed in metrics["checks"].items():
        print(f"{'PASS' if passed else 'FAIL'}  {check}")
    return 0 if all(metrics["checks"].values()) else 1


if __name__ == "__main__":
    sys.exit(main())
