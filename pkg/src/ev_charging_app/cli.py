"""
Command-line front end.

    ev-charging generate --days 183 --seed 7 --out-dir data
    ev-charging fit --trip-log data/trips.csv --split-date 2012-04-03
    ev-charging solve --model out/model.json --prices data/prices.csv --phi 2,10,100
    ev-charging simulate --policies optimal,naive,night,low_price --phi 10
    ev-charging evaluate --phi 2,5,10,100,1000

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from ev_charging.errors import ConfigError, DataError, NumericalError

from .config import RunConfig
from .core import describe, run_command

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

COMMANDS = ("fit", "solve", "simulate", "generate", "evaluate")

# flag -> (RunConfig field, type, help)
FLAGS: dict[str, tuple[str, Any, str]] = {
    "--trip-log": ("trip_log", str, "trip log CSV (timestamp,state)"),
    "--prices": ("prices", str, "hourly price CSV (timestamp,price_eur_mwh)"),
    "--model": ("model", str, "driving model JSON"),
    "--out-dir": ("out_dir", str, "output directory"),
    "--phi": ("phis", str, "comma-separated unserved-driving penalties (currency/h)"),
    "--mode": ("mode", str, "action set: charge or v2g"),
    "--horizon-minutes": ("horizon_minutes", int, "planning horizon T"),
    "--grid-levels": ("grid_levels", int, "number of energy levels M"),
    "--roll-every-minutes": ("roll_every_minutes", int, "re-solve interval of the rolling horizon"),
    "--split-date": ("split_date", str, "first day of the test period (YYYY-MM-DD)"),
    "--init-knots": ("init_knots", int, "initial number of spline knots"),
    "--max-knots": ("max_knots", int, "maximum number of spline knots"),
    "--max-states": ("max_states", int, "largest model order tried"),
    "--n-starts": ("n_starts", int, "optimizer starts per model order"),
    "--policies": ("policies", str, "comma-separated policies to replay"),
    "--scenarios": ("scenarios", int, "simulated driving scenarios (0 replays the trip log)"),
    "--lookup": ("lookup", str, "grid policy lookup: nearest or lookahead"),
    "--initial-soc": ("initial_soc", float, "initial state of charge as a fraction"),
    "--days": ("days", int, "days to generate or to simulate per scenario"),
    "--seed": ("seed", int, "root random seed"),
    "--threads": ("threads", int, "worker threads"),
    "--log-level": ("log_level", str, "DEBUG, INFO, WARNING, ERROR or CRITICAL"),
}
SWITCHES: dict[str, tuple[str, str]] = {
    "--fixed-horizon": ("fixed_horizon", "solve once instead of rolling"),
    "--periodic": ("periodic", "periodic spline basis for the exit probability"),
    "--long-csv": ("long_csv", "also dump policies as a long CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ev-charging",
        description="Fit EV driving models and compute cost-optimal charging policies.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", type=Path, default=None, help="TOML config file")
        for flag, (dest, kind, text) in FLAGS.items():
            sub.add_argument(flag, dest=dest, type=kind, default=None, help=text)
        for flag, (dest, text) in SWITCHES.items():
            sub.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=text)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        name: getattr(args, name)
        for name in [dest for dest, _, _ in FLAGS.values()] + [dest for dest, _ in SWITCHES.values()]
    }
    return RunConfig.from_sources(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        cfg.validate()
        logging.basicConfig(
            level=cfg.log_level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        state = run_command(args.command, cfg)
    except ConfigError as exc:
        print(f"❌ configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"❌ data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"❌ numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    for line in describe(args.command, state):
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
