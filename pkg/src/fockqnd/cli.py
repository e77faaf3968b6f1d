"""Command-line entry point.

Values are resolved in this order, later wins: built-in defaults, the preset
(``--preset`` or ``preset`` in the file), keys in the config file, flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import MODES, PRESETS, ConfigError, parse_config
from .runner import EXIT_CONFIG, run

log = logging.getLogger("fockqnd")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fockqnd", description=__doc__.splitlines()[0])
    p.add_argument("config", nargs="?", type=Path, help="TOML config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-final", dest="t_final", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--n-levels", dest="n_levels", type=int)
    p.add_argument("--ensemble", type=int)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", default=None,
                   help="treat regime warnings as configuration errors")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in
                 ("preset", "mode", "seed", "dt", "t_final", "eta", "n_levels", "ensemble",
                  "out", "strict")}
    try:
        text = args.config.read_text() if args.config else ""
        cfg = parse_config(text, overrides)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    code = run(cfg)
    if code == 0:
        print(f"wrote results to {cfg.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
