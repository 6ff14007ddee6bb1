"""Command line driver: ``geohead {synth,calibrate,heightmap,track,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, RunConfig, dump_config, load_config
from .io import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("geohead")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geohead", description="Multi-view pedestrian head detection on a height map.")
    p.add_argument("command", nargs="?", choices=["synth", "calibrate", "heightmap", "track", "eval"])
    p.add_argument("--config", help="flat YAML configuration file")
    p.add_argument("--lambda", dest="lam", type=float, help="smoothness weight of the MRF")
    p.add_argument("--theta-l", dest="theta_l", type=int, help="minimum tracklet length kept is theta_l + 1")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(lam=args.lam, theta_l=args.theta_l, seed=args.seed)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command is None:
            raise ConfigError("a subcommand is required (synth, calibrate, heightmap, track, eval)")
        if args.command == "synth":
            pipeline.run_synth(cfg)
        elif args.command == "calibrate":
            pipeline.run_calibrate(cfg)
        elif args.command == "heightmap":
            pipeline.run_heightmap(cfg)
        elif args.command == "track":
            pipeline.run_track(cfg)
        else:
            res = pipeline.run_eval(cfg)
            print(json.dumps(res))
    except (ConfigError, FormatError) as e:
        print(f"geohead: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as e:
        print(f"geohead: {e}", file=sys.stderr)
        if e.diagnostics:
            print(f"geohead: diagnostics: {json.dumps(e.diagnostics, default=str)}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
