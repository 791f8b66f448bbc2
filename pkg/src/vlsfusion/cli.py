"""Command line entry point: ``vlsfusion {build-map,serve,run-client,evaluate,end-to-end}``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from . import harness
from .geometry import NoAssociations, read_tum
from .mapbuilder import EmptyMap


def _thresholds(text: str):
    out = []
    for part in text.split(";"):
        m, d = part.split(",")
        out.append((float(m), float(d)))
    return tuple(out)


def _scenario(args) -> harness.Scenario:
    return harness.load_scenario(args.config, args.seed)


def cmd_build_map(args) -> int:
    sc = _scenario(args)
    res = harness.cmd_build_map(sc, args.out)
    print(f"{res.map_dir}: {res.n_images} images, {res.n_landmarks} landmarks "
          f"({100 * res.retained_fraction:.1f}% of covisible), {res.seconds:.1f} s")
    return 0


def cmd_serve(args) -> int:
    sc = _scenario(args)
    server = harness.cmd_serve(args.map, args.bind, sc.camera, args.cache, args.workers)
    print(f"serving {args.map} on {server.endpoint}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    server.shutdown()
    server.state.close()
    return 0


def cmd_run_client(args) -> int:
    sc = _scenario(args)
    mode = args.mode or ("wire" if args.endpoint else sc.service.mode)
    res = harness.cmd_run_client(sc, map_dir=args.map, endpoint=args.endpoint, mode=mode)
    out = res.write(args.out)
    print(f"{len(res.fused)} fused poses written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    thresholds = _thresholds(args.thresholds)
    if args.run_dir:
        report = harness.evaluate_run_dir(args.run_dir, thresholds)
    else:
        if not (args.fused and args.groundtruth):
            raise SystemExit("evaluate needs RUN_DIR or --fused and --groundtruth")
        report = harness.cmd_evaluate(
            read_tum(args.fused), read_tum(args.groundtruth),
            read_tum(args.vio) if args.vio else None, None, thresholds,
        )
    sys.stdout.write(report.to_jsonl() if args.jsonl else report.to_text())
    return 0


def cmd_end_to_end(args) -> int:
    sc = _scenario(args)
    if args.mode:
        from dataclasses import replace

        sc = replace(sc, service=replace(sc.service, mode=args.mode))
    report, _ = harness.cmd_end_to_end(sc, args.out)
    sys.stdout.write(report.to_jsonl() if args.jsonl else report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlsfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario INI file")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-map", parents=[common], help="render the mapping pass and write a map")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_build_map)

    s = sub.add_parser("serve", parents=[common], help="serve a map over TCP")
    s.add_argument("--map", type=Path, required=True)
    s.add_argument("--bind", default="127.0.0.1:7700")
    s.add_argument("--cache", type=int, default=64, help="resident shard capacity")
    s.add_argument("--workers", type=int, default=4)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("run-client", parents=[common], help="run fusion along the query pass")
    s.add_argument("--map", type=Path, help="map directory for in-process mode")
    s.add_argument("--endpoint", help="HOST:PORT of a running service")
    s.add_argument("--mode", choices=harness.VLS_MODES)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_run_client)

    s = sub.add_parser("evaluate", parents=[common], help="score trajectories against ground truth")
    s.add_argument("run_dir", nargs="?", type=Path)
    s.add_argument("--fused", type=Path)
    s.add_argument("--groundtruth", type=Path)
    s.add_argument("--vio", type=Path)
    s.add_argument("--thresholds", default="0.25,2;0.5,5;5,10", help="'m,deg;m,deg;...'")
    s.add_argument("--jsonl", action="store_true", help="line-delimited records instead of text")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("end-to-end", parents=[common], help="build, localize, fuse and evaluate")
    s.add_argument("--out", type=Path)
    s.add_argument("--mode", choices=harness.VLS_MODES)
    s.add_argument("--jsonl", action="store_true")
    s.set_defaults(func=cmd_end_to_end)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ServiceUnavailable, harness.InitializationFailed, EmptyMap, NoAssociations,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
