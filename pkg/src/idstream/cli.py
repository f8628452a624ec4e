"""``idstream`` command line: simulate, score, retrieve, bench, mock-oracle serve."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Optional

from .config import ConfigError, build_oracles, config_to_dict, load_config
from .memory import FrameArchive, greedy_retrieve
from .metrics import BundleError, load_bundle, score_bundle
from .oracles import MockScript, mock_oracle, serve_mock
from .pipeline import SessionError, run_session
from .synth import SyntheticGenerator

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("idstream")


class UsageError(Exception):
    pass


def _write_json(path: str, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _run(cfg, seed: int):
    return run_session(
        cfg.schedule,
        SyntheticGenerator(cfg.make_world(seed)),
        build_oracles(cfg.oracles),
        cfg.session_config(),
        seed=seed,
    )


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = _run(cfg, seed)
    doc = {"config": config_to_dict(cfg), **out.to_dict()}
    doc["seed"] = seed
    _write_json(args.out, doc)
    if args.dump_registry:
        Path(args.dump_registry).write_text(out.registry.to_json() + "\n")
    if args.dump_archive:
        out.archive.export(args.dump_archive)
    rep = out.report
    fps = f"{rep.fps:.2f}" if rep.fps is not None else "n/a"
    print(f"{len(out.chunks)} chunks, archive {len(out.archive)}, registry {len(out.registry)} ids, "
          f"fps {fps}, blocking {rep.blocking_wait_total:.3f}s, recache {rep.recache_count} -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    report = score_bundle(load_bundle(args.bundle))
    _write_json(args.out, report.to_dict())
    print(report.summary())
    for note in report.diagnostics.get("notes", []):
        print(f"note: {note}")
    return EXIT_OK


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--ids must be comma-separated integers, got {text!r}") from exc


def cmd_retrieve(args) -> int:
    try:
        archive = FrameArchive.load(args.archive, with_kv=False)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load archive {args.archive}: {exc}") from exc
    ids = _parse_ids(args.ids)
    known = set().union(*(f.entity_ids for f in archive)) if len(archive) else set()
    for gid in ids:
        if gid not in known:
            log.warning("id %d appears in no archived frame", gid)
    mem = greedy_retrieve(archive, ids, args.cap, with_kv=False)
    print(f"selected frames: {mem.frame_ids}")
    for fid in mem.frame_ids:
        f = archive.get(fid)
        print(f"  frame {fid}: chunk {f.chunk_index} ({f.source}), ids {sorted(f.entity_ids)}, "
              f"entity {f.entity_score_norm:.3f}, fused {f.fused_score:.3f}")
    print(f"covered: {sorted(mem.covered_ids)}  uncovered: {sorted(mem.uncovered_ids)}")
    if mem.repaired:
        print("note: greedy order hit the cap; an exact cover within the cap was used")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    cfg = load_config(args.config)
    _run(cfg, cfg.seed)  # warmup, excluded
    trials = [_run(cfg, cfg.seed).report for _ in range(args.repeat)]
    e2e = [t.e2e_latency for t in trials]
    fps = [t.fps for t in trials if t.fps is not None]
    summary = {
        "repeat": args.repeat,
        "e2e_mean": statistics.fmean(e2e),
        "e2e_min": min(e2e),
        "fps_mean": statistics.fmean(fps) if fps else None,
        "blocking_wait_mean": statistics.fmean(t.blocking_wait_total for t in trials),
        "recache_count": trials[0].recache_count,
        "clock": cfg.session.clock,
    }
    if args.out:
        _write_json(args.out, summary)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_mock_serve(args) -> int:
    try:
        script = MockScript.load(args.script) if args.script else MockScript()
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load mock script: {exc}") from exc
    server = serve_mock(mock_oracle(script), args.host, args.port)
    host, port = server.server_address[:2]
    print(f"mock oracle listening on http://{host}:{port}/oracle", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idstream", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a synthetic streaming session")
    s.add_argument("--config", help="session config JSON (defaults if omitted)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--out", required=True, help="session report JSON")
    s.add_argument("--dump-registry", help="also write the registry JSON here")
    s.add_argument("--dump-archive", help="also export the archive (JSON + .kv.bin sidecar)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("score", help="score a measurement bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("retrieve", help="debug identity-aware retrieval on an exported archive")
    s.add_argument("--archive", required=True)
    s.add_argument("--ids", required=True, help="comma-separated global ids")
    s.add_argument("--cap", type=int, default=4)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("bench", help="warmup plus repeated sessions, timing summary")
    s.add_argument("--config")
    s.add_argument("--repeat", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("mock-oracle", help="scripted oracle server")
    mock_sub = s.add_subparsers(dest="action", required=True)
    serve = mock_sub.add_parser("serve")
    serve.add_argument("--script", help="mock script JSON")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8765)
    serve.set_defaults(func=cmd_mock_serve)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SessionError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
