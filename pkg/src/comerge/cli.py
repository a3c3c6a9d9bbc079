"""`bench` command-line client.

Subcommands sweep/tradeoff/breakdown post to the service and write results;
by default the service runs in-process, while --url targets a running
server (`bench serve`).  The COME_SEED environment variable overrides any
configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import httpx

from . import __version__, bench


def make_client(url: str | None) -> httpx.Client:
    if url:
        return httpx.Client(base_url=url, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app())


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code != 200:
        sys.exit(f"error: {path} -> {response.status_code}: {response.text}")
    return response.json()


def _seed_override(seed: int) -> int:
    env = os.environ.get("COME_SEED")
    return int(env) if env else seed


def _config_payload(config: bench.SweepConfig) -> dict:
    return {
        "ratios": config.ratios,
        "group_sizes": config.group_sizes,
        "frames": config.frames,
        "patches_per_frame": config.patches_per_frame,
        "special_per_frame": config.special_per_frame,
        "channels": config.channels,
        "d_ff": config.d_ff,
        "layers": config.layers,
        "seed": _seed_override(config.seed),
        "strategy": config.strategy,
        "bias": config.bias,
        "repetitions": config.repetitions,
        "batch": config.batch,
        "workload": config.workload,
    }


def _cmd_sweep(args) -> None:
    config = bench.parse_config_text(Path(args.config).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with make_client(args.url) as client:
        data = _post(client, "/bench/sweep", _config_payload(config))
    records = data["records"]
    (out / "records.json").write_text(json.dumps(records, indent=2) + "\n")
    cols = list(records[0]) if records else []
    csv_lines = [",".join(cols)]
    csv_lines += [",".join(str(r[c]) for c in cols) for r in records]
    (out / "records.csv").write_text("\n".join(csv_lines) + "\n")
    typed = [bench.BenchRecord(**r) for r in records]
    print(bench.summary_table(typed))
    print(f"\nwrote {out / 'records.json'} and {out / 'records.csv'}")


def _cmd_tradeoff(args) -> None:
    config = bench.SweepConfig(
        ratios=[float(v) for v in args.ratios.split(",")],
        group_sizes=[args.group],
        frames=[args.frames],
        patches_per_frame=args.patches,
        special_per_frame=args.special,
        channels=args.channels,
        layers=args.layers,
        seed=_seed_override(args.seed),
        repetitions=args.repetitions,
        workload=args.workload,
    )
    payload = _config_payload(config)
    payload["strategies"] = [s.strip() for s in args.strategies.split(",")]
    payload["match_speedup"] = not args.no_match_speedup
    with make_client(args.url) as client:
        data = _post(client, "/bench/tradeoff", payload)
    rows = data["rows"]
    cols = list(rows[0]) if rows else []
    csv_text = "\n".join(
        [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    ) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tradeoff.csv").write_text(csv_text)
        print(f"wrote {out / 'tradeoff.csv'}")
    print(csv_text, end="")


def _cmd_breakdown(args) -> None:
    payload = {
        "frames": args.frames,
        "patches_per_frame": args.tokens // args.frames - args.special,
        "special_per_frame": args.special,
        "ratio": args.ratio,
        "group_size": args.group,
        "channels": args.channels,
        "layers": args.layers,
        "seed": _seed_override(args.seed),
        "repetitions": args.repetitions,
        "dump_activations": args.dump_activations,
    }
    with make_client(args.url) as client:
        data = _post(client, "/bench/breakdown", payload)
    print(f"{'component':>12} {'seconds':>10} {'share':>8}")
    for key, seconds in data["seconds"].items():
        print(f"{key:>12} {seconds:>10.4f} {100 * data['shares'][key]:>7.2f}%")
    print(f"{'total':>12} {data['total_seconds']:>10.4f} {100.0:>7.2f}%")
    print(f"merge/split + mask overhead: {100 * data['overhead_share']:.2f}%")


def _cmd_serve(args) -> None:
    import uvicorn

    uvicorn.run("comerge.service.app:create_app", factory=True,
                host=args.host, port=args.port)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Token-merging benchmark client (in-process unless --url).",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sweep = sub.add_parser("sweep", help="run a sweep from a config file")
    p_sweep.add_argument("--config", required=True, help="key = value config file")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--url", default=None, help="remote service URL")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_trade = sub.add_parser("tradeoff", help="strategy x ratio error/speedup grid")
    p_trade.add_argument("--strategies", default="confidence,similarity,pick-one,drop-all")
    p_trade.add_argument("--ratios", default="0.25,0.5,0.75")
    p_trade.add_argument("--frames", type=int, default=1)
    p_trade.add_argument("--patches", type=int, default=256)
    p_trade.add_argument("--special", type=int, default=2)
    p_trade.add_argument("--group", type=int, default=4)
    p_trade.add_argument("--channels", type=int, default=32)
    p_trade.add_argument("--layers", type=int, default=2)
    p_trade.add_argument("--seed", type=int, default=0)
    p_trade.add_argument("--repetitions", type=int, default=5)
    p_trade.add_argument("--workload", default="smooth")
    p_trade.add_argument("--no-match-speedup", action="store_true")
    p_trade.add_argument("--out", default=None)
    p_trade.add_argument("--url", default=None)
    p_trade.set_defaults(fn=_cmd_tradeoff)

    p_break = sub.add_parser("breakdown", help="per-component runtime shares")
    p_break.add_argument("--tokens", type=int, required=True, help="total tokens")
    p_break.add_argument("--ratio", type=float, required=True)
    p_break.add_argument("--group", type=int, required=True)
    p_break.add_argument("--frames", type=int, default=1)
    p_break.add_argument("--special", type=int, default=0)
    p_break.add_argument("--channels", type=int, default=16)
    p_break.add_argument("--layers", type=int, default=1)
    p_break.add_argument("--seed", type=int, default=0)
    p_break.add_argument("--repetitions", type=int, default=3)
    p_break.add_argument("--dump-activations", default=None,
                         help="directory for pre/post-merge tensor dumps")
    p_break.add_argument("--url", default=None)
    p_break.set_defaults(fn=_cmd_breakdown)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
