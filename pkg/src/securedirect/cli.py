"""Command-line entry point.

Exit codes: 0 success (benign for ``inspect``), 1 attack, 2 config or parse
error, 3 bind failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from . import __version__
from .kernels import BACKEND

EXIT_OK = 0
EXIT_ATTACK = 1
EXIT_CONFIG = 2
EXIT_BIND = 3
EXIT_IO = 4

log = logging.getLogger("securedirect")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected ADDR:PORT, got {text!r}")
    return host or "0.0.0.0", int(port)


def _rates(text: str) -> list[float]:
    try:
        rates = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from None
    if not rates or any(r <= 0 for r in rates):
        raise argparse.ArgumentTypeError("rates must be positive")
    return rates


def _load_db(path: str | None):
    from .ids import SignatureError, default_signatures, load_signature_file

    if path is None:
        return default_signatures()
    try:
        return load_signature_file(path)
    except SignatureError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {path}: {exc}") from None


def _load_config(path: str):
    from .balancer import ConfigError, load_config

    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


# -- commands ------------------------------------------------------------------


def cmd_ids_serve(args: argparse.Namespace) -> int:
    from .ids import IdsServer, bind_listener

    db = _load_db(args.signatures)
    host, port = args.listen
    try:
        listener = bind_listener(host, port)
    except OSError as exc:
        raise CliError(EXIT_BIND, f"cannot bind {host}:{port}: {exc}") from None
    server = IdsServer(db, listener, pooled=args.pooled)
    print(f"loaded {len(db)} signatures; listening on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_run_sim(args: argparse.Namespace) -> int:
    from .simnet import SCENARIOS, Topology, summarize

    topology = Topology()
    db = None
    if args.config:
        config = _load_config(args.config)
        try:
            topology = Topology.from_config(config)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"config does not describe a simulable topology: {exc}") from None
        if config.signatures:
            db = _load_db(config.signatures)
    if args.signatures:
        db = _load_db(args.signatures)
    trace = SCENARIOS[args.scenario](args.seed, topology=topology, db=db)
    summary = summarize(trace, topology)
    if args.trace:
        try:
            Path(args.trace).write_text(trace.export(), encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write trace: {exc}") from None
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from .loadgen import bench, to_text

    try:
        reports = bench(args.rates, args.duration, args.out, seed=args.seed, attacker_fraction=args.attacker_fraction)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write reports under {args.out}: {exc}") from None
    for report in reports:
        sys.stdout.write(to_text(report))
    print(f"reports written to {args.out}")
    return EXIT_OK


def cmd_proxy_live(args: argparse.Namespace) -> int:
    from .ids import IdsClient, IdsServer, bind_listener
    from .live import LiveProxy

    config = _load_config(args.config)
    local_ids = None
    if args.embedded_ids:
        db = _load_db(config.signatures)
        try:
            local_ids = IdsServer(db, bind_listener("127.0.0.1", 0), pooled=True).start()
        except OSError as exc:
            raise CliError(EXIT_BIND, f"cannot bind embedded IDS: {exc}") from None
        client = IdsClient(local_ids.address, config.ids_timeout, pooled=True)
    else:
        try:
            client = IdsClient(config.ids_address(), config.ids_timeout)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    proxy = LiveProxy(config, client)
    host, port = args.listen if args.listen else (config.vip, config.service_port)

    async def main() -> None:
        try:
            await proxy.start(host, port)
        except OSError as exc:
            raise CliError(EXIT_BIND, f"cannot bind {host}:{port}: {exc}") from None
        print(f"proxying {host}:{port} -> {', '.join(config.backends)} (honeypot {config.honeypot})", flush=True)
        print("live mode is stream-level: no reset injection, fragment or sequence checks", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await proxy.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    finally:
        if local_ids is not None:
            local_ids.stop()
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    from .ids import inspect, verdict_text

    db = _load_db(args.signatures)
    try:
        payload = Path(args.payload_file).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {args.payload_file}: {exc}") from None
    verdict = inspect(db, payload)
    print(verdict_text(verdict))
    return EXIT_ATTACK if verdict.attack else EXIT_OK


def cmd_export_captures(args: argparse.Namespace) -> int:
    from .honeypot import CaptureFormatError, Direction, export_log, import_log
    from .packet import int_to_ip
    from .simnet import SCENARIOS

    if args.input:
        try:
            with open(args.input, "rb") as fh:
                log_ = import_log(fh)
        except CaptureFormatError as exc:
            raise CliError(EXIT_CONFIG, f"{args.input}: {exc}") from None
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {args.input}: {exc}") from None
    else:
        log_ = SCENARIOS[args.scenario](args.seed).captures
    if args.out:
        try:
            with open(args.out, "wb") as fh:
                count = export_log(log_, fh)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
        print(f"wrote {count} capture records to {args.out}")
    else:
        for r in log_:
            arrow = "<-" if r.direction is Direction.INBOUND else "->"
            print(f"{r.timestamp_ms} {int_to_ip(r.src_ip)}:{r.src_port} {arrow} {r.data!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .simnet import SCENARIOS

    parser = argparse.ArgumentParser(prog="securedirect", description="Inspecting load balancer with honeypot deflection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} (kernels: {BACKEND})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ids-serve", help="run the signature IDS server")
    p.add_argument("--signatures", required=True)
    p.add_argument("--listen", type=_hostport, required=True, metavar="ADDR:PORT")
    p.add_argument("--pooled", action="store_true", help="answer many queries per connection")
    p.set_defaults(func=cmd_ids_serve)

    p = sub.add_parser("run-sim", help="run a simulated scenario")
    p.add_argument("--config")
    p.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", metavar="OUT")
    p.add_argument("--signatures")
    p.set_defaults(func=cmd_run_sim)

    p = sub.add_parser("bench", help="simulated load benchmark")
    p.add_argument("--rates", type=_rates, default=[3600.0, 14400.0, 18000.0])
    p.add_argument("--duration", type=float, default=3600.0)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attacker-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("proxy-live", help="stream-level proxy on real sockets")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", type=_hostport, metavar="ADDR:PORT", help="override vip:service_port")
    p.add_argument("--embedded-ids", action="store_true", help="run the IDS in-process on loopback")
    p.set_defaults(func=cmd_proxy_live)

    p = sub.add_parser("inspect", help="check a payload file against signatures")
    p.add_argument("--signatures")
    p.add_argument("--payload-file", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-captures", help="dump or convert honeypot captures")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="existing HPLOG1 file")
    src.add_argument("--scenario", choices=sorted(SCENARIOS), default="reconnect")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_captures)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"securedirect {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
