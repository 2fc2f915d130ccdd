"""``splitwire`` command line: plan, simulate, calibrate, run, ota.

Exit codes: 0 success, 2 bad configuration, 3 computation error (e.g. a
degenerate calibration fit), 4 transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import testbed
from .catalog import (
    REFERENCE_SPLIT_LAYERS,
    CatalogError,
    UnknownLayerError,
    builtin_mobilenetv2_catalog,
    load_catalog_file,
)
from .linksim import (
    DegenerateFitError,
    StageTimings,
    calibrate,
    compare_protocols,
    format_breakdown,
    format_ranking,
    load_link_models,
    read_measurements_csv,
    save_link_models,
)
from .planner import PlanError, format_report, plan_report, report_to_csv, split
from .protocols import PROFILES, ChunkSizeError, get_profile
from .wire import FaultInjector, Reliability, TransportError, connect, listen

log = logging.getLogger("splitwire")

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE, EXIT_TRANSPORT = 0, 2, 3, 4

# chunk sizes swept per protocol when reproducing the transfer table
SWEEP_CHUNKS = {"UDP": (1472, 1460, 1200), "TCP": (1472, 1460, 1200), "ESP_NOW": (250,), "BLE": (512,)}
TABLE_PROTOCOLS = ("UDP", "TCP", "ESP_NOW")


class ConfigError(Exception):
    pass


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _protocols(values: Sequence[str] | None, default: Sequence[str]) -> list[str]:
    names = []
    for v in values or default:
        for part in v.split(","):
            if part.strip():
                try:
                    names.append(get_profile(part).name)
                except KeyError as exc:
                    raise ConfigError(exc.args[0]) from None
    return list(dict.fromkeys(names))


def _graph(args):
    if args.catalog:
        return load_catalog_file(args.catalog)
    return builtin_mobilenetv2_catalog()


def _plan(graph, layer: str):
    try:
        return split(graph, layer)
    except UnknownLayerError as exc:
        raise ConfigError(f"unknown layer {exc.args[0]!r} in model {graph.model_name}") from None


# --- plan ------------------------------------------------------------------------

def cmd_plan(args) -> int:
    graph = _graph(args)
    if args.all_paper_splits:
        layers = list(REFERENCE_SPLIT_LAYERS)
    elif args.split:
        layers = args.split
    else:
        raise ConfigError("give --split LAYER (repeatable) or --all-paper-splits")

    sweep = args.all_paper_splits or args.paper_defaults
    protos = _protocols(args.protocol, TABLE_PROTOCOLS if sweep else list(PROFILES))
    if args.chunk:
        chunks: dict[str, Sequence[int]] = {p: args.chunk for p in protos}
    elif sweep:
        chunks = {p: SWEEP_CHUNKS[p] for p in protos}
    else:
        chunks = {p: [PROFILES[p].default_chunk_bytes] for p in protos}

    links = None
    if args.link_model:
        links = load_link_models(args.link_model)
    elif args.paper_defaults:
        links = testbed.link_models()

    rows = []
    for layer in layers:
        rows.extend(plan_report(_plan(graph, layer), [PROFILES[p] for p in protos], chunks, links))
    bad = [r for r in rows if r.error]
    for r in bad:
        print(f"error: {r.protocol} chunk {r.chunk_bytes}: {r.error}", file=sys.stderr)

    if args.format == "csv":
        sys.stdout.write(report_to_csv(rows))
    elif args.format == "json":
        print(_dump_json({"model": graph.model_name, "rows": [r.as_dict() for r in rows]}))
    else:
        print(format_report(rows))
    return EXIT_CONFIG if bad else EXIT_OK


# --- simulate --------------------------------------------------------------------

def _stages(args) -> StageTimings:
    if not args.stages:
        return StageTimings()
    try:
        return StageTimings.from_dict(json.loads(Path(args.stages).read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"bad stage file {args.stages}: {exc}") from None


def cmd_simulate(args) -> int:
    graph = _graph(args)
    plan = _plan(graph, args.split)
    if args.link_model:
        links = load_link_models(args.link_model)
    elif args.paper_defaults:
        links = testbed.link_models()
    else:
        raise ConfigError("simulate needs --link-model FILE or --paper-defaults")
    if args.protocol:
        wanted = _protocols(args.protocol, ())
        missing = [p for p in wanted if p not in links]
        if missing:
            raise ConfigError(f"no link model for {', '.join(missing)}")
        links = {p: links[p] for p in wanted}
    chunks = {}
    if args.chunk:
        for p in links:
            PROFILES[p].check_chunk(args.chunk)
            chunks[p] = args.chunk
    ranked = compare_protocols(plan, links, _stages(args), chunks, transfer_only=args.transfer_only)

    if args.format == "json":
        print(_dump_json({
            "split_layer": plan.split_layer,
            "boundary_bytes": plan.boundary_bytes,
            "ranked_by": "transfer" if args.transfer_only else "rtt",
            "ranking": [r.as_dict() for r in ranked],
        }))
    elif args.format == "csv":
        print("rank,protocol,chunk_bytes,n_packets,transfer_ms,rtt_ms")
        for r in ranked:
            print(f"{r.rank},{r.protocol},{r.chunk_bytes},{r.n_packets},{r.transfer_ms:.3f},{r.rtt_ms:.3f}")
    else:
        print(f"split {plan.split_layer}: {plan.boundary_bytes} B boundary tensor")
        print(format_ranking(ranked))
        for r in ranked:
            print()
            print(format_breakdown(r.breakdown))
        if args.paper_defaults and not args.transfer_only:
            print()
            print("measured RTT: " + ", ".join(
                f"{p} {testbed.REPORTED_RTT_MS[p]:.2f} ms" for p in (r.protocol for r in ranked)
                if p in testbed.REPORTED_RTT_MS
            ))
    return EXIT_OK


# --- calibrate -------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    if args.csv:
        rows = read_measurements_csv(args.csv)
    elif args.paper_defaults:
        rows = None
    else:
        raise ConfigError("calibrate needs --csv FILE (or --paper-defaults)")

    results = {}
    if rows is None:
        wanted = _protocols(args.protocol, list(testbed.CALIBRATION_CHUNK))
        cals = testbed.calibrations()
        results = {p: cals[p] for p in wanted}
    else:
        groups: dict[str, list] = {}
        for m in rows:
            try:
                name = get_profile(m.protocol).name
            except KeyError as exc:
                raise ConfigError(exc.args[0]) from None
            if args.chunk and m.chunk_bytes not in args.chunk:
                continue
            groups.setdefault(name, []).append(m)
        wanted = _protocols(args.protocol, sorted(groups))
        for p in wanted:
            if p not in groups:
                raise ConfigError(f"no measurements for {p} in {args.csv}")
            try:
                results[p] = calibrate(groups[p], stall_threshold=args.stall_threshold)
            except DegenerateFitError as exc:
                raise DegenerateFitError(f"{p}: {exc}") from None
    if not results:
        raise ConfigError("no measurement rows selected")

    if args.out:
        save_link_models({p: c.model for p, c in results.items()}, args.out)
        log.info("wrote %s", args.out)

    if args.format == "json":
        print(_dump_json({
            p: {
                "link_model": c.model.to_dict(),
                "fitted_per_byte": c.fitted_per_byte,
                "max_relative_residual": c.max_relative_residual,
                "residuals": [
                    {
                        "payload_bytes": r.measurement.payload_bytes,
                        "chunk_bytes": r.measurement.chunk_bytes,
                        "n_packets": r.measurement.n_packets,
                        "observed_ms": r.measurement.latency_ms,
                        "predicted_ms": r.predicted_ms,
                        "relative": r.relative,
                        "used_in_fit": r.used_in_fit,
                    }
                    for r in c.residuals
                ],
            }
            for p, c in sorted(results.items())
        }))
    else:
        for i, (p, c) in enumerate(sorted(results.items())):
            if i:
                print()
            print(f"[{p}]")
            print(c.report())
    return EXIT_OK


# --- run -------------------------------------------------------------------------

def _toy_model(args):
    from .runtime import ToyModel, demo_model

    if args.model:
        return ToyModel.load(args.model)
    return demo_model(args.seed)


def _input(model, seed: int) -> np.ndarray:
    lo, hi = model.input_params.representable_range
    return np.random.default_rng(seed).uniform(lo, hi, size=model.input_dim)


def _print_predictions(preds, fmt: str, extra: dict | None = None, trace=None) -> None:
    if fmt == "json":
        doc = dict(extra or {})
        doc["predictions"] = [
            {"rank": i + 1, "class_id": p.class_id, "label": p.label, "confidence": p.confidence}
            for i, p in enumerate(preds)
        ]
        if trace is not None:
            doc["trace"] = trace.as_dict()
        print(_dump_json(doc))
        return
    if fmt == "csv":
        print("rank,class_id,label,confidence")
        for i, p in enumerate(preds):
            print(f"{i + 1},{p.class_id},{p.label},{p.confidence:.6f}")
    else:
        for i, p in enumerate(preds):
            print(f"{i + 1:>2}. {p.label:<24}{p.confidence:.6f}")
        for key, value in (extra or {}).items():
            print(f"{key}: {value}")
    if trace is not None:
        print()
        sys.stdout.write(trace.to_csv())


def _run_profile(args):
    if args.profile:
        try:
            return get_profile(args.profile)
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from None
    return get_profile({"udp": "UDP", "tcp": "TCP"}.get(args.transport, "ESP_NOW"))


def cmd_run(args) -> int:
    from .runtime import (
        LinkSettings,
        SessionFailed,
        SessionTrace,
        monolithic_predictions,
        node1_round,
        node2_round,
        predictions_from_feedback,
        receive_descriptor,
        run_split_session,
        send_descriptor,
        split_toy,
    )

    model = _toy_model(args)
    x_real = _input(model, args.seed)
    if args.monolithic:
        _print_predictions(monolithic_predictions(model, x_real, args.k), args.format, {"mode": "monolithic"})
        return EXIT_OK

    profile = _run_profile(args)
    chunk = args.chunk or profile.default_chunk_bytes
    profile.check_chunk(chunk)
    split_index = args.split_index
    faults = None
    if args.loss or args.duplicate or args.reorder:
        faults = FaultInjector(loss=args.loss, duplicate=args.duplicate, reorder=args.reorder, seed=args.seed)
    info = {"mode": "split", "transport": args.transport, "protocol": profile.name, "chunk_bytes": chunk}

    if args.role is None or args.both:
        try:
            res = run_split_session(
                model, split_index, args.transport, chunk, args.k, profile=profile,
                reliability=args.reliability, x_real=x_real, faults=(faults, faults),
                ack_timeout=args.ack_timeout, timeout=args.timeout,
            )
        except SessionFailed as exc:
            print(f"error: transport failure: {exc}", file=sys.stderr)
            sys.stdout.write(exc.trace.to_csv())
            return EXIT_TRANSPORT
        info.update(boundary_bytes=res.boundary_bytes, activation_frames=res.activation_frames,
                    retransmissions=res.retransmissions, aligned=res.aligned)
        _print_predictions(res.predictions, args.format, info, res.trace)
        return EXIT_OK

    # one role per process: the server holds Part 2, the client holds Part 1
    if args.transport == "inmem":
        raise ConfigError("--role needs a socket transport (udp or tcp)")
    kind = {"udp": "datagram", "tcp": "stream"}[args.transport]
    try:
        part1, part2 = split_toy(model, split_index)
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    link = LinkSettings(chunk, Reliability(args.reliability), args.ack_timeout, args.timeout)
    trace = SessionTrace()

    try:
        if args.role == "server":
            listener = listen(kind, args.host, args.port, faults=faults)
            print(f"listening on {args.transport} {listener.address[0]}:{listener.address[1]}",
                  file=sys.stderr, flush=True)
            try:
                ep = listener.accept(args.timeout)
            finally:
                listener.close()
            with ep:
                shape, params = receive_descriptor(ep, link)
                node2_round(ep, part2.to_json(), shape, params, args.k, link, trace)
                # keep answering retransmitted feedback frames for a moment
                deadline = time.monotonic() + link.linger
                while time.monotonic() < deadline and ep.recv_frame(link.ack_timeout) is not None:
                    pass
            if args.format == "json":
                print(_dump_json({"role": "server", "trace": trace.as_dict()}))
            else:
                sys.stdout.write(trace.to_csv())
            return EXIT_OK

        t0 = time.perf_counter()
        with connect(kind, args.host, args.port, args.timeout, faults=faults) as ep:
            send_descriptor(ep, part1, link)
            trace.record("Protocol setup", 1, t0, time.perf_counter())
            fb, sent, _ = node1_round(ep, part1.to_json(), x_real, link, trace)
        info.update(boundary_bytes=part1.output_dim, activation_frames=sent.data_frames,
                    retransmissions=sent.retransmissions)
        _print_predictions(predictions_from_feedback(fb, model.labels), args.format, info, trace)
        return EXIT_OK
    except TransportError as exc:
        trace.failed = str(exc)
        print(f"error: transport failure: {exc}", file=sys.stderr)
        sys.stdout.write(trace.to_csv())
        return EXIT_TRANSPORT


# --- ota -------------------------------------------------------------------------

def cmd_ota(args) -> int:
    from .ota import Device, Version, apply_update, flip_bit, package

    rng = np.random.default_rng(args.seed)
    blob = rng.integers(0, 256, size=args.size, dtype=np.uint8).tobytes()
    image = package(blob, args.version, target_node="node-2", part_id="part2")
    device = Device("node-2", Version.parse(args.current))

    transport = None
    if args.transport != "inmem":
        from .wire import open_pair

        faults = FaultInjector(loss=args.loss, seed=args.seed) if args.loss else None
        kind = {"udp": "datagram", "tcp": "stream"}[args.transport]
        transport = open_pair(kind, faults_a=faults, timeout=args.timeout)
    corrupt = flip_bit(int(rng.integers(0, args.size * 8))) if args.inject_corruption else None
    post = (lambda d, img: False) if args.fail_post_validate else None
    try:
        apply_update(device, image, transport, post_validate=post, corrupt=corrupt, timeout=args.timeout)
    except TransportError as exc:
        print(f"error: transport failure: {exc}", file=sys.stderr)
        for line in device.audit_lines():
            print(line)
        return EXIT_TRANSPORT
    finally:
        if transport is not None:
            for ep in transport:
                ep.close()

    if args.format == "json":
        print(_dump_json({
            "image": image.descriptor(),
            "final_state": device.state.value,
            "active_version": str(device.active_version),
            "audit": [json.loads(line) for line in device.audit_lines()],
        }))
    else:
        for line in device.audit_lines():
            print(line)
        print(f"final state: {device.state.value}, active version {device.active_version}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------------

def _formats(p):
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")


def _chunk_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad chunk list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitwire", description="Split inference planning, simulation and runs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="packet counts (and predicted latency) per split and protocol")
    p.add_argument("--catalog", help="model catalog JSON (default: built-in MobileNetV2 0.35/224)")
    p.add_argument("--split", action="append", help="split layer, repeatable")
    p.add_argument("--all-paper-splits", action="store_true", help="the three reference split layers")
    p.add_argument("--protocol", action="append", help="protocol name(s), repeatable or comma separated")
    p.add_argument("--chunk", type=_chunk_list, help="chunk size(s) in bytes, comma separated")
    p.add_argument("--link-model", help="calibrated link model JSON for latency predictions")
    p.add_argument("--paper-defaults", action="store_true", help="use the reference link models and chunk sweep")
    _formats(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="estimated RTT breakdown and protocol ranking")
    p.add_argument("--catalog")
    p.add_argument("--split", default="block_16_project_BN")
    p.add_argument("--protocol", action="append")
    p.add_argument("--chunk", type=int, help="chunk size for every protocol (default: each profile's)")
    p.add_argument("--link-model")
    p.add_argument("--stages", help="stage timing JSON; missing fields keep their defaults")
    p.add_argument("--paper-defaults", action="store_true")
    p.add_argument("--transfer-only", action="store_true", help="rank by transmission latency alone")
    _formats(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit link models to measured transfer latencies")
    p.add_argument("--csv", help="measurements: protocol,chunk_bytes,payload_bytes,latency_ms")
    p.add_argument("--protocol", action="append")
    p.add_argument("--chunk", type=_chunk_list, help="only use rows with these chunk sizes")
    p.add_argument("--stall-threshold", type=int, help="rows above this packet count fit the stall factor")
    p.add_argument("--paper-defaults", action="store_true", help="calibrate from the reference measurements")
    p.add_argument("--out", help="write the fitted link models here")
    _formats(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="live split inference session on the toy int8 model")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--both", action="store_true", help="run both nodes in this process (default)")
    mode.add_argument("--role", choices=("server", "client"))
    mode.add_argument("--monolithic", action="store_true", help="unsplit reference inference")
    p.add_argument("--transport", choices=("udp", "tcp", "inmem"), default="inmem")
    p.add_argument("--profile", help="protocol profile for payload limits (inmem default: ESP-NOW)")
    p.add_argument("--chunk", type=int)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=47800)
    p.add_argument("--model", help="toy model JSON (default: built-in demo model)")
    p.add_argument("--split-index", type=int, default=1, help="layers in Part 1")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--reliability", choices=[r.value for r in Reliability], default="stop_and_wait")
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--duplicate", type=float, default=0.0)
    p.add_argument("--reorder", type=float, default=0.0)
    p.add_argument("--ack-timeout", type=float, default=0.05)
    p.add_argument("--timeout", type=float, default=10.0)
    _formats(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ota", help="simulated OTA update of the Part 2 firmware")
    p.add_argument("--current", default="1.0.0")
    p.add_argument("--version", default="1.1.0")
    p.add_argument("--size", type=int, default=16384, help="firmware blob bytes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transport", choices=("udp", "tcp", "inmem"), default="inmem")
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--inject-corruption", action="store_true")
    p.add_argument("--fail-post-validate", action="store_true")
    p.add_argument("--timeout", type=float, default=5.0)
    _formats(p)
    p.set_defaults(func=cmd_ota)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("SPLITWIRE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DegenerateFitError as exc:
        print(f"error: degenerate fit: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except TransportError as exc:
        print(f"error: transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ConfigError, CatalogError, PlanError, ChunkSizeError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
