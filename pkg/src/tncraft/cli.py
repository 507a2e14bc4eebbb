"""Command-line pipeline: validate, map, train, run, power, report.

Exit status is 0 on success, 1 when a network violates a mapping
constraint and 2 on I/O or format errors (argparse usage errors also exit 2).
"""

from __future__ import annotations

import argparse
import logging
import os
import struct
import sys
import time
from pathlib import Path

import numpy as np

from . import mapper, power, simulator
from .corelet import GraphError, graph_stats, lower_network
from .datasets import Dataset, DatasetError, fit_to_input, load_dataset
from .netspec import NetworkSpec, ParseError, load_network, validate_structure
from .trainer import ModelWeights, TrainConfig, evaluate, predict, train

EXIT_OK = 0
EXIT_CONSTRAINT = 1
EXIT_IO = 2

log = logging.getLogger("tncraft")


class ConstraintViolation(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("TNCRAFT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TNCRAFT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _load_net(path) -> NetworkSpec:
    net = load_network(path)
    problems = validate_structure(net)
    if problems:
        raise ConstraintViolation("; ".join(str(p) for p in problems))
    return net


def _require_checks(net: NetworkSpec) -> None:
    failed = [c for c in mapper.check_network(net) if not c.passed]
    if failed:
        raise ConstraintViolation("; ".join(str(c) for c in failed))


def _load_data(args, split: str) -> Dataset:
    data = load_dataset(args.data, split)
    if args.limit is not None:
        data = data.subset(args.limit)
    return data


def _fmt_mw(x: float) -> str:
    return f"{x:.3f} mW"


def _power_lines(cores: int) -> list[str]:
    est = power.estimate_power(cores)
    lines = [f"cores_used {cores}", f"passive {_fmt_mw(est.static_mw)}",
             f"active {_fmt_mw(est.dynamic_mw)}", f"total {_fmt_mw(est.total_mw)}"]
    if cores == 4064:
        lines.append(f"note: the published value for 4064 cores is "
                     f"{power.PUBLISHED_DEEP_NET_MW:.2f} mW; the linear model gives {est.total_mw:.3f} mW")
    return lines


def _mapping_total(net: NetworkSpec) -> mapper.MappingReport:
    if all(layer.has_declared_cores for layer in net.mapped_layers):
        return mapper.declared_report(net)
    return mapper.estimate_cores(net)


def _inputs(net: NetworkSpec, data: Dataset) -> np.ndarray:
    return fit_to_input(data.images, net.input_channels, net.input_rows, net.input_cols)


def _spikes(net: NetworkSpec, images: np.ndarray, coding: str, ticks: int,
            stochastic: bool = False, seed: int = 42) -> np.ndarray:
    """``(T, num_inputs, N)`` spike tensor for fitted images; sample ``i`` of a
    stochastic rate code draws from seed ``seed + i``."""
    if coding == "binary":
        trains = [simulator.encode_binary(im) for im in images]
    else:
        trains = [simulator.encode_rate(im, ticks, stochastic, seed + i) for i, im in enumerate(images)]
    if not trains:
        return np.zeros((1, net.input_channels * net.input_rows * net.input_cols, 0), bool)
    return np.stack(trains, axis=2)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    net = load_network(args.spec)
    problems = validate_structure(net)
    for p in problems:
        print(f"FAIL {p}")
    if problems:
        return EXIT_CONSTRAINT
    checks = mapper.check_network(net)
    if all(layer.has_declared_cores for layer in net.mapped_layers):
        checks.append(mapper.check_core_budget(mapper.declared_report(net)))
    for c in checks:
        print(c)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CONSTRAINT


def cmd_map(args) -> int:
    net = _load_net(args.spec)
    declared = all(layer.has_declared_cores for layer in net.mapped_layers)
    estimate = mapper.estimate_cores(net) if args.estimate or not declared else None
    sys.stdout.write(mapper.format_mapping(net, estimate, csv=args.csv))
    if estimate is not None and declared and not args.csv:
        table = mapper.compare_with_declared(net, estimate)
        s = table.summary
        print(f"delta vs declared {s.delta:+d} ({'exact' if table.exact else 'differs'})")
    report = mapper.declared_report(net) if declared else estimate
    return EXIT_OK if mapper.check_core_budget(report).passed else EXIT_CONSTRAINT


def cmd_train(args) -> int:
    net = _load_net(args.spec)
    _require_checks(net)
    data = _load_data(args, "train")
    if len(data) == 0:
        raise DatasetError(f"{args.data}: no training samples")
    classes = args.classes or data.num_classes
    if net.mapped_layers[-1].features % classes:
        raise ConstraintViolation(f"last layer has {net.mapped_layers[-1].features} features, "
                                  f"not a multiple of {classes} classes")
    cfg = TrainConfig(batch_size=args.batch_size, learning_rates=(args.lr, args.lr_final),
                      iterations=args.iterations, dropout=args.dropout, seed=args.seed,
                      binary_weights=args.binary_weights)
    t0 = time.perf_counter()
    weights, logbook = train(net, data, cfg, num_classes=classes)
    weights.save(args.out)
    if args.log:
        Path(args.log).write_text(logbook.to_csv())
    acc = evaluate(net, weights, data.subset(1000))
    print(f"iterations {cfg.iterations}  final loss {logbook.losses[-1] if logbook.losses else float('nan'):.6f}")
    print(f"train accuracy (first {min(1000, len(data))}) {acc:.4f}")
    print(f"weights {args.out}  time {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_run(args) -> int:
    net = _load_net(args.spec)
    weights = ModelWeights.load(args.weights)
    data = _load_data(args, args.split)
    graph = lower_network(net, weights)
    engine = simulator.Engine(graph)
    stats = graph_stats(graph)
    images = _inputs(net, data)
    spikes = _spikes(net, images, args.coding, args.ticks, args.stochastic, args.seed)

    if args.trace is not None:
        out = sys.stdout if args.trace == "-" else open(args.trace, "w", encoding="utf-8")
        preds, emitted, dropped = [], 0, 0
        try:
            for i in range(spikes.shape[2]):
                trace = simulator.run(graph, spikes[:, :, i], args.ticks, engine=engine)
                out.write(f"# sample {i}\n")
                out.write(trace.dump())
                preds.append(simulator.decode_classification(trace, graph))
                emitted += len(trace.emitted)
                dropped += trace.dropped
        finally:
            if out is not sys.stdout:
                out.close()
        preds = np.array(preds, np.int64)
        print(f"spikes emitted {emitted}  dropped {dropped}")
    else:
        preds = simulator.classify_batch(engine, spikes, args.ticks, workers=_threads())

    print(f"cores {stats.cores_used} (splitters {stats.splitter_cores})  axons {stats.axons_used}  "
          f"neurons {stats.neurons_used}")
    print(f"coding {args.coding}  ticks {args.ticks}  samples {len(preds)}")
    if len(preds):
        print(f"accuracy {np.mean(preds == data.labels):.4f}")
    return EXIT_OK


def cmd_power(args) -> int:
    if (args.spec is None) == (args.cores is None):
        raise argparse.ArgumentTypeError("give either a network file or --cores N")
    if args.cores is not None:
        cores = args.cores
    else:
        net = _load_net(args.spec)
        cores = _mapping_total(net).total_cores
    if not 0 <= cores <= mapper.CHIP_CORES:
        print(f"cores_used {cores} outside [0, {mapper.CHIP_CORES}]")
        return EXIT_CONSTRAINT
    print("\n".join(_power_lines(cores)))
    return EXIT_OK


def cmd_report(args) -> int:
    net = _load_net(args.spec)
    weights = ModelWeights.load(args.weights)
    data = _load_data(args, args.split)
    if len(data) == 0:
        raise DatasetError(f"{args.data}: no samples")
    lines = [f"network {args.spec}", ""]
    lines.append(mapper.format_mapping(net, mapper.estimate_cores(net)).rstrip("\n"))
    trainer_preds = predict(net, weights, data.images)
    lines += ["", f"samples {len(data)}",
              f"trainer accuracy {np.mean(trainer_preds == data.labels):.4f}"]
    graph = lower_network(net, weights)
    stats = graph_stats(graph)
    engine = simulator.Engine(graph)
    spikes = _spikes(net, _inputs(net, data), "binary", args.ticks)
    sim_preds = simulator.classify_batch(engine, spikes, args.ticks, workers=_threads())
    lines += [f"spiking accuracy {np.mean(sim_preds == data.labels):.4f} (binary coding, {args.ticks} ticks)",
              f"prediction agreement {np.mean(sim_preds == trainer_preds):.4f}",
              f"lowered cores {stats.cores_used} (splitters {stats.splitter_cores})", ""]
    lines += _power_lines(min(stats.cores_used, mapper.CHIP_CORES))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tncraft", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=42, help="seed for every random stream (default 42)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check structure and per-layer mapping constraints")
    v.add_argument("spec")
    v.set_defaults(func=cmd_validate)

    m = sub.add_parser("map", help="print the per-layer mapping table")
    m.add_argument("spec")
    m.add_argument("--estimate", action="store_true", help="add estimated core counts")
    m.add_argument("--csv", action="store_true")
    m.set_defaults(func=cmd_map)

    t = sub.add_parser("train", help="train trinary weights")
    t.add_argument("spec")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--lr-final", type=float, default=0.01)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--classes", type=int, default=None)
    t.add_argument("--limit", type=int, default=None, help="use the first N samples")
    t.add_argument("--binary-weights", action="store_true", help="restrict weights to {0, 1}")
    t.add_argument("--log", default=None, help="write the per-iteration loss as CSV")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("run", cmd_run, "lower and simulate on a dataset"),
                               ("report", cmd_report, "accuracy, cores and power in one report")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("spec")
        r.add_argument("--weights", required=True)
        r.add_argument("--data", required=True)
        r.add_argument("--split", choices=("train", "test"), default="test")
        r.add_argument("--limit", type=int, default=None)
        r.add_argument("--ticks", type=int, default=simulator.DEFAULT_TICKS)
        r.set_defaults(func=fn)
        if name == "run":
            r.add_argument("--coding", choices=("binary", "rate"), default="binary")
            r.add_argument("--stochastic", action="store_true",
                           help="Bernoulli rate code seeded from --seed")
            r.add_argument("--trace", nargs="?", const="-", default=None,
                           help="dump 't core line E|D' events to a file (stdout if no path)")
        else:
            r.add_argument("--out", default=None)

    pw = sub.add_parser("power", help="power for a network or a core count")
    pw.add_argument("spec", nargs="?")
    pw.add_argument("--cores", type=int, default=None)
    pw.set_defaults(func=cmd_power)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "ticks", 1) < 1:
        parser.error("--ticks must be >= 1")
    try:
        return args.func(args)
    except ConstraintViolation as exc:
        print(f"constraint violation: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except mapper.MappingError as exc:
        print(f"mapping error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ParseError, DatasetError, GraphError, ValueError, struct.error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
