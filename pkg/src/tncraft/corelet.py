"""Chip data model and the lowering pass from trained weights to cores.

Trinary synapses on the binary crossbar
---------------------------------------
Each input of a convolution core is assigned a pair of adjacent axons: the
even axon has type 0 (synaptic weight +1) and the odd axon type 1 (weight -1).
A trinary weight ``w`` between that input and a neuron sets crossbar bits
``(1, 0)`` for ``+1``, ``(0, 0)`` for ``0`` and ``(0, 1)`` for ``-1``.
Convolution neurons use threshold 1, no leak and reset to 0, so a neuron
spikes in the tick its trinary sum reaches 1. This pairing is a
reconstruction consistent with the 128-input limit, not a documented
hardware encoding.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mapper
from .mapper import LINES_PER_INPUT, LayerPlan, MappingReport
from .netspec import NetworkSpec
from .trainer import ModelWeights

AXONS = 256
NEURONS = 256
AXON_TYPES = 4
DEFAULT_SYNAPTIC_WEIGHTS = (8, 4, 2, 1)
PAIR_SYNAPTIC_WEIGHTS = (1, -1, 0, 0)
NO_ROUTE = 0xFFFFFFFF

GRAPH_MAGIC = b"TNCG"
GRAPH_VERSION = 1
_EXT_MAGIC = b"TNX1"

BASE = "base"
SPLITTER = "splitter"
_ROLES = (BASE, SPLITTER)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class NeuronParams:
    threshold: int = 1
    leak: int = 0
    reset_potential: int = 0
    synaptic_weights: tuple[int, ...] = DEFAULT_SYNAPTIC_WEIGHTS

    def __post_init__(self):
        object.__setattr__(self, "synaptic_weights", tuple(int(s) for s in self.synaptic_weights))
        if len(self.synaptic_weights) != AXON_TYPES:
            raise ValueError(f"need {AXON_TYPES} synaptic weights, got {len(self.synaptic_weights)}")


CONV_NEURON = NeuronParams(1, 0, 0, PAIR_SYNAPTIC_WEIGHTS)
SPLITTER_NEURON = NeuronParams(1, 0, 0, PAIR_SYNAPTIC_WEIGHTS)


@dataclass(frozen=True)
class Route:
    core: int
    axon: int


@dataclass
class CoreConfig:
    crossbar: np.ndarray
    axon_types: np.ndarray
    neurons: list[NeuronParams] = field(default_factory=list)
    routes: list[Route | None] = field(default_factory=list)
    role: str = BASE

    @classmethod
    def empty(cls, role: str = BASE) -> "CoreConfig":
        return cls(np.zeros((AXONS, NEURONS), dtype=bool), np.zeros(AXONS, dtype=np.uint8),
                   [], [], role)

    def add_neuron(self, params: NeuronParams, route: Route | None = None) -> int:
        if len(self.neurons) >= NEURONS:
            raise GraphError(f"core already holds {NEURONS} neurons")
        self.neurons.append(params)
        self.routes.append(route)
        return len(self.neurons) - 1

    def effective_weights(self) -> np.ndarray:
        """``(256, n_neurons)`` signed weights: crossbar bit times the neuron's
        synaptic weight for the axon's type."""
        n = len(self.neurons)
        if n == 0:
            return np.zeros((AXONS, 0), dtype=np.int64)
        table = np.array([p.synaptic_weights for p in self.neurons], dtype=np.int64)  # (n, 4)
        per_axon = table[:, self.axon_types].T  # (256, n)
        return self.crossbar[:, :n].astype(np.int64) * per_axon

    def validate(self) -> None:
        if self.crossbar.shape != (AXONS, NEURONS):
            raise GraphError(f"crossbar shape {self.crossbar.shape}")
        if not np.isin(self.crossbar, (0, 1)).all():
            raise GraphError("crossbar entries must be 0 or 1")
        if self.axon_types.shape != (AXONS,) or self.axon_types.max(initial=0) >= AXON_TYPES:
            raise GraphError("axon types must be 256 values in {0,1,2,3}")
        if len(self.neurons) > NEURONS or len(self.routes) != len(self.neurons):
            raise GraphError("neuron table and route table disagree")
        if self.role not in _ROLES:
            raise GraphError(f"unknown core role {self.role!r}")


@dataclass(frozen=True)
class InputPort:
    core: int
    axon: int
    index: int


@dataclass(frozen=True)
class OutputPort:
    core: int
    neuron: int
    index: int
    label: int = -1


@dataclass
class CoreGraph:
    cores: list[CoreConfig] = field(default_factory=list)
    input_ports: list[InputPort] = field(default_factory=list)
    output_ports: list[OutputPort] = field(default_factory=list)
    num_inputs: int = 0
    output_shape: tuple[int, int, int] = (0, 0, 0)
    num_classes: int = 0

    def validate(self) -> None:
        n = len(self.cores)
        targets: set[tuple[int, int]] = set()
        for cid, core in enumerate(self.cores):
            core.validate()
            for route in core.routes:
                if route is None:
                    continue
                if not (0 <= route.core < n and 0 <= route.axon < AXONS):
                    raise GraphError(f"core {cid}: route to missing ({route.core}, {route.axon})")
                key = (route.core, route.axon)
                if key in targets:
                    raise GraphError(f"two neurons route to core {key[0]} axon {key[1]}")
                targets.add(key)
        for p in self.input_ports:
            if not (0 <= p.core < n and 0 <= p.axon < AXONS):
                raise GraphError(f"input port on missing axon ({p.core}, {p.axon})")
            if (p.core, p.axon) in targets:
                raise GraphError(f"input port ({p.core}, {p.axon}) is also a route target")
            if not 0 <= p.index < self.num_inputs:
                raise GraphError(f"input port bound to index {p.index} of {self.num_inputs}")
        for p in self.output_ports:
            if not (0 <= p.core < n and 0 <= p.neuron < len(self.cores[p.core].neurons)):
                raise GraphError(f"output port on missing neuron ({p.core}, {p.neuron})")
            if self.cores[p.core].routes[p.neuron] is not None:
                raise GraphError(f"output port ({p.core}, {p.neuron}) also routes internally")

    @classmethod
    def from_report(cls, report: MappingReport) -> "CoreGraph":
        """Unconfigured placeholder cores matching a mapping report's counts."""
        shared_xbar = np.zeros((AXONS, NEURONS), dtype=bool)
        shared_types = np.zeros(AXONS, dtype=np.uint8)
        cores = []
        for m in report.layers:
            cores += [CoreConfig(shared_xbar, shared_types, [], [], BASE) for _ in range(m.base_cores)]
            cores += [CoreConfig(shared_xbar, shared_types, [], [], SPLITTER) for _ in range(m.splitter_cores)]
        return cls(cores)

    # ------------------------------------------------------------------
    # binary container

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(GRAPH_MAGIC)
        buf.write(struct.pack("<HI", GRAPH_VERSION, len(self.cores)))
        for core in self.cores:
            buf.write(np.packbits(core.crossbar.astype(bool), axis=None).tobytes())
            buf.write(core.axon_types.astype(np.uint8).tobytes())
            buf.write(struct.pack("<H", len(core.neurons)))
            for p, r in zip(core.neurons, core.routes):
                rc, ra = (NO_ROUTE, 0) if r is None else (r.core, r.axon)
                buf.write(struct.pack("<iiiIH", p.threshold, p.leak, p.reset_potential, rc, ra))
        # extension: roles, synaptic weight tables, ports, shapes
        buf.write(_EXT_MAGIC)
        for core in self.cores:
            buf.write(struct.pack("<B", _ROLES.index(core.role)))
            for p in core.neurons:
                buf.write(struct.pack("<4i", *p.synaptic_weights))
        buf.write(struct.pack("<I", len(self.input_ports)))
        for p in self.input_ports:
            buf.write(struct.pack("<IHI", p.core, p.axon, p.index))
        buf.write(struct.pack("<I", len(self.output_ports)))
        for p in self.output_ports:
            buf.write(struct.pack("<IHIi", p.core, p.neuron, p.index, p.label))
        buf.write(struct.pack("<I3IH", self.num_inputs, *self.output_shape, self.num_classes))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CoreGraph":
        if data[:4] != GRAPH_MAGIC:
            raise GraphError(f"bad graph magic {data[:4]!r}")
        version, count = struct.unpack_from("<HI", data, 4)
        if version != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {version}")
        pos = 10
        cores = []
        params: list[list[tuple[int, int, int]]] = []
        for _ in range(count):
            xbar = np.unpackbits(np.frombuffer(data, np.uint8, AXONS * NEURONS // 8, pos))
            pos += AXONS * NEURONS // 8
            types = np.frombuffer(data, np.uint8, AXONS, pos).copy()
            pos += AXONS
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            routes, raw = [], []
            for _ in range(n):
                a, lam, rst, rc, ra = struct.unpack_from("<iiiIH", data, pos)
                pos += 18
                raw.append((a, lam, rst))
                routes.append(None if rc == NO_ROUTE else Route(rc, ra))
            cores.append(CoreConfig(xbar.reshape(AXONS, NEURONS).astype(bool), types, [], routes))
            params.append(raw)
        if data[pos:pos + 4] != _EXT_MAGIC:
            raise GraphError("missing graph extension section")
        pos += 4
        for core, raw in zip(cores, params):
            (role,) = struct.unpack_from("<B", data, pos)
            pos += 1
            core.role = _ROLES[role]
            for a, lam, rst in raw:
                s = struct.unpack_from("<4i", data, pos)
                pos += 16
                core.neurons.append(NeuronParams(a, lam, rst, s))
        (n_in,) = struct.unpack_from("<I", data, pos)
        pos += 4
        inputs = []
        for _ in range(n_in):
            inputs.append(InputPort(*struct.unpack_from("<IHI", data, pos)))
            pos += 10
        (n_out,) = struct.unpack_from("<I", data, pos)
        pos += 4
        outputs = []
        for _ in range(n_out):
            outputs.append(OutputPort(*struct.unpack_from("<IHIi", data, pos)))
            pos += 14
        num_inputs, f, h, w, classes = struct.unpack_from("<I3IH", data, pos)
        return cls(cores, inputs, outputs, num_inputs, (f, h, w), classes)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CoreGraph":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class GraphStats:
    cores_used: int
    axons_used: int
    neurons_used: int
    splitter_cores: int


def graph_stats(g: CoreGraph) -> GraphStats:
    """Counts of cores, bound axons (route or port targets), neurons and splitters."""
    bound = {(p.core, p.axon) for p in g.input_ports}
    for core in g.cores:
        bound.update((r.core, r.axon) for r in core.routes if r is not None)
    return GraphStats(len(g.cores), len(bound), sum(len(c.neurons) for c in g.cores),
                      sum(c.role == SPLITTER for c in g.cores))


# ---------------------------------------------------------------------------
# lowering


def _build_layer_cores(plan: LayerPlan, weights: np.ndarray, first_core: int):
    """Base cores of one layer.

    Returns the cores, a ``(F, H, W, copies)`` table of global neuron ids
    ``(core, neuron)`` and, for each input line ``(f, r, c, line)``, the list
    of ``(core, axon)`` pairs that read it.
    """
    layer, geo = plan.layer, plan.geo
    kr, kc = geo.kernel
    cg = geo.in_per_group
    fanin = cg * kr * kc
    s, p = layer.stride, geo.padding
    neuron_of = np.full((layer.features, layer.rows, layer.cols, plan.copies, 2), -1, dtype=np.int64)
    readers: dict[tuple[int, int, int, int], list[tuple[int, int]]] = {}
    cores = [CoreConfig.empty(BASE) for _ in range(plan.base_cores)]

    # input enumeration order within a block: (feature, kernel row, kernel col)
    ci, ki, kj = np.meshgrid(np.arange(cg), np.arange(kr), np.arange(kc), indexing="ij")
    ci, ki, kj = ci.ravel(), ki.ravel(), kj.ravel()

    for b in range(plan.num_blocks):
        g, slc, loc = plan.block(b)
        orow, ocol = divmod(loc, layer.cols)
        local = plan.core_of_block(b)
        core = cores[local]
        cid = first_core + local
        pos_in_core = b - local * plan.blocks_per_core
        axon0 = pos_in_core * LINES_PER_INPUT * fanin

        rows = orow * s - p + ki
        cols = ocol * s - p + kj
        inside = (rows >= 0) & (rows < geo.in_rows) & (cols >= 0) & (cols < geo.in_cols)
        plus_axons = axon0 + LINES_PER_INPUT * np.arange(fanin)
        core.axon_types[plus_axons] = 0
        core.axon_types[plus_axons + 1] = 1
        for i in np.flatnonzero(inside):
            f_in = g * cg + int(ci[i])
            r, c = int(rows[i]), int(cols[i])
            for line in range(LINES_PER_INPUT):
                readers.setdefault((f_in, r, c, line), []).append((cid, int(plus_axons[i]) + line))

        feats = plan.slice_range(slc)
        wblock = weights[[g * layer.features_per_group + f for f in feats]].reshape(len(feats), fanin)
        wblock = wblock * inside  # padded positions carry no synapse
        for fi, f in enumerate(feats):
            out_f = g * layer.features_per_group + f
            for k in range(plan.copies):
                n = core.add_neuron(CONV_NEURON)
                core.crossbar[plus_axons, n] = wblock[fi] == 1
                core.crossbar[plus_axons + 1, n] = wblock[fi] == -1
                neuron_of[out_f, orow, ocol, k] = (cid, n)
    return cores, neuron_of, readers


def lower_network(net: NetworkSpec, weights: ModelWeights) -> CoreGraph:
    """Build a core graph computing the eval-mode network on binary spikes.

    Input index ``i`` of the graph is the flat position ``(c, r, col)`` of the
    input tensor. The last layer's neurons become output ports labelled with
    their class block.
    """
    weights.check_shapes(net)
    failed = [c for c in mapper.check_network(net) if not c.passed]
    if failed:
        raise mapper.MappingError("; ".join(str(c) for c in failed))
    plans = mapper.plan_network(net)
    graph = CoreGraph(num_inputs=net.input_channels * net.input_rows * net.input_cols,
                      num_classes=weights.num_classes)
    h0, w0 = net.input_rows, net.input_cols
    prev_neurons = None  # (F, H, W, copies, 2) of the previous layer

    for k, plan in enumerate(plans):
        base_cores, neuron_of, readers = _build_layer_cores(plan, weights.trinary[k], len(graph.cores))
        graph.cores += base_cores

        def bind(source, target):
            f, r, c, line = source
            if prev_neurons is None:
                idx = (f * h0 + r) * w0 + c
                graph.input_ports.append(InputPort(target[0], target[1], idx))
            else:
                ncore, nidx = prev_neurons[f, r, c, line]
                graph.cores[ncore].routes[nidx] = Route(*target)

        keys = sorted(readers)
        if mapper.needs_splitters(plan):
            copies = mapper.line_copies(plan)
            assign = mapper.pack_splitters(copies)
            fr, fc = plan.geo.in_rows, plan.geo.in_cols
            splitters: dict[int, int] = {}
            for key in keys:
                f, r, c, line = key
                flat = ((f * fr + r) * fc + c) * LINES_PER_INPUT + line
                targets = readers[key]
                if copies[flat] != len(targets):
                    raise mapper.MappingError(f"fan-out model disagrees at {key}")
                sidx = int(assign[flat])
                if sidx not in splitters:
                    splitters[sidx] = len(graph.cores)
                    graph.cores.append(CoreConfig.empty(SPLITTER))
                scid = splitters[sidx]
                score = graph.cores[scid]
                axon = int(np.count_nonzero(score.crossbar.any(axis=1)))
                for tcore, taxon in targets:
                    n = score.add_neuron(SPLITTER_NEURON, Route(tcore, taxon))
                    score.crossbar[axon, n] = True
                bind(key, (scid, axon))
        else:
            for key in keys:
                targets = readers[key]
                if prev_neurons is not None and len(targets) > 1:
                    raise mapper.MappingError(f"value {key} needs {len(targets)} targets without splitters")
                for t in targets:
                    bind(key, t)
        prev_neurons = neuron_of

    last = plans[-1].layer
    block = last.features // weights.num_classes
    for f in range(last.features):
        for r in range(last.rows):
            for c in range(last.cols):
                cid, n = prev_neurons[f, r, c, 0]
                idx = (f * last.rows + r) * last.cols + c
                graph.output_ports.append(OutputPort(int(cid), int(n), idx, f // block))
    graph.output_shape = (last.features, last.rows, last.cols)
    graph.validate()
    return graph
