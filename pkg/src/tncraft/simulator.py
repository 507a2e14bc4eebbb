"""Tick-accurate spiking simulation of a core graph.

Each tick every core first integrates the spikes delivered to its axons,
then applies leak, then fires and resets the neurons at or above threshold.
A spike emitted at tick ``t`` is delivered to its target axon at ``t + 1``.
Spikes on graph inputs are delivered in the tick they are presented.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .corelet import AXONS, NEURONS, CoreGraph, NeuronParams
from .netspec import NetworkSpec, geometry
from .trainer import ModelWeights

DEFAULT_TICKS = 16


@dataclass(frozen=True)
class NeuronState:
    potential: int = 0


def neuron_step(state: NeuronState, spike_inputs: Sequence[int], weights: Sequence[int],
                params: NeuronParams) -> tuple[NeuronState, bool]:
    """Advance one neuron by one tick.

    ``spike_inputs[i]`` is the number of spikes on input ``i`` this tick and
    ``weights[i]`` the signed weight of that input.
    """
    v = state.potential + sum(int(x) * int(w) for x, w in zip(spike_inputs, weights))
    v -= params.leak
    if v >= params.threshold:
        return NeuronState(params.reset_potential), True
    return NeuronState(v), False


@dataclass(frozen=True, order=True)
class SpikeEvent:
    tick: int
    core: int
    line: int  # neuron index for emissions, axon index for deliveries


@dataclass
class SimulationTrace:
    ticks: int
    emitted: list[SpikeEvent] = field(default_factory=list)
    deliveries: list[SpikeEvent] = field(default_factory=list)
    output_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    dropped: int = 0

    def dump(self) -> str:
        """One ``tick core line E|D`` row per event; deliveries of a tick precede its emissions."""
        rows = [(e.tick, 0, e.core, e.line, "D") for e in self.deliveries]
        rows += [(e.tick, 1, e.core, e.line, "E") for e in self.emitted]
        rows.sort()
        return "".join(f"{t} {c} {n} {k}\n" for t, _, c, n, k in rows)


# ---------------------------------------------------------------------------
# spike encoders; result shape is (ticks, num_inputs)


def _flat_unit(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size and (v.min() < 0 or v.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return v


def encode_binary(values: np.ndarray, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """One spike at tick 0 on every input whose value is at least 0.5."""
    if shape is not None and np.shape(values) != tuple(shape):
        raise ValueError(f"input shape {np.shape(values)} does not match {tuple(shape)}")
    return (_flat_unit(values) >= 0.5)[None, :]


def encode_rate(values: np.ndarray, ticks: int, stochastic: bool = False,
                seed: int | None = None) -> np.ndarray:
    """Rate code over ``ticks`` ticks.

    Deterministic mode gives input ``i`` exactly ``k = floor(v*T + 1/2)``
    spikes, placed at the ticks ``t`` with ``(t*k) mod T < k``; this spreads
    them evenly and always includes tick 0 when ``k > 0``. Stochastic mode
    draws an independent Bernoulli(v) spike per tick from a seeded generator.
    """
    if ticks < 1:
        raise ValueError("ticks must be >= 1")
    v = _flat_unit(values)
    if stochastic:
        rng = np.random.default_rng(seed)
        return rng.random((ticks, v.size)) < v[None, :]
    k = np.floor(v * ticks + 0.5).astype(np.int64)
    t = np.arange(ticks)[:, None]
    return (t * k[None, :]) % ticks < k[None, :]


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Sparse-matrix form of a core graph, reused across runs.

    Axons and neurons are numbered globally as ``core * 256 + index``.
    """

    def __init__(self, graph: CoreGraph):
        graph.validate()
        self.graph = graph
        n_cores = len(graph.cores)
        self.n_axons = n_cores * AXONS
        self.n_neurons = n_cores * NEURONS
        rows, cols, vals = [], [], []
        threshold = np.zeros(self.n_neurons, np.int64)
        leak = np.zeros(self.n_neurons, np.int64)
        reset = np.zeros(self.n_neurons, np.int64)
        valid = np.zeros(self.n_neurons, bool)
        r_src, r_dst = [], []
        for cid, core in enumerate(graph.cores):
            n = len(core.neurons)
            if n == 0:
                continue
            w = core.effective_weights()
            a, j = np.nonzero(w)
            rows.append(cid * NEURONS + j)
            cols.append(cid * AXONS + a)
            vals.append(w[a, j])
            sl = slice(cid * NEURONS, cid * NEURONS + n)
            threshold[sl] = [p.threshold for p in core.neurons]
            leak[sl] = [p.leak for p in core.neurons]
            reset[sl] = [p.reset_potential for p in core.neurons]
            valid[sl] = True
            for j2, route in enumerate(core.routes):
                if route is not None:
                    r_src.append(cid * NEURONS + j2)
                    r_dst.append(route.core * AXONS + route.axon)
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, np.int64))
        self.weights = sparse.csr_matrix((cat(vals), (cat(rows), cat(cols))),
                                         shape=(self.n_neurons, self.n_axons), dtype=np.int64)
        self.routes = sparse.csr_matrix((np.ones(len(r_src), np.int64), (r_dst, r_src)),
                                        shape=(self.n_axons, self.n_neurons), dtype=np.int64)
        self.threshold, self.leak, self.reset, self.valid = threshold, leak, reset, valid
        self.quiescent_when_idle = bool((leak[valid] >= 0).all() and (reset[valid] < threshold[valid]).all())
        p_idx = [p.index for p in graph.input_ports]
        p_axon = [p.core * AXONS + p.axon for p in graph.input_ports]
        self.ports = sparse.csr_matrix((np.ones(len(p_idx), np.int64), (p_axon, p_idx)),
                                       shape=(self.n_axons, graph.num_inputs), dtype=np.int64)
        self.unbound_inputs = np.ones(graph.num_inputs, bool)
        self.unbound_inputs[p_idx] = False
        self.out_neurons = np.array([p.core * NEURONS + p.neuron for p in graph.output_ports], np.int64)
        self.out_labels = np.array([p.label for p in graph.output_ports], np.int64)

    def run(self, spikes: np.ndarray, ticks: int, record: bool = False):
        """Simulate a batch.

        ``spikes`` has shape ``(T_in, n, B)`` or ``(T_in, n)`` with
        ``n >= num_inputs``; spikes on inputs without a port are dropped and
        counted, and input ticks beyond ``ticks`` are ignored. Returns output spike counts
        of shape ``(num_outputs, B)``, the dropped-spike count and, when
        ``record`` is set, the event lists of the first sample.
        """
        spikes = np.asarray(spikes)
        if spikes.ndim == 2:
            spikes = spikes[:, :, None]
        if spikes.shape[1] < self.graph.num_inputs:
            raise ValueError(f"expected {self.graph.num_inputs} inputs, got {spikes.shape[1]}")
        extra = spikes[:, self.graph.num_inputs:]
        spikes = spikes[:, :self.graph.num_inputs]
        batch = spikes.shape[2]
        v = np.zeros((self.n_neurons, batch), np.int64)
        pending = np.zeros((self.n_axons, batch), np.int64)
        counts = np.zeros((len(self.out_neurons), batch), np.int64)
        dropped = int(extra[:ticks].sum())
        emitted, delivered = [], []
        for t in range(ticks):
            axons = pending
            if t >= len(spikes) and self.quiescent_when_idle and not axons.any():
                break  # no input and no leak drive: nothing can fire again
            if t < len(spikes):
                x = spikes[t].astype(np.int64)
                dropped += int(x[self.unbound_inputs].sum())
                axons = axons + self.ports @ x
            if record:
                delivered += [SpikeEvent(t, int(a) // AXONS, int(a) % AXONS)
                              for a in np.flatnonzero(axons[:, 0])]
            v += self.weights @ axons
            v -= self.leak[:, None]
            fired = (v >= self.threshold[:, None]) & self.valid[:, None]
            v = np.where(fired, self.reset[:, None], v)
            counts += fired[self.out_neurons]
            if record:
                emitted += [SpikeEvent(t, int(n) // NEURONS, int(n) % NEURONS)
                            for n in np.flatnonzero(fired[:, 0])]
            pending = self.routes @ fired.astype(np.int64)
        return counts, dropped, emitted, delivered


def run(graph: CoreGraph, spikes: np.ndarray, ticks: int = DEFAULT_TICKS,
        engine: Engine | None = None) -> SimulationTrace:
    """Simulate one sample and record every spike event."""
    engine = engine or Engine(graph)
    counts, dropped, emitted, delivered = engine.run(spikes, ticks, record=True)
    return SimulationTrace(ticks, emitted, delivered, counts[:, 0], dropped)


def class_counts(counts: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Sum output spike counts per class label; ``counts`` is ``(outputs, B)``."""
    out = np.zeros((num_classes,) + counts.shape[1:], np.int64)
    np.add.at(out, labels, counts)
    return out


def decode_classification(trace: SimulationTrace, graph: CoreGraph) -> int:
    """Class with the most output spikes; ties go to the lowest index."""
    if not graph.output_ports:
        raise ValueError("graph has no output ports")
    labels = np.array([p.label for p in graph.output_ports], np.int64)
    per_class = class_counts(trace.output_counts, labels, graph.num_classes)
    return int(np.argmax(per_class))


def classify_batch(engine: Engine, spikes: np.ndarray, ticks: int, chunk: int = 64,
                   workers: int = 1) -> np.ndarray:
    """Predicted labels for a ``(T_in, num_inputs, N)`` spike tensor.

    Chunks of samples are independent; with ``workers > 1`` they run on a
    thread pool and are merged in sample order.
    """
    def one(start: int) -> np.ndarray:
        counts, *_ = engine.run(spikes[:, :, start:start + chunk], ticks)
        per_class = class_counts(counts, engine.out_labels, engine.graph.num_classes)
        return np.argmax(per_class, axis=0)

    starts = range(0, spikes.shape[2], chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, starts))
    else:
        preds = [one(s) for s in starts]
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def ticks_needed(graph: CoreGraph) -> int:
    """Ticks for a tick-0 input to reach the outputs: the longest path in cores plus one."""
    n = len(graph.cores)
    depth = [0] * n
    for p in graph.input_ports:
        depth[p.core] = max(depth[p.core], 1)
    edges = {(cid, r.core) for cid, core in enumerate(graph.cores) for r in core.routes if r is not None}
    for _ in range(n):
        changed = False
        for a, b in edges:
            if depth[a] and depth[b] < depth[a] + 1:
                depth[b] = depth[a] + 1
                changed = True
        if not changed:
            break
    else:
        raise ValueError("core graph has a cycle")
    return max(depth, default=0)


# ---------------------------------------------------------------------------
# reference path: plain nested loops over the trinary convolution


def oracle_forward(net: NetworkSpec, weights: ModelWeights, x: np.ndarray) -> list[np.ndarray]:
    """Binary activations of every layer for one binary input ``(C, H, W)``.

    A unit is on when its integer trinary sum over the (zero padded) window
    is at least 1.
    """
    act = [[[int(v) for v in row] for row in ch] for ch in np.asarray(x)]
    outs = []
    for geo, w in zip(geometry(net), weights.trinary):
        layer = geo.layer
        kr, kc = geo.kernel
        cg, fg, s, p = geo.in_per_group, layer.features_per_group, layer.stride, geo.padding
        wl = w.tolist()
        new = []
        for f in range(layer.features):
            g = f // fg
            plane = []
            for r in range(layer.rows):
                line = []
                for c in range(layer.cols):
                    total = 0
                    for ci in range(cg):
                        src = act[g * cg + ci]
                        for i in range(kr):
                            rr = r * s - p + i
                            if rr < 0 or rr >= geo.in_rows:
                                continue
                            for j in range(kc):
                                cc = c * s - p + j
                                if 0 <= cc < geo.in_cols and src[rr][cc]:
                                    total += wl[f][ci][i][j]
                    line.append(1 if total >= 1 else 0)
                plane.append(line)
            new.append(plane)
        act = new
        outs.append(np.array(act, dtype=np.int8))
    return outs


def oracle_predict(net: NetworkSpec, weights: ModelWeights, x: np.ndarray) -> int:
    last = oracle_forward(net, weights, x)[-1]
    block = last.shape[0] // weights.num_classes
    per_class = last.reshape(weights.num_classes, -1).sum(axis=1) if block else last.sum()
    return int(np.argmax(per_class))
