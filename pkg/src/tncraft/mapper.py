"""Hardware constraint checks, receptive fields and core-count estimation.

Packing model
-------------
A mapped layer is cut into blocks, one per (group, output location). Each
trinary input of a block occupies two axons (a +1 line and a -1 line), so a
block reads at most 128 inputs on a 256-axon core. Because a neuron can drive
only one axon, every neuron whose output feeds another on-chip layer is built
twice, once per line; neurons of the last layer are built once. A block whose
neurons do not fit on one core is sliced by feature. Blocks are assigned one
per core, except that 1x1 kernels (whose blocks share no inputs) pack as many
consecutive blocks per core as the axon and neuron budgets allow.

Splitter model
--------------
A value consumed by more than one core is replicated by splitter cores: it
enters one splitter axon and leaves on one splitter neuron per consuming core.
If any input line of a layer needs replication then all of that layer's input
lines pass through splitters, so every value of a layer arrives on the same
tick. Lines are packed greedily, in input order, into splitters of 256 axons
and 256 neurons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netspec import LayerGeometry, LayerSpec, NetworkSpec, geometry

MAX_INPUTS = 128
CORE_AXONS = 256
CORE_NEURONS = 256
CHIP_CORES = 4096
LINES_PER_INPUT = 2


class MappingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# constraint checks


@dataclass(frozen=True)
class ConstraintCheck:
    layer: str
    rule: str
    value: int
    limit: int
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        cmp = "<=" if self.passed else ">"
        if self.rule == "fanin":
            what = f"fan-in {self.value} {cmp} {self.limit}"
        elif self.rule == "groups":
            what = f"features mod groups = {self.value}"
        else:
            what = f"total cores {self.value} {cmp} {self.limit}"
        return f"{status} {self.layer:<6} {self.rule:<7} {what}"


def check_fanin(layer: LayerSpec, prev_features: int) -> ConstraintCheck:
    """Inputs per neuron ``K*K*(F_prev/G)`` must not exceed 128."""
    per_group = -(-prev_features // layer.groups)
    value = layer.patch_rows * layer.patch_cols * per_group
    return ConstraintCheck(layer.name, "fanin", value, MAX_INPUTS, value <= MAX_INPUTS)


def check_groups(layer: LayerSpec, prev_features: int) -> ConstraintCheck:
    """The group count must divide the previous layer's feature count."""
    rem = prev_features % layer.groups
    return ConstraintCheck(layer.name, "groups", rem, 0, rem == 0)


def check_network(net: NetworkSpec) -> list[ConstraintCheck]:
    checks = []
    prev = net.layers[0]
    for layer in net.mapped_layers:
        checks.append(check_fanin(layer, prev.features))
        checks.append(check_groups(layer, prev.features))
        prev = layer
    return checks


def check_core_budget(report: "MappingReport") -> ConstraintCheck:
    total = report.total_cores
    return ConstraintCheck("chip", "cores", total, CHIP_CORES, total <= CHIP_CORES)


# ---------------------------------------------------------------------------
# receptive fields


@dataclass(frozen=True)
class ReceptiveField:
    cum_stride: int
    rows: int
    cols: int


def compute_receptive_fields(net: NetworkSpec) -> list[ReceptiveField]:
    """Input-pixel stride and extent seen by one neuron of each mapped layer."""
    out = []
    stride, rr, rc = 1, 1, 1
    for layer in net.mapped_layers:
        rr += (layer.patch_rows - 1) * stride
        rc += (layer.patch_cols - 1) * stride
        stride *= layer.stride
        out.append(ReceptiveField(stride, rr, rc))
    return out


# ---------------------------------------------------------------------------
# placement


@dataclass(frozen=True)
class LayerPlan:
    """How one mapped layer is cut into cores."""

    geo: LayerGeometry
    copies: int            # neurons built per output value
    slices: int            # feature slices per (group, location)
    slice_features: int    # features per slice (last slice may hold fewer)
    blocks_per_core: int
    base_cores: int

    @property
    def layer(self) -> LayerSpec:
        return self.geo.layer

    @property
    def locations(self) -> int:
        return self.layer.rows * self.layer.cols

    @property
    def num_blocks(self) -> int:
        return self.layer.groups * self.slices * self.locations

    def block(self, index: int) -> tuple[int, int, int]:
        """(group, slice, location) of a block; location varies fastest."""
        gs, loc = divmod(index, self.locations)
        g, s = divmod(gs, self.slices)
        return g, s, loc

    def block_index(self, group: int, slc: int, loc: int) -> int:
        return (group * self.slices + slc) * self.locations + loc

    def core_of_block(self, index: int) -> int:
        return index // self.blocks_per_core

    def slice_range(self, slc: int) -> range:
        fg = self.layer.features_per_group
        start = slc * self.slice_features
        return range(start, min(fg, start + self.slice_features))

    def covering(self, axis: int) -> np.ndarray:
        """Number of output positions whose window covers each input position."""
        n_in = self.geo.in_rows if axis == 0 else self.geo.in_cols
        n_out = self.layer.rows if axis == 0 else self.layer.cols
        k = self.layer.patch_rows if axis == 0 else self.layer.patch_cols
        s, p = self.layer.stride, self.geo.padding
        cover = np.zeros(n_in, dtype=np.int64)
        for o in range(n_out):
            lo, hi = max(0, o * s - p), min(n_in, o * s - p + k)
            cover[lo:hi] += 1
        return cover

    def fanout(self) -> np.ndarray:
        """Distinct consuming cores per input position (same for every feature)."""
        n = np.outer(self.covering(0), self.covering(1)) * self.slices
        if self.blocks_per_core > 1:
            n = np.minimum(n, 1)
        return n


def plan_layer(geo: LayerGeometry, final: bool) -> LayerPlan:
    layer = geo.layer
    fanin = layer.patch_rows * layer.patch_cols * geo.in_per_group
    axons = LINES_PER_INPUT * fanin
    if fanin > MAX_INPUTS:
        raise MappingError(f"{layer.name}: block needs {fanin} inputs ({axons} axons), "
                           f"a core has {CORE_AXONS}")
    copies = 1 if final else LINES_PER_INPUT
    fg = layer.features_per_group
    per_slice = max(1, CORE_NEURONS // copies)
    slices = -(-fg // per_slice)
    slice_features = fg if slices == 1 else per_slice
    neurons = slice_features * copies
    m = 1
    if layer.patch_rows == 1 and layer.patch_cols == 1 and slices == 1:
        m = max(1, min(CORE_AXONS // axons, CORE_NEURONS // neurons))
    blocks = layer.groups * slices * layer.rows * layer.cols
    return LayerPlan(geo, copies, slices, slice_features, m, -(-blocks // m))


def plan_network(net: NetworkSpec) -> list[LayerPlan]:
    geos = geometry(net)
    return [plan_layer(g, i == len(geos) - 1) for i, g in enumerate(geos)]


def pack_splitters(copies: np.ndarray) -> np.ndarray:
    """Greedy, order-preserving assignment of input lines to splitter cores.

    ``copies[i]`` is the number of outputs line ``i`` needs. Returns the
    splitter index of each line (-1 for lines with no consumer).
    """
    out = np.full(len(copies), -1, dtype=np.int64)
    core, axons, neurons = -1, CORE_AXONS, CORE_NEURONS
    for i, n in enumerate(copies.tolist()):
        if n <= 0:
            continue
        if n > CORE_NEURONS:
            raise MappingError(f"a value needs {n} copies, more than one splitter core provides")
        if axons + 1 > CORE_AXONS or neurons + n > CORE_NEURONS:
            core, axons, neurons = core + 1, 0, 0
        axons += 1
        neurons += n
        out[i] = core
    return out


def line_copies(plan: LayerPlan) -> np.ndarray:
    """Copies needed per input line, ordered (feature, row, col, line)."""
    n = plan.fanout()
    per_value = np.broadcast_to(n, (plan.geo.in_features,) + n.shape).reshape(-1)
    return np.repeat(per_value, LINES_PER_INPUT)


def needs_splitters(plan: LayerPlan) -> bool:
    return bool(plan.fanout().max(initial=0) > 1)


def splitter_count(plan: LayerPlan) -> int:
    if not needs_splitters(plan):
        return 0
    assigned = pack_splitters(line_copies(plan))
    return int(assigned.max(initial=-1)) + 1


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class LayerMapping:
    name: str
    base_cores: int
    splitter_cores: int
    cum_stride: int
    rf_rows: int
    rf_cols: int
    fanin_per_group: int
    solved_padding: int

    @property
    def total(self) -> int:
        return self.base_cores + self.splitter_cores


@dataclass(frozen=True)
class MappingReport:
    layers: tuple[LayerMapping, ...]
    source: str  # "declared" | "estimated"

    @property
    def base_cores(self) -> int:
        return sum(m.base_cores for m in self.layers)

    @property
    def splitter_cores(self) -> int:
        return sum(m.splitter_cores for m in self.layers)

    @property
    def total_cores(self) -> int:
        return self.base_cores + self.splitter_cores

    @property
    def chip_feasible(self) -> bool:
        return self.total_cores <= CHIP_CORES


def _mapping(geo: LayerGeometry, rf: ReceptiveField, base: int, split: int) -> LayerMapping:
    layer = geo.layer
    return LayerMapping(layer.name, base, split, rf.cum_stride, rf.rows, rf.cols,
                        layer.patch_rows * layer.patch_cols * geo.in_per_group, geo.padding)


def declared_report(net: NetworkSpec) -> MappingReport:
    """Report built from the core counts written in the table."""
    missing = [layer.name for layer in net.mapped_layers if not layer.has_declared_cores]
    if missing:
        raise MappingError(f"no declared core counts for {', '.join(missing)}")
    rfs = compute_receptive_fields(net)
    return MappingReport(tuple(
        _mapping(g, rf, g.layer.declared_base_cores, g.layer.declared_splitter_cores)
        for g, rf in zip(geometry(net), rfs)), "declared")


def estimate_cores(net: NetworkSpec) -> MappingReport:
    """Base and splitter cores per layer under the packing and splitter models."""
    failed = [c for c in check_network(net) if not c.passed]
    if failed:
        raise MappingError("; ".join(str(c) for c in failed))
    rfs = compute_receptive_fields(net)
    layers = []
    for plan, rf in zip(plan_network(net), rfs):
        layers.append(_mapping(plan.geo, rf, plan.base_cores, splitter_count(plan)))
    return MappingReport(tuple(layers), "estimated")


def report_for(net: NetworkSpec) -> MappingReport:
    """Declared counts when every layer has them, the estimate otherwise."""
    if all(layer.has_declared_cores for layer in net.mapped_layers):
        return declared_report(net)
    return estimate_cores(net)


@dataclass(frozen=True)
class DeltaRow:
    name: str
    declared_base: int
    declared_splitter: int
    estimated_base: int
    estimated_splitter: int

    @property
    def delta(self) -> int:
        return (self.estimated_base + self.estimated_splitter
                - self.declared_base - self.declared_splitter)


@dataclass(frozen=True)
class DeltaTable:
    rows: tuple[DeltaRow, ...]

    @property
    def summary(self) -> DeltaRow:
        return DeltaRow("total",
                        sum(r.declared_base for r in self.rows),
                        sum(r.declared_splitter for r in self.rows),
                        sum(r.estimated_base for r in self.rows),
                        sum(r.estimated_splitter for r in self.rows))

    @property
    def exact(self) -> bool:
        return all(r.declared_base == r.estimated_base and
                   r.declared_splitter == r.estimated_splitter for r in self.rows)


def compare_with_declared(net: NetworkSpec, est: MappingReport) -> DeltaTable:
    decl = declared_report(net)
    if len(decl.layers) != len(est.layers):
        raise MappingError("estimate and network differ in layer count")
    return DeltaTable(tuple(
        DeltaRow(d.name, d.base_cores, d.splitter_cores, e.base_cores, e.splitter_cores)
        for d, e in zip(decl.layers, est.layers)))


# ---------------------------------------------------------------------------
# rendering


def _fmt(v) -> str:
    return "-" if v is None else str(v)


def mapping_rows(net: NetworkSpec, estimate: MappingReport | None = None) -> tuple[list[str], list[list[str]]]:
    """Header and cell rows of the ``map`` table, in network-file column order."""
    header = ["name", "rows", "cols", "features", "groups", "stride", "Kr", "Kc", "Kf",
              "base_cores", "splitter_cores", "fanin", "pad", "rf_stride", "rf_rows", "rf_cols"]
    if estimate is not None:
        header += ["est_base", "est_splitter", "delta"]
    rows = []
    rfs = compute_receptive_fields(net)
    geos = geometry(net)
    for i, (g, rf) in enumerate(zip(geos, rfs)):
        layer = g.layer
        row = [layer.name, layer.rows, layer.cols, layer.features, layer.groups, layer.stride,
               layer.patch_rows, layer.patch_cols, layer.patch_features,
               layer.declared_base_cores, layer.declared_splitter_cores,
               layer.patch_rows * layer.patch_cols * g.in_per_group, g.padding,
               rf.cum_stride, rf.rows, rf.cols]
        if estimate is not None:
            e = estimate.layers[i]
            delta = None
            if layer.has_declared_cores:
                delta = e.total - layer.declared_base_cores - layer.declared_splitter_cores
            row += [e.base_cores, e.splitter_cores, delta]
        rows.append([_fmt(v) for v in row])
    return header, rows


def format_mapping(net: NetworkSpec, estimate: MappingReport | None = None, csv: bool = False) -> str:
    header, rows = mapping_rows(net, estimate)
    lines = []
    if csv:
        lines.append(",".join(header))
        lines += [",".join(r) for r in rows]
    else:
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
        lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    if estimate is not None:
        lines.append(f"estimated total {estimate.total_cores} (splitters {estimate.splitter_cores})")
    if all(layer.has_declared_cores for layer in net.mapped_layers):
        decl = declared_report(net)
        lines.append(f"total {decl.total_cores} (splitters {decl.splitter_cores})")
    return "\n".join(lines) + "\n"
