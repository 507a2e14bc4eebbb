"""Tabular network-architecture format: parsing, validation, serialization.

A network file lists one layer per line in a fixed column order::

    # name rows cols features groups stride Kr Kc Kf base_cores splitter_cores
    I    32 32   3
    P1   32 32  12  1 1  3 3   3    0   0
    C2   16 16 252  2 2  4 4   6  512 384

The input row carries only ``I rows cols channels``. Core counts that are not
known are written as ``-``. Layer names starting with ``P`` are preprocessing
layers; every other non-input row is a convolution. Pooling is expressed as a
strided convolution, so there is no separate pooling row.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

INPUT = "input"
PREPROCESS = "preprocess"
CONV = "conv"

COLUMNS = (
    "name", "rows", "cols", "features", "groups", "stride",
    "Kr", "Kc", "Kf", "base_cores", "splitter_cores",
)
HEADER = "# " + " ".join(COLUMNS)

_NAME_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*$")


class ParseError(ValueError):
    """Malformed network document; carries the 1-based line and column."""

    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"line {line}, col {column}: {message}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    rows: int
    cols: int
    features: int
    groups: int = 1
    stride: int = 1
    patch_rows: int | None = None
    patch_cols: int | None = None
    patch_features: int | None = None
    declared_base_cores: int | None = None
    declared_splitter_cores: int | None = None

    @property
    def is_input(self) -> bool:
        return self.kind == INPUT

    @property
    def fanin_per_group(self) -> int:
        """Inputs read by one neuron: ``Kr * Kc * Kf``."""
        return self.patch_rows * self.patch_cols * self.patch_features

    @property
    def features_per_group(self) -> int:
        return self.features // self.groups

    @property
    def has_declared_cores(self) -> bool:
        return self.declared_base_cores is not None and self.declared_splitter_cores is not None


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def input_layer(self) -> LayerSpec:
        return self.layers[0]

    @property
    def input_channels(self) -> int:
        return self.layers[0].features

    @property
    def input_rows(self) -> int:
        return self.layers[0].rows

    @property
    def input_cols(self) -> int:
        return self.layers[0].cols

    @property
    def mapped_layers(self) -> tuple[LayerSpec, ...]:
        """Every non-input layer, in order."""
        return self.layers[1:]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class Violation:
    layer: str
    rule: str
    message: str
    value: int | None = None

    def __str__(self) -> str:
        return f"{self.layer}: {self.rule}: {self.message}"


@dataclass(frozen=True)
class LayerGeometry:
    """Resolved shapes of one mapped layer, including inferred padding."""

    layer: LayerSpec
    in_rows: int
    in_cols: int
    in_features: int
    padding: int

    @property
    def kernel(self) -> tuple[int, int]:
        return self.layer.patch_rows, self.layer.patch_cols

    @property
    def in_per_group(self) -> int:
        return self.in_features // self.layer.groups

    @property
    def out_shape(self) -> tuple[int, int, int]:
        return self.layer.features, self.layer.rows, self.layer.cols


# ---------------------------------------------------------------------------
# parsing


def _tokens(line: str) -> list[tuple[int, str]]:
    """Whitespace tokens with their 1-based starting column."""
    return [(m.start() + 1, m.group()) for m in re.finditer(r"\S+", line)]


def _int_field(lineno: int, col: int, tok: str, what: str, minimum: int = 1,
               allow_absent: bool = False) -> int | None:
    if allow_absent and tok == "-":
        return None
    if not re.fullmatch(r"[+-]?\d+", tok):
        raise ParseError(lineno, col, f"{what}: expected an integer, got {tok!r}")
    value = int(tok)
    if value < minimum:
        raise ParseError(lineno, col, f"{what}: must be >= {minimum}, got {value}")
    return value


def _kind_for(name: str) -> str:
    return PREPROCESS if name.upper().startswith("P") else CONV


def parse_network(text: str) -> NetworkSpec:
    """Parse a network document into a :class:`NetworkSpec`.

    Raises :class:`ParseError` locating the first offending field.
    """
    layers: list[LayerSpec] = []
    names: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = _tokens(line)
        if not toks:
            continue
        col0, name = toks[0]
        if not _NAME_RE.match(name):
            raise ParseError(lineno, col0, f"unknown directive {name!r}")
        if name in names:
            raise ParseError(lineno, col0, f"duplicate layer name {name!r}")

        if name == "I":
            if layers:
                raise ParseError(lineno, col0, "input row must be the first and only input")
            if len(toks) != 4:
                raise ParseError(lineno, col0, f"input row takes 4 fields (I rows cols channels), got {len(toks)}")
            rows, cols, chans = (
                _int_field(lineno, c, t, w)
                for (c, t), w in zip(toks[1:], ("rows", "cols", "channels"))
            )
            layers.append(LayerSpec(name, INPUT, rows, cols, chans))
            names.add(name)
            continue

        if not layers:
            raise ParseError(lineno, col0, "first row must be the input row 'I rows cols channels'")
        if len(toks) != len(COLUMNS):
            raise ParseError(lineno, col0, f"layer row takes {len(COLUMNS)} fields, got {len(toks)}")

        vals: dict[str, int | None] = {}
        for (col, tok), key in zip(toks[1:], COLUMNS[1:]):
            is_core = key.endswith("_cores")
            vals[key] = _int_field(lineno, col, tok, key, minimum=0 if is_core else 1,
                                   allow_absent=is_core)
        cols_of = {key: col for (col, _), key in zip(toks, COLUMNS)}

        if vals["features"] % vals["groups"]:
            raise ParseError(lineno, cols_of["groups"],
                             f"groups ({vals['groups']}) must divide features ({vals['features']})")
        if (vals["base_cores"] is None) != (vals["splitter_cores"] is None):
            raise ParseError(lineno, cols_of["base_cores"],
                             "base and splitter core counts must both be given or both be '-'")
        prev = layers[-1].features
        consumed = vals["Kf"] * vals["groups"]
        if consumed != prev:
            raise ParseError(lineno, cols_of["Kf"],
                             f"patch_features×groups ({consumed}) ≠ previous features ({prev})")

        layers.append(LayerSpec(
            name=name, kind=_kind_for(name),
            rows=vals["rows"], cols=vals["cols"], features=vals["features"],
            groups=vals["groups"], stride=vals["stride"],
            patch_rows=vals["Kr"], patch_cols=vals["Kc"], patch_features=vals["Kf"],
            declared_base_cores=vals["base_cores"],
            declared_splitter_cores=vals["splitter_cores"],
        ))
        names.add(name)

    if not layers:
        raise ParseError(1, 1, "document has no input row")
    return NetworkSpec(tuple(layers))


def load_network(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


# ---------------------------------------------------------------------------
# serialization


def _cell(v: int | None) -> str:
    return "-" if v is None else str(v)


def serialize_network(net: NetworkSpec) -> str:
    rows = []
    for layer in net.layers:
        if layer.is_input:
            rows.append([layer.name, str(layer.rows), str(layer.cols), str(layer.features)])
        else:
            rows.append([
                layer.name, str(layer.rows), str(layer.cols), str(layer.features),
                str(layer.groups), str(layer.stride), str(layer.patch_rows),
                str(layer.patch_cols), str(layer.patch_features),
                _cell(layer.declared_base_cores), _cell(layer.declared_splitter_cores),
            ])
    widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(len(COLUMNS))
              if any(i < len(r) for r in rows)]
    out = [HEADER]
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        out.append(" ".join(cells).rstrip())
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# structural validation


def solve_padding(n_in: int, n_out: int, k: int, stride: int) -> int | None:
    """Smallest symmetric zero padding ``p`` in ``[0, k-1]`` such that a
    ``k``-wide window with ``stride`` maps ``n_in`` positions onto ``n_out``."""
    for p in range(k):
        span = n_in + 2 * p - k
        if span >= 0 and span // stride + 1 == n_out:
            return p
    return None


def validate_structure(net: NetworkSpec) -> list[Violation]:
    """Return every structural problem of ``net``; empty means valid."""
    out: list[Violation] = []
    inputs = [layer for layer in net.layers if layer.is_input]
    if not net.layers or not net.layers[0].is_input or len(inputs) != 1:
        out.append(Violation("network", "input", "exactly one input row, first in the table"))
        return out
    prev = net.layers[0]
    for layer in net.mapped_layers:
        if layer.features % layer.groups:
            out.append(Violation(layer.name, "groups", "groups must divide features"))
        if layer.patch_features * layer.groups != prev.features:
            out.append(Violation(
                layer.name, "patch",
                f"patch_features×groups ({layer.patch_features * layer.groups}) "
                f"≠ previous features ({prev.features})"))
        pr = solve_padding(prev.rows, layer.rows, layer.patch_rows, layer.stride)
        pc = solve_padding(prev.cols, layer.cols, layer.patch_cols, layer.stride)
        if pr is None or pc is None:
            out.append(Violation(
                layer.name, "dims",
                f"no padding maps {prev.rows}x{prev.cols} to {layer.rows}x{layer.cols} "
                f"with kernel {layer.patch_rows}x{layer.patch_cols}, stride {layer.stride}"))
        elif pr != pc:
            out.append(Violation(layer.name, "dims", f"row padding {pr} differs from column padding {pc}"))
        prev = layer
    return out


def geometry(net: NetworkSpec) -> list[LayerGeometry]:
    """Per mapped layer input shape and solved padding.

    Raises ``ValueError`` when the network is structurally invalid.
    """
    problems = validate_structure(net)
    if problems:
        raise ValueError("; ".join(str(v) for v in problems))
    geo = []
    prev = net.layers[0]
    for layer in net.mapped_layers:
        p = solve_padding(prev.rows, layer.rows, layer.patch_rows, layer.stride)
        geo.append(LayerGeometry(layer, prev.rows, prev.cols, prev.features, p))
        prev = layer
    return geo
