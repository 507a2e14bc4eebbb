"""Shared builders for tests: random desk-scale networks, weights and inputs."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from tncraft.netspec import LayerSpec, NetworkSpec, CONV, INPUT, validate_structure
from tncraft.trainer import ModelWeights

# (name, fan-in = Kr*Kc*Kf, rf stride, rf rows, rf cols) read off the published tables
DEEP_GOLDEN = [
    ("P1", 27, 1, 3, 3), ("C2", 96, 2, 6, 6), ("C3", 126, 2, 6, 6), ("C4", 128, 4, 8, 8),
    ("C5", 72, 4, 16, 16), ("C6", 128, 4, 16, 16), ("C7", 128, 4, 16, 16), ("C8", 128, 4, 16, 16),
    ("C9", 128, 8, 20, 20), ("C10", 72, 8, 36, 36), ("C11", 128, 8, 36, 36),
    ("C12", 128, 16, 44, 44), ("C13", 128, 16, 44, 44), ("C14", 128, 16, 44, 44),
    ("C15", 128, 16, 44, 44),
]
WIDE_GOLDEN = [
    ("P1", 27, 1, 3, 3), ("C2", 96, 2, 6, 6), ("C3", 126, 2, 6, 6), ("C4", 64, 4, 8, 8),
    ("C5", 64, 8, 12, 12), ("C6", 128, 8, 12, 12), ("C7", 128, 16, 20, 20),
    ("C8", 64, 16, 20, 20), ("C9", 32, 16, 20, 20),
]

# one "criterion N PASS|FAIL detail" line per acceptance check, shown in the summary
ACCEPTANCE_LINES: list[str] = []

MNIST_DIR = Path(os.environ.get("TNCRAFT_MNIST", "/root/data/mnist"))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or \
        (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def random_net(rng: np.random.Generator, max_side: int = 8, max_features: int = 8,
               max_layers: int = 3) -> NetworkSpec:
    """A structurally valid net with inputs up to ``max_side`` square and at
    most ``max_features`` features per layer."""
    while True:
        rows = int(rng.integers(1, max_side + 1))
        cols = int(rng.integers(1, max_side + 1))
        chans = int(rng.integers(1, 4))
        layers = [LayerSpec("I", INPUT, rows, cols, chans)]
        for i in range(int(rng.integers(1, max_layers + 1))):
            prev = layers[-1]
            groups = int(rng.choice(_divisors(prev.features)))
            per_group = int(rng.integers(1, max_features // groups + 1))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k))
            out_r = (prev.rows + 2 * pad - k) // stride + 1
            out_c = (prev.cols + 2 * pad - k) // stride + 1
            if out_r < 1 or out_c < 1:
                break
            layers.append(LayerSpec(f"C{i + 1}", CONV, out_r, out_c, groups * per_group, groups,
                                    stride, k, k, prev.features // groups))
        if len(layers) < 2:
            continue
        net = NetworkSpec(tuple(layers))
        if not validate_structure(net):
            return net


def random_weights(rng: np.random.Generator, net: NetworkSpec, num_classes: int | None = None) -> ModelWeights:
    """Trinary weights with a per-layer random bias toward +1 so activity survives depth."""
    from tncraft.netspec import geometry
    tri = []
    for geo in geometry(net):
        layer = geo.layer
        shape = (layer.features, geo.in_per_group, layer.patch_rows, layer.patch_cols)
        p_plus = rng.uniform(0.2, 0.6)
        p_minus = rng.uniform(0.0, 1.0 - p_plus)
        tri.append(rng.choice([1, -1, 0], size=shape, p=[p_plus, p_minus, 1 - p_plus - p_minus]))
    last = net.mapped_layers[-1].features
    if num_classes is None:
        num_classes = int(rng.choice(_divisors(last)))
    return ModelWeights.from_trinary(tri, num_classes)


def random_input(rng: np.random.Generator, net: NetworkSpec) -> np.ndarray:
    density = rng.uniform(0.2, 0.8)
    shape = (net.input_channels, net.input_rows, net.input_cols)
    return (rng.random(shape) < density).astype(np.int8)
