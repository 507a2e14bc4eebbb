"""Desk-scale training of trinary-weight, binary-activation CNNs.

Every mapped layer is a grouped convolution without bias whose neurons fire
when the integer sum of their trinary-weighted binary inputs reaches 1. During
training the step activation is relaxed to a clipped linear ramp and weight
quantization is bypassed with a straight-through estimator: full-precision
"shadow" weights receive the gradients, and their trinary view is refreshed
after every update with a hysteresis quantizer.

Class scores are read from the last layer: its feature maps are split into
``num_classes`` contiguous blocks and each class scores the mean activation of
its block over all positions.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import Dataset, binarize, fit_to_input
from .netspec import LayerGeometry, NetworkSpec, geometry

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"TNWT"
WEIGHTS_VERSION = 1

HYSTERESIS = 0.5
HYSTERESIS_BAND = 0.05


# ---------------------------------------------------------------------------
# weights


def quantize(shadow: np.ndarray, previous: np.ndarray | None = None,
             h: float = HYSTERESIS, delta: float = HYSTERESIS_BAND,
             binary: bool = False) -> np.ndarray:
    """Hysteresis projection of shadow weights onto {-1, 0, +1} ({0, 1} if ``binary``).

    A weight becomes +1 above ``h``, -1 below ``-h`` and 0 inside
    ``(-(h - delta), h - delta)``; in the bands between it keeps its previous value.
    """
    shadow = np.asarray(shadow)
    out = np.zeros(shadow.shape, np.int8) if previous is None else np.array(previous, np.int8)
    out[shadow > h] = 1
    if binary:
        out[shadow < h - delta] = 0
    else:
        out[shadow < -h] = -1
        out[np.abs(shadow) < h - delta] = 0
    return out


@dataclass
class ModelWeights:
    """Shadow weights and their trinary view, one ``F x F_prev/G x K x K`` tensor per layer."""

    shadow: list[np.ndarray]
    trinary: list[np.ndarray]
    num_classes: int
    binary: bool = False

    @classmethod
    def initial(cls, net: NetworkSpec, num_classes: int, seed: int = 42,
                binary: bool = False, scale: float = 1.0) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        shadow = []
        for geo in geometry(net):
            layer = geo.layer
            shape = (layer.features, geo.in_per_group, layer.patch_rows, layer.patch_cols)
            shadow.append((rng.uniform(-1.0, 1.0, size=shape) * scale).astype(np.float32))
        trinary = [quantize(s, binary=binary) for s in shadow]
        return cls(shadow, trinary, num_classes, binary)

    @classmethod
    def from_trinary(cls, trinary: list[np.ndarray], num_classes: int) -> "ModelWeights":
        """Weights whose shadow equals the given trinary tensors."""
        tri = [np.asarray(t, np.int8) for t in trinary]
        return cls([t.astype(np.float32) for t in tri], tri, num_classes)

    def copy(self) -> "ModelWeights":
        return ModelWeights([s.copy() for s in self.shadow], [t.copy() for t in self.trinary],
                            self.num_classes, self.binary)

    def check_shapes(self, net: NetworkSpec) -> None:
        geo = geometry(net)
        if len(geo) != len(self.trinary):
            raise ValueError(f"network has {len(geo)} mapped layers, weights have {len(self.trinary)}")
        for g, t in zip(geo, self.trinary):
            want = (g.layer.features, g.in_per_group, g.layer.patch_rows, g.layer.patch_cols)
            if t.shape != want:
                raise ValueError(f"{g.layer.name}: weight shape {t.shape}, expected {want}")
        last = geo[-1].layer.features
        if last % self.num_classes:
            raise ValueError(f"last layer features ({last}) not divisible by {self.num_classes} classes")

    # binary container: magic, version, flags, class count, layer count,
    # then per layer a 4 x u32 shape header, f32 shadow, i8 trinary
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(WEIGHTS_MAGIC)
        buf.write(struct.pack("<HHHI", WEIGHTS_VERSION, int(self.binary), self.num_classes,
                              len(self.shadow)))
        for s, t in zip(self.shadow, self.trinary):
            buf.write(struct.pack("<4I", *s.shape))
            buf.write(np.ascontiguousarray(s, dtype="<f4").tobytes())
            buf.write(np.ascontiguousarray(t, dtype=np.int8).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if data[:4] != WEIGHTS_MAGIC:
            raise ValueError(f"bad weights magic {data[:4]!r}")
        version, flags, classes, count = struct.unpack_from("<HHHI", data, 4)
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        pos = 4 + struct.calcsize("<HHHI")
        shadow, trinary = [], []
        for _ in range(count):
            shape = struct.unpack_from("<4I", data, pos)
            pos += 16
            n = int(np.prod(shape))
            if pos + 5 * n > len(data):
                raise ValueError(f"weights file truncated: need {pos + 5 * n} bytes, have {len(data)}")
            shadow.append(np.frombuffer(data, "<f4", n, pos).reshape(shape).astype(np.float32))
            pos += 4 * n
            trinary.append(np.frombuffer(data, np.int8, n, pos).reshape(shape).copy())
            pos += n
        if pos != len(data):
            raise ValueError(f"{len(data) - pos} trailing bytes in weights file")
        return cls(shadow, trinary, classes, bool(flags & 1))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# grouped convolution


def _windows(x: np.ndarray, geo: LayerGeometry) -> np.ndarray:
    """``(G, B*Ho*Wo, Cg*Kr*Kc)`` patch matrix of a padded input batch."""
    layer = geo.layer
    kr, kc = geo.kernel
    p, s, g = geo.padding, layer.stride, layer.groups
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (kr, kc), axis=(2, 3))[:, :, ::s, ::s][:, :, :layer.rows, :layer.cols]
    b = x.shape[0]
    win = win.reshape(b, g, geo.in_per_group, layer.rows, layer.cols, kr, kc)
    win = win.transpose(1, 0, 3, 4, 2, 5, 6)
    return win.reshape(g, b * layer.rows * layer.cols, geo.in_per_group * kr * kc)


def conv_forward(x: np.ndarray, w: np.ndarray, geo: LayerGeometry,
                 cols: np.ndarray | None = None) -> np.ndarray:
    layer = geo.layer
    g, fg = layer.groups, layer.features_per_group
    if cols is None:
        cols = _windows(x, geo)
    wm = w.reshape(g, fg, -1).transpose(0, 2, 1).astype(cols.dtype, copy=False)
    z = np.matmul(cols, wm)  # (G, B*Ho*Wo, Fg)
    b = x.shape[0]
    z = z.reshape(g, b, layer.rows, layer.cols, fg).transpose(1, 0, 4, 2, 3)
    return z.reshape(b, layer.features, layer.rows, layer.cols)


def conv_backward(dz: np.ndarray, x_shape, w: np.ndarray, geo: LayerGeometry,
                  cols: np.ndarray, need_dx: bool = True):
    """Gradients of a grouped convolution w.r.t. its weights and input."""
    layer = geo.layer
    g, fg = layer.groups, layer.features_per_group
    kr, kc = geo.kernel
    b = dz.shape[0]
    dzg = dz.reshape(b, g, fg, layer.rows, layer.cols).transpose(1, 0, 3, 4, 2)
    dzg = dzg.reshape(g, b * layer.rows * layer.cols, fg)
    dw = np.matmul(cols.transpose(0, 2, 1), dzg)  # (G, Cg*K*K, Fg)
    dw = dw.transpose(0, 2, 1).reshape(w.shape)
    if not need_dx:
        return dw, None
    wm = w.reshape(g, fg, -1).astype(dz.dtype, copy=False)
    dcols = np.matmul(dzg, wm)  # (G, N, Cg*K*K)
    dcols = dcols.reshape(g, b, layer.rows, layer.cols, geo.in_per_group, kr, kc)
    dcols = dcols.transpose(1, 0, 4, 5, 6, 2, 3).reshape(
        b, geo.in_features, kr, kc, layer.rows, layer.cols)
    p, s = geo.padding, layer.stride
    dxp = np.zeros((b, geo.in_features, geo.in_rows + 2 * p, geo.in_cols + 2 * p), dz.dtype)
    for i in range(kr):
        for j in range(kc):
            dxp[:, :, i:i + s * layer.rows:s, j:j + s * layer.cols:s] += dcols[:, :, i, j]
    return dw, dxp[:, :, p:p + geo.in_rows, p:p + geo.in_cols]


# ---------------------------------------------------------------------------
# forward / backward


def class_scores(act: np.ndarray, num_classes: int) -> np.ndarray:
    """Mean activation of each class block of the last layer's features."""
    b = act.shape[0]
    return act.reshape(b, num_classes, -1).mean(axis=2)


def class_counts(act: np.ndarray, num_classes: int) -> np.ndarray:
    b = act.shape[0]
    return act.reshape(b, num_classes, -1).sum(axis=2)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


@dataclass
class ForwardPass:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    activations: list[np.ndarray]
    masks: list[np.ndarray | None]
    cols: list[np.ndarray]
    scores: np.ndarray
    loss: float | None
    mode: str
    full_precision: bool
    surrogate_width: float | str


SQRT_FANIN = "sqrt-fanin"


def _width(width: float | str, geo: LayerGeometry) -> float:
    if width == SQRT_FANIN:
        return math.sqrt(geo.layer.fanin_per_group)
    width = float(width)
    if width <= 0:
        raise ValueError(f"surrogate width must be positive, got {width}")
    return width


def _surrogate(z: np.ndarray, width: float) -> np.ndarray:
    return np.clip(0.5 + (z - 0.5) / width, 0.0, 1.0)


def forward(net: NetworkSpec, w: ModelWeights, batch, mode: str = "eval", *,
            rng: np.random.Generator | None = None, dropout: float = 0.0,
            full_precision: bool = False, surrogate_width: float | str = 1.0,
            hard: bool = False) -> ForwardPass:
    """Run a batch ``(x, labels)`` through the network.

    ``x`` has shape ``(B, C, H, W)``; ``labels`` may be ``None``. In ``eval``
    mode every activation is the hard step ``z >= 1`` on the trinary weights.
    In ``train`` mode activations are ``clip(0.5 + (z - 0.5) / width, 0, 1)``
    (``clip(z, 0, 1)`` at the default width; ``"sqrt-fanin"`` uses the
    square root of each layer's fan-in), or the hard step when ``hard`` is
    set, and hidden activations are dropped with probability ``dropout`` (inverted scaling) using ``rng``.
    ``full_precision`` uses the shadow weights instead of the trinary view.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    x, labels = batch
    geos = geometry(net)
    if x.ndim != 4 or x.shape[1:] != (net.input_channels, net.input_rows, net.input_cols):
        raise ValueError(f"input batch shape {x.shape} does not match network input "
                         f"{(net.input_channels, net.input_rows, net.input_cols)}")
    train = mode == "train"
    dtype = w.shadow[0].dtype if full_precision else np.float32
    a = np.asarray(x, dtype=dtype)
    fp = ForwardPass([], [], [], [], [], None, None, mode, full_precision, surrogate_width)
    for k, geo in enumerate(geos):
        wk = w.shadow[k] if full_precision else w.trinary[k]
        cols = _windows(a, geo)
        z = conv_forward(a, wk, geo, cols)
        fp.inputs.append(a)
        fp.cols.append(cols)
        fp.preacts.append(z)
        if train and not hard:
            a = _surrogate(z, _width(surrogate_width, geo)).astype(dtype, copy=False)
        else:
            a = (z >= 1).astype(dtype)
        mask = None
        if train and dropout > 0 and k < len(geos) - 1:
            if rng is None:
                raise ValueError("dropout needs an explicit rng")
            mask = (rng.random(a.shape) >= dropout).astype(dtype) / (1.0 - dropout)
            a = a * mask
        fp.masks.append(mask)
        fp.activations.append(a)
    fp.scores = class_scores(a, w.num_classes)
    if labels is not None:
        fp.loss = float(np.mean((fp.scores - one_hot(labels, w.num_classes, fp.scores.dtype)) ** 2))
    return fp


def backward(net: NetworkSpec, w: ModelWeights, batch, fp: ForwardPass) -> list[np.ndarray]:
    """Gradients of the mean squared error with respect to the shadow weights.

    On the trinary path the straight-through gate passes the gradient of the
    trinary view unchanged where ``|shadow| <= 1`` and blocks it elsewhere.
    """
    x, labels = batch
    geos = geometry(net)
    b, c = fp.scores.shape
    dscore = 2.0 * (fp.scores - one_hot(labels, c, fp.scores.dtype)) / (b * c)
    last = fp.activations[-1]
    block = last[0].size // c
    da = np.repeat(dscore / block, block, axis=1).reshape(last.shape).astype(last.dtype)
    grads: list[np.ndarray] = [None] * len(geos)
    for k in range(len(geos) - 1, -1, -1):
        if fp.masks[k] is not None:
            da = da * fp.masks[k]
        z = fp.preacts[k]
        width = _width(fp.surrogate_width, geos[k])
        ramp = 0.5 + (z - 0.5) / width
        dz = da * ((ramp > 0) & (ramp < 1)) / width
        wk = w.shadow[k] if fp.full_precision else w.trinary[k]
        dw, dx = conv_backward(dz.astype(z.dtype, copy=False), fp.inputs[k].shape, wk, geos[k],
                               fp.cols[k], need_dx=k > 0)
        if not fp.full_precision:
            dw = dw * (np.abs(w.shadow[k]) <= 1.0)
        grads[k] = dw.astype(w.shadow[k].dtype, copy=False)
        da = dx
    return grads


def normalize_gradients(grads: list[np.ndarray], how: str = "max") -> list[np.ndarray]:
    """Rescale each layer's gradient: ``"max"`` to unit max-abs, ``"rms"`` to unit RMS."""
    if how == "none":
        return grads
    out = []
    for g in grads:
        if how == "max":
            scale = float(np.max(np.abs(g))) if g.size else 0.0
        elif how == "rms":
            scale = float(np.sqrt(np.mean(np.square(g, dtype=np.float64))))
        else:
            raise ValueError(f"unknown gradient normalization {how!r}")
        out.append(g / scale if scale > 0 else g)
    return out


def update(w: ModelWeights, grads: list[np.ndarray], lr: float,
           h: float = HYSTERESIS, delta: float = HYSTERESIS_BAND) -> ModelWeights:
    """One gradient step on the shadow weights, then re-quantize with hysteresis."""
    shadow, trinary = [], []
    for s, t, g in zip(w.shadow, w.trinary, grads):
        if s.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match weights {s.shape}")
        ns = np.clip(s - lr * g, -1.0, 1.0).astype(s.dtype)
        shadow.append(ns)
        trinary.append(quantize(ns, t, h, delta, w.binary))
    return ModelWeights(shadow, trinary, w.num_classes, w.binary)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rates: tuple[float, float] = (0.1, 0.01)
    iterations: int = 1000
    dropout: float = 0.5
    seed: int = 42
    hysteresis: float = HYSTERESIS
    hysteresis_band: float = HYSTERESIS_BAND
    surrogate_width: float | str = SQRT_FANIN
    hard_forward: bool = True
    grad_norm: str = "max"
    binary_weights: bool = False
    eval_every: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def learning_rate(self, iteration: int) -> float:
        """First rate for the first half of the run, second rate after."""
        return self.learning_rates[0] if iteration < self.iterations // 2 else self.learning_rates[1]


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    accuracy: list[tuple[int, float, float | None]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["iteration,loss"]
        lines += [f"{i},{loss:.6f}" for i, loss in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def prepare_inputs(net: NetworkSpec, images: np.ndarray) -> np.ndarray:
    """Fit images to the network input and apply the binary spike threshold."""
    fitted = fit_to_input(images, net.input_channels, net.input_rows, net.input_cols)
    return binarize(fitted)


def train(net: NetworkSpec, dataset: Dataset, cfg: TrainConfig, *,
          num_classes: int | None = None, test: Dataset | None = None,
          init: ModelWeights | None = None) -> tuple[ModelWeights, TrainLog]:
    """Mini-batch SGD: forward, error, backward, update, for ``cfg.iterations`` steps."""
    classes = num_classes or dataset.num_classes
    w = init.copy() if init is not None else ModelWeights.initial(
        net, classes, cfg.seed, cfg.binary_weights, cfg.init_scale)
    w.check_shapes(net)
    logbook = TrainLog()
    if cfg.iterations == 0:
        return w, logbook
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    x_all = prepare_inputs(net, dataset.images)
    y_all = dataset.labels
    x_test = prepare_inputs(net, test.images) if test is not None else None

    rng = np.random.default_rng(cfg.seed)
    order = np.empty(0, dtype=np.int64)
    for it in range(cfg.iterations):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(y_all))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = (x_all[idx], y_all[idx])
        fp = forward(net, w, batch, "train", rng=rng, dropout=cfg.dropout,
                     surrogate_width=cfg.surrogate_width, hard=cfg.hard_forward)
        if not math.isfinite(fp.loss):
            raise FloatingPointError(f"loss became {fp.loss} at iteration {it}")
        grads = backward(net, w, batch, fp)
        grads = normalize_gradients(grads, cfg.grad_norm)
        w = update(w, grads, cfg.learning_rate(it), cfg.hysteresis, cfg.hysteresis_band)
        logbook.losses.append(fp.loss)
        if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations):
            tr = accuracy_binary(net, w, x_all[:1000], y_all[:1000])
            te = accuracy_binary(net, w, x_test, test.labels) if x_test is not None else None
            logbook.accuracy.append((it + 1, tr, te))
            log.info("iter %d loss %.4f train %.4f test %s", it + 1, fp.loss, tr,
                     "-" if te is None else f"{te:.4f}")
    return w, logbook


# ---------------------------------------------------------------------------
# evaluation


def argmax_low(counts: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(counts, axis=1)


def predict_binary(net: NetworkSpec, w: ModelWeights, x: np.ndarray,
                   chunk: int = 500) -> np.ndarray:
    """Eval-mode labels for already binarized, fitted inputs."""
    out = []
    for start in range(0, len(x), chunk):
        fp = forward(net, w, (x[start:start + chunk], None), "eval")
        out.append(argmax_low(class_counts(fp.activations[-1], w.num_classes)))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def accuracy_binary(net, w, x, labels) -> float:
    return float(np.mean(predict_binary(net, w, x) == labels))


def predict(net: NetworkSpec, w: ModelWeights, images: np.ndarray) -> np.ndarray:
    return predict_binary(net, w, prepare_inputs(net, images))


def evaluate(net: NetworkSpec, w: ModelWeights, dataset: Dataset) -> float:
    """Fraction of samples whose eval-mode argmax equals the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, w, dataset.images) == dataset.labels))
