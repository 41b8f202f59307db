"""Minimal convolutional network engine: config, forward, input gradients.

Layers are conv (cross-correlation), relu, maxpool and fc, described by a
plain-text architecture file. One layer is the *tap*: its activation,
flattened row-major and L2-normalized, is the deep feature of an input
map. Reverse-mode differentiation of ``<w, normalized_tap>`` with respect
to the input image backs the saliency computation; maxpool routes gradient
to the first row-major argmax so results are reproducible bit for bit.

Activations are (H, W, C) float64; conv weights are [out_c, in_c, kh, kw]
and fc weights [out, in], each stored as one FTNSR1 file per parameter.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeMismatch, UnknownLayerKind, ZeroFeature
from .imageops import resize_bilinear
from .tensor import read_tensor, write_tensor

LAYER_KINDS = ("conv", "relu", "maxpool", "fc")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out_channels: int = 0   # conv
    kh: int = 0
    kw: int = 0
    stride: int = 1         # conv, maxpool
    pad: int = 0            # conv
    window: int = 0         # maxpool
    out_features: int = 0   # fc


@dataclass
class NetModel:
    input_size: tuple[int, int, int]          # (h, w, c)
    layers: list[LayerSpec]
    tap: str
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    weights: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def layer_output_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Shape algebra for every layer: floor((in + 2p - k)/s) + 1."""
        h, w, c = self.input_size
        shapes = []
        for spec in self.layers:
            if spec.kind == "conv":
                h = (h + 2 * spec.pad - spec.kh) // spec.stride + 1
                w = (w + 2 * spec.pad - spec.kw) // spec.stride + 1
                c = spec.out_channels
                shape: tuple[int, ...] = (h, w, c)
            elif spec.kind == "maxpool":
                h = (h - spec.window) // spec.stride + 1
                w = (w - spec.window) // spec.stride + 1
                shape = (h, w, c)
            elif spec.kind == "relu":
                shape = (h, w, c) if w else (c,)
            else:  # fc
                h, w, c = 0, 0, spec.out_features
                shape = (c,)
            if min(shape) <= 0:
                raise ConfigError(f"layer {spec.name}: non-positive output {shape}")
            shapes.append((spec.name, shape))
        return shapes

    def tap_shape(self) -> tuple[int, ...]:
        for name, shape in self.layer_output_shapes():
            if name == self.tap:
                return shape
        raise ConfigError(f"tap layer {self.tap!r} not found")

    def tap_dim(self) -> int:
        return int(np.prod(self.tap_shape()))


_KV_RE = re.compile(r"^(\w+)=(\S+)$")


def _parse_kv(tokens, lineno):
    out = {}
    for tok in tokens:
        m = _KV_RE.match(tok)
        if not m:
            raise ConfigError(f"arch line {lineno}: bad token {tok!r}")
        out[m.group(1)] = m.group(2)
    return out


def parse_arch(text: str) -> NetModel:
    """Parse an architecture description into an unweighted NetModel.

    Header lines: ``input <h> <w> <c>``, ``tap <layer>``, ``mean <r> <g> <b>``.
    Layer lines: ``conv name=.. out=.. k=<kh>x<kw> stride=.. pad=..``,
    ``relu name=..``, ``maxpool name=.. k=.. stride=..``, ``fc name=.. out=..``.
    """
    input_size = None
    tap = None
    mean = (0.0, 0.0, 0.0)
    layers: list[LayerSpec] = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head, rest = tokens[0], tokens[1:]
        if head == "input":
            if len(rest) != 3:
                raise ConfigError(f"arch line {lineno}: input needs h w c")
            input_size = tuple(int(v) for v in rest)
        elif head == "tap":
            if len(rest) != 1:
                raise ConfigError(f"arch line {lineno}: tap needs a layer name")
            tap = rest[0]
        elif head == "mean":
            if len(rest) != 3:
                raise ConfigError(f"arch line {lineno}: mean needs r g b")
            mean = tuple(float(v) for v in rest)
        elif head in ("conv", "relu", "maxpool", "fc"):
            kv = _parse_kv(rest, lineno)
            if "name" not in kv:
                raise ConfigError(f"arch line {lineno}: missing name=")
            name = kv["name"]
            if name in names:
                raise ConfigError(f"arch line {lineno}: duplicate layer {name!r}")
            names.add(name)
            try:
                if head == "conv":
                    kh, kw = (int(v) for v in kv["k"].split("x"))
                    spec = LayerSpec("conv", name, out_channels=int(kv["out"]),
                                     kh=kh, kw=kw, stride=int(kv.get("stride", 1)),
                                     pad=int(kv.get("pad", 0)))
                elif head == "relu":
                    spec = LayerSpec("relu", name)
                elif head == "maxpool":
                    spec = LayerSpec("maxpool", name, window=int(kv["k"]),
                                     stride=int(kv.get("stride", 1)))
                else:
                    spec = LayerSpec("fc", name, out_features=int(kv["out"]))
            except (KeyError, ValueError) as e:
                raise ConfigError(f"arch line {lineno}: {e}") from None
            if spec.kind == "conv" and (spec.kh < 1 or spec.kw < 1 or
                                        spec.stride < 1 or spec.pad < 0):
                raise ConfigError(f"arch line {lineno}: bad conv geometry")
            if spec.kind == "maxpool" and (spec.window < 1 or spec.stride < 1):
                raise ConfigError(f"arch line {lineno}: bad maxpool geometry")
            layers.append(spec)
        else:
            raise UnknownLayerKind(f"arch line {lineno}: unknown kind {head!r}")
    if input_size is None:
        raise ConfigError("arch file missing input line")
    if not layers:
        raise ConfigError("arch file has no layers")
    if tap is None:
        raise ConfigError("arch file missing tap line")
    if tap not in names:
        raise ConfigError(f"tap layer {tap!r} is not defined")
    model = NetModel(input_size=input_size, layers=layers, tap=tap, mean=mean)
    model.layer_output_shapes()  # validates the geometry chain
    return model


def _param_shapes(model: NetModel):
    """Expected (weight, bias) shapes per parameterized layer."""
    h, w, c = model.input_size
    shapes = {}
    for spec in model.layers:
        if spec.kind == "conv":
            shapes[spec.name] = ((spec.out_channels, c, spec.kh, spec.kw),
                                 (spec.out_channels,))
            h = (h + 2 * spec.pad - spec.kh) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.kw) // spec.stride + 1
            c = spec.out_channels
        elif spec.kind == "maxpool":
            h = (h - spec.window) // spec.stride + 1
            w = (w - spec.window) // spec.stride + 1
        elif spec.kind == "fc":
            in_dim = h * w * c if w else c
            shapes[spec.name] = ((spec.out_features, in_dim), (spec.out_features,))
            h, w, c = 0, 0, spec.out_features
    return shapes


def init_weights(model: NetModel, seed: int = 0) -> None:
    """Seeded Gaussian init, scaled by sqrt(2 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    model.weights = {}
    for name, (wshape, bshape) in _param_shapes(model).items():
        fan_in = int(np.prod(wshape[1:]))
        w = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
        model.weights[name] = (w, np.zeros(bshape))


def save_weights(model: NetModel, directory) -> None:
    for name, (w, b) in model.weights.items():
        write_tensor(os.path.join(directory, f"{name}.w.ftnsr"), w)
        write_tensor(os.path.join(directory, f"{name}.b.ftnsr"), b)


def load_model(arch_path, weights_dir=None) -> NetModel:
    """Load and validate an architecture file plus its weight directory.

    Every parameterized layer must have ``<name>.w.ftnsr``/``<name>.b.ftnsr``
    in ``weights_dir`` with shapes matching the architecture chain.
    """
    with open(arch_path, "r", encoding="utf-8") as f:
        model = parse_arch(f.read())
    if weights_dir is None:
        return model
    for name, (wshape, bshape) in _param_shapes(model).items():
        wpath = os.path.join(weights_dir, f"{name}.w.ftnsr")
        bpath = os.path.join(weights_dir, f"{name}.b.ftnsr")
        if not os.path.exists(wpath) or not os.path.exists(bpath):
            raise ShapeMismatch(f"layer {name}: missing weight files in {weights_dir}")
        w = read_tensor(wpath)
        b = read_tensor(bpath)
        if w.shape != wshape:
            raise ShapeMismatch(
                f"layer {name}: weight shape {w.shape}, expected {wshape}"
            )
        if b.shape != bshape:
            raise ShapeMismatch(
                f"layer {name}: bias shape {b.shape}, expected {bshape}"
            )
        model.weights[name] = (w, b)
    return model


# --- layer kernels ---

def _conv_forward(x, w, b, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
    oh, ow = win.shape[:2]
    # window view is (oh, ow, C, kh, kw): patch order matches [out,in,kh,kw]
    cols = win.reshape(oh * ow, -1)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(oh, ow, w.shape[0]) + b


def _conv_backward(gout, x_shape, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    h, wd, c = x_shape
    oh, ow = gout.shape[:2]
    gcols = gout.reshape(oh * ow, -1) @ w.reshape(w.shape[0], -1)
    gcols = gcols.reshape(oh, ow, c, kh, kw)
    gx = np.zeros((h + 2 * pad, wd + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            gx[i:i + oh * stride:stride, j:j + ow * stride:stride] += gcols[:, :, :, i, j]
    if pad:
        gx = gx[pad:-pad, pad:-pad]
    return gx


def _maxpool_forward(x, window, stride, want_argmax=False):
    win = sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride]
    oh, ow = win.shape[:2]
    flat = win.reshape(oh, ow, x.shape[2], window * window)
    out = flat.max(axis=3)
    if not want_argmax:
        return out, None
    # np.argmax returns the first maximum, i.e. first in row-major window order
    return out, flat.argmax(axis=3)


def _maxpool_backward(gout, x_shape, window, stride, argmax):
    h, w, c = x_shape
    oh, ow = gout.shape[:2]
    gi, gj, gc = np.meshgrid(np.arange(oh), np.arange(ow), np.arange(c),
                             indexing="ij")
    rows = gi * stride + argmax // window
    cols = gj * stride + argmax % window
    gx = np.zeros(x_shape)
    np.add.at(gx, (rows.ravel(), cols.ravel(), gc.ravel()), gout.ravel())
    return gx


def _apply_layer(spec, x, weights, want_cache):
    cache = None
    if spec.kind == "conv":
        w, b = weights[spec.name]
        out = _conv_forward(x, w, b, spec.stride, spec.pad)
        cache = x.shape
    elif spec.kind == "relu":
        out = np.maximum(x, 0.0)
        cache = x > 0.0
    elif spec.kind == "maxpool":
        out, argmax = _maxpool_forward(x, spec.window, spec.stride,
                                       want_argmax=want_cache)
        cache = (x.shape, argmax)
    else:  # fc
        w, b = weights[spec.name]
        out = w @ x.reshape(-1) + b
        cache = x.shape
    return out, cache


def forward(model: NetModel, image) -> dict[str, np.ndarray]:
    """Run the network, returning every layer's activation by name."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape != tuple(model.input_size):
        raise ShapeMismatch(
            f"input shape {x.shape}, model expects {tuple(model.input_size)}"
        )
    acts = {}
    for spec in model.layers:
        x, _ = _apply_layer(spec, x, model.weights, want_cache=False)
        acts[spec.name] = x
    return acts


def _backward_layer(spec, g, cache, weights):
    if spec.kind == "conv":
        w, _ = weights[spec.name]
        return _conv_backward(g, cache, w, spec.stride, spec.pad)
    if spec.kind == "relu":
        return g * cache
    if spec.kind == "maxpool":
        x_shape, argmax = cache
        return _maxpool_backward(g, x_shape, spec.window, spec.stride, argmax)
    w, _ = weights[spec.name]
    return (w.T @ g).reshape(cache)


def _tap_index(model: NetModel) -> int:
    for i, spec in enumerate(model.layers):
        if spec.name == model.tap:
            return i
    raise ConfigError(f"tap layer {model.tap!r} not found")


def input_gradient(model: NetModel, image, weight_vector) -> np.ndarray:
    """Gradient of ``<w, f(image)>`` w.r.t. the image, where f is the
    flattened, L2-normalized tap activation.

    The normalization Jacobian is included: with raw tap a and f = a/||a||,
    the seed gradient is (w - f <f, w>) / ||a||.
    """
    w_vec = np.asarray(weight_vector, dtype=np.float64).reshape(-1)
    x = np.asarray(image, dtype=np.float64)
    if x.shape != tuple(model.input_size):
        raise ShapeMismatch(
            f"input shape {x.shape}, model expects {tuple(model.input_size)}"
        )
    tap_i = _tap_index(model)
    caches = []
    for spec in model.layers[: tap_i + 1]:
        x, cache = _apply_layer(spec, x, model.weights, want_cache=True)
        caches.append((spec, cache))
    tap_act = x
    if w_vec.size != tap_act.size:
        raise ShapeMismatch(
            f"weight vector length {w_vec.size}, tap dim {tap_act.size}"
        )
    a = tap_act.reshape(-1)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        raise ZeroFeature("tap activation is identically zero")
    f = a / norm
    g = (w_vec - f * np.dot(f, w_vec)) / norm
    g = g.reshape(tap_act.shape)
    for spec, cache in reversed(caches):
        g = _backward_layer(spec, g, cache, model.weights)
    return g


# --- feature extraction ---

def _minmax01(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-300:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def prepare_input(model: NetModel, attribute_map) -> np.ndarray:
    """Network input from a scalar map: min-max normalize, bilinear-resize
    to the model's input size, replicate to 3 channels, subtract the mean."""
    amap = np.asarray(attribute_map, dtype=np.float64)
    if amap.ndim != 2:
        raise ShapeMismatch(f"attribute map must be 2-D, got {amap.shape}")
    h, w, c = model.input_size
    img = resize_bilinear(_minmax01(amap), h, w)
    img = np.repeat(img[:, :, None], c, axis=2)
    return img - np.asarray(model.mean, dtype=np.float64)


def extract_feature(model: NetModel, attribute_map) -> np.ndarray:
    """Deep feature of a scalar attribute map: the tap activation with unit
    global L2 norm (tap-shaped; flatten row-major for a feature vector)."""
    acts = forward(model, prepare_input(model, attribute_map))
    tap_act = acts[model.tap]
    norm = np.linalg.norm(tap_act)
    if norm == 0.0:
        raise ZeroFeature("tap activation is identically zero")
    return tap_act / norm


# --- bundled architectures ---

# five conv blocks ending in 512 channels, 224x224x3 input, 6x6x512 tap
VGG_S_LIKE = """\
input 224 224 3
tap pool5
mean 0 0 0
conv name=conv1 out=96 k=7x7 stride=2 pad=0
relu name=relu1
maxpool name=pool1 k=3 stride=3
conv name=conv2 out=256 k=5x5 stride=1 pad=2
relu name=relu2
maxpool name=pool2 k=2 stride=2
conv name=conv3 out=512 k=3x3 stride=1 pad=1
relu name=relu3
conv name=conv4 out=512 k=3x3 stride=1 pad=1
relu name=relu4
conv name=conv5 out=512 k=3x3 stride=1 pad=1
relu name=relu5
maxpool name=pool5 k=3 stride=3
"""

# 227x227x3 input, final conv at 256 channels, 6x6x256 tap
ALEXNET_LIKE = """\
input 227 227 3
tap pool5
mean 0 0 0
conv name=conv1 out=96 k=11x11 stride=4 pad=0
relu name=relu1
maxpool name=pool1 k=3 stride=2
conv name=conv2 out=256 k=5x5 stride=1 pad=2
relu name=relu2
maxpool name=pool2 k=3 stride=2
conv name=conv3 out=384 k=3x3 stride=1 pad=1
relu name=relu3
conv name=conv4 out=384 k=3x3 stride=1 pad=1
relu name=relu4
conv name=conv5 out=256 k=3x3 stride=1 pad=1
relu name=relu5
maxpool name=pool5 k=3 stride=2
"""

BUILTIN_ARCHS = {"vgg_s": VGG_S_LIKE, "alexnet": ALEXNET_LIKE}


def builtin_arch(name: str) -> str:
    try:
        return BUILTIN_ARCHS[name]
    except KeyError:
        raise ConfigError(
            f"unknown builtin arch {name!r}; have {sorted(BUILTIN_ARCHS)}"
        ) from None


def materialize_net(arch: str, directory, seed: int = 0) -> NetModel:
    """Write an arch file plus seeded random weights into ``directory``."""
    if arch in BUILTIN_ARCHS:
        text = builtin_arch(arch)
    else:
        with open(arch, "r", encoding="utf-8") as f:
            text = f.read()
    os.makedirs(directory, exist_ok=True)
    arch_path = os.path.join(directory, "arch.txt")
    with open(arch_path, "w", encoding="utf-8") as f:
        f.write(text)
    model = parse_arch(text)
    init_weights(model, seed=seed)
    save_weights(model, directory)
    return model
