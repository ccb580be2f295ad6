"""Dense 3D CNN arithmetic with layer-level reverse-mode differentiation.

Arrays are plain :class:`numpy.ndarray` objects in channels-first layout,
``(N, C, D, H, W)`` for volumes and ``(N, F)`` after pooling. Parameters are
float32 by default, but every layer preserves the dtype of its input so the
same code can be run in float64 for gradient checking.

A forward pass records a :class:`Tape` holding each layer's cache and the
activation of the layer marked ``cam_target``. :func:`backward` replays the
tape in reverse and also reports the gradient flowing into that activation,
which is what Grad-CAM consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ShapeError, StateError

DTYPE = np.float32


def as_tensor(values, dtype=DTYPE) -> np.ndarray:
    """Convert ``values`` to a finite array of ``dtype``.

    Raises ``ValueError`` if any entry is NaN or infinite.
    """
    arr = np.asarray(values, dtype=dtype)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigurationError(f"expected 3 extents, got {v!r}")
    return t


# --------------------------------------------------------------------------
# Layer descriptors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv3d:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)
    cam_target: bool = False
    type: str = field(default="conv3d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))


@dataclass(frozen=True)
class ReLU:
    type: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool3d:
    window: tuple[int, int, int] = (2, 2, 2)
    stride: tuple[int, int, int] = (2, 2, 2)
    type: str = field(default="maxpool3d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "window", _triple(self.window))
        object.__setattr__(self, "stride", _triple(self.stride))


@dataclass(frozen=True)
class GlobalAvgPool:
    type: str = field(default="global_avg_pool", init=False)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    type: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Sigmoid:
    type: str = field(default="sigmoid", init=False)


_LAYER_TYPES = {
    "conv3d": Conv3d,
    "relu": ReLU,
    "maxpool3d": MaxPool3d,
    "global_avg_pool": GlobalAvgPool,
    "dense": Dense,
    "sigmoid": Sigmoid,
}


def layer_from_dict(d: dict) -> Any:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in _LAYER_TYPES:
        raise ConfigurationError(f"unknown layer type {kind!r}")
    try:
        return _LAYER_TYPES[kind](**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad fields for {kind} layer: {exc}") from None


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list with exactly one ``cam_target`` convolution."""

    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        marked = [i for i, l in enumerate(self.layers) if getattr(l, "cam_target", False)]
        if len(marked) != 1:
            raise ConfigurationError(
                f"network needs exactly one cam_target layer, found {len(marked)}"
            )
        self._check_channels()

    @property
    def cam_index(self) -> int:
        return next(i for i, l in enumerate(self.layers) if getattr(l, "cam_target", False))

    @property
    def capture_index(self) -> int:
        """Layer whose output is captured: the cam_target conv, or its directly
        following ReLU so the captured maps are the rectified conv block output."""
        i = self.cam_index
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU):
            return i + 1
        return i

    @property
    def in_channels(self) -> int:
        first = self.layers[0]
        if not isinstance(first, Conv3d):
            raise ConfigurationError("first layer must be conv3d")
        return first.in_channels

    def _check_channels(self):
        channels = None
        spatial = True
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv3d):
                if not spatial:
                    raise ShapeError(f"layer {i} (conv3d) follows a flattening layer")
                if channels is not None and layer.in_channels != channels:
                    raise ShapeError(
                        f"layer {i} (conv3d) expects {layer.in_channels} channels, "
                        f"receives {channels}"
                    )
                channels = layer.out_channels
            elif isinstance(layer, MaxPool3d) and not spatial:
                raise ShapeError(f"layer {i} (maxpool3d) follows a flattening layer")
            elif isinstance(layer, GlobalAvgPool):
                spatial = False
            elif isinstance(layer, Dense):
                if spatial:
                    raise ShapeError(f"layer {i} (dense) needs a pooled input")
                if channels is not None and layer.in_features != channels:
                    raise ShapeError(
                        f"layer {i} (dense) expects {layer.in_features} features, "
                        f"receives {channels}"
                    )
                channels = layer.out_features

    def output_shapes(self, input_shape) -> list[tuple]:
        """Per-layer output shapes for an input of shape ``(C, D, H, W)``.

        Raises :class:`ShapeError` naming the first layer that cannot accept
        its input.
        """
        shape = tuple(int(s) for s in input_shape)
        if len(shape) != 4:
            raise ShapeError(f"network input must be (C, D, H, W), got {shape}")
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(i, layer, shape)
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(layer_from_dict(l) for l in d["layers"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def default_network_spec(in_channels: int = 1) -> NetworkSpec:
    return NetworkSpec((
        Conv3d(in_channels, 8, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ReLU(),
        MaxPool3d((2, 2, 2), (2, 2, 2)),
        Conv3d(8, 16, (3, 3, 3), (1, 1, 1), (1, 1, 1), cam_target=True),
        ReLU(),
        GlobalAvgPool(),
        Dense(16, 1),
    ))


def _layer_output_shape(i: int, layer, shape: tuple) -> tuple:
    name = f"layer {i} ({layer.type})"
    if isinstance(layer, Conv3d):
        if len(shape) != 4 or shape[0] != layer.in_channels:
            raise ShapeError(f"{name} expects {layer.in_channels} input channels, got shape {shape}")
        ext = []
        for n, k, s, p in zip(shape[1:], layer.kernel, layer.stride, layer.padding):
            m = (n + 2 * p - k) // s + 1
            if n + 2 * p < k:
                raise ShapeError(f"{name} kernel {layer.kernel} exceeds padded input {shape[1:]}")
            ext.append(m)
        return (layer.out_channels, *ext)
    if isinstance(layer, MaxPool3d):
        if len(shape) != 4:
            raise ShapeError(f"{name} needs a volume input, got shape {shape}")
        ext = []
        for n, w, s in zip(shape[1:], layer.window, layer.stride):
            if n < w:
                raise ShapeError(f"{name} window {layer.window} exceeds input {shape[1:]}")
            ext.append((n - w) // s + 1)
        return (shape[0], *ext)
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 4:
            raise ShapeError(f"{name} needs a volume input, got shape {shape}")
        return (shape[0],)
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeError(f"{name} expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    return shape


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def init_params(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv3d):
            k = int(np.prod(layer.kernel))
            fan_in, fan_out = layer.in_channels * k, layer.out_channels * k
            wshape = (layer.out_channels, layer.in_channels, *layer.kernel)
            nbias = layer.out_channels
        elif isinstance(layer, Dense):
            fan_in, fan_out = layer.in_features, layer.out_features
            wshape = (layer.in_features, layer.out_features)
            nbias = layer.out_features
        else:
            continue
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{i}.weight"] = rng.uniform(-limit, limit, size=wshape).astype(DTYPE)
        params[f"{i}.bias"] = np.zeros(nbias, dtype=DTYPE)
    return params


def param_names(spec: NetworkSpec) -> list[str]:
    names = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Conv3d, Dense)):
            names += [f"{i}.weight", f"{i}.bias"]
    return names


# --------------------------------------------------------------------------
# Layer kernels
# --------------------------------------------------------------------------


def _im2col(xp, kernel, stride, out_ext):
    """Patch matrix of shape (C*kd*kh*kw, N*Do*Ho*Wo) from a padded input."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_ext
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3, 4)
    cols = np.empty((c, kd, kh, kw, n, do, ho, wo), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for cc in range(kw):
                cols[:, a, b, cc] = xt[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, cc:cc + sw * wo:sw]
    return cols.reshape(c * kd * kh * kw, n * do * ho * wo)


def _out_ext(layer: Conv3d, ext):
    return tuple((e + 2 * p - k) // s + 1
                 for e, k, s, p in zip(ext, layer.kernel, layer.stride, layer.padding))


def _pad(x, pads):
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))


def _conv_forward(layer: Conv3d, w, b, x):
    if layer.stride == (1, 1, 1):
        return _conv_forward_shift(layer, w, b, x)
    n = x.shape[0]
    out_ext = _out_ext(layer, x.shape[2:])
    cols = _im2col(_pad(x, layer.padding), layer.kernel, layer.stride, out_ext)
    wmat = w.reshape(w.shape[0], -1).astype(x.dtype, copy=False)
    out = wmat @ cols + b.astype(x.dtype, copy=False)[:, None]
    out = out.reshape(-1, n, *out_ext).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out), ("cols", cols, x.shape, out_ext)


def _shift_offsets(kernel, padded):
    kd, kh, kw = kernel
    _, hp, wp = padded
    return [a * hp * wp + b * wp + c for a in range(kd) for b in range(kh) for c in range(kw)]


def _conv_forward_shift(layer: Conv3d, w, b, x):
    # Stride-1 convolution on the flattened padded batch: every kernel offset
    # is a constant shift, so patch rows are contiguous slices. Outputs are
    # computed at every padded position and the valid corner is kept.
    n, c = x.shape[:2]
    o = w.shape[0]
    xp = _pad(x, layer.padding)
    padded = xp.shape[2:]
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4)).reshape(c, -1)
    offsets = _shift_offsets(layer.kernel, padded)
    total = xt.shape[1]
    span = total - offsets[-1]
    k = len(offsets)
    cols = np.empty((c, k, span), dtype=x.dtype)
    for j, off in enumerate(offsets):
        cols[:, j] = xt[:, off:off + span]
    cols = cols.reshape(c * k, span)
    full = np.zeros((o, total), dtype=x.dtype)
    np.matmul(w.reshape(o, -1).astype(x.dtype, copy=False), cols, out=full[:, :span])
    out_ext = _out_ext(layer, x.shape[2:])
    do, ho, wo = out_ext
    out = full.reshape(o, n, *padded)[:, :, :do, :ho, :wo]
    out = out + b.astype(x.dtype, copy=False)[:, None, None, None, None]
    return (np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4)),
            ("shift", cols, x.shape, out_ext, padded, offsets))


def _conv_backward(layer: Conv3d, w, cache, gy, need_input=True):
    if cache[0] == "shift":
        return _conv_backward_shift(layer, w, cache, gy, need_input)
    _, cols, x_shape, out_ext = cache
    n, c = x_shape[:2]
    o = w.shape[0]
    gmat = gy.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    gw = (gmat @ cols.T).reshape(w.shape).astype(w.dtype)
    gb = gmat.sum(axis=1, dtype=np.float64).astype(w.dtype)
    if not need_input:
        return None, gw, gb
    ext = x_shape[2:]
    kd, kh, kw = layer.kernel
    sd, sh, sw = layer.stride
    do, ho, wo = out_ext
    pd, ph, pw = layer.padding
    gcols = (w.reshape(o, -1).T.astype(gy.dtype, copy=False) @ gmat)
    gcols = gcols.reshape(c, kd, kh, kw, n, do, ho, wo)
    gxp = np.zeros((c, n) + tuple(e + 2 * p for e, p in zip(ext, layer.padding)), dtype=gy.dtype)
    for a in range(kd):
        for b in range(kh):
            for cc in range(kw):
                gxp[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, cc:cc + sw * wo:sw] += gcols[:, a, b, cc]
    gx = gxp[:, :, pd:pd + ext[0], ph:ph + ext[1], pw:pw + ext[2]].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(gx), gw, gb


def _conv_backward_shift(layer: Conv3d, w, cache, gy, need_input):
    _, cols, x_shape, out_ext, padded, offsets = cache
    n, c = x_shape[:2]
    o = w.shape[0]
    do, ho, wo = out_ext
    span = cols.shape[1]
    gfull = np.zeros((o, n, *padded), dtype=gy.dtype)
    gfull[:, :, :do, :ho, :wo] = gy.transpose(1, 0, 2, 3, 4)
    gspan = gfull.reshape(o, -1)[:, :span]
    gw = (gspan @ cols.T).reshape(w.shape).astype(w.dtype)
    gb = gy.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(w.dtype)
    if not need_input:
        return None, gw, gb
    k = len(offsets)
    gcols = (w.reshape(o, -1).T.astype(gy.dtype, copy=False) @ gspan).reshape(c, k, span)
    gxt = np.zeros((c, gfull[0].size), dtype=gy.dtype)
    for j, off in enumerate(offsets):
        gxt[:, off:off + span] += gcols[:, j]
    pd, ph, pw = layer.padding
    d, h, wd = x_shape[2:]
    gx = gxt.reshape(c, n, *padded)[:, :, pd:pd + d, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4)), gw, gb


def _window_slices(window, stride, out_ext):
    wd, wh, ww = window
    sd, sh, sw = stride
    do, ho, wo = out_ext
    for a in range(wd):
        for b in range(wh):
            for c in range(ww):
                yield (slice(None), slice(None), slice(a, a + sd * do, sd),
                       slice(b, b + sh * ho, sh), slice(c, c + sw * wo, sw))


def _maxpool_forward(layer: MaxPool3d, x):
    out_ext = tuple((n - w) // s + 1 for n, w, s in zip(x.shape[2:], layer.window, layer.stride))
    views = [x[sl] for sl in _window_slices(layer.window, layer.stride, out_ext)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # first maximal position in window order
    arg = np.full(out.shape, len(views) - 1, dtype=np.int16)
    for j in range(len(views) - 2, -1, -1):
        arg = np.where(views[j] == out, np.int16(j), arg)
    return out, (arg, x.shape)


def _maxpool_backward(layer: MaxPool3d, cache, gy):
    arg, x_shape = cache
    gx = np.zeros(x_shape, dtype=gy.dtype)
    for j, sl in enumerate(_window_slices(layer.window, layer.stride, gy.shape[2:])):
        gx[sl] += np.where(arg == j, gy, 0)
    return gx


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _layer_forward(layer, params, i, x):
    if isinstance(layer, Conv3d):
        return _conv_forward(layer, params[f"{i}.weight"], params[f"{i}.bias"], x)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), x > 0
    if isinstance(layer, MaxPool3d):
        return _maxpool_forward(layer, x)
    if isinstance(layer, GlobalAvgPool):
        y = x.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)
        return y, x.shape
    if isinstance(layer, Dense):
        w, b = params[f"{i}.weight"], params[f"{i}.bias"]
        y = (x.astype(np.float64) @ w.astype(np.float64) + b).astype(x.dtype)
        return y, x
    if isinstance(layer, Sigmoid):
        y = _sigmoid(x)
        return y, y
    raise ConfigurationError(f"unknown layer {layer!r}")


def _layer_backward(layer, params, i, cache, gy, need_input=True):
    """Return (input gradient, {param name: gradient})."""
    if isinstance(layer, Conv3d):
        gx, gw, gb = _conv_backward(layer, params[f"{i}.weight"], cache, gy, need_input)
        return gx, {f"{i}.weight": gw, f"{i}.bias": gb}
    if isinstance(layer, ReLU):
        return gy * cache, {}
    if isinstance(layer, MaxPool3d):
        return _maxpool_backward(layer, cache, gy), {}
    if isinstance(layer, GlobalAvgPool):
        shape = cache
        scale = 1.0 / float(np.prod(shape[2:]))
        gx = np.broadcast_to((gy * scale)[:, :, None, None, None], shape).copy()
        return gx, {}
    if isinstance(layer, Dense):
        x = cache
        w = params[f"{i}.weight"]
        g64 = gy.astype(np.float64)
        gw = (x.astype(np.float64).T @ g64).astype(w.dtype)
        gb = g64.sum(axis=0).astype(w.dtype)
        gx = (g64 @ w.astype(np.float64).T).astype(gy.dtype)
        return gx, {f"{i}.weight": gw, f"{i}.bias": gb}
    if isinstance(layer, Sigmoid):
        y = cache
        return gy * y * (1 - y), {}
    raise ConfigurationError(f"unknown layer {layer!r}")


# --------------------------------------------------------------------------
# Tape and passes
# --------------------------------------------------------------------------


@dataclass
class Tape:
    """Per-pass record: layer caches plus the captured cam_target activation."""

    spec: NetworkSpec
    params: dict
    start: int
    caches: list = field(default_factory=list)
    cam_activation: np.ndarray | None = None
    output: np.ndarray | None = None
    used: bool = False


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    cam: np.ndarray | None
    input: np.ndarray | None


def forward(spec: NetworkSpec, params: dict, x, start: int = 0) -> tuple[np.ndarray, Tape]:
    """Run the network from layer ``start`` on ``x``.

    ``x`` is ``(C, D, H, W)`` or a batch ``(N, C, D, H, W)`` when ``start`` is
    0; for later starts it is whatever layer ``start`` consumes. Returns the
    batched output and the tape.
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(DTYPE)
    if start == 0:
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5:
            raise ShapeError(f"network input must be (N, C, D, H, W), got {x.shape}")
        spec.output_shapes(x.shape[1:])
    tape = Tape(spec=spec, params=params, start=start)
    cam = spec.capture_index
    for i in range(start, len(spec.layers)):
        x, cache = _layer_forward(spec.layers[i], params, i, x)
        tape.caches.append(cache)
        if i == cam:
            tape.cam_activation = x
    tape.output = x
    return x, tape


def backward(tape: Tape | None, seed, input_grad: bool = True) -> Gradients:
    """Reverse pass for ``seed * output`` (``seed`` broadcasts to the output).

    With ``input_grad=False`` the gradient with respect to the network input
    is skipped when the first layer allows it (``Gradients.input`` is None).
    """
    if tape is None or tape.output is None:
        raise StateError("backward called before forward")
    g = np.broadcast_to(np.asarray(seed, dtype=tape.output.dtype), tape.output.shape).copy()
    grads: dict[str, np.ndarray] = {}
    cam_grad = None
    spec = tape.spec
    cam = spec.capture_index
    for i in range(len(spec.layers) - 1, tape.start - 1, -1):
        if i == cam:
            cam_grad = g.copy()
        need = input_grad or i > tape.start
        g, pg = _layer_backward(spec.layers[i], tape.params, i, tape.caches[i - tape.start], g, need)
        grads.update(pg)
    tape.used = True
    return Gradients(params=grads, cam=cam_grad, input=g)


def forward_from_cam(spec: NetworkSpec, params: dict, activation) -> np.ndarray:
    """Network output given a (possibly modified) captured activation."""
    out, _ = forward(spec, params, activation, start=spec.capture_index + 1)
    return out


# --------------------------------------------------------------------------
# Upsampling
# --------------------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def trilinear_upsample(volume, target) -> np.ndarray:
    """Corner-aligned trilinear interpolation of a 3D map to ``target`` extents."""
    v = np.asarray(volume)
    if v.ndim != 3 or np.ndim(target) != 1 or len(target) != 3:
        raise ShapeError(f"upsampling needs a 3D map and 3 target extents, got {v.shape}, {target}")
    target = _triple(target)
    if any(t < s for t, s in zip(target, v.shape)):
        raise ShapeError(f"target {target} smaller than source {v.shape}")
    out = v.astype(np.float64)
    for axis, (n_in, n_out) in enumerate(zip(v.shape, target)):
        m = _interp_matrix(n_in, n_out)
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    lo, hi = v.min(), v.max()
    return np.clip(out, lo, hi).astype(v.dtype if v.dtype.kind == "f" else DTYPE)
