"""Explanation maps for image-based transformation models.

Both methods explain the probability of the predicted class ``k``:
``p0 = sigmoid(h)`` for favorable and ``p1 = 1 - sigmoid(h)`` for unfavorable.

Grad-CAM differentiates ``p_k`` with respect to the cam_target activation.
Because the tabular shift does not depend on the image, the chain rule gives
``dp_k/dA = s_k * sigmoid(h) * (1 - sigmoid(h)) * d(image intercept)/dA`` with
``s_k = +1`` (favorable) or ``-1`` (unfavorable). Occlusion measures how much
``p_k`` drops when a window of the volume is replaced by a fill value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .dtm import FAVORABLE, UNFAVORABLE, LABEL_NAMES, TransformationModel, sigmoid
from .errors import ConfigurationError, DTMError, ShapeError, UnsupportedVariantError

log = logging.getLogger(__name__)


@dataclass
class ExplanationMap3D:
    values: np.ndarray
    method: str
    predicted_class: int
    weights: np.ndarray | None = None
    model_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ShapeError(f"explanation map must be 3D, got {self.values.shape}")
        if self.values.size and self.values.min() < 0:
            raise DTMError("explanation maps are nonnegative")


@dataclass
class ChannelImportance:
    alpha: np.ndarray
    voxels_per_channel: int


@dataclass(frozen=True)
class OcclusionConfig:
    window: tuple = (18, 18, 4)
    stride: tuple = (10, 10, 3)
    fill: float = 0.0

    def __post_init__(self):
        w = tuple(int(v) for v in self.window)
        s = tuple(int(v) for v in self.stride)
        if len(w) != 3 or len(s) != 3 or min(w) < 1:
            raise ConfigurationError("occlusion window and stride need 3 positive extents")
        if min(s) < 1:
            raise ConfigurationError("occlusion stride must be at least 1 per axis")
        if any(st > wi for st, wi in zip(s, w)):
            # a stride beyond the window would leave voxels that no window covers
            raise ConfigurationError(f"occlusion stride {s} exceeds window {w}")
        object.__setattr__(self, "window", w)
        object.__setattr__(self, "stride", s)

    def to_dict(self) -> dict:
        return {"window": list(self.window), "stride": list(self.stride), "fill": self.fill}


@dataclass
class Projection2D:
    heat: np.ndarray
    base: np.ndarray


def _check_class(k) -> int:
    if isinstance(k, str):
        k = LABEL_NAMES.index(k.lower())
    if k not in (FAVORABLE, UNFAVORABLE):
        raise DTMError(f"predicted class must be favorable or unfavorable, got {k!r}")
    return int(k)


def _require_image(model: TransformationModel):
    if not model.variant.has_image:
        raise UnsupportedVariantError(
            f"{model.variant.value} model has no image network to explain"
        )


def _shift(model: TransformationModel, tabular) -> float:
    if not model.variant.has_shift:
        return 0.0
    if tabular is None:
        raise DTMError(f"{model.variant.value} model needs tabular features")
    return float(np.asarray(tabular, dtype=np.float64).reshape(-1) @ model.beta)


def class_sign(k: int) -> float:
    return 1.0 if k == FAVORABLE else -1.0


# --------------------------------------------------------------------------
# Grad-CAM
# --------------------------------------------------------------------------


@dataclass
class GradCamTrace:
    """Intermediate quantities of one Grad-CAM evaluation."""

    h: float
    activation: np.ndarray      # (L, q, r, s) cam_target activation
    intercept_grad: np.ndarray  # d(image intercept)/dA
    prob_grad: np.ndarray       # dp_k/dA
    importance: ChannelImportance
    raw: np.ndarray             # ReLU(sum_l alpha_l A^l) at activation resolution


def gradcam_trace(model: TransformationModel, volume, tabular=None, k=UNFAVORABLE) -> GradCamTrace:
    _require_image(model)
    k = _check_class(k)
    vol = np.asarray(volume, dtype=engine.DTYPE)
    if vol.ndim != 3:
        raise ShapeError(f"Grad-CAM explains one (D, H, W) volume, got {vol.shape}")
    out, tape = engine.forward(model.network, model.params, vol[None, None])
    intercept = float(out.reshape(-1)[0])
    grads = engine.backward(tape, np.ones_like(out), input_grad=False)
    A = tape.cam_activation[0].astype(np.float64)
    dA = grads.cam[0].astype(np.float64)
    h = intercept + _shift(model, tabular)
    s = sigmoid(h)
    dp = class_sign(k) * s * (1.0 - s) * dA
    alpha = dp.reshape(len(dp), -1).mean(axis=1)
    raw = np.maximum(np.tensordot(alpha, A, axes=(0, 0)), 0.0)
    return GradCamTrace(h, A, dA, dp, ChannelImportance(alpha, int(np.prod(A.shape[1:]))), raw)


def gradcam(model: TransformationModel, volume, tabular=None, k=UNFAVORABLE,
            model_id: str = "") -> ExplanationMap3D:
    """Grad-CAM map for predicted class ``k``, upsampled to the volume extents."""
    trace = gradcam_trace(model, volume, tabular, k)
    target = np.asarray(volume).shape
    values = engine.trilinear_upsample(trace.raw, target)
    return ExplanationMap3D(np.maximum(values, 0), "gradcam", _check_class(k), model_id=model_id)


def probability_from_activation(model: TransformationModel, activation, tabular=None,
                                k=UNFAVORABLE) -> float:
    """``p_k`` recomputed from a (possibly perturbed) cam_target activation."""
    out = engine.forward_from_cam(model.network, model.params,
                                  np.asarray(activation)[None])
    h = float(out.reshape(-1)[0]) + _shift(model, tabular)
    p0 = sigmoid(h)
    return p0 if _check_class(k) == FAVORABLE else 1.0 - p0


# --------------------------------------------------------------------------
# Occlusion
# --------------------------------------------------------------------------


def _axis_origins(n: int, w: int, s: int) -> list[int]:
    origins = list(range(0, n - w + 1, s))
    if origins[-1] + w < n:
        origins.append(n - w)
    return origins


def occlusion_windows(extents, config: OcclusionConfig) -> list[tuple[int, int, int]]:
    """Window origins on the stride grid plus one border-clamped origin per axis."""
    ext = tuple(int(e) for e in extents)
    if any(w > e for w, e in zip(config.window, ext)):
        raise ConfigurationError(f"occlusion window {config.window} exceeds volume {ext}")
    axes = [_axis_origins(e, w, s) for e, w, s in zip(ext, config.window, config.stride)]
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def coverage_counts(extents, config: OcclusionConfig) -> np.ndarray:
    counts = np.zeros(tuple(extents), dtype=np.int32)
    wd, wh, ww = config.window
    for a, b, c in occlusion_windows(extents, config):
        counts[a:a + wd, b:b + wh, c:c + ww] += 1
    return counts


def occlusion(model: TransformationModel, volume, tabular=None,
              config: OcclusionConfig | None = None, k=UNFAVORABLE,
              batch_size: int = 32, model_id: str = "") -> ExplanationMap3D:
    """Mean drop of ``p_k`` over all windows covering each voxel, negatives zeroed."""
    _require_image(model)
    k = _check_class(k)
    config = config or OcclusionConfig()
    vol = np.asarray(volume, dtype=engine.DTYPE)
    origins = occlusion_windows(vol.shape, config)
    log.info("occlusion: %d windows per patient", len(origins))
    shift = _shift(model, tabular)
    sign = class_sign(k)

    def p_k(batch):
        out, _ = engine.forward(model.network, model.params, batch[:, None])
        p0 = sigmoid(out[:, 0].astype(np.float64) + shift)
        return p0 if sign > 0 else 1.0 - p0

    base = float(p_k(vol[None])[0])
    total = np.zeros(vol.shape, dtype=np.float64)
    counts = np.zeros(vol.shape, dtype=np.int32)
    wd, wh, ww = config.window
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        batch = np.repeat(vol[None], len(chunk), axis=0)
        for j, (a, b, c) in enumerate(chunk):
            batch[j, a:a + wd, b:b + wh, c:c + ww] = config.fill
        drops = base - p_k(batch)
        for (a, b, c), d in zip(chunk, drops):
            total[a:a + wd, b:b + wh, c:c + ww] += d
            counts[a:a + wd, b:b + wh, c:c + ww] += 1
    mean = total / counts
    return ExplanationMap3D(np.maximum(mean, 0.0), "occlusion", k, model_id=model_id)


# --------------------------------------------------------------------------
# Aggregation and projection
# --------------------------------------------------------------------------


def ensemble_map(maps: Sequence[ExplanationMap3D], weights) -> ExplanationMap3D:
    """Voxelwise weighted sum of member maps using the ensemble weights."""
    w = np.asarray(weights, dtype=np.float64)
    if len(maps) == 0 or len(maps) != len(w):
        raise DTMError("need one map per ensemble weight")
    first = maps[0]
    for m in maps[1:]:
        if m.values.shape != first.values.shape:
            raise ShapeError("ensemble maps differ in extents")
        if m.method != first.method or m.predicted_class != first.predicted_class:
            raise DTMError("ensemble maps differ in method or predicted class")
    acc = np.zeros(first.values.shape, dtype=np.float64)
    for wm, m in zip(w, maps):
        acc += wm * m.values
    return ExplanationMap3D(np.maximum(acc, 0.0), first.method, first.predicted_class,
                            weights=w, model_id=first.model_id)


def explain_ensemble(ensemble, volume, tabular=None, k=UNFAVORABLE, method: str = "gradcam",
                     config: OcclusionConfig | None = None) -> ExplanationMap3D:
    maps = []
    for m in ensemble.members:
        if method == "gradcam":
            maps.append(gradcam(m, volume, tabular, k))
        elif method == "occlusion":
            maps.append(occlusion(m, volume, tabular, config, k))
        else:
            raise ConfigurationError(f"unknown explanation method {method!r}")
    return ensemble_map(maps, ensemble.weights)


def axial_projection(emap, volume) -> Projection2D:
    """Max-normalize the map and average map and volume over the axial (last) axis."""
    values = emap.values if isinstance(emap, ExplanationMap3D) else np.asarray(emap)
    vol = np.asarray(volume, dtype=np.float64)
    if values.shape != vol.shape:
        raise ShapeError(f"map {values.shape} and volume {vol.shape} differ in extents")
    top = float(values.max()) if values.size else 0.0
    norm = values / top if top > 0 else np.zeros_like(values, dtype=np.float64)
    return Projection2D(heat=norm.mean(axis=2), base=vol.mean(axis=2))


def class_average_map(projections: Sequence[Projection2D]) -> Projection2D:
    if len(projections) == 0:
        raise DTMError("cannot average an empty group of projections")
    heat = np.mean([p.heat for p in projections], axis=0)
    base = np.mean([p.base for p in projections], axis=0)
    return Projection2D(heat, base)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def color_ramp() -> np.ndarray:
    """Fixed 256-entry black-red-yellow-white ramp as uint8 RGB."""
    t = np.linspace(0.0, 1.0, 256)
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return (np.stack([r, g, b], axis=1) * 255).round().astype(np.uint8)


def overlay_rgb(proj: Projection2D, alpha: float = 0.5) -> np.ndarray:
    """Grayscale base blended with the color-mapped heat, as uint8 ``(H, W, 3)``."""
    base = proj.base
    lo, hi = base.min(), base.max()
    gray = (base - lo) / (hi - lo) if hi > lo else np.zeros_like(base)
    heat = np.clip(proj.heat, 0.0, 1.0)
    idx = np.round(heat * 255).astype(int)
    colored = color_ramp()[idx].astype(np.float64) / 255.0
    rgb = (1 - alpha * heat[..., None]) * gray[..., None] + alpha * heat[..., None] * colored
    return (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)


def save_projection_png(path, proj: Projection2D) -> None:
    from PIL import Image

    Image.fromarray(overlay_rgb(proj)).save(path, format="PNG", optimize=False)


def save_heat_pgm(path, proj: Projection2D) -> None:
    """Heat channel as a binary portable graymap (P5, 8 bit)."""
    img = (np.clip(proj.heat, 0, 1) * 255).round().astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
