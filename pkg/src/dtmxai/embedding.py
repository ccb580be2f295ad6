"""Similarity embedding of explanation maps with exact t-SNE.

Features come from the trained ensemble CNNs applied to the maps: for each
member the ReLU'd cam_target activations are averaged per channel and the
member vectors are concatenated, giving ``d = L * M`` values per map.
"""

from __future__ import annotations

import base64
import csv
import html
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import engine
from .errors import ConfigurationError, DTMError, NumericError, UnsupportedVariantError

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


def _map_volume(item, depth: int) -> np.ndarray:
    from .xai import ExplanationMap3D, Projection2D

    if isinstance(item, ExplanationMap3D):
        return item.values
    if isinstance(item, Projection2D):
        return np.repeat(np.asarray(item.heat, dtype=engine.DTYPE)[..., None], depth, axis=2)
    arr = np.asarray(item, dtype=engine.DTYPE)
    if arr.ndim == 2:
        return np.repeat(arr[..., None], depth, axis=2)
    if arr.ndim != 3:
        raise DTMError(f"feature input must be a 2D projection or 3D map, got {arr.shape}")
    return arr


def extract_features(ensemble, item, depth: int = 8) -> np.ndarray:
    """Concatenated per-member channel means of ReLU'd cam_target activations.

    ``item`` is an ExplanationMap3D, a 3D array, or a 2D projection; 2D
    inputs are repeated ``depth`` times along the axial axis.
    """
    if not ensemble.variant.has_image:
        raise UnsupportedVariantError(
            f"{ensemble.variant.value} ensemble has no image network for features")
    vol = _map_volume(item, depth)[None, None]
    feats = []
    for m in ensemble.members:
        _, tape = engine.forward(m.network, m.params, vol)
        act = np.maximum(tape.cam_activation[0].astype(np.float64), 0.0)
        feats.append(act.reshape(len(act), -1).mean(axis=1))
    return np.concatenate(feats)


# --------------------------------------------------------------------------
# Affinities
# --------------------------------------------------------------------------


@dataclass
class AffinitySet:
    P: np.ndarray               # symmetric joint probabilities, zero diagonal
    sigmas: np.ndarray          # per-point Gaussian bandwidths
    perplexity: float           # target
    row_perplexity: np.ndarray  # achieved conditional perplexities

    @property
    def n(self) -> int:
        return len(self.P)


def _row_distribution(d, beta):
    """Conditional probabilities and entropy (nats) for squared distances ``d``."""
    e = np.exp(-(d - d.min()) * beta)
    s = e.sum()
    p = e / s
    entropy = np.log(s) + beta * np.sum((d - d.min()) * p)
    return p, entropy


def max_perplexity(n: int) -> float:
    return (n - 1) / 3.0


def calibrate_affinities(features, perplexity: float = 30.0, max_iter: int = 50,
                         tol: float = 1e-5) -> AffinitySet:
    """Per-point bandwidth search to the target perplexity, then symmetrization.

    Each row searches the precision ``beta = 1 / (2 sigma^2)`` by doubling or
    halving until bracketed and bisecting afterwards, stopping when the row
    entropy is within ``tol`` of ``log(perplexity)``.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise DTMError("affinities need a 2D feature matrix with at least 2 rows")
    if not np.all(np.isfinite(X)):
        raise NumericError("features contain non-finite values")
    n = len(X)
    if not 0 < perplexity < n:
        raise ConfigurationError(f"perplexity must lie in (0, {n}), got {perplexity}")
    if n < 3 * perplexity + 1:
        warnings.warn(f"perplexity {perplexity} exceeds (N-1)/3 = {max_perplexity(n):.3g}")
    D = squareform(pdist(X, "sqeuclidean"))
    off = ~np.eye(n, dtype=bool)
    if np.any(D[off] == 0):
        warnings.warn("duplicate feature vectors; adding 1e-10 to zero distances")
        D[off & (D == 0)] = 1e-10
    target = np.log(perplexity)
    cond = np.zeros((n, n))
    betas = np.empty(n)
    achieved = np.empty(n)
    for i in range(n):
        d = D[i, off[i]]
        # rounding-level differences are ties; a large beta would amplify them
        d = np.where(d - d.min() <= 1e-12 * d.max(), d.min(), d)
        beta = 1.0 / np.median(d)
        lo, hi = 0.0, np.inf
        p, H = _row_distribution(d, beta)
        for _ in range(max_iter):
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:    # too flat: raise precision
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
            p, H = _row_distribution(d, beta)
        cond[i, off[i]] = p
        betas[i] = beta
        achieved[i] = np.exp(H)
    P = (cond + cond.T) / (2.0 * n)
    return AffinitySet(P, np.sqrt(1.0 / (2.0 * betas)), float(perplexity), achieved)


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------


def _student_t(Y):
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P, Y) -> float:
    """KL(P || Q) for the student-t similarities of embedding ``Y``."""
    with np.errstate(over="ignore", invalid="ignore"):
        num = _student_t(np.asarray(Y, dtype=np.float64))
        Q = num / num.sum()
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


@dataclass
class TsneResult:
    Y: np.ndarray
    kl: np.ndarray      # KL(P || Q) after every iteration (unexaggerated P)


_MAX_BACKTRACK = 40


def tsne(affinities: AffinitySet, iterations: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, exaggeration: float = 12.0,
         exaggeration_iters: int = 250, momentum=(0.5, 0.8)) -> TsneResult:
    """Gradient descent with momentum on KL(P || Q) from a small Gaussian start.

    After the exaggeration phase a step that would raise the divergence is
    replaced by a backtracked plain gradient step, so the recorded KL never
    increases from then on.
    """
    P = affinities.P
    n = len(P)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    kl = np.empty(iterations)
    for it in range(iterations):
        early = it < exaggeration_iters
        Pe = P * exaggeration if early else P
        # divergence is reported below as a NumericError, not as float warnings
        with np.errstate(over="ignore", invalid="ignore"):
            num = _student_t(Y)
            Q = num / num.sum()
            W = (Pe - Q) * num
            grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"t-SNE gradient became non-finite at iteration {it}")
        mom = momentum[0] if early else momentum[1]
        update = mom * update - learning_rate * grad
        cand = Y + update
        cand_kl = kl_divergence(P, cand)
        if not early and it > 0 and cand_kl > kl[it - 1]:
            # safeguard: drop the velocity and backtrack a plain gradient step
            step = learning_rate
            for _ in range(_MAX_BACKTRACK):
                step /= 2
                update = -step * grad
                cand = Y + update
                cand_kl = kl_divergence(P, cand)
                if cand_kl <= kl[it - 1]:
                    break
            else:
                update = np.zeros_like(Y)
                cand, cand_kl = Y, kl[it - 1]
        Y = cand - cand.mean(axis=0)
        kl[it] = cand_kl
    return TsneResult(Y, kl)


def knn_purity(Y, labels, k: int = 10) -> float:
    """Mean share of each point's ``k`` nearest neighbours sharing its label."""
    labels = np.asarray(labels)
    D = squareform(pdist(np.asarray(Y, dtype=np.float64)))
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingPoint:
    id: str
    x: float
    y: float
    predicted: int
    true: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.true


def embedding_points(ids, Y, predicted, true) -> list[EmbeddingPoint]:
    Y = np.asarray(Y, dtype=np.float64)
    if not np.all(np.isfinite(Y)):
        raise NumericError("embedding coordinates must be finite")
    return [EmbeddingPoint(str(i), float(a), float(b), int(p), int(t))
            for i, (a, b), p, t in zip(ids, Y, predicted, true)]


_CSV_FIELDS = ["id", "x", "y", "predicted", "true", "correct"]


def write_embedding_csv(path, points: Sequence[EmbeddingPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for p in points:
            w.writerow([p.id, repr(p.x), repr(p.y), p.predicted, p.true, int(p.correct)])


def read_embedding_csv(path) -> list[EmbeddingPoint]:
    with open(path, newline="") as fh:
        return [EmbeddingPoint(r["id"], float(r["x"]), float(r["y"]), int(r["predicted"]),
                               int(r["true"])) for r in csv.DictReader(fh)]


_COLORS = {(0, True): "#1f77b4", (0, False): "#9ecae1",
           (1, True): "#d62728", (1, False): "#fc9272"}
_NAMES = {0: "favorable", 1: "unfavorable"}
_PLACEHOLDER = ("data:image/png;base64,iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAAAAAA6fptVAAAA"
                "CklEQVR4nGNgAAAAAgABSK+kcQAAAABJRU5ErkJggg==")


def _thumbnail_uri(path) -> str:
    if path is None or not Path(path).is_file():
        warnings.warn(f"thumbnail {path} missing; using placeholder")
        return _PLACEHOLDER
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return "data:image/png;base64," + data


def html_document(points: Sequence[EmbeddingPoint], thumbnails: dict | None = None,
                  title: str = "Explanation map similarity", size: int = 640) -> str:
    """Self-contained SVG scatter; hovering a marker shows the thumbnail."""
    thumbnails = thumbnails or {}
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    pad = 24

    def scale(v):
        lo, hi = v.min(), v.max()
        span = hi - lo if hi > lo else 1.0
        return pad + (v - lo) / span * (size - 2 * pad)

    px, py = scale(xs), size - scale(ys)
    marks, payload = [], []
    for p, a, b in zip(points, px, py):
        uri = _thumbnail_uri(thumbnails.get(p.id)) if thumbnails else _PLACEHOLDER
        color = _COLORS[(p.predicted, p.correct)]
        label = (f"{p.id}: predicted {_NAMES[p.predicted]}, true {_NAMES[p.true]}")
        marks.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="5" fill="{color}" '
                     f'data-id="{html.escape(p.id)}" data-thumb="{uri}">'
                     f"<title>{html.escape(label)}</title></circle>")
        payload.append({"id": p.id, "x": p.x, "y": p.y, "predicted": p.predicted,
                        "true": p.true, "correct": p.correct})
    legend = "".join(
        f'<span style="color:{c}">&#9679; {_NAMES[k]} ({"correct" if ok else "wrong"})</span> '
        for (k, ok), c in _COLORS.items())
    # "</" inside the payload would close the script element early
    data = json.dumps(payload).replace("</", "<\\/")
    return f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{html.escape(title)}</title>
<style>body{{font-family:sans-serif}} #thumb{{position:fixed;top:10px;right:10px;
width:128px;image-rendering:pixelated;border:1px solid #888}}</style></head>
<body><h3>{html.escape(title)}</h3><div>{legend}</div>
<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}"
 style="border:1px solid #ccc">{"".join(marks)}</svg>
<img id="thumb" alt="">
<script id="points" type="application/json">{data}</script>
<script>
document.querySelectorAll("circle").forEach(function(c){{
  c.addEventListener("mouseenter",function(){{
    document.getElementById("thumb").src=c.getAttribute("data-thumb");}});
}});
</script></body></html>
"""


def html_points(text: str) -> list[dict]:
    """Recover the JSON point payload embedded in an exported HTML file."""
    start = text.index('<script id="points" type="application/json">')
    start = text.index(">", start) + 1
    end = text.index("</script>", start)
    return json.loads(text[start:end])


def export_embedding(points: Sequence[EmbeddingPoint], out_dir, thumbnails: dict | None = None,
                     stem: str = "embedding") -> tuple[Path, Path]:
    if len(points) == 0:
        raise DTMError("nothing to export: no embedding points")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    html_path = out / f"{stem}.html"
    write_embedding_csv(csv_path, points)
    html_path.write_text(html_document(points, thumbnails), encoding="utf-8")
    return csv_path, html_path
