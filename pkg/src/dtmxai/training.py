"""Fitting single transformation models and weighted deep ensembles."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import engine
from .dtm import (FAVORABLE, TransformationModel, Variant, encode_labels, nll_from_h,
                  sigmoid, transformation_value)
from .engine import NetworkSpec
from .errors import (ConfigurationError, DegenerateDataError, DTMError, FormatError,
                     UnsupportedVariantError)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 150
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.2
    lbfgs_max_iter: int = 2000
    prior_bias: bool = True

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs, self.patience, self.eps) <= 0:
            raise ConfigurationError("training hyperparameters must be positive")
        if not 0 < self.val_fraction <= 0.5:
            raise ConfigurationError("val_fraction must lie in (0, 0.5]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("moment decays must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Split:
    """Aligned labels with optional volumes ``(N, D, H, W)`` and encoded tabular rows."""

    labels: np.ndarray
    volumes: np.ndarray | None = None
    tabular: np.ndarray | None = None

    def __post_init__(self):
        self.labels = encode_labels(self.labels)
        if self.tabular is not None:
            self.tabular = np.atleast_2d(np.asarray(self.tabular, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Split":
        index = np.asarray(index)
        return Split(self.labels[index],
                     None if self.volumes is None else self.volumes[index],
                     None if self.tabular is None else self.tabular[index])


def stratified_holdout(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (train, validation) with per-class rounding of ``fraction``."""
    y = encode_labels(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        k = min(max(k, 1 if len(idx) > 1 else 0), len(idx) - 1)
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def member_h(model: TransformationModel, split: Split) -> np.ndarray:
    h = transformation_value(model, split.volumes, split.tabular)
    return np.broadcast_to(np.asarray(h, dtype=np.float64), (len(split),)).copy()


def _check_inputs(variant: Variant, split: Split):
    if variant.has_image and split.volumes is None:
        raise DTMError(f"{variant.value} training needs volumes")
    if variant.has_shift and split.tabular is None:
        raise DTMError(f"{variant.value} training needs tabular features")


# --------------------------------------------------------------------------
# Image-free variants: convex, fitted to convergence in one batch
# --------------------------------------------------------------------------


def _fit_linear(variant: Variant, split: Split, config: TrainConfig, history: dict | None):
    y = split.labels
    fav = (y == FAVORABLE).astype(np.float64)
    x = split.tabular if variant.has_shift else np.zeros((len(y), 0))
    design = np.hstack([np.ones((len(y), 1)), x])

    def objective(theta):
        h = design @ theta
        loss = np.mean(np.logaddexp(0.0, np.where(fav > 0, -h, h)))
        grad = design.T @ (sigmoid(h) - fav) / len(y)
        return loss, grad

    theta0 = np.zeros(design.shape[1])
    start = objective(theta0)[0]
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": config.lbfgs_max_iter, "gtol": 1e-12, "ftol": 1e-15})
    if history is not None:
        history["train_nll"] = [float(start), float(res.fun)]
        history["iterations"] = int(res.nit)
    beta = res.x[1:] if variant.has_shift else None
    return TransformationModel(variant, intercept=float(res.x[0]), beta=beta)


# --------------------------------------------------------------------------
# Image variants: minibatch adaptive-moment descent with early stopping
# --------------------------------------------------------------------------


class _Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            params[k] = params[k] - update.astype(params[k].dtype)


def _image_h(net, params, beta, volumes, tabular, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(volumes), batch):
        y, _ = engine.forward(net, params, volumes[i:i + batch, None])
        out.append(y[:, 0].astype(np.float64))
    h = np.concatenate(out)
    if beta is not None:
        h = h + tabular @ beta
    return h


def _set_prior_bias(net: NetworkSpec, params: dict, labels) -> None:
    """Start the output bias at the training log-odds of a favorable outcome."""
    last = len(net.layers) - 1
    if not isinstance(net.layers[last], engine.Dense):
        return
    prior = float(np.clip(np.mean(labels == FAVORABLE), 1e-3, 1 - 1e-3))
    key = f"{last}.bias"
    params[key] = np.full_like(params[key], np.log(prior) - np.log1p(-prior))


def _fit_image(variant: Variant, split: Split, config: TrainConfig, network: NetworkSpec,
               val: Split | None, history: dict | None):
    net = network or engine.default_network_spec()
    params = engine.init_params(net, config.seed)
    if config.prior_bias:
        _set_prior_bias(net, params, split.labels)
    beta = np.zeros(split.tabular.shape[1]) if variant.has_shift else None
    state = dict(params)
    if beta is not None:
        state["beta"] = beta
    opt = _Adam(state, config)
    rng = np.random.default_rng([config.seed, 1])
    y = split.labels
    fav = (y == FAVORABLE).astype(np.float64)
    vols = np.asarray(split.volumes, dtype=engine.DTYPE)
    tab = split.tabular

    def current(state):
        p = {k: v for k, v in state.items() if k != "beta"}
        return p, state.get("beta")

    def train_nll(state):
        p, b = current(state)
        return nll_from_h(_image_h(net, p, b, vols, tab), y)

    def val_nll(state):
        p, b = current(state)
        return nll_from_h(_image_h(net, p, b, val.volumes, val.tabular), val.labels)

    hist = {"train_nll": [train_nll(state)], "val_nll": []}
    best = (val_nll(state) if val is not None else np.inf, 0, {k: v.copy() for k, v in state.items()})
    if val is not None:
        hist["val_nll"].append(best[0])
    n = len(y)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            p, b = current(state)
            out, tape = engine.forward(net, p, vols[idx, None])
            h = out[:, 0].astype(np.float64)
            if b is not None:
                h = h + tab[idx] @ b
            dh = (sigmoid(h) - fav[idx]) / len(idx)
            grads = engine.backward(tape, dh[:, None].astype(out.dtype), input_grad=False).params
            if b is not None:
                grads["beta"] = tab[idx].T @ dh
            opt.step(state, grads)
        if val is not None:
            v = val_nll(state)
            hist["val_nll"].append(v)
            if v < best[0] - 1e-12:
                best = (v, epoch, {k: a.copy() for k, a in state.items()})
            elif epoch - best[1] >= config.patience:
                break
    if val is not None:
        state = best[2]
        hist["best_epoch"] = best[1]
    else:
        hist["best_epoch"] = epoch
    hist["epochs_run"] = epoch
    hist["train_nll"].append(train_nll(state))
    if history is not None:
        history.update(hist)
    p, b = current(state)
    return TransformationModel(variant, beta=b, network=net, params=p)


def train_member(variant, train: Split, config: TrainConfig | None = None,
                 network: NetworkSpec | None = None, val: Split | None = None,
                 history: dict | None = None) -> TransformationModel:
    """Fit one model by NLL minimization.

    Image models use minibatch adaptive-moment descent seeded by
    ``config.seed`` and, when ``val`` is given, early stopping on its NLL
    with the best epoch restored. Image-free models are convex and are fitted
    to convergence with full-batch L-BFGS. ``history`` (if given) receives
    per-epoch NLL traces.
    """
    variant = Variant.parse(variant)
    config = config or TrainConfig()
    if len(train) == 0 or len(np.unique(train.labels)) < 2:
        raise DegenerateDataError("training split needs both outcome classes")
    _check_inputs(variant, train)
    if variant.has_image:
        if val is not None:
            _check_inputs(variant, val)
        return _fit_image(variant, train, config, network, val, history)
    return _fit_linear(variant, train, config, history)


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------


@dataclass
class EnsembleModel:
    members: list[TransformationModel]
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.members) == 0 or len(self.weights) != len(self.members):
            raise DTMError("ensemble needs one weight per member")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DTMError("ensemble weights must lie on the probability simplex")
        variants = {m.variant for m in self.members}
        if len(variants) != 1:
            raise DTMError("ensemble members must share a variant")
        if len({m.n_features for m in self.members}) != 1:
            raise DTMError("ensemble members must share the tabular encoding")

    @property
    def variant(self) -> Variant:
        return self.members[0].variant

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def network(self) -> NetworkSpec | None:
        return self.members[0].network


def member_transformations(ensemble: EnsembleModel, volume=None, tabular=None) -> np.ndarray:
    """Matrix of member transformation values, one row per member."""
    return np.stack([np.atleast_1d(np.asarray(transformation_value(m, volume, tabular),
                                              dtype=np.float64))
                     for m in ensemble.members])


def ensemble_transformation(ensemble: EnsembleModel, volume=None, tabular=None):
    """Weighted transformation value ``sum_m w_m h_m``."""
    hs = [transformation_value(m, volume, tabular) for m in ensemble.members]
    if all(isinstance(h, float) for h in hs):
        return float(sum(w * h for w, h in zip(ensemble.weights, hs)))
    return ensemble.weights @ np.stack([np.broadcast_to(h, np.shape(hs[-1])) for h in hs])


def _weights_nll(logits, hmat, fav):
    w = np.exp(logits - logits.max())
    w /= w.sum()
    h = w @ hmat
    loss = np.mean(np.logaddexp(0.0, np.where(fav > 0, -h, h)))
    g_h = (sigmoid(h) - fav) / len(fav)
    g_w = hmat @ g_h
    g_logits = w * (g_w - w @ g_w)
    return loss, g_logits


def tune_weights(hmat, labels) -> np.ndarray:
    """Simplex weights minimizing the NLL of ``w @ hmat`` against ``labels``.

    The weights are a softmax of free logits optimized from the uniform start,
    so identical members keep uniform weights. The result never scores worse
    than the best single member.
    """
    hmat = np.atleast_2d(np.asarray(hmat, dtype=np.float64))
    y = encode_labels(labels)
    if hmat.shape[1] == 0 or len(y) == 0:
        raise DTMError("weight tuning needs a nonempty validation split")
    m = hmat.shape[0]
    if m == 1:
        return np.ones(1)
    fav = (y == FAVORABLE).astype(np.float64)
    res = minimize(_weights_nll, np.zeros(m), args=(hmat, fav), jac=True, method="L-BFGS-B",
                   options={"maxiter": 500, "gtol": 1e-12, "ftol": 1e-15})
    w = np.exp(res.x - res.x.max())
    w /= w.sum()
    best_loss = nll_from_h(w @ hmat, y)
    for k in range(m):
        vertex_loss = nll_from_h(hmat[k], y)
        if vertex_loss < best_loss:
            w = np.eye(m)[k]
            best_loss = vertex_loss
    return w / w.sum()


def optimize_ensemble_weights(members: Sequence[TransformationModel], val: Split) -> np.ndarray:
    if len(val) == 0:
        raise DTMError("validation split is empty")
    hmat = np.stack([member_h(m, val) for m in members])
    return tune_weights(hmat, val.labels)


def fit_ensemble(variant, train: Split, val: Split, M: int, seeds: Sequence[int],
                 config: TrainConfig | None = None, network: NetworkSpec | None = None,
                 histories: list | None = None) -> EnsembleModel:
    """Train ``M`` members from distinct seeds and tune their weights on ``val``."""
    variant = Variant.parse(variant)
    config = config or TrainConfig()
    seeds = [int(s) for s in seeds]
    if M < 1 or len(seeds) != M:
        raise ConfigurationError(f"need exactly M={M} seeds, got {len(seeds)}")
    if len(set(seeds)) != M:
        raise ConfigurationError("ensemble seeds must be distinct")
    members = []
    for s in seeds:
        cfg = TrainConfig(**{**config.to_dict(), "seed": s})
        hist = {}
        members.append(train_member(variant, train, cfg, network, val, hist))
        if histories is not None:
            histories.append(hist)
        log.debug("member seed %d trained: %s", s, {k: v for k, v in hist.items() if "nll" not in k})
    weights = tune_weights(np.stack([member_h(m, val) for m in members]), val.labels)
    return EnsembleModel(members, weights)


def ensemble_coefficients(ensemble: EnsembleModel) -> tuple[float | None, np.ndarray]:
    """Weighted intercept (SI-LS only, else None) and weighted shift coefficients."""
    if not ensemble.variant.has_shift:
        raise UnsupportedVariantError(f"{ensemble.variant.value} model has no shift coefficients")
    w = ensemble.weights
    beta = w @ np.stack([m.beta for m in ensemble.members])
    intercept = None
    if not ensemble.variant.has_image:
        intercept = float(w @ np.array([m.intercept for m in ensemble.members]))
    return intercept, beta


def bootstrap_coefficients(variant, split: Split, B: int = 200, seed: int = 0,
                           config: TrainConfig | None = None) -> np.ndarray:
    """Shift coefficients refitted on ``B`` seeded resamples, shape ``(B, p)``.

    Image-free shift models only; resamples with a single class are redrawn.
    """
    variant = Variant.parse(variant)
    if not variant.has_shift or variant.has_image:
        raise UnsupportedVariantError("bootstrap refits need an image-free shift model (SI-LS)")
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    n = len(split)
    out = []
    while len(out) < B:
        idx = rng.integers(0, n, size=n)
        if len(np.unique(split.labels[idx])) < 2:
            continue
        out.append(_fit_linear(variant, split.subset(idx), config, None).beta)
    return np.stack(out)


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------

MODEL_MAGIC = b"DTM1"
_VARIANT_CODES = {Variant.SI: 0, Variant.SI_LS: 1, Variant.CI: 2, Variant.CI_LS: 3}


def ensemble_bytes(ensemble: EnsembleModel) -> bytes:
    """Serialize: magic, variant, M, weights, network JSON, members, metadata JSON."""
    v = ensemble.variant
    parts = [MODEL_MAGIC, struct.pack("<BBI", 1, _VARIANT_CODES[v], ensemble.M),
             ensemble.weights.astype("<f8").tobytes()]
    net = ensemble.network.to_json().encode() if v.has_image else b""
    parts += [struct.pack("<I", len(net)), net,
              struct.pack("<I", ensemble.members[0].n_features)]
    for m in ensemble.members:
        if not v.has_image:
            parts.append(struct.pack("<d", m.intercept))
        if v.has_shift:
            parts.append(m.beta.astype("<f8").tobytes())
        if v.has_image:
            for name in engine.param_names(m.network):
                arr = np.ascontiguousarray(m.params[name], dtype="<f4")
                parts += [struct.pack("<I", arr.size), arr.tobytes()]
    meta = json.dumps(ensemble.meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts)


def save_ensemble(path, ensemble: EnsembleModel) -> None:
    Path(path).write_bytes(ensemble_bytes(ensemble))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated model file", len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_ensemble(buf: bytes) -> EnsembleModel:
    r = _Reader(buf)
    if r.take(4) != MODEL_MAGIC:
        raise FormatError("bad model magic", 0)
    version, code, M = r.unpack("<BBI")
    if version != 1:
        raise FormatError(f"unsupported model version {version}", 4)
    variant = {c: v for v, c in _VARIANT_CODES.items()}.get(code)
    if variant is None:
        raise FormatError(f"unknown variant code {code}", 5)
    weights = np.frombuffer(r.take(8 * M), dtype="<f8").astype(np.float64)
    (nlen,) = r.unpack("<I")
    net = NetworkSpec.from_dict(json.loads(r.take(nlen))) if nlen else None
    (p,) = r.unpack("<I")
    members = []
    for _ in range(M):
        intercept = beta = params = None
        if not variant.has_image:
            (intercept,) = r.unpack("<d")
        if variant.has_shift:
            beta = np.frombuffer(r.take(8 * p), dtype="<f8").astype(np.float64)
        if variant.has_image:
            params = {}
            template = engine.init_params(net, 0)
            for name in engine.param_names(net):
                (count,) = r.unpack("<I")
                if count != template[name].size:
                    raise FormatError(f"parameter {name} has {count} values", r.pos - 4)
                arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
                params[name] = arr.reshape(template[name].shape)
        members.append(TransformationModel(variant, intercept=intercept, beta=beta,
                                           network=net, params=params))
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen)) if mlen else {}
    if r.pos != len(buf):
        raise FormatError("trailing bytes after model payload", r.pos)
    return EnsembleModel(members, weights, meta)


def load_ensemble(path) -> EnsembleModel:
    return parse_ensemble(Path(path).read_bytes())
