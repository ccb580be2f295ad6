"""Binary-outcome transformation models with a standard-logistic latent scale.

The transformation value ``h`` is the cutpoint of the latent logistic
distribution at the favorable outcome, so ``p0 = sigmoid(h)`` is the
probability of a favorable outcome and ``p1 = 1 - p0`` the probability of an
unfavorable one. Additive terms of ``h`` are log-odds ratios for *favorable*.

Labels are coded ``0`` (favorable) and ``1`` (unfavorable); unfavorable is the
positive class for every downstream metric.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .engine import NetworkSpec
from .errors import ModalityError, NumericError, UnsupportedVariantError, DTMError

FAVORABLE = 0
UNFAVORABLE = 1
LABEL_NAMES = ("favorable", "unfavorable")


class Variant(str, enum.Enum):
    SI = "SI"
    SI_LS = "SI-LS"
    CI = "CI"
    CI_LS = "CI-LS"

    @property
    def has_image(self) -> bool:
        return self in (Variant.CI, Variant.CI_LS)

    @property
    def has_shift(self) -> bool:
        return self in (Variant.SI_LS, Variant.CI_LS)

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        key = str(value).upper().replace("_B", "").replace("_X", "").replace("_", "-")
        try:
            return cls(key)
        except ValueError:
            raise UnsupportedVariantError(f"unknown model variant {value!r}") from None


def encode_labels(labels) -> np.ndarray:
    """Map labels given as 0/1 or "favorable"/"unfavorable" to an int array."""
    arr = np.asarray(labels)
    if arr.dtype.kind in ("U", "S", "O"):
        lookup = {name: i for i, name in enumerate(LABEL_NAMES)}
        try:
            return np.array([lookup[str(v).lower()] for v in arr], dtype=np.int64)
        except KeyError as exc:
            raise DTMError(f"unknown label {exc.args[0]!r}") from None
    arr = arr.astype(np.int64)
    if not np.isin(arr, (FAVORABLE, UNFAVORABLE)).all():
        raise DTMError("labels must be 0 (favorable) or 1 (unfavorable)")
    return arr


@dataclass
class TransformationModel:
    """One fitted dTM.

    ``intercept`` is the scalar intercept of SI/SI-LS models, ``network`` and
    ``params`` the CNN producing the image-dependent intercept of CI/CI-LS
    models, and ``beta`` the linear shift coefficients of the *-LS models.
    """

    variant: Variant
    intercept: float | None = None
    beta: np.ndarray | None = None
    network: NetworkSpec | None = None
    params: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        v = self.variant
        if v.has_image:
            if self.network is None or self.params is None:
                raise DTMError(f"{v.value} model needs an image network")
            if self.intercept is not None:
                raise DTMError(f"{v.value} model has no scalar intercept")
        else:
            if self.intercept is None:
                raise DTMError(f"{v.value} model needs a scalar intercept")
            if self.network is not None:
                raise DTMError(f"{v.value} model has no image network")
            self.intercept = float(self.intercept)
        if v.has_shift:
            if self.beta is None:
                raise DTMError(f"{v.value} model needs shift coefficients")
            self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        elif self.beta is not None:
            raise DTMError(f"{v.value} model has no shift term")

    @property
    def n_features(self) -> int:
        return 0 if self.beta is None else len(self.beta)

    def image_intercept(self, volume) -> np.ndarray:
        """CNN intercept for a volume ``(D, H, W)`` or a batch ``(N, D, H, W)``."""
        return _image_intercept(self, volume)


def _as_batch_volume(volume) -> tuple[np.ndarray, bool]:
    v = np.asarray(volume, dtype=engine.DTYPE)
    if v.ndim == 3:
        return v[None, None], True
    if v.ndim == 4:
        return v[:, None], False
    if v.ndim == 5:
        return v, False
    raise ModalityError(f"volume must be (D, H, W) or (N, D, H, W), got shape {v.shape}")


def _image_intercept(model: TransformationModel, volume, batch_size: int = 64) -> np.ndarray:
    x, _ = _as_batch_volume(volume)
    out = []
    for i in range(0, len(x), batch_size):
        y, _ = engine.forward(model.network, model.params, x[i:i + batch_size])
        out.append(y.reshape(len(y), -1)[:, 0])
    return np.concatenate(out).astype(np.float64)


def transformation_value(model: TransformationModel, volume=None, tabular=None):
    """Transformation value ``h(y0 | input)`` for one sample or a batch.

    SI gives the intercept, SI-LS adds ``x @ beta``, CI evaluates the CNN on
    the volume and CI-LS adds the shift to it. Single-sample inputs give a
    float, batched inputs an array.
    """
    v = model.variant
    if v.has_image and volume is None:
        raise ModalityError(f"{v.value} model needs an image volume")
    if v.has_shift and tabular is None:
        raise ModalityError(f"{v.value} model needs tabular features")
    batched = False
    if v.has_image:
        vol = np.asarray(volume)
        batched = vol.ndim >= 4
        h = _image_intercept(model, vol)
    else:
        h = np.array([model.intercept])
    if v.has_shift:
        t = np.asarray(tabular, dtype=np.float64)
        batched = batched or t.ndim == 2
        t = np.atleast_2d(t)
        if t.shape[1] != model.n_features:
            raise ModalityError(
                f"{v.value} model expects {model.n_features} tabular features, got {t.shape[1]}"
            )
        h = h + t @ model.beta
    return h if batched else float(h[0])


def sigmoid(h):
    """Logistic function evaluated in the overflow-free two-branch form."""
    h = np.asarray(h, dtype=np.float64)
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    e = np.exp(h[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class OutcomeDistribution:
    h: np.ndarray | float
    p0: np.ndarray | float
    p1: np.ndarray | float


def outcome_probabilities(h) -> OutcomeDistribution:
    arr = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("transformation value is not finite")
    p0 = sigmoid(arr)
    p1 = 1.0 - p0
    return OutcomeDistribution(h=h, p0=p0, p1=p1)


def nll(p0, labels) -> float:
    """Mean negative log-likelihood of labels under favorable probabilities ``p0``."""
    p0 = np.asarray(p0, dtype=np.float64).reshape(-1)
    y = encode_labels(labels).reshape(-1)
    if len(p0) == 0 or len(p0) != len(y):
        raise DTMError("nll needs equally many probabilities and labels (> 0)")
    p = np.where(y == FAVORABLE, p0, 1.0 - p0)
    return float(-np.mean(np.log(np.maximum(p, 1e-12))))


def nll_from_h(h, labels) -> float:
    """NLL computed directly from transformation values via softplus."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    y = encode_labels(labels).reshape(-1)
    # -log sigmoid(h) for favorable, -log sigmoid(-h) for unfavorable
    z = np.where(y == FAVORABLE, -h, h)
    return float(np.mean(np.logaddexp(0.0, z)))


# --------------------------------------------------------------------------
# Coefficient report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureInfo:
    """Encoded column description: categorical level vs reference, or numeric."""

    name: str
    source: str
    reference: str | None = None

    @property
    def scale(self) -> str:
        return f"vs {self.reference}" if self.reference is not None else "per 1 SD"


@dataclass
class CoefficientRow:
    feature: FeatureInfo
    beta: float
    ci_low: float
    ci_high: float

    @property
    def odds_ratio(self) -> float:
        return math.exp(self.beta)


@dataclass
class CoefficientReport:
    rows: list[CoefficientRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "beta", "odds_ratio", "ci_low", "ci_high", "scale"])
            for r in self.rows:
                w.writerow([r.feature.name, repr(r.beta), repr(r.odds_ratio),
                            repr(r.ci_low), repr(r.ci_high), r.feature.scale])

    @classmethod
    def from_csv(cls, path) -> "CoefficientReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                scale = rec["scale"]
                ref = scale[3:] if scale.startswith("vs ") else None
                rows.append(CoefficientRow(FeatureInfo(rec["feature"], rec["feature"], ref),
                                           float(rec["beta"]), float(rec["ci_low"]),
                                           float(rec["ci_high"])))
        return cls(rows)


def coefficient_report(features: Sequence[FeatureInfo | str], estimates, point=None,
                       level: float = 0.95, resample_mean: bool = False,
                       n_boot: int = 2000, seed: int = 0) -> CoefficientReport:
    """Log-odds ratios with percentile confidence intervals.

    ``estimates`` is an ``(R, p)`` array of coefficient replicates. With
    ``resample_mean=False`` the replicates are treated as bootstrap refits and
    the interval is their percentile range. With ``resample_mean=True`` (fold
    or member estimates) the replicates are themselves bootstrapped and the
    interval describes their mean. The point estimate defaults to the
    replicate mean.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    if est.size == 0:
        raise UnsupportedVariantError("coefficient report needs a model with a shift term")
    feats = [f if isinstance(f, FeatureInfo) else FeatureInfo(f, f) for f in features]
    if est.shape[1] != len(feats):
        raise DTMError(f"{len(feats)} feature names for {est.shape[1]} coefficients")
    centre = est.mean(axis=0) if point is None else np.asarray(point, dtype=np.float64)
    reps = est
    if resample_mean:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(est), size=(n_boot, len(est)))
        reps = est[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo = np.quantile(reps, alpha, axis=0)
    hi = np.quantile(reps, 1.0 - alpha, axis=0)
    rows = [CoefficientRow(f, float(b), float(a), float(c))
            for f, b, a, c in zip(feats, centre, lo, hi)]
    return CoefficientReport(rows)


def model_coefficients(model: TransformationModel) -> np.ndarray:
    if not model.variant.has_shift:
        raise UnsupportedVariantError(f"{model.variant.value} model has no shift coefficients")
    return model.beta.copy()
