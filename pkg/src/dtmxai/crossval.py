"""Stratified k-fold cross-validation of ensembles with pooled test metrics."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LabeledDataset, TabularEncoder
from .dtm import CoefficientReport, Variant, coefficient_report, sigmoid
from .engine import NetworkSpec
from .evaluation import (FoldAssignment, MetricsTable, ThresholdRule, auc, confusion_metrics,
                         nll_p1, pooled_metrics, select_threshold, stratified_kfold)
from .errors import ConfigurationError, DataError, UndefinedMetricError
from .training import (EnsembleModel, Split, TrainConfig, ensemble_coefficients,
                       fit_ensemble, member_h, stratified_holdout)

log = logging.getLogger(__name__)


@dataclass
class CrossvalConfig:
    k: int = 10
    M: int = 5
    M_image_free: int = 1
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    fold_seed: int = 0
    bootstrap: int = 2000
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkSpec | None = None

    def members(self, variant: Variant) -> int:
        return self.M if variant.has_image else self.M_image_free

    def member_seeds(self, variant: Variant) -> list[int]:
        m = self.members(variant)
        if len(self.seeds) < m:
            raise ConfigurationError(f"need at least {m} seeds, got {len(self.seeds)}")
        return [int(s) for s in self.seeds[:m]]


@dataclass
class FoldResult:
    variant: Variant
    fold: int
    test_index: np.ndarray
    h: np.ndarray
    rule: ThresholdRule
    ensemble: EnsembleModel
    encoder: TabularEncoder | None

    @property
    def p1(self) -> np.ndarray:
        return 1.0 - sigmoid(self.h)


@dataclass
class VariantResult:
    variant: Variant
    folds: list[FoldResult]
    ids: list[str]
    labels: np.ndarray

    def pooled(self):
        """Pooled (index, fold, p1, threshold, predicted) arrays in dataset order."""
        n = len(self.labels)
        p1 = np.full(n, np.nan)
        fold = np.full(n, -1)
        thr = np.full(n, np.nan)
        for f in self.folds:
            p1[f.test_index] = f.p1
            fold[f.test_index] = f.fold
            thr[f.test_index] = f.rule.threshold
        if np.isnan(p1).any():
            raise DataError("pooled predictions do not cover every sample")
        pred = (p1 > thr).astype(np.int64)
        return fold, p1, thr, pred


@dataclass
class CrossvalResult:
    assignment: FoldAssignment
    variants: dict[str, VariantResult]
    table: MetricsTable
    coefficients: dict[str, CoefficientReport]

    def write_fold_metrics(self, path) -> None:
        """Per-fold diagnostics; AUC is empty when a test fold has one class."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "fold", "n", "threshold", "nll", "auc", "specificity",
                        "sensitivity", "accuracy", "f1"])
            for name, res in self.variants.items():
                for f in res.folds:
                    y = res.labels[f.test_index]
                    p1 = f.p1
                    m = confusion_metrics(f.rule.apply(p1), y)
                    try:
                        a = repr(auc(p1, y))
                    except UndefinedMetricError:
                        a = ""
                    w.writerow([name, f.fold, len(y), repr(f.rule.threshold), repr(nll_p1(p1, y)),
                                a] + [repr(m[k]) for k in ("specificity", "sensitivity",
                                                           "accuracy", "f1")])

    def write_predictions(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "id", "fold", "p1", "threshold", "predicted", "true"])
            for name, res in self.variants.items():
                fold, p1, thr, pred = res.pooled()
                for i, pid in enumerate(res.ids):
                    w.writerow([name, pid, int(fold[i]), repr(float(p1[i])), repr(float(thr[i])),
                                int(pred[i]), int(res.labels[i])])


def _split(ds: LabeledDataset, index, variant: Variant, encoder: TabularEncoder | None) -> Split:
    sub = ds.subset(index)
    vols = sub.volumes if variant.has_image else None
    tab = encoder.transform(sub.records) if variant.has_shift else None
    return Split(sub.labels, vols, tab)


def run_fold(ds: LabeledDataset, variant, assignment: FoldAssignment, fold: int,
             config: CrossvalConfig) -> FoldResult:
    """Fit one fold: inner holdout, ensemble, validation threshold, test predictions."""
    variant = Variant.parse(variant)
    train_idx = assignment.train_index(fold)
    test_idx = assignment.test_index(fold)
    if variant.has_image and ds.volumes is None:
        raise DataError(f"{variant.value} needs volumes but the dataset has none")
    encoder = None
    if variant.has_shift:
        if ds.records is None:
            raise DataError(f"{variant.value} needs tabular records but the dataset has none")
        encoder = TabularEncoder.fit([ds.records[i] for i in train_idx], ds.schema)
    inner_seed = config.fold_seed * 1000 + fold
    itr, iva = stratified_holdout(ds.labels[train_idx], config.train.val_fraction, inner_seed)
    train = _split(ds, train_idx[itr], variant, encoder)
    val = _split(ds, train_idx[iva], variant, encoder)
    test = _split(ds, test_idx, variant, encoder)
    ens = fit_ensemble(variant, train, val, config.members(variant), config.member_seeds(variant),
                       config.train, config.network)

    def ens_h(split):
        return ens.weights @ np.stack([member_h(m, split) for m in ens.members])

    rule = select_threshold(1.0 - sigmoid(ens_h(val)), val.labels, source_fold=fold)
    log.info("%s fold %d: threshold %.4f", variant.value, fold, rule.threshold)
    return FoldResult(variant, fold, test_idx, ens_h(test), rule, ens, encoder)


def _run_task(args):
    return run_fold(*args)


def crossval_report(ds: LabeledDataset, variants: Sequence, config: CrossvalConfig | None = None,
                    jobs: int = 1) -> CrossvalResult:
    """Cross-validate each variant and tabulate pooled test metrics with intervals."""
    config = config or CrossvalConfig()
    variants = [Variant.parse(v) for v in variants]
    assignment = stratified_kfold(ds.labels, config.k, config.fold_seed)
    tasks = [(ds, v, assignment, f, config) for v in variants for f in range(config.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    table = MetricsTable()
    out, coefs = {}, {}
    for v in variants:
        folds = [r for r in results if r.variant == v]
        res = VariantResult(v, folds, list(ds.ids), ds.labels)
        out[v.value] = res
        _, p1, _, pred = res.pooled()
        table.add(v.value, pooled_metrics(p1, pred, ds.labels, config.bootstrap, config.fold_seed))
        if v.has_shift:
            betas = np.stack([ensemble_coefficients(f.ensemble)[1] for f in folds])
            coefs[v.value] = coefficient_report(folds[0].encoder.features, betas,
                                                resample_mean=True, n_boot=config.bootstrap,
                                                seed=config.fold_seed)
    return CrossvalResult(assignment, out, table, coefs)
