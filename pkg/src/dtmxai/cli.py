"""Command-line interface: synth, train, crossval, explain, embed, report.

Every command reads an optional JSON config, fills in defaults, and writes
the resolved config to ``<out>/config.json`` before producing outputs.
Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .crossval import CrossvalConfig, crossval_report
from .data import (LabeledDataset, SyntheticSpec, TabularEncoder, load_dataset, load_volume,
                   save_dataset, save_volume, synthesize_dataset)
from .dtm import (LABEL_NAMES, UNFAVORABLE, Variant, coefficient_report, sigmoid)
from .embedding import (calibrate_affinities, embedding_points, export_embedding,
                        extract_features, max_perplexity, tsne)
from .engine import NetworkSpec
from .errors import ConfigurationError, DataError, DTMError
from .evaluation import select_threshold
from .training import (Split, TrainConfig, ensemble_coefficients, ensemble_transformation,
                       fit_ensemble, load_ensemble, member_h, save_ensemble, stratified_holdout)
from .xai import (OcclusionConfig, axial_projection, class_average_map, explain_ensemble,
                  save_heat_pgm, save_projection_png)

log = logging.getLogger("dtmxai")

DEFAULTS = {
    "dataset": None,
    "synthetic": SyntheticSpec().to_dict(),
    "variants": ["SI", "SI-LS", "CI", "CI-LS"],
    "network": None,
    "train": TrainConfig().to_dict(),
    "k": 10,
    "M": 5,
    "M_image_free": 1,
    "seeds": [0, 1, 2, 3, 4],
    "fold_seed": 0,
    "bootstrap": 2000,
    "occlusion": {"window": [5, 5, 2], "stride": [3, 3, 1], "fill": 0.0},
    "method": "gradcam",
    "explain": {"model": None, "patients": None},
    "embed": {"maps": None, "perplexity": 30.0, "iterations": 1000, "seed": 0},
    "report": {"run": None},
}


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key not in ("network",):
            if not isinstance(val, dict):
                raise ConfigurationError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    # resolve relative paths against the config file location
    base = Path(path).resolve().parent
    for section, key in (("dataset", None), ("explain", "model"), ("embed", "maps"),
                         ("report", "run")):
        holder, name = (cfg, section) if key is None else (cfg[section], key)
        if holder.get(name) and not Path(holder[name]).is_absolute():
            holder[name] = str(base / holder[name])
    return cfg


def apply_seed(cfg: dict, seed: int | None) -> dict:
    if seed is None:
        return cfg
    cfg = copy.deepcopy(cfg)
    cfg["synthetic"]["seed"] = seed
    cfg["fold_seed"] = seed
    cfg["seeds"] = [seed * 100 + i for i in range(max(cfg["M"], len(cfg["seeds"])))]
    cfg["embed"]["seed"] = seed
    return cfg


def _network(cfg) -> NetworkSpec | None:
    return None if cfg["network"] is None else NetworkSpec.from_dict(cfg["network"])


def _train_config(cfg) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise ConfigurationError(f"bad train section: {exc}") from None


def _crossval_config(cfg) -> CrossvalConfig:
    seeds = [int(s) for s in cfg["seeds"]]
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError("seeds must be distinct")
    return CrossvalConfig(k=int(cfg["k"]), M=int(cfg["M"]), M_image_free=int(cfg["M_image_free"]),
                          seeds=seeds, fold_seed=int(cfg["fold_seed"]),
                          bootstrap=int(cfg["bootstrap"]), train=_train_config(cfg),
                          network=_network(cfg))


def _prepare_out(out, force: bool) -> Path:
    if out is None:
        raise ConfigurationError("--out is required")
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigurationError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_snapshot(out: Path, cfg: dict, command: str) -> None:
    snap = {"command": command, "version": __version__, "config": cfg}
    with open(out / "config.json", "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset(cfg) -> LabeledDataset:
    if not cfg["dataset"]:
        raise ConfigurationError("config needs a 'dataset' manifest path")
    return load_dataset(cfg["dataset"])


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(cfg, out: Path, args) -> None:
    try:
        spec = SyntheticSpec.from_dict(cfg["synthetic"])
    except TypeError as exc:
        raise ConfigurationError(f"bad synthetic section: {exc}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        ds = synthesize_dataset(spec)
    save_dataset(ds, out, seed=spec.seed, extra={"synthetic": spec.to_dict()})
    log.info("wrote %d records to %s", len(ds), out)


def _variant_split(ds: LabeledDataset, index, variant: Variant, encoder) -> Split:
    sub = ds.subset(index)
    return Split(sub.labels, sub.volumes if variant.has_image else None,
                 encoder.transform(sub.records) if variant.has_shift else None)


def cmd_train(cfg, out: Path, args) -> None:
    ds = _dataset(cfg)
    cv = _crossval_config(cfg)
    for name in cfg["variants"]:
        v = Variant.parse(name)
        encoder = TabularEncoder.fit(ds.records, ds.schema) if v.has_shift else None
        itr, iva = stratified_holdout(ds.labels, cv.train.val_fraction, cv.fold_seed)
        train = _variant_split(ds, itr, v, encoder)
        val = _variant_split(ds, iva, v, encoder)
        ens = fit_ensemble(v, train, val, cv.members(v), cv.member_seeds(v), cv.train, cv.network)
        h_val = ens.weights @ np.stack([member_h(m, val) for m in ens.members])
        rule = select_threshold(1.0 - sigmoid(h_val), val.labels)
        save_ensemble(out / f"{v.value}.dtm", ens)
        sidecar = {"variant": v.value, "threshold": rule.threshold,
                   "geometric_mean": rule.geometric_mean, "weights": ens.weights.tolist(),
                   "encoder": None if encoder is None else encoder.to_dict()}
        with open(out / f"{v.value}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
        if v.has_shift:
            betas = np.stack([m.beta for m in ens.members])
            rep = coefficient_report(encoder.features, betas, point=ensemble_coefficients(ens)[1],
                                     resample_mean=True, n_boot=cv.bootstrap, seed=cv.fold_seed)
            rep.to_csv(out / f"coefficients_{v.value}.csv")
        log.info("trained %s ensemble (M=%d), threshold %.4f", v.value, ens.M, rule.threshold)


def cmd_crossval(cfg, out: Path, args) -> None:
    ds = _dataset(cfg)
    cv = _crossval_config(cfg)
    res = crossval_report(ds, cfg["variants"], cv, jobs=args.jobs)
    res.table.to_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(res.table.to_text())
    res.write_predictions(out / "predictions.csv")
    res.write_fold_metrics(out / "fold_metrics.csv")
    for name, rep in res.coefficients.items():
        rep.to_csv(out / f"coefficients_{name}.csv")
    folds_dir = out / "folds"
    folds_dir.mkdir(exist_ok=True)
    for name, vres in res.variants.items():
        for f in vres.folds:
            save_ensemble(folds_dir / f"{name}_fold{f.fold}.dtm", f.ensemble)
    sys.stdout.write(res.table.to_text())


def _load_model(cfg):
    path = cfg["explain"]["model"]
    if not path:
        raise ConfigurationError("config needs explain.model (a .dtm file written by train)")
    ens = load_ensemble(path)
    side = Path(path).with_suffix(".json")
    meta = {}
    if side.is_file():
        with open(side) as fh:
            meta = json.load(fh)
    return ens, meta


def _select_patients(ds: LabeledDataset, spec):
    if spec is None:
        return list(range(len(ds)))
    if isinstance(spec, int):
        return list(range(min(spec, len(ds))))
    lookup = {pid: i for i, pid in enumerate(ds.ids)}
    missing = [p for p in spec if p not in lookup]
    if missing:
        raise DataError(f"unknown patient ids: {missing[:5]}")
    return [lookup[p] for p in spec]


def cmd_explain(cfg, out: Path, args) -> None:
    ds = _dataset(cfg)
    ens, meta = _load_model(cfg)
    if not ens.variant.has_image:
        raise ConfigurationError(f"{ens.variant.value} model has no image part to explain")
    encoder = TabularEncoder.from_dict(meta["encoder"]) if meta.get("encoder") else None
    threshold = float(meta.get("threshold", 0.5))
    method = args.method or cfg["method"]
    methods = ["gradcam", "occlusion"] if method == "both" else [method]
    occ = OcclusionConfig(**cfg["occlusion"])
    rows = []
    for m in methods:
        (out / "maps" / m).mkdir(parents=True, exist_ok=True)
        (out / "projections" / m).mkdir(parents=True, exist_ok=True)
    groups = {(m, k): [] for m in methods for k in (0, 1)}
    for i in _select_patients(ds, cfg["explain"]["patients"]):
        pid = ds.ids[i]
        vol = ds.volumes[i]
        tab = encoder.transform([ds.records[i]])[0] if ens.variant.has_shift else None
        h = ensemble_transformation(ens, vol, tab)
        p1 = 1.0 - sigmoid(h)
        k = UNFAVORABLE if p1 > threshold else 0
        for m in methods:
            emap = explain_ensemble(ens, vol, tab, k, m, occ)
            save_volume(out / "maps" / m / f"{pid}.vol", emap.values)
            proj = axial_projection(emap, vol)
            save_projection_png(out / "projections" / m / f"{pid}.png", proj)
            save_heat_pgm(out / "projections" / m / f"{pid}.pgm", proj)
            groups[(m, k)].append(proj)
            rows.append([pid, LABEL_NAMES[k], repr(p1), m, int(ds.labels[i])])
    for (m, k), projs in groups.items():
        if projs:
            save_projection_png(out / f"class_{LABEL_NAMES[k]}_{m}.png", class_average_map(projs))
    with open(out / "maps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "predicted", "p1", "method", "true"])
        w.writerows(rows)
    log.info("explained %d patients with %s", len(rows) // len(methods), ", ".join(methods))


def cmd_embed(cfg, out: Path, args) -> None:
    from PIL import Image

    maps_dir = cfg["embed"]["maps"]
    if not maps_dir:
        raise ConfigurationError("config needs embed.maps (an explain output directory)")
    maps_dir = Path(maps_dir)
    ens, _ = _load_model(cfg)
    method = args.method or cfg["method"]
    if method == "both":
        method = "gradcam"
    try:
        with open(maps_dir / "maps.csv", newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["method"] == method]
    except OSError as exc:
        raise DataError(f"cannot read map metadata: {exc}") from None
    if len(rows) < 2:
        raise DataError(f"need at least 2 {method} maps to embed, found {len(rows)}")
    feats = np.stack([extract_features(ens, load_volume(maps_dir / "maps" / method / f"{r['id']}.vol"))
                      for r in rows])
    u = float(cfg["embed"]["perplexity"])
    cap = float(math.floor(max_perplexity(len(rows))))
    if u > cap:
        warnings.warn(f"perplexity {u:g} capped to {cap:g} for {len(rows)} maps")
        u = cap
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        aff = calibrate_affinities(feats, u)
    res = tsne(aff, int(cfg["embed"]["iterations"]), int(cfg["embed"]["seed"]))
    pred = [LABEL_NAMES.index(r["predicted"]) for r in rows]
    true = [int(r["true"]) for r in rows]
    points = embedding_points([r["id"] for r in rows], res.Y, pred, true)
    thumbs = {}
    (out / "thumbs").mkdir(exist_ok=True)
    for r in rows:
        src = maps_dir / "projections" / method / f"{r['id']}.png"
        if src.is_file():
            dst = out / "thumbs" / f"{r['id']}.png"
            Image.open(src).resize((64, 64), Image.NEAREST).save(dst, format="PNG")
            thumbs[r["id"]] = dst
    export_embedding(points, out, thumbs)
    np.savetxt(out / "kl.txt", res.kl[-1:], fmt="%.10g")
    log.info("embedded %d maps (perplexity %.3g), final KL %.4f", len(rows), u, res.kl[-1])


def _find(run: Path, pattern: str):
    return sorted(run.rglob(pattern))


def build_report(run: Path) -> str:
    """Markdown summary of whatever artifacts exist below ``run``."""
    lines = [f"# Run report: {run.name}", ""]
    gaps = []
    lines += ["## Metrics", ""]
    metrics = _find(run, "metrics.txt")
    if metrics:
        for p in metrics:
            lines += [f"Source: `{p.relative_to(run)}`", "", "```", p.read_text().rstrip(), "```", ""]
    else:
        gaps.append("metrics")
        lines += ["Missing: no metrics table found.", ""]
    lines += ["## Coefficients", ""]
    coefs = _find(run, "coefficients_*.csv")
    if coefs:
        for p in coefs:
            with open(p, newline="") as fh:
                recs = list(csv.DictReader(fh))
            lines += [f"Source: `{p.relative_to(run)}`", "",
                      "| feature | log-odds ratio | odds ratio | 95% CI | scale |",
                      "|---|---|---|---|---|"]
            for r in recs:
                lines.append(f"| {r['feature']} | {float(r['beta']):.3f} | "
                             f"{float(r['odds_ratio']):.3f} | "
                             f"[{float(r['ci_low']):.3f}, {float(r['ci_high']):.3f}] | {r['scale']} |")
            lines.append("")
    else:
        gaps.append("coefficients")
        lines += ["Missing: no coefficient tables found.", ""]
    lines += ["## Explanation maps", ""]
    maps = _find(run, "maps.csv")
    if maps:
        for p in maps:
            lines.append(f"- metadata: `{p.relative_to(run)}`")
            for img in sorted(p.parent.glob("class_*.png")):
                lines.append(f"- ![{img.stem}]({img.relative_to(run)})")
        lines.append("")
    else:
        gaps.append("xai")
        lines += ["Missing: no explanation maps found (xai section incomplete).", ""]
    lines += ["## Embedding", ""]
    emb = _find(run, "embedding.html")
    if emb:
        for p in emb:
            lines.append(f"- [{p.relative_to(run)}]({p.relative_to(run)})")
            lines.append(f"- `{p.with_suffix('.csv').relative_to(run)}`")
        lines.append("")
    else:
        gaps.append("embedding")
        lines += ["Missing: no embedding found.", ""]
    if gaps:
        lines += ["## Gaps", "", "This report is partial; missing sections: " + ", ".join(gaps) + ".", ""]
    return "\n".join(lines)


def cmd_report(cfg, out: Path, args) -> None:
    run = cfg["report"]["run"]
    if not run:
        raise ConfigurationError("config needs report.run (a run directory)")
    run = Path(run)
    if not run.is_dir():
        raise DataError(f"run directory {run} does not exist")
    (out / "report.md").write_text(build_report(run))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "crossval": cmd_crossval,
            "explain": cmd_explain, "embed": cmd_embed, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtmxai", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; missing keys take defaults")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--seed", type=int, help="override all seeds")
        p.add_argument("--method", choices=["gradcam", "occlusion", "both"])
        p.add_argument("--force", action="store_true", help="write into a non-empty --out")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be at least 1")
        cfg = apply_seed(load_config(args.config), args.seed)
        if args.method:
            cfg["method"] = args.method
        out = _prepare_out(args.out, args.force)
        _write_snapshot(out, cfg, args.command)
        COMMANDS[args.command](cfg, out, args)
    except DTMError as exc:
        print(f"dtmxai {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
