"""Datasets: volume files, tabular encoding and the synthetic blob generator.

Volumes are stored as ``VOL1`` files::

    b"VOL1" | u8 rank | rank x u32 extents (LE) | f32 payload (LE, row-major)

Tabular data lives in one CSV per cohort with an ``id`` column, an
``outcome`` column (``favorable``/``unfavorable``) and one column per raw
feature. A JSON manifest ties the pieces together.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .dtm import FAVORABLE, UNFAVORABLE, LABEL_NAMES, FeatureInfo, encode_labels, sigmoid
from .errors import DataError, DegenerateDataError, EncodingError, FormatError, ParseError

VOL_MAGIC = b"VOL1"
MANIFEST_NAME = "manifest.json"


# --------------------------------------------------------------------------
# VOL1 format
# --------------------------------------------------------------------------


def volume_bytes(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = VOL_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def save_volume(path, array) -> None:
    Path(path).write_bytes(volume_bytes(array))


def parse_volume(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise FormatError("file too short for a VOL1 header", len(buf))
    if buf[:4] != VOL_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    rank = buf[4]
    if rank == 0 or rank > 8:
        raise FormatError(f"unsupported rank {rank}", 4)
    end = 5 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated extents", len(buf))
    extents = struct.unpack(f"<{rank}I", buf[5:end])
    count = 1
    for i, e in enumerate(extents):
        if e == 0:
            raise FormatError(f"zero extent on axis {i}", 5 + 4 * i)
        count *= e
        if count * 4 > (1 << 40):
            raise FormatError("extents overflow the supported payload size", 5 + 4 * i)
    expected = end + 4 * count
    if len(buf) != expected:
        raise FormatError(
            f"payload has {len(buf) - end} bytes, header predicts {4 * count}",
            min(len(buf), expected),
        )
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(extents).astype(np.float32)


def load_volume(path) -> np.ndarray:
    return parse_volume(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Volume preprocessing
# --------------------------------------------------------------------------


def standardize_volume(raw) -> np.ndarray:
    """Rescale a volume to zero mean and unit standard deviation."""
    v = np.asarray(raw, dtype=np.float64)
    sd = v.std()
    if not np.isfinite(sd) or sd <= 0:
        raise DegenerateDataError("cannot standardize a constant volume")
    return ((v - v.mean()) / sd).astype(np.float32)


# --------------------------------------------------------------------------
# Tabular data
# --------------------------------------------------------------------------


@dataclass
class TabularSchema:
    """Raw feature layout: numeric columns and categorical columns with levels.

    The first listed level of a categorical feature is its reference level.
    A categorical feature given with an empty level list takes its levels from
    the training data in sorted order.
    """

    numeric: list[str] = field(default_factory=list)
    categorical: dict[str, list[str]] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return list(self.numeric) + list(self.categorical)

    def to_dict(self) -> dict:
        return {"numeric": list(self.numeric),
                "categorical": {k: list(v) for k, v in self.categorical.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        return cls(list(d.get("numeric", [])),
                   {k: [str(x) for x in v] for k, v in d.get("categorical", {}).items()})


def load_tabular_csv(path, schema: TabularSchema, label_column: str | None = "outcome"):
    """Read one row per patient into ``(ids, records, labels)``.

    ``records`` is a list of dicts with floats for numeric features and
    strings for categorical ones. Missing values are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = ["id"] + schema.columns + ([label_column] if label_column else [])
        missing = [c for c in needed if c not in header]
        if missing:
            raise ParseError(f"{path}: header lacks columns {missing}")
        ids, records, labels = [], [], []
        for rowno, row in enumerate(reader, start=2):
            pid = (row.get("id") or "").strip()
            if not pid:
                raise ParseError(f"{path}: row {rowno} has no id")
            rec = {}
            for col in schema.numeric:
                cell = (row.get(col) or "").strip()
                if cell == "":
                    raise ParseError(f"{path}: row {rowno}, column {col!r} is missing")
                try:
                    rec[col] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {rowno}, column {col!r}: {cell!r} is not numeric"
                    ) from None
            for col in schema.categorical:
                cell = (row.get(col) or "").strip()
                if cell == "":
                    raise ParseError(f"{path}: row {rowno}, column {col!r} is missing")
                rec[col] = cell
            if label_column:
                cell = (row.get(label_column) or "").strip().lower()
                if cell not in LABEL_NAMES:
                    raise ParseError(
                        f"{path}: row {rowno}, column {label_column!r}: unknown outcome {cell!r}"
                    )
                labels.append(LABEL_NAMES.index(cell))
            ids.append(pid)
            records.append(rec)
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate patient ids")
    return ids, records, (np.array(labels, dtype=np.int64) if label_column else None)


def write_tabular_csv(path, ids, records, schema: TabularSchema, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + (["outcome"] if labels is not None else []) + schema.columns)
        for i, (pid, rec) in enumerate(zip(ids, records)):
            row = [pid] + ([LABEL_NAMES[int(labels[i])]] if labels is not None else [])
            row += [repr(float(rec[c])) for c in schema.numeric]
            row += [rec[c] for c in schema.categorical]
            w.writerow(row)


@dataclass
class TabularEncoder:
    """Dummy coding against reference levels plus training-split standardization."""

    schema: TabularSchema
    means: dict[str, float]
    sds: dict[str, float]
    levels: dict[str, list[str]]

    @classmethod
    def fit(cls, records: Sequence[dict], schema: TabularSchema) -> "TabularEncoder":
        if not records:
            raise EncodingError("cannot fit an encoder on zero records")
        means, sds, levels = {}, {}, {}
        for col in schema.numeric:
            vals = np.array([r[col] for r in records], dtype=np.float64)
            sd = vals.std()
            means[col] = float(vals.mean())
            sds[col] = float(sd) if sd > 0 else 1.0
        for col, declared in schema.categorical.items():
            seen = sorted({str(r[col]) for r in records})
            if declared:
                unknown = [lv for lv in seen if lv not in declared]
                if unknown:
                    raise EncodingError(f"feature {col!r}: level {unknown[0]!r} not declared")
                levels[col] = list(declared)
            else:
                levels[col] = seen
        return cls(schema, means, sds, levels)

    @property
    def features(self) -> list[FeatureInfo]:
        out = [FeatureInfo(c, c) for c in self.schema.numeric]
        for col in self.schema.categorical:
            ref = self.levels[col][0]
            out += [FeatureInfo(f"{col}={lv}", col, ref) for lv in self.levels[col][1:]]
        return out

    @property
    def width(self) -> int:
        return len(self.schema.numeric) + sum(len(v) - 1 for v in self.levels.values())

    def transform(self, records: Sequence[dict]) -> np.ndarray:
        x = np.zeros((len(records), self.width), dtype=np.float64)
        for i, rec in enumerate(records):
            j = 0
            for col in self.schema.numeric:
                x[i, j] = (float(rec[col]) - self.means[col]) / self.sds[col]
                j += 1
            for col in self.schema.categorical:
                lv = str(rec[col])
                levels = self.levels[col]
                if lv not in levels:
                    raise EncodingError(f"feature {col!r}: unseen level {lv!r}")
                k = levels.index(lv)
                if k > 0:
                    x[i, j + k - 1] = 1.0
                j += len(levels) - 1
        return x

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_dict(), "means": self.means, "sds": self.sds,
                "levels": self.levels}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularEncoder":
        return cls(TabularSchema.from_dict(d["schema"]), dict(d["means"]), dict(d["sds"]),
                   {k: list(v) for k, v in d["levels"].items()})


def encode_tabular(records, train_records, schema: TabularSchema) -> np.ndarray:
    """Encode ``records`` with statistics taken from ``train_records`` only."""
    return TabularEncoder.fit(train_records, schema).transform(records)


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    ids: list[str]
    labels: np.ndarray
    volumes: np.ndarray | None = None
    records: list[dict] | None = None
    schema: TabularSchema = field(default_factory=TabularSchema)
    ground_truth: dict | None = None
    masks: np.ndarray | None = None

    def __post_init__(self):
        self.labels = encode_labels(self.labels)
        n = len(self.ids)
        if len(self.labels) != n:
            raise DataError("labels and ids differ in length")
        if self.volumes is not None and len(self.volumes) != n:
            raise DataError("volumes and ids differ in length")
        if self.records is not None and len(self.records) != n:
            raise DataError("tabular records and ids differ in length")
        if n and len(np.unique(self.labels)) < 2:
            raise DegenerateDataError("dataset must contain both outcome classes")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def extents(self) -> tuple | None:
        return None if self.volumes is None else tuple(self.volumes.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        sub = object.__new__(LabeledDataset)
        sub.ids = [self.ids[i] for i in index]
        sub.labels = self.labels[index]
        sub.volumes = None if self.volumes is None else self.volumes[index]
        sub.records = None if self.records is None else [self.records[i] for i in index]
        sub.schema = self.schema
        sub.masks = None if self.masks is None else self.masks[index]
        sub.ground_truth = None
        if self.ground_truth is not None:
            gt = dict(self.ground_truth)
            for key in ("lesion_volume", "z_lesion", "x_true", "p_unfavorable", "uniform",
                        "centers", "radii"):
                if key in gt:
                    gt[key] = np.asarray(gt[key])[index]
            sub.ground_truth = gt
        return sub


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------


SYNTH_SCHEMA = TabularSchema(
    numeric=["age", "nihss"],
    categorical={"sex": ["female", "male"], "smoking": ["no", "yes"], "mrs_bl": ["0", "1", "2"]},
)
# population moments used to place generator features on the encoded scale
_AGE = (70.0, 12.0)
_NIHSS_RATE = 5.0


@dataclass
class SyntheticSpec:
    """Generator settings. Coefficients act on the favorable log-odds.

    ``beta`` has one entry per encoded feature of :data:`SYNTH_SCHEMA`:
    age, nihss, sex=male, smoking=yes, mrs_bl=1, mrs_bl=2.
    """

    n: int = 400
    extents: tuple = (32, 32, 8)
    radius_range: tuple = (1.5, 4.0)
    intensity: float = 3.0
    noise_sd: float = 1.0
    intercept: float = 1.5
    gamma: float = -3.0
    beta: tuple = (-0.5, -0.8, 0.0, 0.0, -0.4, -0.8)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        d["radius_range"] = list(self.radius_range)
        d["beta"] = list(self.beta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("extents", "radius_range", "beta"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _blob(extents, center, radius, intensity):
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    mask = d2 <= radius ** 2
    sigma = radius / 2.0
    return intensity * np.exp(-d2 / (2 * sigma ** 2)), mask


def synthesize_dataset(spec: SyntheticSpec) -> LabeledDataset:
    """Noise volumes with one Gaussian lesion each and labels from a known model.

    The unfavorable probability is ``sigmoid(-(intercept + gamma * z + x @ beta))``
    where ``z`` is the cohort-standardized lesion voxel count.
    """
    ext = tuple(int(e) for e in spec.extents)
    beta = np.asarray(spec.beta, dtype=np.float64)
    if len(beta) != 6:
        raise DataError("synthetic beta needs 6 entries (see SYNTH_SCHEMA)")
    root = np.random.SeedSequence(spec.seed)
    streams = [np.random.default_rng(s) for s in root.spawn(spec.n)]
    vols = np.empty((spec.n, *ext), dtype=np.float32)
    masks = np.empty((spec.n, *ext), dtype=bool)
    centers = np.empty((spec.n, 3))
    radii = np.empty(spec.n)
    x_true = np.empty((spec.n, 6))
    uniforms = np.empty(spec.n)
    records = []
    rmin, rmax = spec.radius_range
    for i, rng in enumerate(streams):
        r = rng.uniform(rmin, rmax)
        margin = [min(r, (e - 1) / 2) for e in ext]
        c = [rng.uniform(m, e - 1 - m) for m, e in zip(margin, ext)]
        noise = rng.normal(0.0, spec.noise_sd, size=ext)
        blob, mask = _blob(ext, c, r, spec.intensity)
        vols[i] = standardize_volume(noise + blob)
        masks[i] = mask
        centers[i], radii[i] = c, r
        age = rng.normal(*_AGE)
        nihss = float(rng.poisson(_NIHSS_RATE))
        sex = "male" if rng.random() < 0.5 else "female"
        smoking = "yes" if rng.random() < 0.25 else "no"
        mrs = str(rng.choice(3, p=[0.6, 0.3, 0.1]))
        records.append({"age": round(age, 3), "nihss": nihss, "sex": sex,
                        "smoking": smoking, "mrs_bl": mrs})
        x_true[i] = [(round(age, 3) - _AGE[0]) / _AGE[1],
                     (nihss - _NIHSS_RATE) / np.sqrt(_NIHSS_RATE),
                     sex == "male", smoking == "yes", mrs == "1", mrs == "2"]
        uniforms[i] = rng.random()
    lesion = masks.reshape(spec.n, -1).sum(axis=1).astype(np.float64)
    sd = lesion.std()
    z = (lesion - lesion.mean()) / (sd if sd > 0 else 1.0)
    h = spec.intercept + spec.gamma * z + x_true @ beta
    p_unf = sigmoid(-h)
    labels = (uniforms < p_unf).astype(np.int64)
    prevalence = labels.mean()
    if not 0.05 <= prevalence <= 0.95:
        warnings.warn(f"synthetic prevalence {prevalence:.3f} outside [0.05, 0.95]")
    if len(np.unique(labels)) < 2:
        raise DegenerateDataError("synthetic spec produced a single outcome class")
    width = len(str(spec.n - 1))
    ids = [f"P{i:0{width}d}" for i in range(spec.n)]
    gt = {"intercept": spec.intercept, "gamma": spec.gamma, "beta": beta,
          "lesion_volume": lesion, "lesion_mean": float(lesion.mean()),
          "lesion_sd": float(sd), "z_lesion": z, "x_true": x_true,
          "p_unfavorable": p_unf, "uniform": uniforms, "centers": centers, "radii": radii}
    return LabeledDataset(ids=ids, labels=labels, volumes=vols, records=records,
                          schema=SYNTH_SCHEMA, ground_truth=gt, masks=masks)


# --------------------------------------------------------------------------
# On-disk datasets
# --------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def save_dataset(ds: LabeledDataset, out_dir, seed=None, extra: dict | None = None) -> Path:
    """Write manifest, tabular CSV, VOL1 volumes and ground-truth sidecars."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "dtmxai-dataset", "version": 1, "n": len(ds),
                "tabular": "tabular.csv", "schema": ds.schema.to_dict(), "seed": seed}
    records = ds.records if ds.records is not None else [{} for _ in ds.ids]
    write_tabular_csv(out / "tabular.csv", ds.ids, records, ds.schema, ds.labels)
    if ds.volumes is not None:
        (out / "volumes").mkdir(exist_ok=True)
        for pid, vol in zip(ds.ids, ds.volumes):
            save_volume(out / "volumes" / f"{pid}.vol", vol)
        manifest["volumes"] = "volumes"
        manifest["extents"] = list(ds.extents)
    if ds.masks is not None:
        (out / "masks").mkdir(exist_ok=True)
        for pid, m in zip(ds.ids, ds.masks):
            save_volume(out / "masks" / f"{pid}.vol", m.astype(np.float32))
        manifest["masks"] = "masks"
    if ds.ground_truth is not None:
        with open(out / "ground_truth.json", "w") as fh:
            json.dump(_jsonable(ds.ground_truth), fh, indent=1, sort_keys=True)
        manifest["ground_truth"] = "ground_truth.json"
    if extra:
        manifest.update(extra)
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out / MANIFEST_NAME


def load_dataset(manifest_path) -> LabeledDataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(manifest, dict) or "tabular" not in manifest:
        raise DataError(f"{path}: not a dataset manifest")
    root = path.parent
    schema = TabularSchema.from_dict(manifest.get("schema", {}))
    ids, records, labels = load_tabular_csv(root / manifest["tabular"], schema)
    volumes = masks = None
    if manifest.get("volumes"):
        volumes = np.stack([load_volume(root / manifest["volumes"] / f"{pid}.vol") for pid in ids])
        if "extents" in manifest and tuple(volumes.shape[1:]) != tuple(manifest["extents"]):
            raise DataError(f"{path}: volume extents differ from manifest")
    if manifest.get("masks"):
        masks = np.stack([load_volume(root / manifest["masks"] / f"{pid}.vol") for pid in ids]) > 0.5
    gt = None
    if manifest.get("ground_truth"):
        with open(root / manifest["ground_truth"]) as fh:
            gt = json.load(fh)
        for key, val in gt.items():
            if isinstance(val, list):
                gt[key] = np.asarray(val)
    return LabeledDataset(ids=ids, labels=labels, volumes=volumes, records=records,
                          schema=schema, ground_truth=gt, masks=masks)
