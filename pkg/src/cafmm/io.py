"""Run configuration, CSV ingestion and the chain archive format."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ArchiveFormatError, ConfigurationError, IngestionError
from .model import FunctionalDataset, HyperParams
from .sampler import ChainStore, SamplerConfig, TemperingConfig

CHAIN_SCHEMA = "cafmm-chain/1"
REPORT_SCHEMA = "cafmm-report/1"
SIM_SCHEMA = "cafmm-sim/1"


# ------------------------------------------------------------------ config

def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return d


@dataclass
class DimsConfig:
    K: int = 2
    M: int = 2
    P: int = 8
    degree: int = 3
    domain: list | None = None


@dataclass
class DiagnosticsConfig:
    grid_size: int = 50
    covariate_values: list | None = None
    dic: bool = True
    cpo: bool = True
    eigen: bool = True
    identifiability: bool = True
    relabel: bool = True
    rescale: bool = True


@dataclass
class DataConfig:
    curves: str | None = None
    covariates: str | None = None


@dataclass
class RunConfig:
    dims: DimsConfig = field(default_factory=DimsConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    covariance_adjusted: bool = False
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scenario: dict | None = None
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _strict(cls, d, "config")
        kw = dict(d)
        if "dims" in kw:
            kw["dims"] = DimsConfig(**_strict(DimsConfig, kw["dims"], "dims"))
        if "hyper" in kw:
            kw["hyper"] = HyperParams(**_strict(HyperParams, kw["hyper"], "hyper"))
        if "sampler" in kw:
            s = dict(_strict(SamplerConfig, kw["sampler"], "sampler"))
            if "tempering" in s:
                s["tempering"] = TemperingConfig(**_strict(TemperingConfig, s["tempering"], "sampler.tempering"))
            kw["sampler"] = SamplerConfig(**s)
        if "diagnostics" in kw:
            kw["diagnostics"] = DiagnosticsConfig(**_strict(DiagnosticsConfig, kw["diagnostics"], "diagnostics"))
        if "data" in kw:
            kw["data"] = DataConfig(**_strict(DataConfig, kw["data"], "data"))
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hyper"] = self.hyper.to_dict()
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- datasets

def _float(s, path, row, col):
    try:
        v = float(s)
    except (TypeError, ValueError):
        raise IngestionError(f"{path}: row {row}: non-numeric value {s!r} in column {col!r}") from None
    if not np.isfinite(v):
        raise IngestionError(f"{path}: row {row}: non-finite value in column {col!r}")
    return v


def load_dataset(curves_path, covariates_path=None) -> FunctionalDataset:
    """Read long-format curves (``obs_id,t,y``) and optional covariates (``obs_id,x1..xR``).

    Curve order follows the covariates file when given, otherwise first
    appearance in the curves file. Row numbers in errors count the header as
    row 1.
    """
    try:
        fh = open(curves_path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open {curves_path}: {exc}") from exc
    curves: dict[str, list] = {}
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["obs_id", "t", "y"]:
            raise IngestionError(f"{curves_path}: row 1: header must be obs_id,t,y (got {','.join(header)})")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise IngestionError(f"{curves_path}: row {row_no}: expected 3 fields, got {len(row)}")
            oid = row[0].strip()
            if not oid:
                raise IngestionError(f"{curves_path}: row {row_no}: missing obs_id")
            t = _float(row[1], curves_path, row_no, "t")
            y = _float(row[2], curves_path, row_no, "y")
            curves.setdefault(oid, []).append((t, y))

    if covariates_path is not None:
        try:
            fh = open(covariates_path, newline="")
        except OSError as exc:
            raise IngestionError(f"cannot open {covariates_path}: {exc}") from exc
        ids, rows = [], []
        with fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if not header or header[0] != "obs_id":
                raise IngestionError(f"{covariates_path}: row 1: first column must be obs_id")
            R = len(header) - 1
            for row_no, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != R + 1:
                    raise IngestionError(f"{covariates_path}: row {row_no}: expected {R + 1} fields, got {len(row)}")
                oid = row[0].strip()
                if oid in ids:
                    raise IngestionError(f"{covariates_path}: row {row_no}: duplicate obs_id {oid!r}")
                if oid not in curves:
                    raise IngestionError(f"{covariates_path}: row {row_no}: obs_id {oid!r} has an empty curve")
                ids.append(oid)
                rows.append([_float(v, covariates_path, row_no, header[j + 1]) for j, v in enumerate(row[1:])])
        missing = [o for o in curves if o not in set(ids)]
        if missing:
            raise IngestionError(f"{curves_path}: obs_id {missing[0]!r} does not appear in {covariates_path}")
        X = np.array(rows, dtype=float).reshape(len(ids), R)
    else:
        ids = list(curves)
        X = np.zeros((len(ids), 0))

    if not ids:
        raise IngestionError(f"{curves_path}: no observations")
    times, values = [], []
    for oid in ids:
        arr = np.array(curves[oid], dtype=float)
        order = np.argsort(arr[:, 0], kind="stable")
        times.append(arr[order, 0])
        values.append(arr[order, 1])
    return FunctionalDataset(times=times, values=values, X=X, ids=ids)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: FunctionalDataset, curves_path, covariates_path=None) -> None:
    with open(curves_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["obs_id", "t", "y"])
        for oid, t, y in zip(dataset.ids, dataset.times, dataset.values):
            for a, b in zip(t, y):
                w.writerow([oid, _fmt(a), _fmt(b)])
    if covariates_path is not None:
        with open(covariates_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["obs_id"] + [f"x{j + 1}" for j in range(dataset.R)])
            for oid, x in zip(dataset.ids, dataset.X):
                w.writerow([oid] + [_fmt(v) for v in x])


# ------------------------------------------------------------------ chains

def _array_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def save_chain(store: ChainStore, directory, config: dict | None = None, extra: dict | None = None) -> None:
    """Write ``store`` as one ``.npy`` per field plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    arrays = dict(store.draws)
    arrays["log_post"] = store.log_post
    entries = {}
    for name in sorted(arrays):
        fn = f"{name}.npy"
        path = os.path.join(directory, fn)
        np.save(path, np.ascontiguousarray(arrays[name], dtype=np.float64), allow_pickle=False)
        entries[name] = {
            "file": fn,
            "shape": list(np.shape(arrays[name])),
            "dtype": "float64",
            "sha256": file_sha256(path),
        }
    manifest = {
        "schema": CHAIN_SCHEMA,
        "dims": {k: int(store.meta[k]) for k in ("K", "M", "P", "R", "N")},
        "seed": int(store.meta.get("seed", 0)),
        "meta": store.meta,
        "acceptance": {k: [int(a), int(p)] for k, (a, p) in sorted(store.acceptance.items())},
        "arrays": entries,
        "config": config,
        "config_hash": hashlib.sha256(canonical_json(config).encode()).hexdigest() if config is not None else None,
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(directory, "manifest.json"), _jsonable(manifest))


def read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            m = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"cannot read chain manifest {path}: {exc}") from exc
    if m.get("schema") != CHAIN_SCHEMA:
        raise ArchiveFormatError(f"unsupported chain schema {m.get('schema')!r}")
    return m


def load_chain(directory) -> ChainStore:
    """Inverse of :func:`save_chain`; verifies shapes and checksums."""
    m = read_manifest(directory)
    dims = m["dims"]
    for k, v in dims.items():
        if int(m["meta"].get(k, -1)) != int(v):
            raise ArchiveFormatError(f"manifest dims and meta disagree on {k}")
    arrays = {}
    for name, e in m["arrays"].items():
        path = os.path.join(directory, e["file"])
        try:
            raw = _array_bytes(path)
        except OSError as exc:
            raise ArchiveFormatError(f"missing array file {e['file']}") from exc
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ArchiveFormatError(f"checksum mismatch for {e['file']} (truncated or modified)")
        try:
            arr = np.load(path, allow_pickle=False)
        except Exception as exc:  # numpy raises several types on corrupt files
            raise ArchiveFormatError(f"cannot decode {e['file']}: {exc}") from exc
        if list(arr.shape) != e["shape"]:
            raise ArchiveFormatError(f"{e['file']} has shape {arr.shape}, manifest says {e['shape']}")
        arrays[name] = arr
    if "log_post" not in arrays:
        raise ArchiveFormatError("archive lacks log_post")
    log_post = arrays.pop("log_post")
    K, M, P, R, N = (dims[k] for k in ("K", "M", "P", "R", "N"))
    expect = {"nu": (K, P), "eta": (K, P, R), "phi": (K, M, P), "chi": (N, M), "Z": (N, K), "pi": (K,)}
    for name, shp in expect.items():
        if name not in arrays or arrays[name].shape[1:] != shp:
            raise ArchiveFormatError(f"field {name} missing or inconsistent with dims")
    acceptance = {k: (int(v[0]), int(v[1])) for k, v in m["acceptance"].items()}
    return ChainStore(draws=arrays, log_post=log_post, acceptance=acceptance, meta=m["meta"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def to_jsonable(obj):
    return _jsonable(obj)
