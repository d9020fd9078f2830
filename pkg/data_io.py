#!/usr/bin/env python3
"""
data_io.py
Dataset ingestion (IDX, delimited text, synthetic generators), the binary
checkpoint container, score records and run configuration.

Checkpoint container layout (all integers little-endian):

    offset  size  field
    0       4     magic b"IFTK"
    4       4     u32 format version
    8       8     u64 header length H
    16      H     UTF-8 JSON header (sorted keys); "arrays" maps
                  name -> {"offset": byte offset into the data block, "shape": [...]}
    16+H    pad   zero bytes up to the next multiple of 8
    ...           data block: every array as little-endian float64, C order
"""

from __future__ import annotations

import configparser
import csv
import gzip
import json
import math
import os
import struct
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from config import (
    BLOB_SEPARATION, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, MANIFEST_VERSION, MOONS_NOISE,
    SCORES_VERSION, SYNTHETIC_GENERATORS, default_data_dir,
)
from data_models import (
    ConfigError, CorruptionSpec, DataFormatError, Dataset, DatasetSource,
    ExperimentConfig, ForgetSet, InfluenceRecord, LdsConfig, MlpSpec,
    ModelParams, RunConfig, RunManifest, SolverConfig, TrainConfig,
)
from logger_setup import get_logger
from utils import atomic_write_bytes, atomic_write_text, safe_json_dumps, sanitize_for_json

logger = get_logger("data_io")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_HEADER = struct.Struct("<4sIQ")


# -------- IDX --------

def _open_maybe_gzip(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_exact(f, count, path, offset):
    data = f.read(count)
    if len(data) < count:
        raise DataFormatError(
            f"truncated file: expected {count} bytes, {count - len(data)} bytes missing",
            path=path, offset=offset + len(data))
    return data


def _read_idx_file(path, expected_magic, ndims):
    with _open_maybe_gzip(path) as f:
        header = _read_exact(f, 4 + 4 * ndims, path, 0)
        magic = struct.unpack(">I", header[:4])[0]
        if magic != expected_magic:
            raise DataFormatError(
                f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path=path, offset=0)
        dims = struct.unpack(f">{ndims}I", header[4:])
        count = int(np.prod(dims, dtype=np.int64))
        body = _read_exact(f, count, path, len(header))
        if f.read(1):
            raise DataFormatError("trailing bytes after declared payload", path=path,
                                  offset=len(header) + count)
    return dims, np.frombuffer(body, dtype=np.uint8)


def read_idx(images_path, labels_path, num_classes=10, limit=None) -> Dataset:
    """Parse a big-endian IDX image/label pair; pixels scaled to [0, 1], rows flattened row-major"""
    (n_img, rows, cols), pixels = _read_idx_file(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx_file(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise DataFormatError(f"{n_img} images but {n_lab} labels", path=labels_path)
    features = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {num_classes})", path=labels_path)
    if limit:
        features, labels = features[:limit], labels[:limit]
    logger.info("Loaded %d IDX examples (%dx%d) from %s", features.shape[0], rows, cols, images_path)
    return Dataset(features, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair"""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    atomic_write_bytes(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    atomic_write_bytes(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


# -------- DELIMITED TEXT --------

def read_delimited(path, label_column="label", delimiter=",", num_classes=None) -> Dataset:
    """Header row, one example per line, all non-label columns numeric"""
    features, labels = [], []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("missing header row", path=path, line=1)
        if label_column not in header:
            raise DataFormatError(f"label column {label_column!r} not in header", path=path, line=1)
        label_pos = header.index(label_column)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}",
                                      path=path, line=line_no)
            try:
                labels.append(int(row[label_pos]))
                features.append([float(v) for i, v in enumerate(row) if i != label_pos])
            except ValueError as e:
                raise DataFormatError(f"non-numeric field: {e}", path=path, line=line_no)
    if not labels:
        raise DataFormatError("no data rows", path=path)
    labels = np.array(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataFormatError("negative label", path=path)
    C = num_classes or int(labels.max()) + 1
    return Dataset(np.array(features), labels, C)


def write_delimited(path, dataset: Dataset, label_column="label"):
    """Inverse of read_delimited; floats written with repr so values round-trip exactly"""
    header = [f"x{i}" for i in range(dataset.d)] + [label_column]
    lines = [",".join(header)]
    for x, y in zip(dataset.features, dataset.labels):
        lines.append(",".join([repr(float(v)) for v in x] + [str(int(y))]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# -------- SYNTHETIC --------

def _stratified_counts(n, C):
    return [n // C + (1 if c < n % C else 0) for c in range(C)]


def blob_means(d, C, separation=BLOB_SEPARATION) -> np.ndarray:
    """Class means on a circle in the first two coordinates, adjacent means `separation` apart"""
    radius = separation / (2.0 * math.sin(math.pi / C)) if C > 1 else 0.0
    means = np.zeros((C, d))
    for c in range(C):
        angle = 2.0 * math.pi * c / C
        means[c, 0] = radius * math.cos(angle)
        if d > 1:
            means[c, 1] = radius * math.sin(angle)
    return means


def generate_synthetic(name, n, d, C, seed, separation=BLOB_SEPARATION, noise=MOONS_NOISE) -> Dataset:
    """Deterministic labeled dataset.

    gaussian_blobs: exactly stratified classes, unit-covariance Gaussians around `blob_means`.
    two_moons_2class: interleaving half circles in the first two coordinates plus
    Gaussian noise of scale `noise` in every coordinate."""
    if name not in SYNTHETIC_GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {SYNTHETIC_GENERATORS}")
    if n < 1 or d < 1 or C < 1:
        raise ConfigError("synthetic n, d and C must be positive")
    rng = np.random.default_rng(seed)
    counts = _stratified_counts(n, C)
    labels = np.concatenate([np.full(k, c, dtype=np.int64) for c, k in enumerate(counts)])

    if name == "gaussian_blobs":
        features = blob_means(d, C, separation)[labels] + rng.standard_normal((n, d))
    else:
        if C != 2 or d < 2:
            raise ConfigError("two_moons_2class needs C = 2 and d >= 2")
        t = rng.uniform(0.0, math.pi, size=n)
        features = np.zeros((n, d))
        upper = labels == 0
        features[upper, 0] = np.cos(t[upper])
        features[upper, 1] = np.sin(t[upper])
        features[~upper, 0] = 1.0 - np.cos(t[~upper])
        features[~upper, 1] = 0.5 - np.sin(t[~upper])
        features += noise * rng.standard_normal((n, d))

    order = rng.permutation(n)
    return Dataset(features[order], labels[order], C)


def split_holdout(dataset: Dataset, count: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded split into (train, held-out) with `count` held-out rows"""
    if not 0 < count < dataset.n:
        raise ConfigError(f"holdout {count} must lie in (0, {dataset.n})")
    order = np.random.default_rng(seed).permutation(dataset.n)
    held = np.sort(order[:count])
    kept = np.sort(order[count:])
    return dataset.subset(kept), dataset.subset(held)


def _resolve(path):
    if path is None or os.path.isabs(path):
        return path
    return os.path.join(default_data_dir(), path)


def load_dataset(source: DatasetSource) -> Dataset:
    if source.kind == "synthetic":
        return generate_synthetic(source.generator, source.n, source.d, source.num_classes, source.seed)
    if source.kind == "idx":
        return read_idx(_resolve(source.images_path), _resolve(source.labels_path),
                        source.num_classes or 10, source.limit)
    if source.kind == "delimited":
        ds = read_delimited(_resolve(source.path), source.label_column or "label",
                            num_classes=source.num_classes or None)
        return ds.subset(np.arange(min(ds.n, source.limit))) if source.limit else ds
    raise ConfigError(f"unknown data source {source.kind!r}")


# -------- CONTAINER --------

def write_container(path, kind: str, meta: Dict, arrays: Dict[str, np.ndarray]):
    """Serialize named float64 arrays plus JSON metadata (see module docstring)"""
    table, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        table[name] = {"offset": offset, "shape": list(a.shape)}
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = safe_json_dumps({"kind": kind, "meta": meta, "arrays": table}).encode("utf-8")
    pad = (-(_HEADER.size + len(header))) % 8
    data = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"\0" * pad + b"".join(blobs)
    atomic_write_bytes(path, data)


def read_container(path, expected_kind=None) -> Tuple[Dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"truncated file: {_HEADER.size - len(raw)} header bytes missing",
                              path=path, offset=len(raw))
    magic, version, hlen = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", path=path, offset=0)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported container version {version}", path=path, offset=4)
    end = _HEADER.size + hlen
    if len(raw) < end:
        raise DataFormatError(f"truncated file: {end - len(raw)} header bytes missing",
                              path=path, offset=len(raw))
    try:
        header = json.loads(raw[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"corrupt header: {e}", path=path, offset=_HEADER.size)
    if expected_kind and header.get("kind") != expected_kind:
        raise DataFormatError(f"expected a {expected_kind} container, found {header.get('kind')!r}", path=path)
    base = end + (-end) % 8
    arrays = {}
    for name, entry in header["arrays"].items():
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        stop = start + 8 * count
        if stop > len(raw):
            raise DataFormatError(f"truncated file: {stop - len(raw)} bytes missing in array {name!r}",
                                  path=path, offset=len(raw))
        arrays[name] = np.frombuffer(raw[start:stop], dtype="<f8").astype(np.float64).reshape(entry["shape"])
    return header, arrays


def save_checkpoint(path, params: ModelParams):
    meta = {"spec": params.spec.to_dict(), "l2_penalty": params.l2_penalty,
            "provenance": params.provenance}
    write_container(path, "model", meta, {"theta": params.theta})


def load_checkpoint(path) -> ModelParams:
    header, arrays = read_container(path, "model")
    meta = header["meta"]
    return ModelParams(arrays["theta"], MlpSpec.from_dict(meta["spec"]),
                       float(meta["l2_penalty"]), meta.get("provenance", {}))


# -------- SCORE RECORDS --------

def write_scores(path, records: Iterable[InfluenceRecord]):
    """One JSON object per line; json's float repr round-trips every float64 exactly"""
    lines = []
    for r in records:
        lines.append(json.dumps({
            "format_version": SCORES_VERSION,
            "train_index": int(r.train_index),
            "test_index": None if r.test_index is None else int(r.test_index),
            "score": float(r.score),
            "solver_id": r.solver_id,
            "damping": float(r.damping),
        }, sort_keys=True))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_scores(path) -> List[InfluenceRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj.get("format_version") != SCORES_VERSION:
                    raise DataFormatError(f"unsupported format_version {obj.get('format_version')!r}",
                                          path=path, line=line_no)
                records.append(InfluenceRecord(
                    int(obj["train_index"]),
                    None if obj["test_index"] is None else int(obj["test_index"]),
                    float(obj["score"]), str(obj["solver_id"]), float(obj["damping"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"malformed score record: {e}", path=path, line=line_no)
    return records


def write_jsonl(path, rows: Iterable[Dict]):
    atomic_write_text(path, "".join(safe_json_dumps(r) + "\n" for r in rows))


def read_jsonl(path) -> List[Dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataFormatError(f"malformed record: {e}", path=path, line=line_no)
    return out


def write_csv(path, header: List[str], rows: Iterable[Iterable]):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


# -------- CORRUPTION / FORGET FILES --------

def write_corruption_spec(path, spec: CorruptionSpec):
    atomic_write_text(path, safe_json_dumps({
        "format_version": SCORES_VERSION,
        "fraction": spec.fraction,
        "seed": spec.seed,
        "flips": [[i, old, new] for i, (old, new) in sorted(spec.flips.items())],
    }, indent=1))


def _read_json_record(path, what, required):
    """Versioned JSON object with the required keys present"""
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"malformed {what}: {e}", path=path, line=e.lineno)
    if not isinstance(obj, dict):
        raise DataFormatError(f"{what} must be a JSON object", path=path)
    if obj.get("format_version") != SCORES_VERSION:
        raise DataFormatError(f"unsupported format_version {obj.get('format_version')!r}", path=path)
    missing = [k for k in required if k not in obj]
    if missing:
        raise DataFormatError(f"{what} is missing {', '.join(missing)}", path=path)
    return obj


def read_corruption_spec(path) -> CorruptionSpec:
    obj = _read_json_record(path, "corruption spec", ("fraction", "seed", "flips"))
    try:
        flips = {int(i): (int(old), int(new)) for i, old, new in obj["flips"]}
        return CorruptionSpec(float(obj["fraction"]), int(obj["seed"]), flips)
    except (TypeError, ValueError) as e:
        raise DataFormatError(f"malformed corruption spec entry: {e}", path=path)


def read_forget_set(path) -> ForgetSet:
    """JSON: {"format_version": 1, "remove": [i, ...]} or {"format_version": 1, "relabel": [[i, label], ...]}"""
    obj = _read_json_record(path, "forget file", ())
    try:
        return ForgetSet(tuple(int(i) for i in obj.get("remove", [])),
                         {int(i): int(y) for i, y in obj.get("relabel", [])})
    except (TypeError, ValueError) as e:
        raise DataFormatError(f"malformed forget file entry: {e}", path=path)


def write_forget_set(path, forget: ForgetSet):
    atomic_write_text(path, safe_json_dumps({
        "format_version": SCORES_VERSION,
        "remove": list(forget.indices),
        "relabel": [[i, y] for i, y in sorted(forget.relabels.items())],
    }))


# -------- RUN MANIFEST --------

def write_manifest(path, manifest: RunManifest):
    """Atomic JSON manifest; wall_clock_seconds is the only field that varies between reruns"""
    obj = sanitize_for_json(manifest)
    obj["format_version"] = MANIFEST_VERSION
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_manifest(path) -> RunManifest:
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read manifest {path}: {e}")
    except json.JSONDecodeError as e:
        raise DataFormatError(f"malformed manifest: {e.msg}", path=path, line=e.lineno)
    if obj.pop("format_version", None) != MANIFEST_VERSION:
        raise DataFormatError("unsupported manifest format_version", path=path)
    try:
        return RunManifest(**obj)
    except TypeError as e:
        raise DataFormatError(f"manifest fields do not match: {e}", path=path)


# -------- RUN CONFIGURATION --------

_SCHEMA = {
    "data": {"source": str, "generator": str, "n": int, "d": int, "classes": int, "seed": int,
             "images": str, "labels": str, "path": str, "label_column": str, "limit": int,
             "holdout": int, "holdout_seed": int},
    "test_data": {"source": str, "generator": str, "n": int, "d": int, "classes": int, "seed": int,
                  "images": str, "labels": str, "path": str, "label_column": str, "limit": int},
    "model": {"hidden": str, "activation": str},
    "training": {"learning_rate": float, "epochs": int, "batch_size": int, "seed": int,
                 "l2_penalty": float, "newton_steps": int, "grad_tol": float},
    "solver": {"name": str, "damping": float, "fisher_type": str, "seed": int,
               "lissa_iterations": int, "lissa_batch_size": int, "lissa_alpha": float,
               "lissa_repeats": int},
    "experiment": {"lds_subsets": int, "lds_alpha": float, "lds_seed": int, "test_points": int,
                   "test_seed": int, "corruption_fraction": float, "corruption_seed": int,
                   "budgets": str, "top_k": int, "test_indices": str},
    "output": {"dir": str},
}


def _int_list(text):
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _float_list(text):
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _typed_section(parser, section):
    out = {}
    if not parser.has_section(section):
        return out
    schema = _SCHEMA[section]
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key [{section}] {key}")
        try:
            out[key] = schema[key](raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {schema[key].__name__}")
    return out


def _source_from(values, section) -> DatasetSource:
    kind = values.get("source", "synthetic")
    if kind == "synthetic":
        missing = [k for k in ("generator", "n", "d", "classes") if k not in values]
        if missing:
            raise ConfigError(f"[{section}] synthetic source needs {', '.join(missing)}")
        return DatasetSource("synthetic", generator=values["generator"], n=values["n"], d=values["d"],
                             num_classes=values["classes"], seed=values.get("seed", 0))
    if kind == "idx":
        if "images" not in values or "labels" not in values:
            raise ConfigError(f"[{section}] idx source needs images and labels")
        return DatasetSource("idx", images_path=values["images"], labels_path=values["labels"],
                             num_classes=values.get("classes", 10), limit=values.get("limit"))
    if kind == "delimited":
        if "path" not in values:
            raise ConfigError(f"[{section}] delimited source needs path")
        return DatasetSource("delimited", path=values["path"], label_column=values.get("label_column", "label"),
                             num_classes=values.get("classes", 0), limit=values.get("limit"))
    raise ConfigError(f"[{section}] unknown source {kind!r}")


def parse_run_config(text, origin="<string>") -> RunConfig:
    """Parse the INI run configuration (sections: data, test_data, model, training,
    solver, experiment, output)"""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as e:
        raise ConfigError(f"{origin}: {e}")
    unknown = [s for s in parser.sections() if s not in _SCHEMA]
    if unknown:
        raise ConfigError(f"{origin}: unknown section(s) {unknown}")
    if not parser.has_section("data"):
        raise ConfigError(f"{origin}: missing [data] section")

    data = _typed_section(parser, "data")
    test = _typed_section(parser, "test_data")
    model = _typed_section(parser, "model")
    training = _typed_section(parser, "training")
    solver = _typed_section(parser, "solver")
    exp = _typed_section(parser, "experiment")
    output = _typed_section(parser, "output")

    lds = LdsConfig(
        num_subsets=exp.get("lds_subsets", LdsConfig.num_subsets),
        alpha=exp.get("lds_alpha", LdsConfig.alpha),
        seed=exp.get("lds_seed", LdsConfig.seed),
        test_sample_count=exp.get("test_points", LdsConfig.test_sample_count),
        test_seed=exp.get("test_seed", LdsConfig.test_seed),
    )
    experiment = ExperimentConfig(
        lds=lds,
        corruption_fraction=exp.get("corruption_fraction", ExperimentConfig.corruption_fraction),
        corruption_seed=exp.get("corruption_seed", ExperimentConfig.corruption_seed),
        budgets=_float_list(exp["budgets"]) if "budgets" in exp else ExperimentConfig.budgets,
        top_k=exp.get("top_k", ExperimentConfig.top_k),
        test_indices=_int_list(exp.get("test_indices", "")),
    )
    solver_cfg = SolverConfig(
        name=solver.get("name", SolverConfig.name),
        damping=solver.get("damping", SolverConfig.damping),
        fisher_type=solver.get("fisher_type", SolverConfig.fisher_type),
        seed=solver.get("seed", SolverConfig.seed),
        lissa_iterations=solver.get("lissa_iterations", SolverConfig.lissa_iterations),
        lissa_batch_size=solver.get("lissa_batch_size"),
        lissa_alpha=solver.get("lissa_alpha"),
        lissa_repeats=solver.get("lissa_repeats", SolverConfig.lissa_repeats),
    )
    return RunConfig(
        source=_source_from(data, "data"),
        hidden=_int_list(model.get("hidden", "")),
        activation=model.get("activation", RunConfig.activation),
        train=TrainConfig(**training),
        solver=solver_cfg,
        experiment=experiment,
        holdout=data.get("holdout", 0),
        holdout_seed=data.get("holdout_seed", 0),
        test_source=_source_from(test, "test_data") if test else None,
        output_dir=output.get("dir", RunConfig.output_dir),
    )


def load_run_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_run_config(f.read(), origin=path)


def load_train_test(config: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Training set plus the held-out set from [test_data] or a seeded holdout split"""
    dataset = load_dataset(config.source)
    if config.test_source is not None:
        return dataset, load_dataset(config.test_source)
    if config.holdout:
        return split_holdout(dataset, config.holdout, config.holdout_seed)
    return dataset, None
