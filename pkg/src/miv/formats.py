"""On-disk formats: embedding files, checkpoints, run configs and results.

Embedding file layout (all integers little-endian u32)::

    offset 0   magic  b"MIVE"
    offset 4   format version
    offset 8   record count
    offset 12  embedding dim
    offset 16  count * dim float32 values, row-major

with a text manifest next to it (``<path>.manifest``) holding one
``patient_id,polyp_id,view_index,row`` line per record after a header line.

Checkpoints are zip containers with a ``meta.json`` entry plus one ``.npy``
entry per parameter slot and per running statistic. Entries are written in
sorted order with a fixed timestamp so that saving the same model twice
yields identical bytes.

Every writer goes through :func:`atomic_write_bytes` (temp file + rename).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .attention import KINDS, AttentionConfig
from .bagdata import VIEWS, InstanceRecord, SplitPlan
from .contrastive import ProjectionHead, SimCLRConfig, init_projection_head
from .errors import ConfigError, FormatError, ShapeError, UnsupportedVersionError, ValidationError
from .model import MIVModel, init_model
from .numerics import RunningStats

MAGIC = b"MIVE"
EMBEDDING_VERSION = 1
HEADER = struct.Struct("<4sIII")
MANIFEST_SUFFIX = ".manifest"
MANIFEST_FIELDS = ("patient_id", "polyp_id", "view_index", "row")

CHECKPOINT_VERSION = 1
RESULTS_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


# ----------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc


# ----------------------------------------------------------------------------
# embedding files


@dataclass(frozen=True)
class EmbeddingHeader:
    version: int
    count: int
    dim: int

    @property
    def payload_bytes(self) -> int:
        return self.count * self.dim * 4


def encode_embeddings(matrix) -> bytes:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-D, got shape {m.shape}")
    return HEADER.pack(MAGIC, EMBEDDING_VERSION, m.shape[0], m.shape[1]) + m.tobytes()


def parse_header(data: bytes) -> EmbeddingHeader:
    """Validate the fixed header and the payload length of an embedding file image."""
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: expected {HEADER.size} bytes, got {len(data)}")
    magic, version, count, dim = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic at byte offset 0: expected {MAGIC!r}, got {magic!r}")
    if version > EMBEDDING_VERSION:
        raise UnsupportedVersionError(
            f"embedding format version {version} at byte offset 4 is newer than supported "
            f"version {EMBEDDING_VERSION}")
    if version < 1:
        raise FormatError(f"invalid format version {version} at byte offset 4")
    if count > 0 and dim == 0:
        raise FormatError("embedding dim at byte offset 12 is zero for a non-empty file")
    header = EmbeddingHeader(version, count, dim)
    expected = HEADER.size + header.payload_bytes
    if len(data) != expected:
        what = "truncated" if len(data) < expected else "trailing bytes in"
        raise FormatError(f"{what} payload: expected {expected} bytes in total "
                          f"({count} x {dim} float32 after a {HEADER.size}-byte header), "
                          f"got {len(data)}; data ends at byte offset {len(data)}")
    return header


def decode_embeddings(data: bytes) -> np.ndarray:
    header = parse_header(data)
    payload = np.frombuffer(data, dtype="<f4", count=header.count * header.dim, offset=HEADER.size)
    return payload.reshape(header.count, header.dim).astype(np.float32)


def manifest_path(path) -> Path:
    return Path(str(path) + MANIFEST_SUFFIX)


def write_embeddings(path, records) -> None:
    """Write the records' embeddings and their manifest, in the given order."""
    records = list(records)
    if not records:
        raise ValidationError("no records to write")
    dims = {np.asarray(r.embedding).shape for r in records}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError(f"records must share one 1-D embedding shape, got {sorted(dims)}")
    for r in records:
        if r.view_index not in VIEWS:
            raise ValidationError(f"view index {r.view_index} outside 1..5")
    matrix = np.stack([np.asarray(r.embedding, dtype=np.float32) for r in records])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for i, r in enumerate(records):
        writer.writerow([r.patient_id, r.polyp_id, r.view_index, i])
    atomic_write_bytes(path, encode_embeddings(matrix))
    atomic_write_text(manifest_path(path), buf.getvalue())


def read_manifest(path, count: int):
    mpath = manifest_path(path)
    try:
        text = mpath.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read manifest {mpath}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != MANIFEST_FIELDS:
        raise FormatError(f"{mpath}: header must be {','.join(MANIFEST_FIELDS)}")
    rows = rows[1:]
    if len(rows) != count:
        raise FormatError(f"{mpath}: expected {count} rows, got {len(rows)}")
    out, seen = [], set()
    for lineno, row in enumerate(rows, 2):
        if len(row) != 4:
            raise FormatError(f"{mpath} line {lineno}: expected 4 fields, got {len(row)}")
        try:
            view, offset = int(row[2]), int(row[3])
        except ValueError as exc:
            raise FormatError(f"{mpath} line {lineno}: non-integer view or row") from exc
        if view not in VIEWS:
            raise FormatError(f"{mpath} line {lineno}: view index {view} outside 1..5")
        if not 0 <= offset < count or offset in seen:
            raise FormatError(f"{mpath} line {lineno}: row offset {offset} invalid or repeated")
        seen.add(offset)
        out.append((row[0], row[1], view, offset))
    return out


def read_embeddings(path, expected_dim: int | None = None) -> list[InstanceRecord]:
    """Records in manifest order; ``expected_dim`` guards against a preset mismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    matrix = decode_embeddings(data)
    if expected_dim is not None and matrix.shape[1] != expected_dim:
        raise ShapeError(f"{path}: embedding dim {matrix.shape[1]} does not match the "
                         f"configured input dim {expected_dim}")
    return [InstanceRecord(p, k, v, matrix[row].copy()) for p, k, v, row in read_manifest(path, len(matrix))]


# ----------------------------------------------------------------------------
# checkpoints


def _zip_bytes(entries: dict) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])
    return buf.getvalue()


def _npy_bytes(a) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def _npy_load(raw: bytes, name: str) -> np.ndarray:
    try:
        return np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)
    except (ValueError, OSError, EOFError, TypeError, SyntaxError) as exc:
        raise FormatError(f"checkpoint entry {name}: {exc}") from exc


def checkpoint_bytes(model) -> bytes:
    """Serialize an :class:`MIVModel` or a :class:`ProjectionHead`."""
    if isinstance(model, MIVModel):
        meta = {"kind": "miv", "attention": {"kind": model.config.kind, "heads": model.config.heads,
                                             "model_dim": model.config.model_dim},
                "input_dim": model.input_dim, "hidden": model.hidden,
                "head_hidden": model.head_hidden, "dropout": model.dropout}
    elif isinstance(model, ProjectionHead):
        meta = {"kind": "projection", "input_dim": model.input_dim, "hidden": model.hidden,
                "out_dim": model.out_dim}
    else:
        raise ValidationError(f"cannot checkpoint a {type(model).__name__}")
    p = model.params
    meta.update({"format": "miv-checkpoint", "version": CHECKPOINT_VERSION,
                 "slots": {k: list(v.shape) for k, v in p.items()},
                 "bn_momentum": model.bn.momentum, "meta": model.meta})
    entries = {f"params/{k}.npy": _npy_bytes(v) for k, v in p.items()}
    entries["running/mean.npy"] = _npy_bytes(model.bn.mean)
    entries["running/var.npy"] = _npy_bytes(model.bn.var)
    entries["meta.json"] = dumps_json(meta).encode("utf-8")
    return _zip_bytes(entries)


def save_checkpoint(path, model) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def _skeleton(meta: dict):
    try:
        if meta["kind"] == "miv":
            a = meta["attention"]
            cfg = AttentionConfig(a["kind"], int(a["heads"]), int(a["model_dim"]))
            return init_model(int(meta["input_dim"]), cfg, 0, int(meta["hidden"]),
                              int(meta["head_hidden"]), float(meta["dropout"]))
        if meta["kind"] == "projection":
            return init_projection_head(int(meta["input_dim"]), 0, int(meta["hidden"]),
                                        int(meta["out_dim"]))
    except KeyError as exc:
        raise FormatError(f"checkpoint metadata incomplete: missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise FormatError(f"checkpoint metadata malformed: {exc}") from exc
    raise ValidationError(f"unknown checkpoint kind {meta.get('kind')!r}")


def load_checkpoint_bytes(data: bytes, expected: AttentionConfig | None = None):
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
        entries = {n: zf.read(n) for n in zf.namelist()}
    except (zipfile.BadZipFile, OSError, EOFError, ValueError, RuntimeError, NotImplementedError,
            struct.error, zlib.error) as exc:
        # zipfile reports corrupt headers through a wide range of exception types
        raise FormatError(f"not a checkpoint container: {exc}") from exc
    if "meta.json" not in entries:
        raise FormatError("checkpoint has no meta.json entry")
    try:
        meta = json.loads(entries.pop("meta.json"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"checkpoint meta.json is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict) or meta.get("format") != "miv-checkpoint":
        raise FormatError("checkpoint meta.json lacks the miv-checkpoint format tag")
    version = meta.get("version")
    if not isinstance(version, int) or version < 1:
        raise FormatError(f"invalid checkpoint version {version!r}")
    if version > CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}")
    model = _skeleton(meta)
    if expected is not None:
        got = getattr(model, "config", None)
        if got != expected:
            raise ConfigError(f"checkpoint holds {got.label if got else 'a projection head'}, "
                              f"expected {expected.label}")
    p = model.params
    stored = {n[len("params/"):-len(".npy")] for n in entries if n.startswith("params/")}
    unknown = sorted(stored - set(p.values))
    missing = sorted(set(p.values) - stored)
    if unknown:
        raise ValidationError(f"checkpoint has unknown parameter slots {unknown}")
    if missing:
        raise ValidationError(f"checkpoint is missing parameter slots {missing}")
    for name in p.values:
        arr = _npy_load(entries[f"params/{name}.npy"], name)
        if arr.shape != p.values[name].shape:
            raise ValidationError(f"slot {name}: stored shape {arr.shape} != expected "
                                  f"{p.values[name].shape}")
        p.values[name][...] = arr
    for stat in ("mean", "var"):
        key = f"running/{stat}.npy"
        if key not in entries:
            raise FormatError(f"checkpoint is missing {key}")
        arr = _npy_load(entries[key], key)
        if arr.shape != getattr(model.bn, stat).shape:
            raise ValidationError(f"running {stat}: stored shape {arr.shape} mismatched")
        getattr(model.bn, stat)[...] = arr
    try:
        model.bn.momentum = float(meta.get("bn_momentum", model.bn.momentum))
        model.meta = dict(meta.get("meta") or {})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata malformed: {exc}") from exc
    return model


def load_checkpoint(path, expected: AttentionConfig | None = None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return load_checkpoint_bytes(data, expected)


# ----------------------------------------------------------------------------
# run configuration


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}

RUN_CONFIG_SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "data": _obj({
        "source": {"enum": ["synthetic", "file"]},
        "path": {"type": "string"},
        "input_dim": _POS_INT,
        "pretrained_head": {"type": "string"},
        "synthetic": _obj({
            "n_patients": _POS_INT,
            "polyp_probs": {"type": "array", "items": _PROB, "minItems": 5, "maxItems": 5},
            "five_plus_mean": {"type": "number", "minimum": 5},
            "latent_dim": _POS_INT,
            "view_noise": {"type": "number", "minimum": 0},
            "partial_corruption": _PROB,
            "distractor_fraction": _PROB,
            "patient_share": _PROB,
        }),
    }),
    "split": _obj({
        "test_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "k": _POS_INT,
        "policy": {"enum": ["one-per-polyp", "all-three"]},
        "negative_ratio": {"type": "number", "exclusiveMinimum": 0},
    }),
    "grid": {"oneOf": [
        {"const": "default"},
        {"type": "array", "minItems": 1, "items": _obj(
            {"kind": {"enum": list(KINDS)}, "heads": _POS_INT}, ["kind"])},
    ]},
    "model": _obj({
        "hidden": _POS_INT, "head_hidden": _POS_INT, "model_dim": _POS_INT,
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    }),
    "train": _obj({
        "epochs": {"type": "integer", "minimum": 1, "maximum": 50},
        "lr0": _NUM, "patience": _POS_INT, "batch_size": {"type": "integer", "minimum": 2},
        "threshold": _PROB, "lr_factor": _NUM, "lr_patience": _POS_INT, "min_lr": _NUM,
        "min_delta": _NUM,
        "folds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    }),
    "simclr": _obj({
        "backbone": {"type": "string"},
        "n_sources": _POS_INT,
        "optimizer": {"enum": ["lars", "adamw"]},
        "base_lr": _NUM, "weight_decay": _NUM, "momentum": _NUM, "trust_eta": _NUM,
        "warmup_epochs": {"type": "integer", "minimum": 0},
        "total_epochs": {"type": "integer", "minimum": 1, "maximum": 200},
        "min_lr": _NUM, "batch_size": {"type": "integer", "minimum": 2},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "patience": _POS_INT, "min_delta": _NUM,
        "jitter": {"type": "number", "minimum": 0},
        "mask_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "scale_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "hidden": _POS_INT, "out_dim": _POS_INT,
    }),
})

# named sub-seed streams derived from the master seed
SEED_STREAMS = {"synth": 1, "split": 2, "exemplars": 3, "train": 4, "pretrain": 5}


def validate_run_config(doc) -> dict:
    """Schema-check a run config document; raises :class:`ConfigError` on the first problem."""
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"run config invalid at {where}: {exc.message}") from None
    return doc


def load_run_config(path) -> dict:
    return validate_run_config(read_json(path))


@dataclass
class RunLog:
    """Wall-clock information kept out of the byte-stable results document."""

    entries: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return dumps_json(self.entries)


def save_split(path, plan: SplitPlan) -> None:
    write_json(path, {"format": "miv-split", "version": 1, **plan.to_dict()})


def load_split(path) -> SplitPlan:
    d = read_json(path)
    if not isinstance(d, dict) or d.get("format") != "miv-split":
        raise FormatError(f"{path}: not a split plan document")
    if d.get("version", 0) > 1:
        raise UnsupportedVersionError(f"{path}: split plan version {d['version']} unsupported")
    try:
        return SplitPlan.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed split plan ({exc})") from exc


def simclr_config_from(doc: dict) -> SimCLRConfig:
    doc = dict(doc)
    backbone = doc.pop("backbone", "resnet50")
    doc.pop("n_sources", None)
    if "scale_range" in doc:
        doc["scale_range"] = tuple(doc["scale_range"])
    return SimCLRConfig.for_backbone(backbone, **doc)


# ----------------------------------------------------------------------------
# results


def results_document(results, seeds: dict, run_config: dict | None = None) -> dict:
    """JSON-ready summary of a grid run: per-fold, across-fold and test metrics.

    Contains nothing time-dependent, so identical runs give identical bytes.
    """
    configs = []
    for r in results:
        configs.append({
            "label": r.config.label,
            "attention": {"kind": r.config.kind, "heads": r.config.heads,
                          "model_dim": r.config.model_dim},
            "folds": [f.to_dict() for f in r.folds],
            "summary": r.summary(),
            "selected_fold": r.folds[r.best_fold].fold,
            "test": r.test.to_dict() if r.test else None,
        })
    return {"format": "miv-results", "version": RESULTS_VERSION, "artifact_version": __version__,
            "seeds": seeds, "run_config": run_config, "configs": configs}
