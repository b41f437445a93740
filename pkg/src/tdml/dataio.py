"""Datasets, synthetic cluster generation, and all file formats.

Embedding files (magic ``TDML``) are little-endian throughout: version
u32, dim u32, record count u64, a label table (u32 count, then u32 byte
length + UTF-8 per label), then per record a u32 label index, u16 id byte
length + UTF-8 id, and dim IEEE-754 32-bit floats. Values are stored in
32 bits; everything downstream computes in 64.

Checkpoints (magic ``TDCK``) are a version-tagged section container:
section count u32, then per section a u16 name length + UTF-8 name, u64
payload length, payload. Sections: ``config`` (model config as JSON),
``params`` (named float64 arrays), optional ``pca``. Every parser
consumes its byte budget exactly; anything else is a format error
carrying the absolute byte offset.

Writes go to a temp file in the target directory followed by an atomic
rename, so readers never observe a half-written file.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, FormatError, InvalidArgumentError
from .model import ModelConfig, ParamSet
from .reduction import PcaModel

MAGIC_EMBEDDINGS = b"TDML"
MAGIC_CHECKPOINT = b"TDCK"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Record:
    """One sample: string id, string label, vector (1-D) or map (H x W x C) payload."""

    id: str
    label: str
    payload: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "label", str(self.label))
        payload = np.asarray(self.payload, dtype=np.float64)
        if payload.ndim not in (1, 3) or payload.size == 0:
            raise InvalidArgumentError(
                f"record {self.id!r}: payload must be a non-empty vector or H x W x C map, "
                f"got shape {payload.shape}"
            )
        if not np.all(np.isfinite(payload)):
            raise InvalidArgumentError(f"record {self.id!r}: payload has non-finite entries")
        object.__setattr__(self, "payload", payload)


@dataclass
class Dataset:
    """A list of records with unique ids and one payload kind throughout."""

    records: list[Record]
    split: str = ""

    def __post_init__(self):
        if not self.records:
            raise InvalidArgumentError("dataset must contain at least one record")
        seen: set[str] = set()
        first = self.records[0].payload
        for rec in self.records:
            if rec.id in seen:
                raise InvalidArgumentError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.payload.ndim != first.ndim:
                raise InvalidArgumentError(
                    f"record {rec.id!r}: payload kind differs from the rest of the dataset"
                )
            if rec.payload.ndim == 1 and rec.payload.shape != first.shape:
                raise InvalidArgumentError(
                    f"record {rec.id!r}: vector length {rec.payload.shape[0]} "
                    f"!= {first.shape[0]}"
                )
            if rec.payload.ndim == 3 and rec.payload.shape[2] != first.shape[2]:
                raise InvalidArgumentError(
                    f"record {rec.id!r}: channel count {rec.payload.shape[2]} "
                    f"!= {first.shape[2]}"
                )

    def __len__(self):
        return len(self.records)

    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def label_set(self) -> set[str]:
        return {r.label for r in self.records}

    def triples(self) -> list[tuple[str, str, np.ndarray]]:
        return [(r.id, r.label, r.payload) for r in self.records]


def generate_clusters(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    spread: float,
    seed: int,
    split_fraction: float = 0.5,
) -> tuple[Dataset, Dataset]:
    """Synthesize Gaussian class clusters and split them per class.

    Class centers sit on a radius-``separation`` sphere (uniform random
    directions); samples add isotropic noise with standard deviation
    ``spread``. Draw order is fixed (centers first, then samples class by
    class), so one seed always produces the same two datasets. The first
    round(per_class * split_fraction) samples of each class go to train,
    the rest to test.
    """
    if num_classes < 2:
        raise InvalidArgumentError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 2:
        raise InvalidArgumentError(f"per_class must be >= 2, got {per_class}")
    if dim < 1:
        raise InvalidArgumentError(f"dim must be >= 1, got {dim}")
    if separation < 0 or spread < 0:
        raise InvalidArgumentError("separation and spread must be >= 0")
    if not 0.0 < split_fraction < 1.0:
        raise InvalidArgumentError(f"split_fraction must be in (0, 1), got {split_fraction}")
    n_train = int(round(per_class * split_fraction))
    if not 1 <= n_train <= per_class - 1:
        raise InvalidArgumentError(
            f"split_fraction {split_fraction} with per_class {per_class} leaves an empty split"
        )

    rng = np.random.default_rng(seed)
    centers = np.empty((num_classes, dim))
    for c in range(num_classes):
        v = rng.standard_normal(dim)
        while float(np.linalg.norm(v)) <= 1e-12:
            v = rng.standard_normal(dim)
        centers[c] = v / np.linalg.norm(v) * separation

    train: list[Record] = []
    test: list[Record] = []
    for c in range(num_classes):
        label = f"c{c:02d}"
        for i in range(per_class):
            vec = centers[c] + spread * rng.standard_normal(dim)
            rec = Record(id=f"{label}-{i:04d}", label=label, payload=vec)
            (train if i < n_train else test).append(rec)
    return Dataset(train, split="train"), Dataset(test, split="test")


# ---------------------------------------------------------------------------
# binary plumbing


class _Reader:
    def __init__(self, data: bytes, what: str, base: int = 0, error_cls=FormatError):
        self.data = data
        self.pos = 0
        self.what = what
        self.base = base  # absolute offset of data[0] in the enclosing file
        self.error_cls = error_cls

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.data):
            raise self.error_cls(
                f"{self.what}: truncated while reading {context}", offset=self.base + self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str, context: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, context))[0]

    def u8(self, context: str) -> int:
        return self._unpack("<B", context)

    def u16(self, context: str) -> int:
        return self._unpack("<H", context)

    def u32(self, context: str) -> int:
        return self._unpack("<I", context)

    def u64(self, context: str) -> int:
        return self._unpack("<Q", context)

    def utf8(self, length: int, context: str) -> str:
        start = self.base + self.pos
        raw = self.take(length, context)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.error_cls(
                f"{self.what}: invalid UTF-8 in {context}", offset=start
            ) from exc

    def floats(self, count: int, dtype: str, context: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(itemsize * count, context)
        return np.frombuffer(raw, dtype=dtype).copy()

    def expect_end(self, context: str):
        if self.pos != len(self.data):
            raise self.error_cls(
                f"{self.what}: {len(self.data) - self.pos} unexpected trailing bytes "
                f"after {context}",
                offset=self.base + self.pos,
            )


def _u16(x: int) -> bytes:
    return struct.pack("<H", x)


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tdml-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# embedding files


def write_embeddings(path, records):
    """Write (id, label, vector) triples to a TDML file.

    Vectors are stored as 32-bit floats; a value that overflows 32 bits is
    rejected rather than silently saturated.
    """
    rows = [(str(r), str(l), np.asarray(v, dtype=np.float64)) for r, l, v in records]
    if not rows:
        raise InvalidArgumentError("refusing to write an embedding file with zero records")
    dim = rows[0][2].shape[0] if rows[0][2].ndim == 1 else -1
    seen: set[str] = set()
    labels: list[str] = []
    label_index: dict[str, int] = {}
    for rid, label, vec in rows:
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise InvalidArgumentError(
                f"record {rid!r}: expected 1-D vector of length {dim}, got shape {vec.shape}"
            )
        if rid in seen:
            raise InvalidArgumentError(f"duplicate record id {rid!r}")
        seen.add(rid)
        if label not in label_index:
            label_index[label] = len(labels)
            labels.append(label)

    buf = bytearray(MAGIC_EMBEDDINGS)
    buf += _u32(FORMAT_VERSION)
    buf += _u32(dim)
    buf += _u64(len(rows))
    buf += _u32(len(labels))
    for label in labels:
        raw = label.encode("utf-8")
        buf += _u32(len(raw)) + raw
    for rid, label, vec in rows:
        with np.errstate(over="ignore"):  # overflow is rejected just below
            as32 = vec.astype("<f4")
        if not np.all(np.isfinite(as32)):
            raise InvalidArgumentError(
                f"record {rid!r}: values do not fit 32-bit floats without overflow"
            )
        idb = rid.encode("utf-8")
        if len(idb) > 0xFFFF:
            raise InvalidArgumentError(f"record id {rid!r} exceeds 65535 UTF-8 bytes")
        buf += _u32(label_index[label]) + _u16(len(idb)) + idb + as32.tobytes()
    _atomic_write(path, bytes(buf))


def read_embeddings(path) -> list[tuple[str, str, np.ndarray]]:
    """Read a TDML file back into (id, label, float64 vector) triples."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, os.fspath(path))
    if r.take(4, "magic") != MAGIC_EMBEDDINGS:
        raise FormatError(f"{r.what}: bad magic, not an embedding file", offset=0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}", offset=4)
    dim = r.u32("dim")
    count = r.u64("record count")
    n_labels = r.u32("label table size")
    labels = [r.utf8(r.u32("label length"), "label") for _ in range(n_labels)]
    out: list[tuple[str, str, np.ndarray]] = []
    for i in range(count):
        li_offset = r.pos
        li = r.u32(f"label index of record {i}")
        if li >= n_labels:
            raise FormatError(
                f"{r.what}: record {i} label index {li} out of range ({n_labels} labels)",
                offset=li_offset,
            )
        rid = r.utf8(r.u16(f"id length of record {i}"), f"id of record {i}")
        vec = r.floats(dim, "<f4", f"values of record {i}")
        out.append((rid, labels[li], vec.astype(np.float64)))
    r.expect_end("last record")
    return out


def import_csv(path) -> list[tuple[str, str, np.ndarray]]:
    """Read `id,label,f0..f{d-1}` rows; errors name the 1-based line."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row") from None
        if len(header) < 3 or header[0] != "id" or header[1] != "label":
            raise FormatError(f"{path}: line 1: header must start with id,label,f0,...")
        expected = [f"f{i}" for i in range(len(header) - 2)]
        if header[2:] != expected:
            raise FormatError(
                f"{path}: line 1: feature columns must be f0..f{len(header) - 3} in order"
            )
        dim = len(header) - 2
        out: list[tuple[str, str, np.ndarray]] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise FormatError(
                    f"{path}: line {lineno}: expected {dim + 2} columns, got {len(row)}"
                )
            rid = row[0]
            if rid in seen:
                raise FormatError(f"{path}: line {lineno}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                values = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric feature value") from None
            if not np.all(np.isfinite(values)):
                raise FormatError(f"{path}: line {lineno}: non-finite feature value")
            out.append((rid, row[1], values))
    if not out:
        raise FormatError(f"{path}: no data rows")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_json(config: ModelConfig) -> bytes:
    payload = {
        "input_kind": config.input_kind,
        "input_dim": config.input_dim,
        "in_channels": config.in_channels,
        "conv_channels": config.conv_channels,
        "dense_dims": list(config.dense_dims),
        "fc_reduction": config.fc_reduction,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _config_from_json(raw: bytes, what: str, offset: int) -> ModelConfig:
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{what}: config section is not valid JSON", offset=offset) from exc
    keys = {
        "input_kind",
        "input_dim",
        "in_channels",
        "conv_channels",
        "dense_dims",
        "fc_reduction",
    }
    if not isinstance(payload, dict) or set(payload) != keys:
        raise CheckpointError(f"{what}: config section has unexpected fields", offset=offset)
    try:
        return ModelConfig(
            input_kind=payload["input_kind"],
            input_dim=payload["input_dim"],
            in_channels=payload["in_channels"],
            conv_channels=payload["conv_channels"],
            dense_dims=tuple(payload["dense_dims"]),
            fc_reduction=payload["fc_reduction"],
        )
    except (InvalidArgumentError, TypeError) as exc:
        raise CheckpointError(f"{what}: config section invalid: {exc}", offset=offset) from exc


def _params_to_bytes(params: ParamSet) -> bytes:
    buf = bytearray(_u32(len(params.arrays)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf += _u16(len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += _u32(d)
        buf += arr.astype("<f8").tobytes()
    return bytes(buf)


def _params_from_reader(r: _Reader, config: ModelConfig, what: str) -> ParamSet:
    count = r.u32("parameter count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.utf8(r.u16("parameter name length"), "parameter name")
        ndim = r.u8(f"ndim of {name}")
        shape = tuple(r.u32(f"dim of {name}") for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = r.floats(size, "<f8", f"values of {name}").reshape(shape)
    try:
        return ParamSet(config, arrays)
    except InvalidArgumentError as exc:
        raise CheckpointError(f"{what}: parameters inconsistent with config: {exc}") from exc


def _pca_to_bytes(model: PcaModel) -> bytes:
    buf = bytearray(_u32(model.input_dim) + _u32(model.output_dim))
    buf += model.mean.astype("<f8").tobytes()
    buf += model.eigenvalues.astype("<f8").tobytes()
    buf += model.components.astype("<f8").tobytes()
    return bytes(buf)


def _pca_from_reader(r: _Reader, what: str) -> PcaModel:
    d = r.u32("pca input dim")
    k = r.u32("pca output dim")
    mean = r.floats(d, "<f8", "pca mean")
    eigenvalues = r.floats(k, "<f8", "pca eigenvalues")
    components = r.floats(k * d, "<f8", "pca components").reshape(k, d)
    try:
        return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)
    except InvalidArgumentError as exc:
        raise CheckpointError(f"{what}: pca section invalid: {exc}") from exc


def save_checkpoint(path, config: ModelConfig, params: ParamSet, pca: PcaModel | None = None):
    """Persist a model (and optional PCA) to a TDCK container."""
    if params.config != config:
        raise InvalidArgumentError("params were built for a different model config")
    sections: list[tuple[str, bytes]] = [
        ("config", _config_to_json(config)),
        ("params", _params_to_bytes(params)),
    ]
    if pca is not None:
        sections.append(("pca", _pca_to_bytes(pca)))
    buf = bytearray(MAGIC_CHECKPOINT)
    buf += _u32(FORMAT_VERSION)
    buf += _u32(len(sections))
    for name, payload in sections:
        raw = name.encode("utf-8")
        buf += _u16(len(raw)) + raw
        buf += _u64(len(payload)) + payload
    _atomic_write(path, bytes(buf))


def load_checkpoint(path) -> tuple[ModelConfig, ParamSet, PcaModel | None]:
    """Load a TDCK container; every section must parse to exhaustion."""
    with open(path, "rb") as f:
        data = f.read()
    what = os.fspath(path)
    r = _Reader(data, what, error_cls=CheckpointError)
    if r.take(4, "magic") != MAGIC_CHECKPOINT:
        raise CheckpointError(f"{what}: bad magic, not a checkpoint", offset=0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{what}: unsupported version {version}", offset=4)
    n_sections = r.u32("section count")
    sections: dict[str, tuple[bytes, int]] = {}
    for _ in range(n_sections):
        name = r.utf8(r.u16("section name length"), "section name")
        length = r.u64(f"length of section {name}")
        offset = r.pos
        payload = r.take(length, f"payload of section {name}")
        if name in sections:
            raise CheckpointError(f"{what}: duplicate section {name!r}", offset=offset)
        if name not in ("config", "params", "pca"):
            raise CheckpointError(f"{what}: unknown section {name!r}", offset=offset)
        sections[name] = (payload, offset)
    r.expect_end("last section")
    for required in ("config", "params"):
        if required not in sections:
            raise CheckpointError(f"{what}: missing required section {required!r}")

    cfg_raw, cfg_off = sections["config"]
    config = _config_from_json(cfg_raw, what, cfg_off)

    p_raw, p_off = sections["params"]
    pr = _Reader(p_raw, what, base=p_off, error_cls=CheckpointError)
    params = _params_from_reader(pr, config, what)
    if pr.pos != len(p_raw):
        raise CheckpointError(
            f"{what}: params section has {len(p_raw) - pr.pos} unread bytes",
            offset=p_off + pr.pos,
        )

    pca = None
    if "pca" in sections:
        pca_raw, pca_off = sections["pca"]
        xr = _Reader(pca_raw, what, base=pca_off, error_cls=CheckpointError)
        pca = _pca_from_reader(xr, what)
        if xr.pos != len(pca_raw):
            raise CheckpointError(
                f"{what}: pca section has {len(pca_raw) - xr.pos} unread bytes",
                offset=pca_off + xr.pos,
            )
    return config, params, pca
