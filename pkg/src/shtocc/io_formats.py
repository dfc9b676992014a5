"""Binary and text formats: SHTV grids, checkpoints, raw labels, logs and reports.

SHTV layout (little-endian)::

    magic  b"SHTV"
    u32    version (1)
    u32    kind      0 = labels, 1 = features, 2 = sparse
    u32 x3 h, w, d
    u32    C (labels) or C2 (features / sparse)
    -- labels:   h*w*d  u16
    -- features: h*w*d*C2  f64
    -- sparse:   u32 N, then N * (u32 x, u32 y, u32 z, C2 * f64)

Checkpoint layout::

    magic  b"SHTC", u32 version, u32 section count
    per section: u16 name length, name (utf-8), u64 payload length, payload

The ``meta`` section is UTF-8 JSON; every parameter group is its own section
holding ``u16 name length, name, u32 ndim, u32 shape[ndim], f64 data`` per array.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, ShtoccError
from .metrics import MetricsReport
from .tail import ClassTaxonomy
from .toynet import GROUPS, Arch, ToyDecoderParams
from .voxel_core import DenseFeatureGrid, DenseLabelGrid, GridDims, SparseVoxelSet

SHTV_MAGIC = b"SHTV"
SHTV_VERSION = 1
CKPT_MAGIC = b"SHTC"
CKPT_VERSION = 1
KIND_LABELS, KIND_FEATURES, KIND_SPARSE = 0, 1, 2
_HEADER = struct.Struct("<4sIIIIII")


class ParseError(ShtoccError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(ParseError):
    pass


class VersionError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).copy()

    def finish(self):
        if self.pos != len(self.data):
            raise ParseError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


# ---------------------------------------------------------------- SHTV

def encode_shtv(value: DenseLabelGrid | DenseFeatureGrid | SparseVoxelSet) -> bytes:
    dims = value.dims
    if isinstance(value, DenseLabelGrid):
        if value.num_classes > 65536:
            raise DataError("labels are stored as u16; at most 65536 classes")
        head = _HEADER.pack(SHTV_MAGIC, SHTV_VERSION, KIND_LABELS, *dims.as_tuple(), value.num_classes)
        return head + value.labels.astype("<u2").tobytes()
    if isinstance(value, DenseFeatureGrid):
        head = _HEADER.pack(SHTV_MAGIC, SHTV_VERSION, KIND_FEATURES, *dims.as_tuple(), value.channels)
        return head + value.values.astype("<f8").tobytes()
    if isinstance(value, SparseVoxelSet):
        head = _HEADER.pack(SHTV_MAGIC, SHTV_VERSION, KIND_SPARSE, *dims.as_tuple(), value.channels)
        rec = np.dtype([("c", "<u4", (3,)), ("f", "<f8", (value.channels,))])
        body = np.empty(len(value), dtype=rec)
        body["c"] = value.coords
        body["f"] = value.features
        return head + struct.pack("<I", len(value)) + body.tobytes()
    raise TypeError(f"cannot encode {type(value).__name__} as SHTV")


def decode_shtv(data: bytes):
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != SHTV_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {SHTV_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != SHTV_VERSION:
        raise VersionError(f"unsupported SHTV version {version}", 4)
    kind, h, w, d, ch = r.unpack("<IIIII", "header")
    if 0 in (h, w, d):
        raise ParseError(f"zero grid dimension {(h, w, d)}", 12)
    dims = GridDims(h, w, d)
    if kind == KIND_LABELS:
        labels = r.array("<u2", dims.size, "label payload")
        r.finish()
        if labels.size and labels.max() >= ch:
            raise ParseError(f"label {int(labels.max())} >= class count {ch}", _HEADER.size)
        return DenseLabelGrid(dims, labels.astype(np.int64), ch)
    if kind == KIND_FEATURES:
        vals = r.array("<f8", dims.size * ch, "feature payload")
        r.finish()
        return DenseFeatureGrid(dims, vals.reshape(dims.size, ch))
    if kind == KIND_SPARSE:
        (n,) = r.unpack("<I", "entry count")
        rec = np.dtype([("c", "<u4", (3,)), ("f", "<f8", (ch,))])
        body = np.frombuffer(r.take(rec.itemsize * n, "sparse entries"), dtype=rec)
        r.finish()
        return SparseVoxelSet(dims, body["c"].astype(np.int64), body["f"].astype(np.float64), channels=ch)
    raise ParseError(f"unknown payload kind {kind}", 8)


def write_shtv(value, path) -> None:
    Path(path).write_bytes(encode_shtv(value))


def read_shtv(path):
    return decode_shtv(Path(path).read_bytes())


# ---------------------------------------------------------------- raw labels

def import_raw_labels(path, dims: GridDims, remap: Mapping[int, int] | None = None,
                      drop_unknown: bool = False, num_classes: int | None = None) -> DenseLabelGrid:
    """Read a headerless u16 little-endian label volume and remap its ids."""
    raw = Path(path).read_bytes()
    expected = dims.size * 2
    if len(raw) != expected:
        raise TruncatedError(f"raw label file has {len(raw)} bytes, expected {expected}", min(len(raw), expected))
    ids = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    if remap is not None:
        lut = np.full(int(max(ids.max(initial=0), max(remap, default=0))) + 1, -1, dtype=np.int64)
        for src, dst in remap.items():
            lut[int(src)] = int(dst)
        ids = lut[ids]
        if (ids < 0).any():
            if not drop_unknown:
                bad = sorted(set(np.frombuffer(raw, dtype="<u2")[ids < 0].tolist()))
                raise DataError(f"label ids without a mapping: {bad}")
            ids[ids < 0] = 0
    C = num_classes or int(ids.max(initial=0)) + 1
    return DenseLabelGrid(dims, ids, max(C, 1))


def write_raw_labels(grid: DenseLabelGrid, path) -> None:
    Path(path).write_bytes(grid.labels.astype("<u2").tobytes())


# ---------------------------------------------------------------- checkpoints

def _pack_group(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.write(a.tobytes())
    return out.getvalue()


def _unpack_group(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload)
    out = {}
    while r.pos < len(payload):
        (ln,) = r.unpack("<H", "array name length")
        name = r.take(ln, "array name").decode()
        (ndim,) = r.unpack("<I", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        out[name] = r.array("<f8", count, f"array {name}").reshape(shape).astype(np.float64)
    return out


def encode_sections(sections: Mapping[str, bytes]) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(sections)))
    for name, payload in sections.items():
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload)
    return out.getvalue()


def decode_sections(data: bytes) -> dict[str, bytes]:
    """Raw section payloads keyed by name, in file order."""
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", 4)
    (count,) = r.unpack("<I", "section count")
    sections = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "section name length")
        name = r.take(ln, "section name").decode()
        (size,) = r.unpack("<Q", "section length")
        sections[name] = r.take(size, f"section {name}")
    r.finish()
    return sections


def encode_checkpoint(params: ToyDecoderParams, extra_meta: Mapping | None = None) -> bytes:
    meta = {"arch": vars(params.arch), "freeze_mask": params.freeze_mask}
    if extra_meta:
        meta.update(extra_meta)
    sections = {"meta": json.dumps(meta, sort_keys=True).encode()}
    for g in GROUPS:
        sections[g] = _pack_group(params.groups[g])
    return encode_sections(sections)


def decode_checkpoint(data: bytes) -> tuple[ToyDecoderParams, dict]:
    sections = decode_sections(data)
    if "meta" not in sections:
        raise ParseError("checkpoint has no meta section", 12)
    meta = json.loads(sections["meta"].decode())
    missing = [g for g in GROUPS if g not in sections]
    if missing:
        raise ParseError(f"checkpoint is missing sections {missing}", 12)
    params = ToyDecoderParams(
        Arch(**meta["arch"]),
        {g: _unpack_group(sections[g]) for g in GROUPS},
        {g: bool(meta["freeze_mask"][g]) for g in GROUPS},
    )
    return params, meta


def write_checkpoint(params: ToyDecoderParams, path, extra_meta: Mapping | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, extra_meta))


def read_checkpoint(path) -> tuple[ToyDecoderParams, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def taxonomy_to_meta(tax: ClassTaxonomy) -> dict:
    return {
        "num_classes": tax.num_classes,
        "names": list(tax.names),
        "frequencies": [float(f) for f in tax.frequencies],
        "tail_set": sorted(tax.tail_set),
        "head_set": sorted(tax.head_set),
    }


def taxonomy_from_meta(meta: Mapping) -> ClassTaxonomy:
    return ClassTaxonomy(
        int(meta["num_classes"]), tuple(meta["names"]), np.asarray(meta["frequencies"]),
        frozenset(meta["tail_set"]), frozenset(meta["head_set"]),
    )


# ---------------------------------------------------------------- logs and reports

def write_jsonl(records: Iterable[Mapping], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _g6(x) -> str:
    return "" if x is None else f"{x:.6f}"


def report_to_dict(report: MetricsReport, include_timing: bool = False) -> dict:
    """Stable JSON layout for a metrics report.

    Keys: ``miou``, ``head_miou``, ``tail_miou``, ``nonempty_fraction``,
    ``selected_fraction``, ``unique_selected`` and ``classes`` (a list of
    ``{class_id, name, iou, group}``). Wall times only on request, so that
    reruns stay byte-identical.
    """
    out = {
        "miou": report.miou,
        "head_miou": report.head_miou,
        "tail_miou": report.tail_miou,
        "nonempty_fraction": report.nonempty_fraction,
        "selected_fraction": report.selected_fraction,
        "unique_selected": report.unique_selected,
        "classes": [
            {"class_id": k, "name": report.class_names.get(k, f"class_{k}"),
             "iou": report.per_class_iou[k], "group": report.groups.get(k, "")}
            for k in sorted(report.per_class_iou)
        ],
    }
    if include_timing:
        out["wall_times"] = dict(report.wall_times)
    return out


def write_metrics_json(report: MetricsReport, path, include_timing: bool = False) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report, include_timing), indent=2, sort_keys=True) + "\n")


def write_per_class_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "name", "iou", "group"])
        for k in sorted(report.per_class_iou):
            w.writerow([k, report.class_names.get(k, f"class_{k}"), _g6(report.per_class_iou[k]),
                        report.groups.get(k, "")])


def table_csv_text(rows: list[Mapping], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_g6(row[c]) if isinstance(row[c], float) or row[c] is None else row[c] for c in columns])
    return buf.getvalue()


def write_table_csv(rows: list[Mapping], columns: list[str], path) -> None:
    Path(path).write_text(table_csv_text(rows, columns))
