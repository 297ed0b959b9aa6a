"""Dataset containers, the RFSD file format, splits and raw I/Q ingestion.

RFSD layout (all little endian)::

    offset  size  field
    0       4     magic b"RFSD"
    4       4     format version (u32)
    8       4     number of devices C (u32)
    12      4     samples per record (u32)
    16      8     record count (u64)
    24      32    generation config digest
    56      ...   records: label u16, source tag u16, sample_len x (I f32, Q f32)

A JSON sidecar (``<path>.json``) mirrors the header. When present, the
reader requires it to agree with the binary header.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"RFSD"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIQ32s")
RECORD_HEADER_BYTES = 4


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    signals: np.ndarray  # (n, sample_len) complex64
    labels: np.ndarray  # (n,) uint16
    tags: np.ndarray  # (n,) uint16
    num_classes: int
    digest: bytes = bytes(32)
    provenance: str = ""

    def __post_init__(self):
        self.signals = np.ascontiguousarray(self.signals, dtype=np.complex64)
        if self.signals.ndim != 2:
            raise ValueError("signals must be (records, sample_len)")
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        self.tags = np.asarray(self.tags, dtype=np.uint16)
        if not len(self.labels) == len(self.tags) == len(self.signals):
            raise ValueError("signals, labels and tags disagree in length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 bytes")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_len(self) -> int:
        return self.signals.shape[1]

    def subset(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.signals[index], self.labels[index], self.tags[index],
            self.num_classes, self.digest, self.provenance,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.digest == other.digest
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.tags, other.tags)
            and self.signals.shape == other.signals.shape
            and self.signals.tobytes() == other.signals.tobytes()
        )


def _record_dtype(sample_len: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("tag", "<u2"), ("iq", "<f4", (sample_len, 2))])


def file_size(num_records: int, sample_len: int) -> int:
    return HEADER.size + num_records * (RECORD_HEADER_BYTES + 8 * sample_len)


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".json")


def header_dict(dataset: Dataset) -> dict:
    return {
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "num_classes": dataset.num_classes,
        "sample_len": dataset.sample_len,
        "count": len(dataset),
        "config_digest": dataset.digest.hex(),
    }


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    records = np.empty(len(dataset), dtype=_record_dtype(dataset.sample_len))
    records["label"] = dataset.labels
    records["tag"] = dataset.tags
    records["iq"][..., 0] = dataset.signals.real
    records["iq"][..., 1] = dataset.signals.imag
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, dataset.num_classes, dataset.sample_len, len(dataset), dataset.digest
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(records.tobytes())
    meta = header_dict(dataset) | {"provenance": dataset.provenance}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | os.PathLike, check_sidecar: bool = True) -> Dataset:
    raw = Path(path).read_bytes()
    return parse_dataset(raw, _read_sidecar(path) if check_sidecar else None)


def _read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"sidecar {p} is not valid JSON", 0) from e


def parse_dataset(raw: bytes, sidecar: dict | None = None) -> Dataset:
    """Decode an RFSD byte string; ``sidecar`` is the mirrored header, if any."""
    if len(raw) < HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes", len(raw))
    magic, version, num_classes, sample_len, count, digest = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if num_classes < 1 or num_classes > 0xFFFF + 1:
        raise FormatError(f"invalid device count {num_classes}", 8)
    if sample_len < 1:
        raise FormatError("sample length must be positive", 12)
    expected = file_size(count, sample_len)
    if len(raw) < expected:
        rec = RECORD_HEADER_BYTES + 8 * sample_len
        complete = (len(raw) - HEADER.size) // rec
        raise FormatError(
            f"truncated record {complete}: file has {len(raw)} bytes, header implies {expected}",
            HEADER.size + complete * rec,
        )
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after last record", expected)
    if sidecar is not None:
        fields = {
            "magic": (magic.decode("latin-1"), 0),
            "version": (version, 4),
            "num_classes": (num_classes, 8),
            "sample_len": (sample_len, 12),
            "count": (count, 16),
            "config_digest": (digest.hex(), 24),
        }
        for key, (value, offset) in fields.items():
            if sidecar.get(key) != value:
                raise FormatError(f"header field {key}={value!r} disagrees with sidecar", offset)
    records = np.frombuffer(raw, dtype=_record_dtype(sample_len), count=count, offset=HEADER.size)
    labels = records["label"].astype(np.uint16)
    if count and int(labels.max()) >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(
            f"record {bad} label {labels[bad]} >= device count {num_classes}",
            HEADER.size + bad * (RECORD_HEADER_BYTES + 8 * sample_len),
        )
    iq = records["iq"]
    signals = np.empty((count, sample_len), dtype=np.complex64)
    signals.real = iq[..., 0]
    signals.imag = iq[..., 1]
    provenance = sidecar.get("provenance", "") if sidecar else ""
    return Dataset(signals, labels, records["tag"].astype(np.uint16), num_classes, digest, provenance)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (3, 1, 1)
    M: int = 10
    N: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or min(self.ratios) <= 0:
            raise ValueError("ratios must be three positive numbers")
        if self.M < 1 or self.N < 0:
            raise ValueError("M must be >= 1 and N >= 0")


def split_dataset(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified random train/val/test split in ``spec.ratios`` per device."""
    rng = np.random.default_rng([spec.seed, 0x5B])
    total = sum(spec.ratios)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = len(idx) * spec.ratios[0] // total
        n_val = len(idx) * spec.ratios[1] // total
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train : n_train + n_val])
        parts[2].append(idx[n_train + n_val :])
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


@dataclass
class LabeledSet:
    signals: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class UnlabeledSet:
    """Unlabeled samples with stable ids.

    ``hidden_labels`` is kept for diagnostics only; training never reads it.
    """

    signals: np.ndarray
    ids: np.ndarray
    hidden_labels: np.ndarray | None = None

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("unlabeled sample ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)


def select_semisup(train: Dataset, M: int, N: int, seed: int) -> tuple[LabeledSet, UnlabeledSet]:
    """Per device, pick ``M`` labeled examples and ``N`` disjoint unlabeled samples.

    Unlabeled ids are row indices into ``train``.
    """
    rng = np.random.default_rng([seed, 0x55])
    lab, unl = [], []
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.labels == c)
        if M + N > len(idx):
            raise ValueError(f"device {c}: M + N = {M + N} exceeds {len(idx)} training records")
        idx = idx[rng.permutation(len(idx))]
        lab.append(idx[:M])
        unl.append(idx[M : M + N])
    lab_idx = np.concatenate(lab)
    unl_idx = np.sort(np.concatenate(unl))
    labeled = LabeledSet(train.signals[lab_idx], train.labels[lab_idx].astype(np.int64), train.num_classes)
    unlabeled = UnlabeledSet(train.signals[unl_idx], unl_idx.astype(np.int64), train.labels[unl_idx].astype(np.int64))
    return labeled, unlabeled


@dataclass
class BurstLayout:
    """Where bursts sit in a raw capture, in complex-sample offsets.

    ``bursts`` is a list of ``(start, stop, label)`` with ``stop`` exclusive;
    the range should cover the steady-state part of each burst.
    """

    bursts: Sequence[tuple[int, int, int]]
    num_classes: int | None = None

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "BurstLayout":
        d = json.loads(Path(path).read_text())
        return cls([tuple(b) for b in d["bursts"]], d.get("num_classes"))


@dataclass
class IngestReport:
    skipped_bursts: int = 0
    warnings: list[str] = field(default_factory=list)


def read_iq_file(path: str | os.PathLike) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 2:
        raise ValueError(f"{path}: odd number of float32 values, not interleaved I/Q")
    return (raw[0::2] + 1j * raw[1::2]).astype(np.complex64)


def ingest_iq_capture(
    path: str | os.PathLike,
    layout: BurstLayout,
    slice_len: int = 1024,
    slices_per_burst: int = 50,
    rng: np.random.Generator | None = None,
    report: IngestReport | None = None,
) -> Dataset:
    """Slice random fixed-length windows out of each burst of a raw capture.

    Windows start uniformly within the burst and never cross its bounds.
    They may overlap. Bursts shorter than ``slice_len`` are skipped with a
    warning. The source tag of each record is its burst index.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    iq = read_iq_file(path)
    for k, burst in enumerate(layout.bursts):
        if len(burst) != 3:
            raise ValueError(f"burst {k}: expected (start, stop, label), got {burst!r}")
    labels_seen = [int(b[2]) for b in layout.bursts]
    num_classes = layout.num_classes or (max(labels_seen) + 1 if labels_seen else 0)
    signals, labels, tags = [], [], []
    skipped = 0
    for k, burst in enumerate(layout.bursts):
        start, stop, label = (int(v) for v in burst)
        if not 0 <= start < stop <= iq.size:
            raise ValueError(f"burst {k}: bounds [{start}, {stop}) outside capture of {iq.size} samples")
        if not 0 <= label < num_classes:
            raise ValueError(f"burst {k}: label {label} outside 0..{num_classes - 1}")
        if stop - start < slice_len:
            skipped += 1
            continue
        offsets = start + rng.integers(0, stop - start - slice_len + 1, size=slices_per_burst)
        for off in offsets:
            signals.append(iq[off : off + slice_len])
        labels += [label] * slices_per_burst
        tags += [k & 0xFFFF] * slices_per_burst
    if skipped:
        msg = f"skipped {skipped} burst(s) shorter than {slice_len} samples"
        warnings.warn(msg)
        if report is not None:
            report.warnings.append(msg)
    if report is not None:
        report.skipped_bursts = skipped
    sig = np.array(signals, dtype=np.complex64).reshape(len(signals), slice_len)
    return Dataset(sig, labels, tags, num_classes, provenance=f"ingested from {Path(path).name}")
