"""Bags of patch feature vectors and their on-disk formats.

A bag is one sample: a variable-length set of fixed-width feature rows
with a single binary label. Three file formats live here:

feature file (binary)
    magic ``MILF`` | patch count K: u32 LE | feature dim D: u32 LE |
    K*D float32 LE, row-major. Values are widened to float64 on load;
    writing narrows back, so load -> write round-trips byte-identically.

feature file (text)
    a path ending in ``.csv`` is parsed as K rows of D comma-separated
    decimals, no header.

manifest
    CSV with the exact header ``bag_id,label,path``; label is 0 or 1;
    relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng

_FEATURE_MAGIC = b"MILF"
_HEADER_LEN = 12  # magic + K + D


class FormatError(ValueError):
    """A file violates one of the formats documented in this module."""


@dataclass(frozen=True)
class Bag:
    """One labelled bag: ``features`` has shape (patches, dim)."""

    bag_id: str
    label: int
    features: np.ndarray

    def __post_init__(self) -> None:
        if not self.bag_id:
            raise ValueError("bag_id must be non-empty")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.bag_id!r}: label must be 0 or 1, got {self.label}")
        f = self.features
        if not isinstance(f, np.ndarray) or f.ndim != 2 or f.dtype != np.float64:
            raise ValueError(f"bag {self.bag_id!r}: features must be a 2-d float64 array")
        if f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError(f"bag {self.bag_id!r}: features must be non-empty, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"bag {self.bag_id!r}: features contain non-finite values")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of bags sharing one feature dimension.

    ``dim`` is 0 only for the empty dataset.
    """

    bags: tuple[Bag, ...]
    dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "bags", tuple(self.bags))
        seen: set[str] = set()
        for bag in self.bags:
            if bag.bag_id in seen:
                raise ValueError(f"duplicate bag_id {bag.bag_id!r}")
            seen.add(bag.bag_id)
            if bag.dim != self.dim:
                raise ValueError(
                    f"bag {bag.bag_id!r} has dim {bag.dim}, dataset dim is {self.dim}"
                )

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def n_pos(self) -> int:
        return sum(1 for b in self.bags if b.label == 1)

    @property
    def n_neg(self) -> int:
        return sum(1 for b in self.bags if b.label == 0)


def _check_writable_features(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError(f"features must be a non-empty 2-d array, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    return features


def write_feature_file(path: str | Path, features: np.ndarray) -> None:
    """Write a binary feature file. float64 input is narrowed to the
    float32 storage format."""
    features = _check_writable_features(features)
    k, d = features.shape
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", k, d))
        fh.write(payload)


def _load_feature_csv(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if line == "":
                if rows:
                    continue  # tolerate trailing blank lines only
                raise FormatError(f"{path}: line {lineno}: empty line in feature CSV")
            cells = line.split(",")
            vals = []
            for col, cell in enumerate(cells, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(
                        f"{path}: line {lineno}, column {col}: not a number: {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise FormatError(
                        f"{path}: line {lineno}, column {col}: non-finite value {cell!r}"
                    )
                vals.append(v)
            if rows and len(vals) != len(rows[0]):
                raise FormatError(
                    f"{path}: line {lineno}: expected {len(rows[0])} values, got {len(vals)}"
                )
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: feature CSV has no rows")
    return np.asarray(rows, dtype=np.float64)


def load_feature_file(path: str | Path) -> np.ndarray:
    """Load one feature file (binary, or CSV when the name ends in
    ``.csv``) as a (patches, dim) float64 array."""
    path = Path(path)
    if path.name.endswith(".csv"):
        return _load_feature_csv(path)

    data = path.read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header, {len(data)} bytes (need 4 for magic)")
    if data[:4] != _FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at byte 0, expected {_FEATURE_MAGIC!r}")
    if len(data) < _HEADER_LEN:
        raise FormatError(
            f"{path}: truncated header, {len(data)} bytes (need {_HEADER_LEN})"
        )
    k, d = struct.unpack_from("<II", data, 4)
    if k < 1 or d < 1:
        raise FormatError(f"{path}: patch count and dim must be >= 1, header says {k}x{d}")
    expected = _HEADER_LEN + 4 * k * d
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - _HEADER_LEN} bytes at byte {len(data)}, "
            f"header {k}x{d} requires {expected - _HEADER_LEN}"
        )
    raw = np.frombuffer(data, dtype="<f4", offset=_HEADER_LEN)
    bad = np.flatnonzero(~np.isfinite(raw))
    if bad.size:
        offset = _HEADER_LEN + 4 * int(bad[0])
        raise FormatError(f"{path}: non-finite value at byte {offset}")
    return raw.astype(np.float64).reshape(k, d)


def load_manifest(path: str | Path) -> list[tuple[str, int, str]]:
    """Parse a manifest CSV into (bag_id, label, path) rows."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest, expected header bag_id,label,path") from None
        if header != ["bag_id", "label", "path"]:
            raise FormatError(
                f"{path}: bad header {','.join(header)!r}, expected 'bag_id,label,path'"
            )
        rows: list[tuple[str, int, str]] = []
        for lineno, row in enumerate(reader, start=2):
            if row == []:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            bag_id, label_str, rel = row
            if not bag_id:
                raise FormatError(f"{path}: line {lineno}: empty bag_id")
            if label_str not in ("0", "1"):
                raise FormatError(
                    f"{path}: line {lineno}: label must be 0 or 1, got {label_str!r}"
                )
            if not rel:
                raise FormatError(f"{path}: line {lineno}: empty path")
            rows.append((bag_id, int(label_str), rel))
    return rows


def write_manifest(path: str | Path, rows: list[tuple[str, int, str]]) -> None:
    """Write manifest rows with LF line endings and a trailing newline."""
    lines = ["bag_id,label,path"]
    lines += [f"{bag_id},{label},{rel}" for bag_id, label, rel in rows]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load every bag referenced by a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    rows = load_manifest(manifest_path)
    base = manifest_path.parent
    seen: set[str] = set()
    bags: list[Bag] = []
    for bag_id, label, rel in rows:
        if bag_id in seen:
            raise ValueError(f"{manifest_path}: duplicate bag_id {bag_id!r}")
        seen.add(bag_id)
        feature_path = Path(rel) if Path(rel).is_absolute() else base / rel
        if not feature_path.exists():
            raise FileNotFoundError(
                f"{manifest_path}: bag {bag_id!r} references missing file {feature_path}"
            )
        features = load_feature_file(feature_path)
        if bags and features.shape[1] != bags[0].dim:
            raise ValueError(
                f"{manifest_path}: bag {bag_id!r} has dim {features.shape[1]}, "
                f"but bag {bags[0].bag_id!r} has dim {bags[0].dim}"
            )
        bags.append(Bag(bag_id, label, features))
    return Dataset(tuple(bags), bags[0].dim if bags else 0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_stratified(ds: Dataset, fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Split a two-class dataset into two parts, per-class.

    Each class is shuffled independently; the first part receives
    ``round(fraction * class_count)`` bags of each class, clamped so
    both parts keep at least one bag per class. Bags retain their
    original manifest order within each part.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    pos = [i for i, b in enumerate(ds.bags) if b.label == 1]
    neg = [i for i, b in enumerate(ds.bags) if b.label == 0]
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError(
            f"need at least 2 bags per class to split, got {len(pos)} positive "
            f"and {len(neg)} negative"
        )
    first: list[int] = []
    for cls in (pos, neg):
        take = _round_half_up(fraction * len(cls))
        take = min(max(take, 1), len(cls) - 1)
        shuffled = list(cls)
        rng.shuffle(shuffled)
        first.extend(shuffled[:take])
    chosen = set(first)
    part_a = tuple(b for i, b in enumerate(ds.bags) if i in chosen)
    part_b = tuple(b for i, b in enumerate(ds.bags) if i not in chosen)
    return Dataset(part_a, ds.dim), Dataset(part_b, ds.dim)


__all__ = [
    "Bag",
    "Dataset",
    "FormatError",
    "load_dataset",
    "load_feature_file",
    "load_manifest",
    "split_stratified",
    "write_feature_file",
    "write_manifest",
]
