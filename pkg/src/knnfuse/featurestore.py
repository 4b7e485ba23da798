"""Labeled feature banks: on-disk formats, validation, preprocessing, splits.

A feature bank is an immutable matrix of n float32 feature vectors of
dimension D, with one integer label in [0, C) and one opaque string id per
row. Two on-disk formats are supported:

BIN (extension ``.fbnk``), little-endian throughout::

    magic "FBNK" (4 B) | version u32 = 1 | n u64 | D u32 | C u32
    | id_block_len u64
    | id block: n newline-terminated UTF-8 ids (id_block_len bytes total)
    | labels: n x u32
    | features: n x D x f32, row-major

CSV: header line ``id,label,f0,...,f{D-1}``, one sample per row, floats
printed with 17 significant digits (value-exact round trip for float32).

Preprocessing follows the retrieval convention for frozen embeddings:
l2-normalize each vector, then subtract the mean of the (normalized)
training bank. The centering vector is always fit on the training bank
only and applied unchanged to queries.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySplit,
    IoFailure,
    LabelOutOfRange,
    MalformedHeader,
    NonFiniteValue,
    ZeroVector,
)

_MAGIC = b"FBNK"
_VERSION = 1
_HEADER = struct.Struct("<4sIQIIQ")  # magic, version, n, D, C, id_block_len


class Recipe(str, enum.Enum):
    """Preprocessing recipe applied to bank rows and queries alike."""

    L2_THEN_CENTER = "l2-center"
    CENTER_THEN_L2 = "center-l2"
    NONE = "none"


@dataclass(frozen=True)
class FeatureBank:
    """Immutable labeled feature matrix.

    features: (n, D) float32, all finite.
    labels:   (n,) integers in [0, class_count).
    ids:      n opaque sample identifiers (no newline or comma, so both
              on-disk formats can carry them verbatim).
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    ids: tuple[str, ...]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise DimensionMismatch(f"features must be 2-D, got ndim={feats.ndim}")
        n, d = feats.shape
        if n < 1 or d < 1:
            raise DimensionMismatch(f"bank requires n >= 1 and D >= 1, got {feats.shape}")
        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise DimensionMismatch(f"labels shape {labels.shape} != ({n},)")
        if not np.issubdtype(labels.dtype, np.integer):
            raise LabelOutOfRange(f"labels must be integers, got dtype {labels.dtype}")
        labels = labels.astype(np.int64)
        if self.class_count < 2:
            raise LabelOutOfRange(f"class_count must be >= 2, got {self.class_count}")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise LabelOutOfRange(
                f"labels must lie in [0, {self.class_count}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise DimensionMismatch(f"ids length {len(ids)} != n={n}")
        for sample_id in ids:
            if "\n" in sample_id or "," in sample_id:
                raise MalformedHeader(f"id {sample_id!r} contains a reserved character")
        if not np.isfinite(feats).all():
            bad = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0])
            raise NonFiniteValue(f"non-finite feature value in row {bad}")
        feats = np.ascontiguousarray(feats)
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "FeatureBank":
        """Sub-bank at the given row indices (order preserved)."""
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureBank(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            class_count=self.class_count,
            ids=tuple(self.ids[i] for i in idx),
        )

    def class_sizes(self) -> np.ndarray:
        """Per-class sample counts, length class_count."""
        return np.bincount(self.labels, minlength=self.class_count)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBank):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and np.array_equal(
                self.features.view(np.uint32), other.features.view(np.uint32)
            )
        )


@dataclass(frozen=True)
class PreprocessStats:
    """Centering vector and recipe fit on a training bank.

    ``mean`` is the arithmetic mean (float64) of the recipe's pre-centering
    representation of the training bank: of the l2-normalized rows for
    L2_THEN_CENTER, of the raw rows otherwise. Never fit this on val/test.
    """

    mean: np.ndarray
    recipe: Recipe

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.ndim != 1:
            raise DimensionMismatch("mean must be a 1-D vector")
        mean = mean.copy()
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "recipe", Recipe(self.recipe))


@dataclass(frozen=True)
class SplitSpec:
    """Train/val fractions (remainder is test), seed, and stratification."""

    train_fraction: float
    val_fraction: float
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise EmptySplit(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if not 0.0 <= self.val_fraction <= 1.0:
            raise EmptySplit(f"val_fraction must be in [0, 1], got {self.val_fraction}")
        if self.train_fraction + self.val_fraction > 1.0 + 1e-12:
            raise EmptySplit("train_fraction + val_fraction must be <= 1")


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------


def bin_file_size(bank: FeatureBank) -> int:
    """Exact byte size write_bank produces for ``bank`` in BIN format."""
    id_block = sum(len(i.encode("utf-8")) + 1 for i in bank.ids)
    return _HEADER.size + id_block + 4 * bank.n + 4 * bank.n * bank.dim


def write_bank(bank: FeatureBank, path, format: str = "bin") -> None:
    """Serialize a bank. BIN round-trips bit-exactly, CSV value-exactly."""
    fmt = str(format).lower()
    if fmt not in ("bin", "csv"):
        raise IoFailure(f"unknown format {format!r}")
    try:
        with open(path, "wb") as fh:
            if fmt == "bin":
                _write_bin(bank, fh)
            else:
                _write_csv(bank, fh)
    except OSError as exc:
        raise IoFailure(f"cannot write {path!r}: {exc}") from exc


def load_bank(path, format: str = "bin", class_count: int | None = None) -> FeatureBank:
    """Parse and validate a bank file.

    ``class_count`` overrides the inferred C for CSV files (which do not
    carry it); the BIN header value always wins for BIN files.
    """
    fmt = str(format).lower()
    if fmt not in ("bin", "csv"):
        raise IoFailure(f"unknown format {format!r}")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path!r}: {exc}") from exc
    if fmt == "bin":
        return _parse_bin(raw)
    return _parse_csv(raw, class_count)


def _write_bin(bank: FeatureBank, fh) -> None:
    id_block = b"".join(i.encode("utf-8") + b"\n" for i in bank.ids)
    fh.write(_HEADER.pack(_MAGIC, _VERSION, bank.n, bank.dim, bank.class_count, len(id_block)))
    fh.write(id_block)
    fh.write(bank.labels.astype("<u4").tobytes())
    fh.write(np.ascontiguousarray(bank.features, dtype="<f4").tobytes())


def _parse_bin(raw: bytes) -> FeatureBank:
    if len(raw) < _HEADER.size:
        raise MalformedHeader(f"file too short for header ({len(raw)} bytes)")
    magic, version, n, dim, class_count, id_block_len = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    if version != _VERSION:
        raise MalformedHeader(f"unsupported version {version}")
    offset = _HEADER.size
    expected = offset + id_block_len + 4 * n + 4 * n * dim
    if len(raw) != expected:
        raise DimensionMismatch(
            f"payload size {len(raw)} != {expected} implied by header (n={n}, D={dim})"
        )
    id_block = raw[offset : offset + id_block_len]
    if id_block_len and not id_block.endswith(b"\n"):
        raise MalformedHeader("id block not newline-terminated")
    id_lines = id_block.split(b"\n")[:-1]
    if len(id_lines) != n:
        raise MalformedHeader(f"id block holds {len(id_lines)} ids, header says n={n}")
    try:
        ids = tuple(line.decode("utf-8") for line in id_lines)
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"id block is not valid UTF-8: {exc}") from exc
    offset += id_block_len
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).astype(np.int64)
    offset += 4 * n
    feats = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=offset)
    return FeatureBank(
        features=feats.reshape(n, dim).copy(),
        labels=labels,
        class_count=class_count,
        ids=ids,
    )


def _write_csv(bank: FeatureBank, fh) -> None:
    text = io.StringIO()
    cols = ",".join(f"f{j}" for j in range(bank.dim))
    text.write(f"id,label,{cols}\n")
    for i in range(bank.n):
        row = ",".join(f"{float(v):.17g}" for v in bank.features[i])
        text.write(f"{bank.ids[i]},{bank.labels[i]},{row}\n")
    fh.write(text.getvalue().encode("utf-8"))


def _parse_csv(raw: bytes, class_count: int | None) -> FeatureBank:
    try:
        lines = raw.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"file is not valid UTF-8: {exc}") from exc
    if not lines:
        raise MalformedHeader("empty CSV file")
    header = lines[0].split(",")
    if len(header) < 3 or header[0] != "id" or header[1] != "label":
        raise MalformedHeader(f"bad CSV header {lines[0]!r}")
    dim = len(header) - 2
    if header[2:] != [f"f{j}" for j in range(dim)]:
        raise MalformedHeader("CSV feature columns must be f0..f{D-1}")
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise DimensionMismatch(
                f"line {lineno}: row carries {len(parts) - 2} floats, header says D={dim}"
            )
        ids.append(parts[0])
        try:
            labels.append(int(parts[1]))
        except ValueError as exc:
            raise LabelOutOfRange(f"line {lineno}: bad label {parts[1]!r}") from exc
        try:
            rows.append([float(v) for v in parts[2:]])
        except ValueError as exc:
            raise NonFiniteValue(f"line {lineno}: unparseable float") from exc
    if not ids:
        raise MalformedHeader("CSV file has no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if labels_arr.min() < 0:
        raise LabelOutOfRange(f"negative label {labels_arr.min()}")
    if class_count is None:
        class_count = max(int(labels_arr.max()) + 1, 2)
    feats = np.asarray(rows, dtype=np.float64).astype(np.float32)
    return FeatureBank(features=feats, labels=labels_arr, class_count=class_count, ids=tuple(ids))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _l2_normalize(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVector(f"{what} contains a zero vector; cannot l2-normalize")
    return x / norms


def fit_preprocess(train: FeatureBank, recipe: Recipe = Recipe.L2_THEN_CENTER) -> PreprocessStats:
    """Fit the centering vector on the training bank under ``recipe``.

    All accumulation is in float64 regardless of the float32 storage.
    """
    recipe = Recipe(recipe)
    feats = train.features.astype(np.float64)
    if recipe is Recipe.L2_THEN_CENTER:
        mean = _l2_normalize(feats, "training bank").mean(axis=0)
    else:
        mean = feats.mean(axis=0)
    return PreprocessStats(mean=mean, recipe=recipe)


def apply_preprocess(x: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    """Transform a query vector (or a batch of them) with training stats.

    Accepts shape (D,) or (m, D); returns float32 of the same shape.
    The same transform is applied to bank rows and queries, so a query may
    legitimately come out as the zero vector after centering.
    """
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != stats.mean.shape[0]:
        raise DimensionMismatch(
            f"vector dimension {arr.shape[1]} != stats dimension {stats.mean.shape[0]}"
        )
    if stats.recipe is Recipe.L2_THEN_CENTER:
        out = _l2_normalize(arr, "query") - stats.mean
    elif stats.recipe is Recipe.CENTER_THEN_L2:
        out = _l2_normalize(arr - stats.mean, "centered query")
    else:
        out = arr
    out = out.astype(np.float32)
    return out[0] if squeeze else out


def preprocess_bank(bank: FeatureBank, stats: PreprocessStats) -> FeatureBank:
    """Apply the fitted transform to every bank row."""
    return FeatureBank(
        features=apply_preprocess(bank.features, stats),
        labels=bank.labels.copy(),
        class_count=bank.class_count,
        ids=bank.ids,
    )


# ---------------------------------------------------------------------------
# Splitting and subsampling
# ---------------------------------------------------------------------------


def _allocate(count: int, fractions: list[float]) -> list[int]:
    """Largest-remainder apportionment of ``count`` items to fractions."""
    ideal = [f * count for f in fractions]
    counts = [math.floor(v) for v in ideal]
    leftovers = count - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[:leftovers]:
        counts[i] += 1
    return counts


def split(
    bank: FeatureBank, spec: SplitSpec
) -> tuple[FeatureBank, FeatureBank | None, FeatureBank | None]:
    """Partition a bank into train/val/test, reproducibly from the seed.

    The three index sets are disjoint and cover the bank. Stratified mode
    apportions each class independently (largest remainder), so per-class
    proportions hold to within one sample per class. A split whose fraction
    is positive but which receives zero samples raises EmptySplit; a split
    with zero requested fraction comes back as None.
    """
    test_fraction = 1.0 - spec.train_fraction - spec.val_fraction
    fractions = [spec.train_fraction, spec.val_fraction, max(test_fraction, 0.0)]
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[], [], []]
    if spec.stratified:
        groups = [np.flatnonzero(bank.labels == c) for c in range(bank.class_count)]
        groups = [g for g in groups if g.size]
    else:
        groups = [np.arange(bank.n)]
    for group in groups:
        perm = group[rng.permutation(group.size)]
        counts = _allocate(group.size, fractions)
        start = 0
        for slot, cnt in enumerate(counts):
            parts[slot].extend(perm[start : start + cnt].tolist())
            start += cnt
    names = ("train", "val", "test")
    requested = (True, spec.val_fraction > 1e-12, test_fraction > 1e-12)
    banks = []
    for name, want, indices in zip(names, requested, parts):
        if want and not indices:
            raise EmptySplit(f"{name} split received 0 samples")
        banks.append(bank.take(sorted(indices)) if indices else None)
    return banks[0], banks[1], banks[2]


def subsample_indices(bank: FeatureBank, fraction: float, seed: int) -> np.ndarray:
    """Indices of a stratified subsample of size ceil(fraction * n).

    Samples are ranked by the fraction of their own class they consume
    ((j + 1) / n_c for the j-th element of a per-class shuffle), and the
    global prefix of that ranking is taken. Because the ranking is fixed
    per seed, subsamples are nested: the index set at a smaller fraction
    is a subset of the set at any larger fraction.
    """
    if not 0.0 < fraction <= 1.0:
        raise EmptySplit(f"fraction must be in (0, 1], got {fraction}")
    keep = math.ceil(fraction * bank.n)
    if keep < 1:
        raise EmptySplit("subsample would be empty")
    rng = np.random.default_rng(seed)
    quota = np.empty(bank.n, dtype=np.float64)
    within = np.empty(bank.n, dtype=np.int64)
    for c in range(bank.class_count):
        members = np.flatnonzero(bank.labels == c)
        if not members.size:
            continue
        perm = members[rng.permutation(members.size)]
        quota[perm] = (np.arange(members.size) + 1) / members.size
        within[perm] = np.arange(members.size)
    order = np.lexsort((within, bank.labels, quota))
    return np.sort(order[:keep])


def subsample(bank: FeatureBank, fraction: float, seed: int) -> FeatureBank:
    """Stratified, nested, seed-deterministic subsample of a bank."""
    return bank.take(subsample_indices(bank, fraction, seed))
