"""Dataset ingestion, normalization, and synthetic generators.

Canonical layout: image features are float32 (N, C, H, W) scaled to [0, 1];
tabular features are float32 (N, D).  Labels are optional int64 arrays, either
multi-class (for one-vs-all relabeling) or already binary with 1 = anomaly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "NormalizationRecord",
    "load_idx",
    "load_idx_images",
    "save_idx_images",
    "save_idx_labels",
    "load_csv",
    "dedup",
    "normalize",
    "synth_two_gaussian",
    "synth_digit_images",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """File or dataset contents violate the expected format."""


@dataclass
class Dataset:
    """Feature tensor with optional labels and provenance metadata."""

    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    feature_names: list[str] | None = None
    normalization: "NormalizationRecord | None" = None
    schema: list[dict] | None = None  # CSV column encoding, for reuse at score time

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.features):
                raise DataError(
                    f"{self.name}: {len(self.features)} feature rows but "
                    f"{len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 4

    def anomaly_fraction(self) -> float:
        if self.labels is None:
            raise DataError(f"{self.name}: no labels")
        return float(np.mean(self.labels == 1))


# ---------------------------------------------------------------------------
# IDX files (big-endian magic + dims + raw bytes)


def _read_be32(f, path, what) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise DataError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an images/labels IDX file pair into an (N, 1, H, W) dataset.

    Pixels are scaled to [0, 1] float32.  Bad magic numbers, truncated
    payloads, and image/label count mismatches are distinct errors naming
    the offending file.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    features = load_idx_images(images_path)
    count = len(features)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"{labels_path}: bad labels magic 0x{magic:08x}, "
                            f"expected 0x{IDX_LABELS_MAGIC:08x}")
        lcount = _read_be32(f, labels_path, "count")
        raw = f.read()
        if len(raw) != lcount:
            raise DataError(f"{labels_path}: payload holds {len(raw)} labels, "
                            f"expected {lcount}")
    if lcount != count:
        raise DataError(f"{images_path} holds {count} images but "
                        f"{labels_path} holds {lcount} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Dataset(features=features, labels=labels, name=images_path.stem)


def load_idx_images(images_path) -> np.ndarray:
    """Load just an images IDX file (for scoring unlabeled data)."""
    images_path = Path(images_path)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"{images_path}: bad images magic 0x{magic:08x}, "
                            f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        count = _read_be32(f, images_path, "count")
        rows = _read_be32(f, images_path, "rows")
        cols = _read_be32(f, images_path, "cols")
        payload = f.read()
        if len(payload) != count * rows * cols:
            raise DataError(f"{images_path}: payload holds {len(payload)} "
                            f"bytes, expected {count * rows * cols}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
    return pixels.astype(np.float32) / 255.0


def save_idx_images(path, features: np.ndarray) -> None:
    """Write (N, 1, H, W) floats in [0, 1] back to IDX bytes (inverse of load)."""
    features = np.asarray(features)
    n, c, h, w = features.shape
    if c != 1:
        raise DataError(f"IDX images are single-channel, got {c} channels")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.rint(features * 255.0).astype(np.uint8).tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# delimited text


def _parse_float(value: str) -> float | None:
    try:
        return float(value)
    except ValueError:
        return None


def _infer_schema(header, rows, label_column):
    """Column typing: numeric iff every value parses as a float.

    A column where only some values parse is rejected (an unparseable cell
    in a numeric column), with the first offending row and column named.
    Purely non-numeric columns become one-hot categoricals with sorted
    levels.
    """
    schema = []
    for ci, name in enumerate(header):
        if name == label_column:
            continue
        parsed = [_parse_float(r[ci]) for r in rows]
        n_ok = sum(v is not None for v in parsed)
        if n_ok == len(rows):
            schema.append({"name": name, "type": "numeric"})
        elif n_ok == 0:
            levels = sorted({r[ci] for r in rows})
            schema.append({"name": name, "type": "categorical", "levels": levels})
        else:
            bad = next(i for i, v in enumerate(parsed) if v is None)
            raise DataError(f"row {bad + 2}, column {name!r}: cell "
                            f"{rows[bad][ci]!r} is not numeric")
    return schema


def _encode_rows(rows, header, schema):
    index = {name: i for i, name in enumerate(header)}
    width = sum(1 if col["type"] == "numeric" else len(col["levels"])
                for col in schema)
    out = np.zeros((len(rows), width), dtype=np.float32)
    names = []
    offset = 0
    for col in schema:
        if col["name"] not in index:
            raise DataError(f"column {col['name']!r} required by the stored "
                            f"encoding is missing")
        ci = index[col["name"]]
        if col["type"] == "numeric":
            for ri, row in enumerate(rows):
                v = _parse_float(row[ci])
                if v is None:
                    raise DataError(f"row {ri + 2}, column {col['name']!r}: "
                                    f"cell {row[ci]!r} is not numeric")
                out[ri, offset] = v
            names.append(col["name"])
            offset += 1
        else:
            level_pos = {lv: j for j, lv in enumerate(col["levels"])}
            for ri, row in enumerate(rows):
                j = level_pos.get(row[ci])
                if j is not None:  # unseen level at apply time -> all zeros
                    out[ri, offset + j] = 1.0
            names.extend(f"{col['name']}={lv}" for lv in col["levels"])
            offset += len(col["levels"])
    return out, names


def load_csv(path, label_column: str | None, positive_values=(),
             delimiter: str = ",", schema: list[dict] | None = None) -> Dataset:
    """Load a delimited text file with a header row.

    Numeric columns become features; categorical columns are one-hot
    encoded.  The label is 1 iff its raw value is in ``positive_values``.
    Passing a previously inferred ``schema`` reuses that encoding (unseen
    categorical levels map to all-zeros), which is how held-out data is
    scored consistently.
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for ri, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {ri + 2} has {len(row)} cells, "
                            f"header has {len(header)}")

    labels = None
    if label_column is not None:
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in "
                            f"header {header}")
        li = header.index(label_column)
        positive = {str(v) for v in positive_values}
        labels = np.asarray([1 if row[li] in positive else 0 for row in rows],
                            dtype=np.int64)

    if schema is None:
        schema = _infer_schema(header, rows, label_column)
    features, names = _encode_rows(rows, header, schema)
    return Dataset(features=features, labels=labels, name=path.stem,
                   feature_names=names, schema=schema)


# ---------------------------------------------------------------------------
# deduplication


def dedup(dataset: Dataset) -> Dataset:
    """Drop exact duplicate (features + label) rows, keeping first occurrences."""
    if dataset.features.ndim != 2:
        raise DataError(f"{dataset.name}: dedup applies to tabular datasets")
    if dataset.labels is not None:
        combined = np.column_stack(
            [dataset.features, dataset.labels.astype(np.float32)])
    else:
        combined = dataset.features
    _, first = np.unique(combined, axis=0, return_index=True)
    keep = np.sort(first)
    return replace(dataset,
                   features=dataset.features[keep],
                   labels=None if dataset.labels is None else dataset.labels[keep])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationRecord:
    """Feature scaling fitted on the training rows only.

    ``kept`` indexes the surviving columns of the original feature order;
    constant columns (zero spread on the fit rows) are dropped and listed
    in ``dropped_names``.
    """

    method: str  # "zscore" | "minmax"
    kept: list[int]
    dropped_names: list[str]
    center: np.ndarray  # mean (zscore) or min (minmax), float64
    scale: np.ndarray   # std (zscore) or max-min (minmax), float64

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        out = (features[:, self.kept] - self.center) / self.scale
        return out.astype(np.float32)

    def to_dict(self) -> dict:
        return {"method": self.method, "kept": list(map(int, self.kept)),
                "dropped_names": list(self.dropped_names),
                "center": self.center.tolist(), "scale": self.scale.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormalizationRecord":
        return NormalizationRecord(
            method=d["method"], kept=list(d["kept"]),
            dropped_names=list(d["dropped_names"]),
            center=np.asarray(d["center"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64))


def normalize(dataset: Dataset, method: str,
              fit_indices) -> tuple[Dataset, NormalizationRecord]:
    """Fit scaling statistics on ``fit_indices`` rows, apply to all rows.

    Taking indices rather than a second dataset makes it structurally
    impossible to leak held-out rows into the fit.
    """
    if method not in ("zscore", "minmax"):
        raise DataError(f"unknown normalization method {method!r}")
    if dataset.features.ndim != 2:
        raise DataError(f"{dataset.name}: normalization applies to tabular data")
    fit_indices = np.asarray(fit_indices)
    if fit_indices.size == 0:
        raise DataError("fit_indices must be non-empty")
    fit = dataset.features[fit_indices].astype(np.float64)

    if method == "zscore":
        center, scale = fit.mean(axis=0), fit.std(axis=0)
    else:
        center = fit.min(axis=0)
        scale = fit.max(axis=0) - center
    keep = np.flatnonzero(scale > 0)
    if keep.size == 0:
        raise DataError(f"{dataset.name}: every feature is constant on the "
                        f"fit rows; nothing to normalize")
    names = dataset.feature_names or [f"f{i}" for i in range(dataset.features.shape[1])]
    record = NormalizationRecord(
        method=method, kept=[int(i) for i in keep],
        dropped_names=[names[i] for i in range(len(names)) if i not in set(keep)],
        center=center[keep], scale=scale[keep])
    out = replace(dataset, features=record.apply(dataset.features),
                  feature_names=[names[i] for i in keep],
                  normalization=record)
    return out, record


# ---------------------------------------------------------------------------
# synthetic generators


def synth_two_gaussian(n_typical: int, n_anomalous: int, d: int,
                       separation: float, seed: int) -> Dataset:
    """Typical ~ N(0, I_d), anomalous ~ N(separation * 1, I_d)."""
    if n_typical < 1 or n_anomalous < 1 or d < 1:
        raise DataError("synth_two_gaussian counts and dimension must be >= 1")
    if separation <= 0:
        raise DataError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    typical = rng.standard_normal((n_typical, d))
    anomalous = separation + rng.standard_normal((n_anomalous, d))
    features = np.concatenate([typical, anomalous]).astype(np.float32)
    labels = np.concatenate([np.zeros(n_typical, dtype=np.int64),
                             np.ones(n_anomalous, dtype=np.int64)])
    return Dataset(features=features, labels=labels, name="synth_two_gaussian")


# 5x7 digit glyphs for the rendered-digits image generator
_GLYPHS = {
    0: (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    1: ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    2: (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    3: (" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "),
    4: ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    5: ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    6: (" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "),
    7: ("#####", "    #", "   # ", "  #  ", "  #  ", "  #  ", "  #  "),
    8: (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    9: (" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "),
}


def synth_digit_images(n_per_class: int, seed: int, size: int = 28,
                       noise: float = 0.08) -> Dataset:
    """Rendered digit glyphs with random shift, intensity, and noise.

    A deterministic, dependency-free stand-in for a handwritten-digit corpus:
    ten classes of 28x28 grayscale images in [0, 1], suitable for one-vs-all
    experiments at desk scale.
    """
    rng = np.random.default_rng(seed)
    scale = 3
    gh, gw = 7 * scale, 5 * scale
    if size < max(gh, gw) + 2:
        raise DataError(f"image size {size} too small for {gh}x{gw} glyphs")
    images, labels = [], []
    for digit, glyph in _GLYPHS.items():
        bitmap = np.array([[ch == "#" for ch in row] for row in glyph],
                          dtype=np.float32)
        big = np.kron(bitmap, np.ones((scale, scale), dtype=np.float32))
        for _ in range(n_per_class):
            canvas = np.zeros((size, size), dtype=np.float32)
            oy = rng.integers(0, size - gh + 1)
            ox = rng.integers(0, size - gw + 1)
            canvas[oy:oy + gh, ox:ox + gw] = big * rng.uniform(0.6, 1.0)
            canvas += rng.normal(0.0, noise, (size, size)).astype(np.float32)
            images.append(np.clip(canvas, 0.0, 1.0))
            labels.append(digit)
    order = rng.permutation(len(images))
    features = np.stack(images)[order][:, None, :, :]
    return Dataset(features=features,
                   labels=np.asarray(labels, dtype=np.int64)[order],
                   name="synth_digits")
