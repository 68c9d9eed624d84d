"""Reading, writing, and generating the data files the CLI works with.

Two on-disk formats: CSV with a header row and one numeric label column, and
a raw little-endian binary matrix described by a JSON sidecar.  Binary files
round-trip bit-exactly; CSV files are written with 17 significant digits so
re-reading reproduces every double exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DataError, Dataset, QuerySet

__all__ = [
    "IngestResult",
    "ingest",
    "load_seller_map",
    "synth_classification",
    "synth_regression",
    "write_dataset",
]


@dataclass(frozen=True, eq=False)
class IngestResult:
    features: np.ndarray
    labels: np.ndarray
    label_kind: str  # "class" | "real"
    sellers: Optional[np.ndarray] = None

    def as_dataset(self) -> Dataset:
        return Dataset(self.features, self.labels)

    def as_queryset(self) -> QuerySet:
        return QuerySet(self.features, self.labels)


def _detect_format(path: str, fmt: str) -> str:
    if fmt != "auto":
        return fmt
    return "csv" if str(path).endswith(".csv") else "binary"


def _parse_cell(raw: str, path: str, line_no: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(
            f"{path}: line {line_no}: column {column!r} has non-numeric value {raw!r}"
        ) from None
    if not math.isfinite(value):
        raise DataError(f"{path}: line {line_no}: column {column!r} is not finite")
    return value


def _read_csv(path: str, label_column: str, label_kind, seller_column):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r} in header")
        label_idx = header.index(label_column)
        seller_idx = None
        if seller_column is not None:
            if seller_column not in header:
                raise DataError(f"{path}: no column named {seller_column!r} in header")
            seller_idx = header.index(seller_column)
        feature_idx = [
            i for i in range(len(header)) if i != label_idx and i != seller_idx
        ]
        if not feature_idx:
            raise DataError(f"{path}: no feature columns besides the label")

        feats, labels, sellers = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            feats.append(
                [_parse_cell(row[i], path, line_no, header[i]) for i in feature_idx]
            )
            labels.append(_parse_cell(row[label_idx], path, line_no, label_column))
            if seller_idx is not None:
                sellers.append(
                    int(_parse_cell(row[seller_idx], path, line_no, seller_column))
                )
    if not feats:
        raise DataError(f"{path}: no data rows")
    features = np.asarray(feats, dtype=np.float64)
    raw_labels = np.asarray(labels, dtype=np.float64)
    if label_kind is None:
        label_kind = "class" if np.all(raw_labels == np.round(raw_labels)) else "real"
    if label_kind == "class":
        if not np.all(raw_labels == np.round(raw_labels)):
            raise DataError(f"{path}: class labels must be integers")
        out_labels = raw_labels.astype(np.int64)
    else:
        out_labels = raw_labels
    seller_arr = np.asarray(sellers, dtype=np.int64) if seller_idx is not None else None
    return IngestResult(features, out_labels, label_kind, seller_arr)


def _sidecar_path(path: str) -> str:
    return str(path) + ".json"


def _read_binary(path: str):
    sidecar = _sidecar_path(path)
    if not os.path.exists(sidecar):
        raise DataError(f"{path}: missing JSON sidecar {sidecar}")
    with open(sidecar) as f:
        try:
            head = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{sidecar}: invalid JSON ({e})") from None
    for key in ("n", "d", "dtype", "label"):
        if key not in head:
            raise DataError(f"{sidecar}: missing field {key!r}")
    n, d = int(head["n"]), int(head["d"])
    if n < 1 or d < 1:
        raise DataError(f"{sidecar}: n and d must be positive")
    if head["dtype"] not in ("f32", "f64"):
        raise DataError(f"{sidecar}: dtype must be f32 or f64")
    if head["label"] not in ("class", "real"):
        raise DataError(f"{sidecar}: label must be class or real")
    feat_dtype = "<f4" if head["dtype"] == "f32" else "<f8"
    lab_dtype = "<i8" if head["label"] == "class" else "<f8"
    feat_bytes = n * d * np.dtype(feat_dtype).itemsize
    lab_bytes = n * np.dtype(lab_dtype).itemsize
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) != feat_bytes + lab_bytes:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, expected {feat_bytes + lab_bytes}"
        )
    features = (
        np.frombuffer(payload[:feat_bytes], dtype=feat_dtype)
        .reshape(n, d)
        .astype(np.float64)
    )
    labels = np.frombuffer(payload[feat_bytes:], dtype=lab_dtype).copy()
    if not np.all(np.isfinite(features)):
        raise DataError(f"{path}: features contain non-finite values")
    if head["label"] == "real" and not np.all(np.isfinite(labels)):
        raise DataError(f"{path}: labels contain non-finite values")
    return IngestResult(features, labels, head["label"], None)


def ingest(
    path: str,
    fmt: str = "auto",
    label_column: str = "y",
    label_kind: Optional[str] = None,
    seller_column: Optional[str] = None,
) -> IngestResult:
    """Load a feature/label file.

    CSV needs a header and a numeric label column; every other column is a
    feature unless named as the seller column.  Binary needs the JSON sidecar
    written by :func:`write_dataset`.  Malformed cells are reported with
    their file line number.
    """
    if not os.path.exists(path):
        raise DataError(f"{path}: file does not exist")
    kind = _detect_format(path, fmt)
    if kind == "csv":
        return _read_csv(path, label_column, label_kind, seller_column)
    if kind == "binary":
        return _read_binary(path)
    raise ValueError(f"unknown format {fmt!r}")


def load_seller_map(source: str, n: int) -> np.ndarray:
    """Load a seller assignment from a two-column CSV (point_id, seller_id).

    Point ids are 1-based row numbers into the training set; every point must
    be assigned exactly once.
    """
    if not os.path.exists(source):
        raise DataError(f"{source}: seller map file does not exist")
    sellers = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    with open(source, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise DataError(f"{source}: expected a (point_id, seller_id) header")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{source}: line {line_no}: expected 2 cells")
            pid = int(_parse_cell(row[0], source, line_no, "point_id"))
            sid = int(_parse_cell(row[1], source, line_no, "seller_id"))
            if not 1 <= pid <= n:
                raise DataError(f"{source}: line {line_no}: point_id {pid} out of 1..{n}")
            if seen[pid - 1]:
                raise DataError(f"{source}: line {line_no}: point_id {pid} assigned twice")
            seen[pid - 1] = True
            sellers[pid - 1] = sid
    if not seen.all():
        missing = int(np.nonzero(~seen)[0][0]) + 1
        raise DataError(f"{source}: point_id {missing} has no seller assignment")
    return sellers


def write_dataset(
    path: str,
    features: np.ndarray,
    labels: np.ndarray,
    label_kind: str,
    fmt: str = "csv",
    label_column: str = "y",
    dtype: str = "f64",
    sellers: Optional[np.ndarray] = None,
    seller_column: str = "seller",
) -> None:
    """Write a dataset in either supported format, byte-deterministically."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            header = [f"x{i}" for i in range(d)] + [label_column]
            if sellers is not None:
                header.append(seller_column)
            writer.writerow(header)
            for i in range(n):
                row = [format(v, ".17g") for v in features[i]]
                if label_kind == "class":
                    row.append(str(int(labels[i])))
                else:
                    row.append(format(float(labels[i]), ".17g"))
                if sellers is not None:
                    row.append(str(int(sellers[i])))
                writer.writerow(row)
        return
    if fmt == "binary":
        feat_dtype = "<f4" if dtype == "f32" else "<f8"
        lab = (
            np.asarray(labels).astype("<i8")
            if label_kind == "class"
            else np.asarray(labels).astype("<f8")
        )
        with open(path, "wb") as f:
            f.write(features.astype(feat_dtype).tobytes(order="C"))
            f.write(lab.tobytes())
        with open(_sidecar_path(path), "w") as f:
            json.dump(
                {"n": int(n), "d": int(d), "dtype": dtype, "label": label_kind},
                f,
                sort_keys=True,
            )
            f.write("\n")
        return
    raise ValueError(f"unknown format {fmt!r}")


def synth_classification(
    n: int,
    d: int,
    classes: int = 2,
    contrast_knob: float = 1.0,
    seed: int = 0,
    n_test: int = 100,
) -> tuple[Dataset, QuerySet]:
    """Gaussian-mixture classification data with tunable cluster separation.

    Cluster centers sit ``contrast_knob`` away from the origin on random unit
    directions while intra-cluster spread stays at one, so raising the knob
    raises the relative contrast seen by nearest-neighbor queries.
    """
    if n < 1 or n_test < 1:
        raise ValueError("n and n_test must be positive")
    if d < 1 or classes < 1:
        raise ValueError("d and classes must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C1A55]))
    centers = rng.standard_normal((classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= contrast_knob

    def draw(count):
        labels = rng.integers(0, classes, size=count)
        feats = centers[labels] + rng.standard_normal((count, d))
        return feats, labels.astype(np.int64)

    xtr, ytr = draw(n)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr), QuerySet(xte, yte)


def synth_regression(
    n: int,
    d: int,
    label_noise: float = 0.1,
    seed: int = 0,
    n_test: int = 100,
) -> tuple[Dataset, QuerySet]:
    """Linear-plus-noise regression data: y = w.x + noise."""
    if n < 1 or n_test < 1:
        raise ValueError("n and n_test must be positive")
    if d < 1:
        raise ValueError("d must be positive")
    if label_noise < 0:
        raise ValueError("label_noise must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E69]))
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)

    def draw(count):
        feats = rng.standard_normal((count, d))
        labels = feats @ w + label_noise * rng.standard_normal(count)
        return feats, labels

    xtr, ytr = draw(n)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr), QuerySet(xte, yte)
