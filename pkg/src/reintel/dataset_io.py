"""Loading, splitting and persisting posts and predictions.

Dataset files are comma-separated with a header row and quoted fields, so post
texts may contain commas and line breaks. An empty cell is a missing value and
is kept as ``None``; it is never turned into a zero.
"""

from __future__ import annotations

import csv
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from reintel import ReintelError

FIELDS = (
    "id",
    "user_id",
    "timestamp",
    "text",
    "num_likes",
    "num_shares",
    "num_comments",
    "image_paths",
    "label",
)
REQUIRED_FIELDS = ("id", "text")
IMAGE_PATH_SEP = ";"
PREDICTION_HEADER = ("id", "score")


class DatasetError(ReintelError, ValueError):
    """Malformed dataset or prediction file."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RawPost:
    id: str
    user_id: str = ""
    text: str = ""
    timestamp: float | None = None
    num_likes: int | None = None
    num_shares: int | None = None
    num_comments: int | None = None
    image_paths: tuple[str, ...] = ()
    label: int | None = None

    def __post_init__(self):
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"post {self.id}: label must be 0 or 1, got {self.label!r}")
        for name in ("num_likes", "num_shares", "num_comments"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"post {self.id}: {name} must be >= 0, got {value}")

    @property
    def has_image(self) -> bool:
        return len(self.image_paths) > 0


@dataclass(frozen=True)
class Prediction:
    id: str
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"prediction {self.id}: score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Schema:
    """Maps RawPost field names to column headers in the file.

    Fields left out of ``columns`` map to a header of the same name. Optional
    fields whose header is absent from the file are loaded as ``None``.
    """

    columns: Mapping[str, str] = field(default_factory=dict)
    delimiter: str = ","

    def header_for(self, name: str) -> str:
        return self.columns.get(name, name)


DEFAULT_SCHEMA = Schema()


def _parse_optional_float(cell: str, name: str, row: int) -> float | None:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"cannot parse {name}={cell!r} as a number", row) from None
    if not math.isfinite(value):
        raise DatasetError(f"{name} must be finite, got {cell!r}", row)
    return value


def _parse_optional_count(cell: str, name: str, row: int) -> int | None:
    value = _parse_optional_float(cell, name, row)
    if value is None:
        return None
    if value != int(value) or value < 0:
        raise DatasetError(f"{name} must be a non-negative integer, got {cell!r}", row)
    return int(value)


def _parse_label(cell: str, row: int) -> int | None:
    cell = cell.strip()
    if cell == "":
        return None
    if cell not in ("0", "1"):
        raise DatasetError(f"label must be 0 or 1, got {cell!r}", row)
    return int(cell)


def load_dataset(path: str | Path, schema: Schema = DEFAULT_SCHEMA) -> list[RawPost]:
    """Read posts from ``path``.

    Row numbers in errors count the header as row 1, matching what a
    spreadsheet shows.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, expected a header row") from None
        positions = {name: i for i, name in enumerate(header)}
        index = {}
        for name in FIELDS:
            col = schema.header_for(name)
            if col in positions:
                index[name] = positions[col]
            elif name in REQUIRED_FIELDS:
                raise DatasetError(f"{path}: header lacks required column {col!r}", 1)

        posts: list[RawPost] = []
        seen: set[str] = set()
        for row_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DatasetError(
                    f"expected {len(header)} columns, found {len(cells)}", row_no
                )

            def cell(name: str) -> str:
                return cells[index[name]] if name in index else ""

            post_id = cell("id").strip()
            if not post_id:
                raise DatasetError("empty id", row_no)
            if post_id in seen:
                raise DatasetError(f"duplicate id {post_id!r}", row_no)
            seen.add(post_id)
            images = tuple(p.strip() for p in cell("image_paths").split(IMAGE_PATH_SEP) if p.strip())
            posts.append(
                RawPost(
                    id=post_id,
                    user_id=cell("user_id").strip(),
                    text=cell("text"),
                    timestamp=_parse_optional_float(cell("timestamp"), "timestamp", row_no),
                    num_likes=_parse_optional_count(cell("num_likes"), "num_likes", row_no),
                    num_shares=_parse_optional_count(cell("num_shares"), "num_shares", row_no),
                    num_comments=_parse_optional_count(cell("num_comments"), "num_comments", row_no),
                    image_paths=images,
                    label=_parse_label(cell("label"), row_no),
                )
            )
    return posts


def _format_optional(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def write_dataset(path: str | Path, posts: Iterable[RawPost], schema: Schema = DEFAULT_SCHEMA) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        writer.writerow([schema.header_for(name) for name in FIELDS])
        for p in posts:
            writer.writerow(
                [
                    p.id,
                    p.user_id,
                    _format_optional(p.timestamp),
                    p.text,
                    _format_optional(p.num_likes),
                    _format_optional(p.num_shares),
                    _format_optional(p.num_comments),
                    IMAGE_PATH_SEP.join(p.image_paths),
                    _format_optional(p.label),
                ]
            )


def _allocate_train_counts(class_sizes: Mapping[int, int], train_fraction: float) -> dict[int, int]:
    # Largest-remainder allocation. The overall train size is rounded up, so the
    # leftover sample lands in train; ties go to the lower label.
    total = sum(class_sizes.values())
    target = min(total, math.ceil(train_fraction * total - 1e-9))
    exact = {c: train_fraction * n for c, n in class_sizes.items()}
    counts = {c: min(class_sizes[c], math.floor(exact[c] + 1e-9)) for c in class_sizes}
    order = sorted(class_sizes, key=lambda c: (-(exact[c] - counts[c]), c))
    i = 0
    while sum(counts.values()) < target:
        c = order[i % len(order)]
        if counts[c] < class_sizes[c]:
            counts[c] += 1
        i += 1
    return counts


def split_dataset(
    posts: Sequence[RawPost], train_fraction: float, seed: int
) -> tuple[list[RawPost], list[RawPost]]:
    """Stratified, seeded train/validation split.

    Each class contributes floor(fraction * size) or one more to train. Input
    order is preserved inside both partitions.
    """
    if not (0.0 < train_fraction <= 1.0):
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(posts):
        if p.label is None:
            raise DatasetError(f"post {p.id!r} is unlabeled; cannot stratify")
        by_class[p.label].append(i)

    counts = _allocate_train_counts({c: len(ix) for c, ix in by_class.items()}, train_fraction)
    rng = random.Random(seed)
    train_idx: set[int] = set()
    for c in sorted(by_class):
        members = list(by_class[c])
        rng.shuffle(members)
        train_idx.update(members[: counts[c]])
    train = [p for i, p in enumerate(posts) if i in train_idx]
    val = [p for i, p in enumerate(posts) if i not in train_idx]
    return train, val


def write_predictions(path: str | Path, predictions: Iterable[Prediction]) -> None:
    path = Path(path)
    lines = [",".join(PREDICTION_HEADER)]
    for pred in predictions:
        if not (0.0 <= pred.score <= 1.0) or math.isnan(pred.score):
            raise ValueError(f"prediction {pred.id}: score {pred.score} outside [0, 1]")
        lines.append(f"{pred.id},{pred.score:.6f}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_predictions(path: str | Path) -> list[Prediction]:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_HEADER:
            raise DatasetError(f"{path}: expected header 'id,score'", 1)
        preds = []
        for row_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != 2:
                raise DatasetError(f"expected 2 columns, found {len(cells)}", row_no)
            score = _parse_optional_float(cells[1], "score", row_no)
            if score is None:
                raise DatasetError("missing score", row_no)
            try:
                preds.append(Prediction(cells[0], score))
            except ValueError as exc:
                raise DatasetError(str(exc), row_no) from None
    return preds
