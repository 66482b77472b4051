"""Core data model: categories, weight heads, similarity matrices, boxes.

All containers are frozen after construction.  Arrays handed to a
constructor are copied and marked read-only so instances can be shared
between workers without defensive copies.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, IndexMismatchError, InvariantError

ROW_SUM_TOL = 1e-9
PROB_SUM_TOL = 1e-6
UNIT_NORM_TOL = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Split(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"


class HeadKind(str, enum.Enum):
    CLASSIFIER = "classifier"
    DETECTOR = "detector"
    DELTA = "delta"
    DETECTOR_ADAPTED = "detector-adapted"


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    synset_terms: tuple[str, ...]
    split: Split


@dataclass(frozen=True)
class CategoryRegistry:
    """Ordered set of categories partitioned into strong and weak splits."""

    entries: tuple[Category, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [c.id for c in entries]
        if len(set(ids)) != len(ids):
            raise InvariantError("duplicate category id")
        if sorted(ids) != list(range(len(ids))):
            raise InvariantError("category ids must be contiguous 0..K-1")
        names = [c.name for c in entries]
        if len(set(names)) != len(names):
            raise InvariantError("duplicate category name")
        for c in entries:
            if not c.synset_terms:
                raise InvariantError(f"category {c.id} has no synset terms")
        if not any(c.split is Split.STRONG for c in entries):
            raise InvariantError("strong split is empty")
        if not any(c.split is Split.WEAK for c in entries):
            raise InvariantError("weak split is empty")

    @property
    def K(self) -> int:
        return len(self.entries)

    @property
    def m(self) -> int:
        return len(self.strong_ids)

    @property
    def strong_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c.id for c in self.entries if c.split is Split.STRONG))

    @property
    def weak_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c.id for c in self.entries if c.split is Split.WEAK))

    def __getitem__(self, cid: int) -> Category:
        for c in self.entries:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def split_of(self, cid: int) -> Split:
        return self[cid].split


@dataclass(frozen=True)
class HeadMatrix:
    """Per-category linear weights; the last column is the bias slot.

    ``background`` holds the optional background row of a detector head.
    It is stored next to, never inside, the category rows.
    """

    kind: HeadKind
    rows: tuple[int, ...]
    values: np.ndarray
    background: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", HeadKind(self.kind))
        object.__setattr__(self, "rows", tuple(int(r) for r in self.rows))
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] != len(self.rows):
            raise DimensionError(
                f"values shape {values.shape} does not match {len(self.rows)} rows"
            )
        if values.shape[1] < 1:
            raise DimensionError("head needs at least the bias column")
        if len(set(self.rows)) != len(self.rows):
            raise InvariantError("duplicate row id in head")
        if not np.all(np.isfinite(values)):
            raise InvariantError("head contains non-finite values")
        object.__setattr__(self, "values", values)
        if self.background is not None:
            if self.kind is not HeadKind.DETECTOR:
                raise InvariantError("only detector heads carry a background row")
            bg = _frozen(self.background)
            if bg.shape != (values.shape[1],):
                raise DimensionError("background row width differs from head width")
            if not np.all(np.isfinite(bg)):
                raise InvariantError("background row contains non-finite values")
            object.__setattr__(self, "background", bg)

    @property
    def dim(self) -> int:
        """Feature dimension D, excluding the bias slot."""
        return self.values.shape[1] - 1

    def index(self, cid: int) -> int:
        try:
            return self.rows.index(cid)
        except ValueError:
            raise IndexMismatchError(f"category {cid} not in head rows") from None

    def take(self, ids: Iterable[int]) -> np.ndarray:
        lookup = {r: i for i, r in enumerate(self.rows)}
        try:
            idx = [lookup[int(c)] for c in ids]
        except KeyError as exc:
            raise IndexMismatchError(f"category {exc.args[0]} not in head rows") from None
        return self.values[idx]

    def __eq__(self, other):
        if not isinstance(other, HeadMatrix):
            return NotImplemented
        if (self.background is None) != (other.background is None):
            return False
        return (
            self.kind is other.kind
            and self.rows == other.rows
            and np.array_equal(self.values, other.values)
            and (self.background is None or np.array_equal(self.background, other.background))
        )

    __hash__ = None


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    true_category: int
    scores: np.ndarray

    def __post_init__(self):
        s = _frozen(self.scores)
        if s.ndim != 1:
            raise DimensionError("score vector must be one-dimensional")
        if np.any(s < 0) or abs(s.sum() - 1.0) > PROB_SUM_TOL:
            raise InvariantError(f"scores of {self.image_id} are not a probability vector")
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True)
class ScoreTable:
    records: tuple[ScoreRecord, ...]

    def __post_init__(self):
        records = tuple(self.records)
        widths = {len(r.scores) for r in records}
        if len(widths) > 1:
            raise DimensionError("score vectors have differing lengths")
        object.__setattr__(self, "records", records)

    def matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.scores for r in self.records])


@dataclass(frozen=True)
class EmbeddingTable:
    """Token vectors as read from a word-embedding text file."""

    dim: int
    entries: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        entries = {}
        for tok, vec in dict(self.entries).items():
            v = _frozen(vec)
            if v.shape != (self.dim,):
                raise DimensionError(f"token {tok!r} has length {v.size}, expected {self.dim}")
            if not np.all(np.isfinite(v)):
                raise InvariantError(f"token {tok!r} has non-finite entries")
            entries[tok] = v
        object.__setattr__(self, "entries", entries)

    def __contains__(self, tok: str) -> bool:
        return tok in self.entries

    def __getitem__(self, tok: str) -> np.ndarray:
        return self.entries[tok]

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.entries.keys() == other.entries.keys()
            and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items())
        )

    __hash__ = None


@dataclass(frozen=True)
class SimilarityMatrix:
    """Weak-by-strong nonnegative weights with rows summing to one.

    Rows with no admissible neighbour are all zero; :attr:`flagged`
    marks them.
    """

    rows: tuple[int, ...]
    cols: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(int(r) for r in self.rows))
        object.__setattr__(self, "cols", tuple(int(c) for c in self.cols))
        v = _frozen(self.values)
        if v.shape != (len(self.rows), len(self.cols)):
            raise DimensionError(
                f"similarity shape {v.shape} != ({len(self.rows)}, {len(self.cols)})"
            )
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvariantError("similarity values must be finite and nonnegative")
        sums = v.sum(axis=1)
        zero = ~np.any(v > 0, axis=1)
        bad = ~zero & (np.abs(sums - 1.0) > ROW_SUM_TOL)
        if np.any(bad):
            raise InvariantError(f"similarity rows {np.flatnonzero(bad).tolist()} do not sum to 1")
        object.__setattr__(self, "values", v)

    @property
    def flagged(self) -> np.ndarray:
        """Boolean mask of all-zero rows."""
        return ~np.any(self.values > 0, axis=1)

    def row(self, weak_id: int) -> np.ndarray:
        try:
            return self.values[self.rows.index(weak_id)]
        except ValueError:
            raise IndexMismatchError(f"weak category {weak_id} not in similarity rows") from None

    def __eq__(self, other):
        if not isinstance(other, SimilarityMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def normalize_rows(values: np.ndarray) -> np.ndarray:
    """Scale each row to sum to one; rows summing to zero stay zero."""
    values = np.asarray(values, dtype=np.float64)
    sums = values.sum(axis=1, keepdims=True)
    out = np.zeros_like(values)
    np.divide(values, sums, out=out, where=sums > 0)
    return out


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center format."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"box needs positive size, got w={self.w} h={self.h}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise DomainError("box coordinates must be finite")

    @classmethod
    def from_corners(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> Box:
        return cls((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, xmax - xmin, ymax - ymin)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class ProposalRecord:
    """A region proposal with its pre-extracted features.

    ``feature`` feeds the classification/detection head; ``pool_feature``
    feeds the box regressors.
    """

    image_id: str
    box: Box
    feature: np.ndarray
    pool_feature: np.ndarray | None = None
    class_scores: np.ndarray | None = None

    def __post_init__(self):
        f = _frozen(self.feature)
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise InvariantError("proposal feature must be a finite vector")
        object.__setattr__(self, "feature", f)
        if self.pool_feature is not None:
            p = _frozen(self.pool_feature)
            if p.ndim != 1 or not np.all(np.isfinite(p)):
                raise InvariantError("pool feature must be a finite vector")
            object.__setattr__(self, "pool_feature", p)
        if self.class_scores is not None:
            s = _frozen(self.class_scores)
            if np.any(s < 0) or abs(s.sum() - 1.0) > PROB_SUM_TOL:
                raise InvariantError("class scores must be a probability vector")
            object.__setattr__(self, "class_scores", s)


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: int
    score: float
    box: Box


@dataclass(frozen=True)
class GroundTruth:
    category: int
    box: Box


class GroundTruthSet(Mapping):
    """Read-only mapping of image id to its annotated objects."""

    def __init__(self, items: Mapping[str, Sequence[GroundTruth]] | None = None):
        self._items = {k: tuple(v) for k, v in (items or {}).items()}

    def __getitem__(self, image_id: str) -> tuple[GroundTruth, ...]:
        return self._items.get(image_id, ())

    def __contains__(self, image_id) -> bool:
        return image_id in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other):
        if not isinstance(other, GroundTruthSet):
            return NotImplemented
        return self._items == other._items

    __hash__ = None

    def for_category(self, cid: int) -> dict[str, list[Box]]:
        out: dict[str, list[Box]] = {}
        for image_id, objs in self._items.items():
            boxes = [g.box for g in objs if g.category == cid]
            if boxes:
                out[image_id] = boxes
        return out

    def categories(self) -> set[int]:
        return {g.category for objs in self._items.values() for g in objs}
