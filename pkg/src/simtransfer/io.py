"""On-disk formats.

Matrices use a labeled CSV: the top-left cell is the kind tag, the rest
of the first row holds column labels and the first column holds row
labels.  Floats are written with 17 significant digits so that doubles
survive a round trip unchanged.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from collections.abc import Iterable, Sequence

import numpy as np

from .bbox import BoxRegressor
from .errors import DimensionError, InvariantError, ParseError
from .model import (
    Box,
    Category,
    CategoryRegistry,
    Detection,
    EmbeddingTable,
    GroundTruth,
    GroundTruthSet,
    HeadKind,
    HeadMatrix,
    ProposalRecord,
    ScoreRecord,
    ScoreTable,
    SimilarityMatrix,
    Split,
)

log = logging.getLogger(__name__)

BACKGROUND_LABEL = "background"
REGRESSOR_PARTS = ("wx", "wy", "ww", "wh")


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _parse_float(tok: str, where: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"{where}: non-numeric token {tok!r}") from None


def _parse_int(tok: str, where: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{where}: expected an integer, got {tok!r}") from None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- registry ---------------------------------------------------------------


def load_registry(path) -> CategoryRegistry:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    try:
        raw = doc["categories"]
        entries = []
        for item in raw:
            split = str(item["split"]).lower()
            if split not in ("strong", "weak"):
                raise ParseError(f"{path}: unknown split {item['split']!r}")
            synset = item["synset"]
            if isinstance(synset, str) or not isinstance(synset, list):
                raise ParseError(f"{path}: synset of {item['name']!r} must be a list")
            entries.append(
                Category(
                    id=int(item["id"]),
                    name=str(item["name"]),
                    synset_terms=tuple(str(t) for t in synset),
                    split=Split(split),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed registry ({exc})") from None
    entries.sort(key=lambda c: c.id)
    return CategoryRegistry(tuple(entries))


def registry_to_json(registry: CategoryRegistry) -> str:
    doc = {
        "categories": [
            {"id": c.id, "name": c.name, "synset": list(c.synset_terms), "split": c.split.value}
            for c in registry.entries
        ]
    }
    return json.dumps(doc, indent=2) + "\n"


def save_registry(registry: CategoryRegistry, path) -> None:
    with open(path, "w") as fh:
        fh.write(registry_to_json(registry))


# -- labeled CSV ------------------------------------------------------------


def write_labeled_csv(path, kind: str, cols: Sequence[str], rows: Sequence[str], values) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(rows), len(cols)):
        raise DimensionError(f"values shape {values.shape} != ({len(rows)}, {len(cols)})")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([kind, *cols])
        for label, row in zip(rows, values):
            w.writerow([label, *(fmt(v) for v in row)])


def read_labeled_csv(path) -> tuple[str, list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        lines = [r for r in csv.reader(fh) if r]
    if not lines:
        raise ParseError(f"{path}: empty matrix file")
    kind, *cols = lines[0]
    labels, body = [], []
    for lineno, row in enumerate(lines[1:], start=2):
        if len(row) != len(cols) + 1:
            raise DimensionError(
                f"{path}:{lineno}: {len(row) - 1} values, header declares {len(cols)}"
            )
        labels.append(row[0])
        body.append([_parse_float(t, f"{path}:{lineno}") for t in row[1:]])
    values = np.array(body, dtype=np.float64).reshape(len(labels), len(cols))
    return kind, cols, labels, values


def _weight_cols(dim: int, prefix: str = "f") -> list[str]:
    return [f"{prefix}{i}" for i in range(dim)] + ["bias"]


def save_matrix(matrix: HeadMatrix, path) -> None:
    rows = [str(r) for r in matrix.rows]
    values = matrix.values
    if matrix.background is not None:
        rows.append(BACKGROUND_LABEL)
        values = np.vstack([values, matrix.background])
    write_labeled_csv(path, matrix.kind.value, _weight_cols(matrix.dim), rows, values)


def load_matrix(path) -> HeadMatrix:
    kind, cols, labels, values = read_labeled_csv(path)
    try:
        kind = HeadKind(kind)
    except ValueError:
        raise ParseError(f"{path}: unknown matrix kind {kind!r}") from None
    if not cols:
        raise DimensionError(f"{path}: no columns")
    background = None
    ids = []
    keep = []
    for i, label in enumerate(labels):
        if label == BACKGROUND_LABEL:
            if background is not None:
                raise InvariantError(f"{path}: two background rows")
            background = values[i]
        else:
            ids.append(_parse_int(label, str(path)))
            keep.append(i)
    return HeadMatrix(kind, tuple(ids), values[keep].reshape(len(keep), len(cols)), background)


def save_similarity(sim: SimilarityMatrix, path) -> None:
    write_labeled_csv(
        path, "similarity", [str(c) for c in sim.cols], [str(r) for r in sim.rows], sim.values
    )


def load_similarity(path) -> SimilarityMatrix:
    kind, cols, labels, values = read_labeled_csv(path)
    if kind != "similarity":
        raise ParseError(f"{path}: expected kind 'similarity', found {kind!r}")
    return SimilarityMatrix(
        tuple(_parse_int(r, str(path)) for r in labels),
        tuple(_parse_int(c, str(path)) for c in cols),
        values,
    )


def save_regressors(regs: dict[int, BoxRegressor], path) -> None:
    if not regs:
        raise InvariantError("no regressors to save")
    width = {r.weights.shape[1] for r in regs.values()}
    if len(width) != 1:
        raise DimensionError("regressors have differing feature dimensions")
    dim = width.pop() - 1
    rows, values = [], []
    for cid in sorted(regs):
        reg = regs[cid]
        for part, w in zip(REGRESSOR_PARTS, reg.weights):
            rows.append(f"{cid}:{part}")
            values.append([*w, reg.lambda0])
    write_labeled_csv(path, "bbox-regressor", _weight_cols(dim) + ["lambda0"], rows, values)


def load_regressors(path) -> dict[int, BoxRegressor]:
    kind, cols, labels, values = read_labeled_csv(path)
    if kind != "bbox-regressor":
        raise ParseError(f"{path}: expected kind 'bbox-regressor', found {kind!r}")
    parts: dict[int, dict[str, np.ndarray]] = {}
    lam: dict[int, float] = {}
    for label, row in zip(labels, values):
        cid_s, _, part = label.partition(":")
        if part not in REGRESSOR_PARTS:
            raise ParseError(f"{path}: bad regressor row label {label!r}")
        cid = _parse_int(cid_s, str(path))
        parts.setdefault(cid, {})[part] = row[:-1]
        lam[cid] = float(row[-1])
    out = {}
    for cid, p in parts.items():
        if set(p) != set(REGRESSOR_PARTS):
            raise InvariantError(f"{path}: regressor {cid} is missing rows")
        out[cid] = BoxRegressor(cid, np.stack([p[k] for k in REGRESSOR_PARTS]), lam[cid])
    return out


# -- embeddings ---------------------------------------------------------------


def load_embeddings(path, dim: int | None = None) -> EmbeddingTable:
    """Read ``token f1 ... fE`` lines.

    A leading ``<count> <dim>`` header line (word2vec text style) is
    accepted.  Without one, the dimension comes from ``dim`` or the
    first line.  Repeated tokens keep the last vector.
    """
    entries: dict[str, np.ndarray] = {}
    declared_count = None
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    start = 0
    if lines:
        head = lines[0].split()
        if len(head) == 2 and all(t.isdigit() for t in head):
            declared_count = int(head[0])
            hdim = int(head[1])
            if dim is not None and dim != hdim:
                raise DimensionError(f"{path}: header dim {hdim} != requested {dim}")
            dim = hdim
            start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        toks = line.split(" ")
        toks = [t for t in toks if t != ""]
        if not toks:
            continue
        token, nums = toks[0], toks[1:]
        if dim is None:
            dim = len(nums)
        if len(nums) != dim:
            raise DimensionError(f"{path}:{lineno}: {len(nums)} values, expected {dim}")
        vec = np.array([_parse_float(t, f"{path}:{lineno}") for t in nums])
        if token in entries:
            log.warning("%s:%d: duplicate token %r, keeping the last vector", path, lineno, token)
        entries[token] = vec
    if declared_count is not None and declared_count != len(entries):
        raise DimensionError(
            f"{path}: header declares {declared_count} tokens, body has {len(entries)}"
        )
    return EmbeddingTable(dim if dim is not None else 0, entries)


def save_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "w") as fh:
        for tok, vec in table.entries.items():
            fh.write(" ".join([tok, *(fmt(v) for v in vec)]) + "\n")


# -- score tables -------------------------------------------------------------


def save_scores(table: ScoreTable, path) -> None:
    width = len(table.records[0].scores) if table.records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "true_category", *(f"s{i}" for i in range(width))])
        for r in table.records:
            w.writerow([r.image_id, r.true_category, *(fmt(v) for v in r.scores)])


def load_scores(path) -> ScoreTable:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError(f"{path}: empty score table")
    header = rows[0]
    if header[:2] != ["image_id", "true_category"]:
        raise ParseError(f"{path}: header must start with image_id,true_category")
    width = len(header) - 2
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 2:
            raise DimensionError(f"{path}:{lineno}: expected {width} scores")
        where = f"{path}:{lineno}"
        records.append(
            ScoreRecord(
                row[0],
                _parse_int(row[1], where),
                np.array([_parse_float(t, where) for t in row[2:]]),
            )
        )
    return ScoreTable(tuple(records))


# -- detections, ground truth, proposals --------------------------------------

DETECTION_HEADER = ["image_id", "category_id", "score", "x", "y", "w", "h"]
GROUNDTRUTH_HEADER = ["image_id", "category_id", "x", "y", "w", "h"]


def _read_rows(path, header: list[str]) -> list[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0] != header:
        raise ParseError(f"{path}: expected header {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DimensionError(f"{path}:{lineno}: expected {len(header)} fields")
        out.append((lineno, row))
    return out


def detections_to_csv_rows(dets: Iterable[Detection]) -> list[list[str]]:
    return [
        [d.image_id, str(d.category), fmt(d.score), *(fmt(v) for v in d.box.as_array())]
        for d in dets
    ]


def save_detections(dets: Iterable[Detection], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_HEADER)
        w.writerows(detections_to_csv_rows(dets))


def load_detections(path) -> list[Detection]:
    out = []
    for lineno, row in _read_rows(path, DETECTION_HEADER):
        where = f"{path}:{lineno}"
        x, y, w, h = (_parse_float(t, where) for t in row[3:])
        out.append(
            Detection(row[0], _parse_int(row[1], where), _parse_float(row[2], where), Box(x, y, w, h))
        )
    return out


def save_groundtruth(gts: GroundTruthSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUNDTRUTH_HEADER)
        for image_id in gts:
            for g in gts[image_id]:
                w.writerow([image_id, g.category, *(fmt(v) for v in g.box.as_array())])


def load_groundtruth(path) -> GroundTruthSet:
    items: dict[str, list[GroundTruth]] = {}
    for lineno, row in _read_rows(path, GROUNDTRUTH_HEADER):
        where = f"{path}:{lineno}"
        x, y, w, h = (_parse_float(t, where) for t in row[2:])
        items.setdefault(row[0], []).append(GroundTruth(_parse_int(row[1], where), Box(x, y, w, h)))
    return GroundTruthSet(items)


def save_proposals(proposals: Sequence[ProposalRecord], path) -> None:
    """Write proposals as ``image_id,x,y,w,h,f0..,p0..`` rows."""
    d = len(proposals[0].feature) if proposals else 0
    pf = proposals[0].pool_feature if proposals else None
    f = 0 if pf is None else len(pf)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["image_id", "x", "y", "w", "h", *(f"f{i}" for i in range(d)), *(f"p{i}" for i in range(f))]
        )
        for p in proposals:
            if len(p.feature) != d or (0 if p.pool_feature is None else len(p.pool_feature)) != f:
                raise DimensionError("proposals have differing feature lengths")
            extra = [] if p.pool_feature is None else [fmt(v) for v in p.pool_feature]
            w.writerow(
                [p.image_id, *(fmt(v) for v in p.box.as_array()), *(fmt(v) for v in p.feature), *extra]
            )


def load_proposals(path) -> list[ProposalRecord]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][:5] != ["image_id", "x", "y", "w", "h"]:
        raise ParseError(f"{path}: expected header image_id,x,y,w,h,...")
    header = rows[0]
    fcols = [i for i, c in enumerate(header) if c.startswith("f")]
    pcols = [i for i, c in enumerate(header) if c.startswith("p")]
    if len(fcols) + len(pcols) + 5 != len(header):
        raise ParseError(f"{path}: unrecognised proposal columns")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DimensionError(f"{path}:{lineno}: expected {len(header)} fields")
        where = f"{path}:{lineno}"
        nums = [_parse_float(t, where) for t in row[1:]]
        vals = np.array(nums)
        box = Box(*vals[:4])
        feat = np.array([nums[i - 1] for i in fcols])
        pool = np.array([nums[i - 1] for i in pcols]) if pcols else None
        out.append(ProposalRecord(row[0], box, feat, pool))
    return out


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
