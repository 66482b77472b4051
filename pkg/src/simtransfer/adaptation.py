"""Classifier-to-detector head adaptation for weak categories."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, DimensionError, IndexMismatchError, InvariantError
from .model import (
    CategoryRegistry,
    Detection,
    HeadKind,
    HeadMatrix,
    ProposalRecord,
    SimilarityMatrix,
)


@dataclass(frozen=True)
class AdaptationEntry:
    category: int
    neighbors: tuple[int, ...]
    weights: tuple[float, ...]
    bias_norm: float


@dataclass(frozen=True)
class AdaptationReport:
    entries: tuple[AdaptationEntry, ...]

    def to_dict(self) -> dict:
        return {
            "categories": [
                {
                    "category": e.category,
                    "neighbors": list(e.neighbors),
                    "weights": list(e.weights),
                    "bias_norm": e.bias_norm,
                }
                for e in self.entries
            ]
        }


def compute_delta(classifier: HeadMatrix, detector: HeadMatrix, registry: CategoryRegistry) -> HeadMatrix:
    """Detector minus classifier weights over the strong categories."""
    if classifier.dim != detector.dim:
        raise DimensionError(f"classifier dim {classifier.dim} != detector dim {detector.dim}")
    strong = registry.strong_ids
    missing = [c for c in strong if c not in detector.rows]
    if missing:
        raise CoverageError(f"detector head lacks strong categories {missing}")
    missing = [c for c in strong if c not in classifier.rows]
    if missing:
        raise CoverageError(f"classifier head lacks strong categories {missing}")
    return HeadMatrix(HeadKind.DELTA, strong, detector.take(strong) - classifier.take(strong))


def adapt_head(classifier: HeadMatrix, delta: HeadMatrix, sim: SimilarityMatrix) -> HeadMatrix:
    """Detector rows for the weak categories: classifier row plus the similarity-weighted delta.

    All-zero similarity rows leave the classifier row as it is.
    """
    if classifier.dim != delta.dim:
        raise DimensionError(f"classifier dim {classifier.dim} != delta dim {delta.dim}")
    if set(sim.cols) != set(delta.rows):
        raise IndexMismatchError("similarity columns do not match the delta rows")
    base = classifier.take(sim.rows)
    D = delta.take(sim.cols)
    out = base + sim.values @ D
    flagged = sim.flagged
    out[flagged] = base[flagged]
    return HeadMatrix(HeadKind.DETECTOR_ADAPTED, sim.rows, out)


def adaptation_report(adapted: HeadMatrix, classifier: HeadMatrix, sim: SimilarityMatrix) -> AdaptationReport:
    entries = []
    bias = adapted.values - classifier.take(adapted.rows)
    for row, j in enumerate(sim.rows):
        vals = sim.values[row]
        nz = np.flatnonzero(vals > 0)
        entries.append(
            AdaptationEntry(
                j,
                tuple(sim.cols[i] for i in nz),
                tuple(float(vals[i]) for i in nz),
                float(np.linalg.norm(bias[adapted.index(j)])),
            )
        )
    return AdaptationReport(tuple(entries))


def assemble_detector(
    registry: CategoryRegistry, strong: HeadMatrix, weak: HeadMatrix
) -> HeadMatrix:
    """Full detector head (all K rows in id order) with the background row of ``strong``."""
    if strong.background is None:
        raise InvariantError("strong detector head has no background row")
    rows = []
    for cid in range(registry.K):
        src = strong if cid in registry.strong_ids else weak
        rows.append(src.take([cid])[0])
    return HeadMatrix(HeadKind.DETECTOR, tuple(range(registry.K)), np.array(rows), strong.background)


def region_scores(head: HeadMatrix, features: np.ndarray) -> np.ndarray:
    """Background-subtracted softmax scores, shape (n_proposals, n_rows).

    Columns follow ``head.rows``.
    """
    if head.background is None:
        raise InvariantError("scoring needs a head with a background row")
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != head.dim:
        raise DimensionError(f"features have dim {X.shape[1]}, head expects {head.dim}")
    W = np.vstack([head.values, head.background])
    logits = X @ W[:, :-1].T + W[:, -1]
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p[:, :-1] - p[:, -1:]


def score_regions(head: HeadMatrix, proposals: Sequence[ProposalRecord]) -> list[Detection]:
    """One candidate detection per (proposal, category) in proposal-major order."""
    if not proposals:
        return []
    scores = region_scores(head, np.stack([p.feature for p in proposals]))
    return [
        Detection(p.image_id, cid, float(scores[n, col]), p.box)
        for n, p in enumerate(proposals)
        for col, cid in enumerate(head.rows)
    ]
