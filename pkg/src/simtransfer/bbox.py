"""Bounding-box regression: targets, ridge training, and similarity transfer."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import (
    CoverageError,
    DimensionError,
    DomainError,
    IndexMismatchError,
    InvariantError,
    MissingRegressorError,
    SingularSystemError,
)
from .evaluation import iou
from .model import Box, Detection, GroundTruthSet, ProposalRecord, SimilarityMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegressionTarget:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th])


@dataclass(frozen=True)
class BoxRegressor:
    """Linear offset predictors; ``weights`` rows are (wx, wy, ww, wh), bias last."""

    category: int
    weights: np.ndarray
    lambda0: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 2 or w.shape[0] != 4:
            raise DimensionError(f"regressor weights must be 4 x (F+1), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvariantError("regressor weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    wx = property(lambda self: self.weights[0])
    wy = property(lambda self: self.weights[1])
    ww = property(lambda self: self.weights[2])
    wh = property(lambda self: self.weights[3])

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1] - 1

    def predict(self, features) -> np.ndarray:
        """Offsets (n, 4) for pool features (n, F)."""
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise DimensionError(f"features have dim {X.shape[1]}, regressor expects {self.feature_dim}")
        return X @ self.weights[:, :-1].T + self.weights[:, -1]

    def __eq__(self, other):
        if not isinstance(other, BoxRegressor):
            return NotImplemented
        return (
            self.category == other.category
            and self.lambda0 == other.lambda0
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def make_targets(p: Box, g: Box) -> RegressionTarget:
    if not (p.w > 0 and p.h > 0 and g.w > 0 and g.h > 0):
        raise DomainError("regression targets need positive box sizes")
    return RegressionTarget(
        (g.x - p.x) / p.w,
        (g.y - p.y) / p.h,
        math.log(g.w / p.w),
        math.log(g.h / p.h),
    )


def apply_offsets(p: Box, t: RegressionTarget) -> Box:
    return Box(p.x + p.w * t.tx, p.y + p.h * t.ty, p.w * math.exp(t.tw), p.h * math.exp(t.th))


def encode(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Vectorised targets for (n, 4) center-format arrays."""
    return np.stack(
        [
            (G[:, 0] - P[:, 0]) / P[:, 2],
            (G[:, 1] - P[:, 1]) / P[:, 3],
            np.log(G[:, 2] / P[:, 2]),
            np.log(G[:, 3] / P[:, 3]),
        ],
        axis=1,
    )


def decode(P: np.ndarray, T: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            P[:, 0] + P[:, 2] * T[:, 0],
            P[:, 1] + P[:, 3] * T[:, 1],
            P[:, 2] * np.exp(T[:, 2]),
            P[:, 3] * np.exp(T[:, 3]),
        ],
        axis=1,
    )


@dataclass(frozen=True)
class TrainingPair:
    proposal: ProposalRecord
    gt: Box
    iou: float


def select_pairs(
    proposals: Sequence[ProposalRecord], gts: GroundTruthSet, iou_min: float = 0.6
) -> dict[int, list[TrainingPair]]:
    """Pair each proposal with its highest-IoU ground truth in the same image.

    Pairs below ``iou_min`` are dropped.  Ties between ground truths go to
    the one listed first.
    """
    out: dict[int, list[TrainingPair]] = {}
    for p in proposals:
        best, best_iou = None, -1.0
        for g in gts[p.image_id]:
            v = iou(p.box, g.box)
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= iou_min:
            out.setdefault(best.category, []).append(TrainingPair(p, best.box, best_iou))
    return out


def _design(features) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.hstack([X, np.ones((X.shape[0], 1))])


def ridge_solve(design: np.ndarray, targets: np.ndarray, lambda0: float) -> np.ndarray:
    """Solve ``(X^T X + lambda0 I) W = X^T T`` by Cholesky; returns W with shape (cols, n_targets)."""
    A = design.T @ design + lambda0 * np.eye(design.shape[1])
    b = design.T @ targets
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError:
        raise SingularSystemError("normal equations are singular; use lambda0 > 0") from None
    return linalg.cho_solve(factor, b)


def train_regressor(category: int, features, targets, lambda0: float = 1000.0) -> BoxRegressor:
    """Ridge fit of the four offset predictors.

    ``features`` is (n, F) without the bias slot; it is appended here and
    regularised like every other weight.
    """
    X = _design(features)
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if X.shape[0] == 0:
        raise InvariantError("no training pairs")
    if T.shape != (X.shape[0], 4):
        raise DimensionError(f"targets must be ({X.shape[0]}, 4), got {T.shape}")
    if lambda0 < 0:
        raise DomainError("lambda0 must be nonnegative")
    return BoxRegressor(category, ridge_solve(X, T, lambda0).T, lambda0)


def train_from_pairs(
    pairs: Mapping[int, Sequence[TrainingPair]], categories, lambda0: float = 1000.0
) -> dict[int, BoxRegressor]:
    out = {}
    for cid in categories:
        cp = pairs.get(cid, ())
        if not cp:
            log.info("category %d has no training pairs; no regressor", cid)
            continue
        if any(p.proposal.pool_feature is None for p in cp):
            raise DimensionError(f"category {cid}: training proposals lack box-regression features")
        feats = np.stack([p.proposal.pool_feature for p in cp])
        T = np.stack([make_targets(p.proposal.box, p.gt).as_array() for p in cp])
        out[cid] = train_regressor(cid, feats, T, lambda0)
    return out


def transfer_regressors(
    strong_regs: Mapping[int, BoxRegressor], sim: SimilarityMatrix
) -> dict[int, BoxRegressor]:
    """Similarity-weighted sum of strong regressors for each weak row.

    All-zero similarity rows produce no regressor.
    """
    out = {}
    for row, j in enumerate(sim.rows):
        weights = sim.values[row]
        nz = np.flatnonzero(weights > 0)
        if nz.size == 0:
            log.info("weak category %d has no similar strong category; no regressor", j)
            continue
        missing = [sim.cols[i] for i in nz if sim.cols[i] not in strong_regs]
        if missing:
            raise CoverageError(f"no regressor for strong categories {missing}")
        shapes = {strong_regs[sim.cols[i]].weights.shape for i in nz}
        if len(shapes) != 1:
            raise DimensionError("strong regressors have differing feature dimensions")
        W = np.zeros(shapes.pop())
        for i in range(weights.size):
            if weights[i] > 0:
                W = W + weights[i] * strong_regs[sim.cols[i]].weights
        lam = strong_regs[sim.cols[nz[0]]].lambda0
        out[j] = BoxRegressor(j, W, lam)
    return out


def regress_detections(
    dets: Sequence[Detection], features, regs: Mapping[int, BoxRegressor]
) -> list[Detection]:
    """Move each detection box by its category regressor; ``features[i]`` belongs to ``dets[i]``."""
    if len(features) != len(dets):
        raise IndexMismatchError(f"{len(dets)} detections but {len(features)} feature vectors")
    out = []
    for d, f in zip(dets, features):
        reg = regs.get(d.category)
        if reg is None:
            raise MissingRegressorError(f"no regressor for category {d.category}")
        t = reg.predict(f)[0]
        out.append(Detection(d.image_id, d.category, d.score, apply_offsets(d.box, RegressionTarget(*t))))
    return out
