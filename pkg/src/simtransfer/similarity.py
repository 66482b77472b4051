"""Inter-category similarity: weak categories (rows) against strong ones (columns)."""

from __future__ import annotations

import enum
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import (
    IndexMismatchError,
    InvariantError,
    MissingCategoryError,
    UnresolvableError,
)
from .model import CategoryRegistry, EmbeddingTable, HeadMatrix, ScoreTable, SimilarityMatrix, normalize_rows
from .pcmp import PcmpConfig, pcmp_solve

log = logging.getLogger(__name__)

EPS = 1e-6


class TruncationMode(str, enum.Enum):
    AVERAGE = "avg"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class TruncationScheme:
    mode: TruncationMode
    k: int

    def __post_init__(self):
        object.__setattr__(self, "mode", TruncationMode(self.mode))
        if self.k < 1:
            raise InvariantError("k must be at least 1")

    def check(self, m: int) -> None:
        if self.k > m:
            raise InvariantError(f"k={self.k} exceeds the {m} strong categories")


@dataclass(frozen=True)
class MixtureConfig:
    alpha: float = 0.6
    renormalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvariantError("alpha must lie in [0, 1]")
        if not self.renormalize:
            raise InvariantError("mixture rows are always renormalized")


def _matrix(registry: CategoryRegistry, values) -> SimilarityMatrix:
    return SimilarityMatrix(registry.weak_ids, registry.strong_ids, normalize_rows(values))


def visual_similarity(scores: ScoreTable, registry: CategoryRegistry) -> SimilarityMatrix:
    """Mean classifier softmax mass that each weak category's images put on strong categories."""
    weak, strong = registry.weak_ids, registry.strong_ids
    probs = scores.matrix()
    if probs.size and probs.shape[1] != registry.K:
        raise IndexMismatchError(f"score vectors have {probs.shape[1]} entries, registry has {registry.K}")
    truth = np.array([r.true_category for r in scores.records], dtype=int)
    out = np.zeros((len(weak), len(strong)))
    for row, j in enumerate(weak):
        sel = truth == j
        if not np.any(sel):
            raise MissingCategoryError(f"weak category {j} has no scored images")
        out[row] = probs[sel][:, list(strong)].mean(axis=0)
    return _matrix(registry, out)


def _resolve_token(token: str, table: EmbeddingTable):
    for cand in (token, token.lower(), token[:1].upper() + token[1:].lower()):
        if cand in table:
            return table[cand]
    return None


def _resolve_term(term: str, table: EmbeddingTable):
    for form in dict.fromkeys((term, term.replace(" ", "_"))):
        vec = _resolve_token(form, table)
        if vec is not None:
            return vec
    words = term.replace("_", " ").split()
    if len(words) < 2:
        return None
    found = [v for v in (_resolve_token(w, table) for w in words) if v is not None]
    if not found:
        return None
    return np.sum(found, axis=0)


def build_category_embedding(
    synset_terms: Iterable[str], table: EmbeddingTable, overrides: Iterable[str] = ()
) -> np.ndarray:
    """Unit-norm sum of the vectors of every resolvable synset term.

    Each term is looked up as given, then lowercased, then Capitalized;
    multiword phrases that still miss fall back to the sum of their
    in-vocabulary words.  ``overrides`` are extra labels appended to the
    term list.
    """
    terms = [*synset_terms, *overrides]
    total = np.zeros(table.dim)
    hit = False
    for term in terms:
        vec = _resolve_term(term, table)
        if vec is None:
            log.debug("term %r not in vocabulary", term)
            continue
        total = total + vec
        hit = True
    norm = np.linalg.norm(total)
    if not hit or norm == 0:
        raise UnresolvableError(f"none of {terms!r} resolves in the embedding table")
    return total / norm


def category_embeddings(
    registry: CategoryRegistry,
    table: EmbeddingTable,
    overrides: Mapping[str, Iterable[str]] | None = None,
) -> dict[int, np.ndarray]:
    overrides = overrides or {}
    return {
        c.id: build_category_embedding(c.synset_terms, table, overrides.get(c.name, ()))
        for c in registry.entries
    }


def _split_embeddings(embeddings: Mapping[int, np.ndarray], registry: CategoryRegistry):
    missing = [c for c in range(registry.K) if c not in embeddings]
    if missing:
        raise MissingCategoryError(f"no embedding for categories {missing}")
    W = np.stack([np.asarray(embeddings[j], float) for j in registry.weak_ids])
    S = np.stack([np.asarray(embeddings[i], float) for i in registry.strong_ids])
    return W, S


def _pairwise_dist(A, B):
    return np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1))


def semantic_similarity_knn(
    embeddings: Mapping[int, np.ndarray], registry: CategoryRegistry
) -> SimilarityMatrix:
    """Inverse Euclidean distance between category embeddings, row-normalized."""
    W, S = _split_embeddings(embeddings, registry)
    return _matrix(registry, 1.0 / (_pairwise_dist(W, S) + EPS))


def semantic_similarity_sparse(
    embeddings: Mapping[int, np.ndarray],
    registry: CategoryRegistry,
    cfg: PcmpConfig | None = None,
) -> SimilarityMatrix:
    """Nonnegative sparse reconstruction coefficients of each weak embedding.

    The dictionary is the strong embeddings in id order.  A support cap
    above the number of strong categories is clipped to it.
    """
    cfg = cfg or PcmpConfig()
    W, S = _split_embeddings(embeddings, registry)
    out = np.zeros((W.shape[0], S.shape[0]))
    for row, v in enumerate(W):
        code = pcmp_solve(v, S, cfg)
        out[row] = code.dense(S.shape[0])
    flagged = ~np.any(out > 0, axis=1)
    if np.any(flagged):
        log.info("weak categories %s have no positive reconstruction",
                 [registry.weak_ids[i] for i in np.flatnonzero(flagged)])
    return _matrix(registry, out)


def _top_k(row: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary; ties resolve to the lower column.
    order = np.lexsort((np.arange(row.size), -row))
    return order[:k]


def _apply_scheme(weights: np.ndarray, keep_idx, scheme: TruncationScheme) -> np.ndarray:
    out = np.zeros_like(weights)
    if scheme.mode is TruncationMode.AVERAGE:
        out[keep_idx] = 1.0 / len(keep_idx)
    else:
        kept = weights[keep_idx]
        total = kept.sum()
        if total > 0:
            out[keep_idx] = kept / total
    return out


def lsda_baseline_similarity(
    classifier: HeadMatrix, registry: CategoryRegistry, scheme: TruncationScheme
) -> SimilarityMatrix:
    """k nearest strong categories by Euclidean distance of classifier weight rows."""
    scheme.check(registry.m)
    W = classifier.take(registry.weak_ids)
    S = classifier.take(registry.strong_ids)
    dist = _pairwise_dist(W, S)
    out = np.zeros_like(dist)
    for row in range(dist.shape[0]):
        keep = _top_k(-dist[row], scheme.k)
        out[row] = _apply_scheme(1.0 / (dist[row] + EPS), keep, scheme)
    return _matrix(registry, out)


def truncate(sim: SimilarityMatrix, scheme: TruncationScheme) -> SimilarityMatrix:
    """Keep the k largest entries per row, then average or renormalize them."""
    scheme.check(len(sim.cols))
    out = np.zeros_like(sim.values)
    for row, vals in enumerate(sim.values):
        if not np.any(vals > 0):
            continue
        if scheme.mode is TruncationMode.WEIGHTED and scheme.k == vals.size:
            out[row] = vals
            continue
        out[row] = _apply_scheme(vals, _top_k(vals, scheme.k), scheme)
    return SimilarityMatrix(sim.rows, sim.cols, out)


def mixture(sv: SimilarityMatrix, ss: SimilarityMatrix, cfg: MixtureConfig | None = None) -> SimilarityMatrix:
    """Convex blend of visual and semantic rows on their shared support.

    Only strong categories positive in both rows survive.  When the two
    supports do not meet, the visual row is used unchanged.
    """
    cfg = cfg or MixtureConfig()
    if sv.rows != ss.rows or sv.cols != ss.cols:
        raise IndexMismatchError("visual and semantic matrices index different categories")
    a = cfg.alpha
    admissible = (sv.values > 0) & (ss.values > 0)
    blended = np.where(admissible, a * sv.values + (1.0 - a) * ss.values, 0.0)
    out = normalize_rows(blended)
    empty = ~np.any(out > 0, axis=1)
    for row in np.flatnonzero(empty):
        log.warning("weak category %d: visual and semantic supports are disjoint; "
                    "using the visual row", sv.rows[row])
        out[row] = sv.values[row]
    return SimilarityMatrix(sv.rows, sv.cols, out)
