"""Seeded synthetic transfer problems and the method-comparison benchmark.

A world has ``clusters`` latent groups.  Categories in a group share a
context direction, an appearance base and a classifier-to-detector delta,
so transferring deltas between group-mates is what helps.  Each category
also borrows appearance from one other group (visual confusion) and its
embedding leans towards a third group (semantic confusion); the two
confusions are drawn independently.

Randomness comes from ``numpy.random.PCG64`` streams spawned from
``SeedSequence(seed)`` in the order of :data:`STREAMS`, one per artifact
class, so adding draws to one artifact never shifts another.
"""

from __future__ import annotations

import csv
import dataclasses
import io as _stdio
import logging
import os
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io
from .adaptation import adapt_head, assemble_detector, compute_delta, region_scores
from .bbox import BoxRegressor, decode, encode, select_pairs, train_from_pairs, transfer_regressors
from .errors import ConfigError
from .evaluation import ClassAP, EvalConfig, Subset, ap_from_flags, iou_matrix, mean_ap
from .model import (
    Box,
    Category,
    CategoryRegistry,
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
from .pcmp import PcmpConfig
from .similarity import (
    MixtureConfig,
    TruncationMode,
    TruncationScheme,
    category_embeddings,
    lsda_baseline_similarity,
    mixture,
    semantic_similarity_knn,
    semantic_similarity_sparse,
    visual_similarity,
)

log = logging.getLogger(__name__)

PRNG_NAME = "numpy.random.PCG64 via SeedSequence(seed).spawn"
STREAMS = ("split", "latent", "heads", "embeddings", "validation", "train_scenes", "test_scenes", "regressors")

METHODS = (
    "ClassificationOnly",
    "LsdaAvgK",
    "WeightedVisual",
    "SemanticKnn",
    "SemanticSparse",
    "Mixture",
    "MixturePlusBBoxReg",
)
EXTRA_METHODS = ("Oracle",)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    K: int = 30
    m: int = 15
    D: int = 64
    F: int = 16
    E: int = 32
    clusters: int = 5
    images_per_category: int = 6
    proposals_per_image: int = 12
    sigma_f: float = 0.3
    sigma_delta: float = 0.2
    sigma_e: float = 0.5
    # generator knobs beyond the core set
    val_images_per_category: int = 10
    train_images_per_category: int = 8
    sigma_appearance: float = 0.5
    visual_confusion: float = 1.0
    semantic_confusion: float = 0.2
    logit_scale: float = 5.0
    context_strength: float = 1.0
    background_bias: float = 0.0
    background_context: float = 0.5
    sigma_pool: float = 0.05
    pool_scale: float = 200.0
    sigma_regressor: float = 0.3
    box_spread_xy: float = 0.2
    box_spread_wh: float = 0.25
    far_fraction: float = 0.25
    delta_cos_floor: float = 0.2
    image_size: tuple[int, int] = (500, 400)

    def __post_init__(self):
        if not (1 <= self.m < self.K):
            raise ConfigError("need 1 <= m < K")
        if self.clusters < 2:
            raise ConfigError("need at least two clusters")
        if self.clusters > self.m or self.clusters > self.K - self.m:
            raise ConfigError("every cluster needs a strong and a weak category")
        if min(self.D, self.F, self.E) < 2:
            raise ConfigError("all dimensions must be at least 2")
        if min(self.images_per_category, self.proposals_per_image,
               self.val_images_per_category, self.train_images_per_category) < 1:
            raise ConfigError("image and proposal counts must be positive")
        for name in ("sigma_f", "sigma_delta", "sigma_e", "sigma_appearance", "sigma_pool",
                     "sigma_regressor", "visual_confusion", "semantic_confusion", "background_context"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.far_fraction < 1:
            raise ConfigError("far_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown world settings {sorted(unknown)}")
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    """Images with one annotated object each and a fixed number of proposals per image."""

    image_ids: tuple[str, ...]
    gt_category: np.ndarray  # (I,)
    gt_boxes: np.ndarray  # (I, 4)
    boxes: np.ndarray  # (I, n, 4)
    features: np.ndarray  # (I, n, D)
    pool: np.ndarray  # (I, n, F)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def per_image(self) -> int:
        return self.boxes.shape[1]

    def records(self) -> list[ProposalRecord]:
        return [
            ProposalRecord(img, Box(*self.boxes[i, p]), self.features[i, p], self.pool[i, p])
            for i, img in enumerate(self.image_ids)
            for p in range(self.per_image)
        ]

    def groundtruth(self) -> GroundTruthSet:
        return GroundTruthSet(
            {img: [GroundTruth(int(self.gt_category[i]), Box(*self.gt_boxes[i]))]
             for i, img in enumerate(self.image_ids)}
        )


@dataclass(frozen=True)
class SyntheticWorld:
    config: WorldConfig
    registry: CategoryRegistry
    cluster_of: tuple[int, ...]
    classifier: HeadMatrix
    detector: HeadMatrix  # strong rows + background, as trained with boxes
    true_detector: HeadMatrix  # all K rows + background
    embeddings: EmbeddingTable
    scores: ScoreTable
    train: Scene
    test: Scene
    true_regressors: dict[int, BoxRegressor] = field(default_factory=dict)

    def category_embeddings(self) -> dict[int, np.ndarray]:
        return category_embeddings(self.registry, self.embeddings)


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}


def _unit_rows(rng, n, dim):
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _assign_clusters(cfg: WorldConfig, rng) -> tuple[list[int], list[Split]]:
    """Cluster and split per category id; strong ids come first."""
    strong_c = [i % cfg.clusters for i in range(cfg.m)]
    weak_c = [i % cfg.clusters for i in range(cfg.K - cfg.m)]
    perm = rng.permutation(cfg.clusters)
    clusters = [int(perm[c]) for c in strong_c + weak_c]
    splits = [Split.STRONG] * cfg.m + [Split.WEAK] * (cfg.K - cfg.m)
    return clusters, splits


def _other_cluster(rng, k, n_clusters):
    c = int(rng.integers(n_clusters - 1))
    return c + 1 if c >= k else c


def _sample_scene(cfg, rng, cats, prefix, latent, regress_maps):
    """Images of the given categories, one object each."""
    W_img, H_img = cfg.image_size
    n = cfg.proposals_per_image
    n_far = int(round(cfg.far_fraction * n))
    n_near = n - n_far
    I = len(cats)
    gt = np.empty((I, 4))
    boxes = np.empty((I, n, 4))
    for i in range(I):
        w = rng.uniform(0.15, 0.5) * W_img
        h = rng.uniform(0.15, 0.5) * H_img
        gt[i] = (rng.uniform(w / 2, W_img - w / 2), rng.uniform(h / 2, H_img - h / 2), w, h)
        t = rng.standard_normal((n_near, 4)) * [cfg.box_spread_xy, cfg.box_spread_xy,
                                                cfg.box_spread_wh, cfg.box_spread_wh]
        pw = gt[i, 2] / np.exp(t[:, 2])
        ph = gt[i, 3] / np.exp(t[:, 3])
        boxes[i, :n_near] = np.stack([gt[i, 0] - t[:, 0] * pw, gt[i, 1] - t[:, 1] * ph, pw, ph], 1)
        fw = rng.uniform(0.1, 0.5, n_far) * W_img
        fh = rng.uniform(0.1, 0.5, n_far) * H_img
        boxes[i, n_near:] = np.stack([rng.uniform(0, W_img, n_far), rng.uniform(0, H_img, n_far), fw, fh], 1)

    u = np.stack([iou_matrix(boxes[i], gt[i : i + 1])[:, 0] for i in range(I)])  # (I, n)
    obj, ctx = latent["object"], latent["context"]
    cats = np.asarray(cats)
    features = (
        u[:, :, None] * obj[cats][:, None, :]
        + (1 - u[:, :, None]) * ctx[cats][:, None, :]
        + cfg.sigma_f * rng.standard_normal((I, n, cfg.D))
    )
    # Pool features encode the offset to the object only when the proposal overlaps it.
    T = np.empty((I, n, 4))
    for i in range(I):
        T[i] = encode(boxes[i], np.repeat(gt[i : i + 1], n, axis=0))
    informative = (u >= 0.25)[:, :, None]
    T_seen = np.where(informative, T, 0.0)
    R = regress_maps[cats]  # (I, F, 4)
    pool = cfg.pool_scale * (
        np.einsum("ift,int->inf", R, T_seen) + cfg.sigma_pool * rng.standard_normal((I, n, cfg.F))
    )
    ids = tuple(f"{prefix}{i:04d}" for i in range(I))
    return Scene(ids, cats.copy(), gt, boxes, features, pool)


def generate_world(cfg: WorldConfig) -> SyntheticWorld:
    rng = _rngs(cfg.seed)
    clusters, splits = _assign_clusters(cfg, rng["split"])
    K, D, C = cfg.K, cfg.D, cfg.clusters
    cl = np.array(clusters)

    lat = rng["latent"]
    base = _unit_rows(lat, C, D)
    context = cfg.context_strength * _unit_rows(lat, C, D)
    background = _unit_rows(lat, 1, D)[0]
    vis_other = np.array([_other_cluster(lat, k, C) for k in clusters])
    appearance = (
        base[cl]
        + cfg.visual_confusion * base[vis_other]
        + cfg.sigma_appearance * lat.standard_normal((K, D)) / np.sqrt(D)
    )
    obj_dir = appearance  # what a well-localized proposal looks like
    ctx_dir = context[cl] + background  # what surrounding context looks like

    # The detector responds to the object alone; the classifier, trained on
    # whole images, also responds to the group context, and carries a
    # category-specific error that transfer cannot undo.
    hr = rng["heads"]
    s = cfg.logit_scale
    wd = np.hstack([s * appearance, np.zeros((K, 1))])
    center = np.hstack([-s * context, np.zeros((C, 1))])
    cnorm = np.linalg.norm(center, axis=1)
    noise = hr.standard_normal((K, D + 1)) / np.sqrt(D + 1)
    deltas = center[cl] + cfg.sigma_delta * cnorm[cl, None] * noise
    for k in range(C):
        members = deltas[cl == k]
        unit = members / np.linalg.norm(members, axis=1, keepdims=True)
        cos = unit @ unit.T
        if cos.min() < cfg.delta_cos_floor:
            raise ConfigError(
                f"cluster {k} deltas have cosine {cos.min():.3f} below the floor {cfg.delta_cos_floor}"
            )
    wc = wd - deltas
    # Trained on regions around the annotated objects, the background class
    # absorbs every group context.
    bg_row = np.append(s * (background + cfg.background_context * context.sum(axis=0)), cfg.background_bias)

    names = [f"cat{c:02d}" for c in range(K)]
    registry = CategoryRegistry(
        tuple(Category(c, names[c], (names[c],), splits[c]) for c in range(K))
    )
    strong = registry.strong_ids
    classifier = HeadMatrix(HeadKind.CLASSIFIER, tuple(range(K)), wc)
    detector = HeadMatrix(HeadKind.DETECTOR, strong, wd[list(strong)], bg_row)
    true_detector = HeadMatrix(HeadKind.DETECTOR, tuple(range(K)), wd, bg_row)

    er = rng["embeddings"]
    E = cfg.E
    emb_center = _unit_rows(er, C, E)
    sem_other = np.array([_other_cluster(er, k, C) for k in clusters])
    emb = (
        emb_center[cl]
        + cfg.semantic_confusion * emb_center[sem_other]
        + cfg.sigma_e * er.standard_normal((K, E)) / np.sqrt(E)
    )
    embeddings = EmbeddingTable(E, {names[c]: emb[c] for c in range(K)})

    vr = rng["validation"]
    records = []
    n_val = cfg.val_images_per_category
    for j in registry.weak_ids:
        z = appearance[j] + context[cl[j]] + cfg.sigma_f * vr.standard_normal((n_val, D))
        logits = z @ wc[:, :-1].T + wc[:, -1]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        for n in range(n_val):
            records.append(ScoreRecord(f"val_{j:03d}_{n:03d}", j, p[n]))
    scores = ScoreTable(tuple(records))

    rr = rng["regressors"]
    R_cluster = rr.standard_normal((C, cfg.F, 4))
    R = R_cluster[cl] + cfg.sigma_regressor * rr.standard_normal((K, cfg.F, 4))
    true_regs = {}
    for c in range(K):
        pinv = np.linalg.pinv(R[c]) / cfg.pool_scale  # (4, F)
        true_regs[c] = BoxRegressor(c, np.hstack([pinv, np.zeros((4, 1))]), 0.0)

    latent = {"object": obj_dir, "context": ctx_dir}
    train_cats = [c for c in strong for _ in range(cfg.train_images_per_category)]
    test_cats = [c for c in range(K) for _ in range(cfg.images_per_category)]
    train = _sample_scene(cfg, rng["train_scenes"], train_cats, "train", latent, R)
    test = _sample_scene(cfg, rng["test_scenes"], test_cats, "test", latent, R)

    return SyntheticWorld(
        cfg, registry, tuple(clusters), classifier, detector, true_detector,
        embeddings, scores, train, test, true_regs,
    )


# -- serialization ------------------------------------------------------------

WORLD_FILES = (
    "registry.json", "classifier.csv", "detector.csv", "detector_true.csv", "embeddings.txt",
    "scores.csv", "train_proposals.csv", "train_groundtruth.csv", "test_proposals.csv",
    "test_groundtruth.csv", "regressors_true.csv", "clusters.csv",
)


def save_world(world: SyntheticWorld, outdir) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    p = lambda name: os.path.join(outdir, name)  # noqa: E731
    io.save_registry(world.registry, p("registry.json"))
    io.save_matrix(world.classifier, p("classifier.csv"))
    io.save_matrix(world.detector, p("detector.csv"))
    io.save_matrix(world.true_detector, p("detector_true.csv"))
    io.save_embeddings(world.embeddings, p("embeddings.txt"))
    io.save_scores(world.scores, p("scores.csv"))
    io.save_proposals(world.train.records(), p("train_proposals.csv"))
    io.save_groundtruth(world.train.groundtruth(), p("train_groundtruth.csv"))
    io.save_proposals(world.test.records(), p("test_proposals.csv"))
    io.save_groundtruth(world.test.groundtruth(), p("test_groundtruth.csv"))
    io.save_regressors(world.true_regressors, p("regressors_true.csv"))
    with open(p("clusters.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category_id", "cluster"])
        w.writerows([c, k] for c, k in enumerate(world.cluster_of))
    return [p(n) for n in WORLD_FILES]


# -- benchmark ----------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    lsda_k: int = 3
    alpha: float = 0.6
    pcmp: PcmpConfig = PcmpConfig()
    lambda0: float = 1000.0
    iou_min: float = 0.6
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    seed: int
    map_weak: float
    map_strong: float
    map_all: float
    param_err_weak: float


BENCH_HEADER = ["method", "seed", "map_weak", "map_strong", "map_all", "param_err_weak"]


def scene_class_aps(
    head: HeadMatrix,
    scene: Scene,
    registry: CategoryRegistry,
    cfg: EvalConfig,
    regressors: dict[int, BoxRegressor] | None = None,
) -> dict[int, ClassAP]:
    """Score, suppress, optionally regress, and evaluate every category on a scene.

    Array form of ``score_regions -> nms -> regress_detections ->
    class_ap`` for scenes with one object per image.
    """
    I, n = scene.n_images, scene.per_image
    K = registry.K
    if head.rows != tuple(range(K)):
        raise ConfigError("scene evaluation needs a head with rows 0..K-1")
    S = region_scores(head, scene.features.reshape(I * n, -1)).reshape(I, n, K).transpose(0, 2, 1)

    ov = np.stack([iou_matrix(scene.boxes[i], scene.boxes[i]) for i in range(I)])  # (I, n, n)
    order = np.argsort(-S, axis=2, kind="stable")
    suppressed = np.zeros((I, K, n), dtype=bool)
    keep = np.zeros((I, K, n), dtype=bool)
    ii = np.arange(I)[:, None]
    kk = np.arange(K)[None, :]
    for r in range(n):
        idx = order[:, :, r]
        alive = ~suppressed[ii, kk, idx]
        keep[ii, kk, idx] = alive
        suppressed |= alive[:, :, None] & (ov[ii, idx] > cfg.nms_iou)

    boxes = np.broadcast_to(scene.boxes[:, None, :, :], (I, K, n, 4))
    if regressors:
        flat_boxes = scene.boxes.reshape(I * n, 4)
        flat_pool = scene.pool.reshape(I * n, -1)
        moved = np.array(boxes)
        for c, reg in regressors.items():
            T = reg.predict(flat_pool)
            moved[:, c] = decode(flat_boxes, T).reshape(I, n, 4)
        boxes = moved

    gt_iou = np.empty((I, K, n))
    for i in range(I):
        gt_iou[i] = iou_matrix(boxes[i].reshape(K * n, 4), scene.gt_boxes[i : i + 1])[:, 0].reshape(K, n)

    out = {}
    for c in range(K):
        own = scene.gt_category == c
        sc = S[:, c, :]
        kc = keep[:, c, :]
        hit = kc & own[:, None] & (gt_iou[:, c, :] >= cfg.iou_threshold)
        # the highest-scoring qualifying detection in each image takes its single object
        masked = np.where(hit, sc, -np.inf)
        best = np.argmax(masked, axis=1)
        tp = np.zeros_like(kc)
        has = np.any(hit, axis=1)
        tp[np.flatnonzero(has), best[has]] = True
        flat_scores = sc[kc]
        flat_tp = tp[kc]
        rank = np.argsort(-flat_scores, kind="stable")
        n_gt = int(own.sum())
        out[c] = ClassAP(c, ap_from_flags(flat_tp[rank], n_gt), n_gt, int(kc.sum()))
    return out


def _similarities(world: SyntheticWorld, cfg: BenchConfig) -> dict[str, SimilarityMatrix]:
    reg = world.registry
    emb = world.category_embeddings()
    visual = visual_similarity(world.scores, reg)
    sparse = semantic_similarity_sparse(emb, reg, cfg.pcmp)
    return {
        "LsdaAvgK": lsda_baseline_similarity(
            world.classifier, reg, TruncationScheme(TruncationMode.AVERAGE, cfg.lsda_k)
        ),
        "WeightedVisual": visual,
        "SemanticKnn": semantic_similarity_knn(emb, reg),
        "SemanticSparse": sparse,
        "Mixture": mixture(visual, sparse, MixtureConfig(cfg.alpha)),
    }


def method_head(world: SyntheticWorld, method: str, sims: dict[str, SimilarityMatrix]) -> HeadMatrix:
    reg = world.registry
    if method == "ClassificationOnly":
        return HeadMatrix(HeadKind.DETECTOR, tuple(range(reg.K)), world.classifier.values,
                          world.detector.background)
    if method == "Oracle":
        return world.true_detector
    key = "Mixture" if method == "MixturePlusBBoxReg" else method
    delta = compute_delta(world.classifier, world.detector, reg)
    weak = adapt_head(world.classifier, delta, sims[key])
    return assemble_detector(reg, world.detector, weak)


def trained_regressors(world: SyntheticWorld, sim: SimilarityMatrix, cfg: BenchConfig) -> dict[int, BoxRegressor]:
    reg = world.registry
    pairs = select_pairs(world.train.records(), world.train.groundtruth(), cfg.iou_min)
    strong_regs = train_from_pairs(pairs, reg.strong_ids, cfg.lambda0)
    weak_regs = transfer_regressors(strong_regs, sim)
    return {**strong_regs, **weak_regs}


def run_benchmark(
    world: SyntheticWorld, methods: Sequence[str] = METHODS, cfg: BenchConfig | None = None
) -> list[BenchmarkRow]:
    cfg = cfg or BenchConfig()
    unknown = [mth for mth in methods if mth not in METHODS + EXTRA_METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}")
    reg = world.registry
    sims = _similarities(world, cfg)
    weak = list(reg.weak_ids)
    true_weak = world.true_detector.take(weak)
    rows = []
    for method in methods:
        head = method_head(world, method, sims)
        regs = trained_regressors(world, sims["Mixture"], cfg) if method == "MixturePlusBBoxReg" else None
        aps = scene_class_aps(head, world.test, reg, cfg.eval, regs)
        err = float(np.linalg.norm(head.take(weak) - true_weak))
        rows.append(
            BenchmarkRow(
                method,
                world.config.seed,
                mean_ap(aps, reg, Subset.WEAK),
                mean_ap(aps, reg, Subset.STRONG),
                mean_ap(aps, reg, Subset.ALL),
                err,
            )
        )
    return rows


def _run_seed(args) -> list[BenchmarkRow]:
    world_cfg, methods, bench_cfg = args
    return run_benchmark(generate_world(world_cfg), methods, bench_cfg)


def run_seeds(
    world_cfg: WorldConfig,
    seeds: Sequence[int],
    methods: Sequence[str] = METHODS,
    bench_cfg: BenchConfig | None = None,
    threads: int = 1,
) -> list[BenchmarkRow]:
    """Run every seed; output order is seed order regardless of ``threads``."""
    bench_cfg = bench_cfg or BenchConfig()
    jobs = [(dataclasses.replace(world_cfg, seed=s), tuple(methods), bench_cfg) for s in seeds]
    if threads <= 1 or len(jobs) <= 1:
        results = [_run_seed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_seed, jobs))
    return [row for seed_rows in results for row in seed_rows]


def benchmark_csv(rows: Sequence[BenchmarkRow]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in rows:
        w.writerow([r.method, r.seed, io.fmt(r.map_weak), io.fmt(r.map_strong),
                    io.fmt(r.map_all), io.fmt(r.param_err_weak)])
    return buf.getvalue()


def summarize(rows: Sequence[BenchmarkRow]) -> dict[str, dict[str, float]]:
    """Per-method means over seeds."""
    out: dict[str, dict[str, float]] = {}
    for method in dict.fromkeys(r.method for r in rows):
        mine = [r for r in rows if r.method == method]
        out[method] = {
            key: float(np.mean([getattr(r, key) for r in mine]))
            for key in ("map_weak", "map_strong", "map_all", "param_err_weak")
        }
    return out
