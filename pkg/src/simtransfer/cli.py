"""Command-line entry point: ``simtransfer <subcommand> [flags]``.

Every subcommand reads and writes files through :mod:`simtransfer.io` and
delegates the work to the library, so its outputs match direct library
calls byte for byte.  Exit status is 0 on success, 2 when inputs or flags
fail validation, and 1 on any other failure.  Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from collections.abc import Sequence

from . import __version__, io
from .adaptation import (
    adapt_head,
    adaptation_report,
    assemble_detector,
    compute_delta,
    score_regions,
)
from .bbox import (
    regress_detections,
    select_pairs,
    train_from_pairs,
    transfer_regressors,
)
from .errors import (
    EmptySubsetError,
    SingularSystemError,
    TransferError,
)
from .evaluation import EvalConfig, evaluate, nms, write_report
from .model import HeadKind, SimilarityMatrix
from .pcmp import PcmpConfig
from .similarity import (
    MixtureConfig,
    TruncationScheme,
    category_embeddings,
    lsda_baseline_similarity,
    mixture,
    semantic_similarity_knn,
    semantic_similarity_sparse,
    truncate,
    visual_similarity,
)
from .synth import (
    EXTRA_METHODS,
    METHODS,
    PRNG_NAME,
    BenchConfig,
    WorldConfig,
    benchmark_csv,
    generate_world,
    run_seeds,
    save_world,
    summarize,
)

log = logging.getLogger("simtransfer")

SPEC_VERSION = "1.0"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# Failures that are the caller's to fix rather than the library's.
_RUNTIME_ERRORS = (SingularSystemError, EmptySubsetError)


class UsageError(Exception):
    """A flag combination or input that fails validation (exit 2)."""


# -- helpers ------------------------------------------------------------------


def _need(args, *names: str, why: str) -> None:
    for name in names:
        if getattr(args, name.lstrip("-").replace("-", "_")) is None:
            raise UsageError(f"{name} is required {why}")


def _load_overrides(path):
    if path is None:
        return None
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise UsageError(f"--synset-overrides {path}: expected an object of name -> [labels]")
    return doc


def _write_text(path, text: str) -> None:
    io.ensure_parent(path)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def build_manifest(args: argparse.Namespace, inputs: dict[str, str], seed=None) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    return {
        "spec_version": SPEC_VERSION,
        "tool_version": __version__,
        "subcommand": args.command if not getattr(args, "action", None) else f"{args.command} {args.action}",
        "flags": flags,
        "inputs": {flag: {"path": path, "sha256": io.file_sha256(path)} for flag, path in inputs.items()},
        "seed": seed,
        "prng": PRNG_NAME,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _input_paths(args, *names: str) -> dict[str, str]:
    out = {}
    for name in names:
        path = getattr(args, name, None)
        if path is not None:
            out["--" + name.replace("_", "-")] = path
    return out


# -- similarity ---------------------------------------------------------------


def compute_similarity(args) -> SimilarityMatrix:
    registry = io.load_registry(args.registry)
    method = args.method
    scheme = None
    if args.k is not None or method == "lsda":
        _need(args, "--k", why=f"for --method {method}" if method == "lsda" else "with --scheme")
        scheme = TruncationScheme(args.scheme, args.k)

    def semantic_embeddings():
        _need(args, "--embeddings", why=f"for --method {method}")
        table = io.load_embeddings(args.embeddings)
        return category_embeddings(registry, table, _load_overrides(args.synset_overrides))

    pcmp_cfg = PcmpConfig(lam=args.lam, max_support=args.max_support)
    if method == "visual":
        _need(args, "--scores", why="for --method visual")
        sim = visual_similarity(io.load_scores(args.scores), registry)
    elif method == "semantic-knn":
        sim = semantic_similarity_knn(semantic_embeddings(), registry)
    elif method == "semantic-sparse":
        sim = semantic_similarity_sparse(semantic_embeddings(), registry, pcmp_cfg)
    elif method == "lsda":
        _need(args, "--classifier-head", why="for --method lsda")
        return lsda_baseline_similarity(io.load_matrix(args.classifier_head), registry, scheme)
    else:
        _need(args, "--scores", "--embeddings", why="for --method mixture")
        sv = visual_similarity(io.load_scores(args.scores), registry)
        ss = semantic_similarity_sparse(semantic_embeddings(), registry, pcmp_cfg)
        sim = mixture(sv, ss, MixtureConfig(args.alpha))
    if scheme is not None:
        sim = truncate(sim, scheme)
    return sim


def cmd_similarity(args) -> dict[str, str]:
    sim = compute_similarity(args)
    io.ensure_parent(args.out)
    io.save_similarity(sim, args.out)
    return _input_paths(args, "registry", "scores", "embeddings", "classifier_head", "synset_overrides")


# -- adapt --------------------------------------------------------------------


def cmd_adapt(args) -> dict[str, str]:
    registry = io.load_registry(args.registry)
    classifier = io.load_matrix(args.classifier_head)
    detector = io.load_matrix(args.detector_head)
    sim = io.load_similarity(args.similarity)
    if sim.rows != registry.weak_ids or sim.cols != registry.strong_ids:
        raise UsageError(
            f"--similarity {args.similarity}: rows/columns do not match the weak/strong ids of the registry"
        )
    delta = compute_delta(classifier, detector, registry)
    weak = adapt_head(classifier, delta, sim)
    io.ensure_parent(args.out)
    if args.full:
        io.save_matrix(assemble_detector(registry, detector, weak), args.out)
    else:
        io.save_matrix(weak, args.out)
    if args.report_out:
        _write_text(args.report_out, json.dumps(adaptation_report(weak, classifier, sim).to_dict(), indent=2) + "\n")
    return _input_paths(args, "registry", "classifier_head", "detector_head", "similarity")


# -- detect -------------------------------------------------------------------


def cmd_detect(args) -> dict[str, str]:
    head = io.load_matrix(args.head)
    if head.background is None:
        raise UsageError(f"--head {args.head}: scoring needs a background row")
    dets = score_regions(head, io.load_proposals(args.proposals))
    if args.nms_iou is not None:
        dets = nms(dets, args.nms_iou)
    io.ensure_parent(args.out)
    io.save_detections(dets, args.out)
    return _input_paths(args, "head", "proposals")


# -- bboxreg ------------------------------------------------------------------


def cmd_bboxreg(args) -> dict[str, str]:
    io.ensure_parent(args.out)
    if args.action == "train":
        registry = io.load_registry(args.registry)
        pairs = select_pairs(io.load_proposals(args.proposals), io.load_groundtruth(args.groundtruth), args.iou_min)
        regs = train_from_pairs(pairs, registry.strong_ids, args.lambda0)
        if not regs:
            raise UsageError("no strong category has a proposal at the required IoU")
        io.save_regressors(regs, args.out)
        return _input_paths(args, "registry", "proposals", "groundtruth")
    if args.action == "transfer":
        strong = io.load_regressors(args.regressors)
        sim = io.load_similarity(args.similarity)
        regs = {**{c: strong[c] for c in sim.cols if c in strong}, **transfer_regressors(strong, sim)}
        io.save_regressors(regs, args.out)
        return _input_paths(args, "regressors", "similarity")
    # apply
    regs = io.load_regressors(args.regressors)
    dets = io.load_detections(args.detections)
    pool = {}
    for p in io.load_proposals(args.proposals):
        if p.pool_feature is None:
            raise UsageError(f"--proposals {args.proposals}: no box-regression features (p* columns)")
        pool.setdefault((p.image_id, tuple(p.box.as_array())), p.pool_feature)
    feats = []
    for d in dets:
        key = (d.image_id, tuple(d.box.as_array()))
        if key not in pool:
            raise UsageError(f"detection box {key} in image {d.image_id!r} matches no proposal")
        feats.append(pool[key])
    io.save_detections(regress_detections(dets, feats, regs), args.out)
    return _input_paths(args, "regressors", "detections", "proposals")


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> dict[str, str]:
    registry = io.load_registry(args.registry)
    dets = io.load_detections(args.detections)
    cfg = EvalConfig(iou_threshold=args.iou, nms_iou=args.nms_iou or EvalConfig.nms_iou)
    if args.nms_iou is not None:
        dets = nms(dets, args.nms_iou)
    report = evaluate(dets, io.load_groundtruth(args.groundtruth), registry, cfg)
    io.ensure_parent(args.out)
    write_report(report, registry, args.out)
    return _input_paths(args, "registry", "detections", "groundtruth")


# -- gen-world / bench ----------------------------------------------------------


def _world_config(args, seed: int | None = None) -> WorldConfig:
    if args.config in (None, "default"):
        base = {}
    else:
        with open(args.config) as fh:
            base = json.load(fh)
    for name in ("K", "m", "D", "clusters"):
        val = getattr(args, name, None)
        if val is not None:
            base[name] = val
    if seed is not None:
        base["seed"] = seed
    return WorldConfig.from_dict(base)


def cmd_gen_world(args) -> dict[str, str]:
    cfg = _world_config(args, args.seed)
    save_world(generate_world(cfg), args.out)
    _write_text(os.path.join(args.out, "world_config.json"), json.dumps(cfg.to_dict(), indent=2) + "\n")
    return _input_paths(args, "config") if args.config not in (None, "default") else {}


def bench_rows(args):
    cfg = _world_config(args)
    methods = tuple(args.methods.split(",")) if args.methods else METHODS
    seeds = range(args.seed_start, args.seed_start + args.seeds)
    bench = BenchConfig(lsda_k=args.lsda_k, alpha=args.alpha)
    return run_seeds(cfg, seeds, methods, bench, threads=args.threads)


def cmd_bench(args) -> dict[str, str]:
    rows = bench_rows(args)
    _write_text(args.out, benchmark_csv(rows))
    for method, means in summarize(rows).items():
        if args.plain:
            print(method, *(f"{means[k]:.4f}" for k in ("map_weak", "map_strong", "map_all", "param_err_weak")))
        else:
            print(f"{method:20s} mAP weak {means['map_weak']:.4f}  strong {means['map_strong']:.4f}  "
                  f"all {means['map_all']:.4f}  weak-head error {means['param_err_weak']:.3f}")
    return _input_paths(args, "config") if args.config not in (None, "default") else {}


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest-out", help="write a JSON run manifest here")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="maximum worker processes (default: available cores)")
    common.add_argument("--plain", action="store_true", default=argparse.SUPPRESS,
                        help="plain, undecorated output")

    parser = argparse.ArgumentParser(prog="simtransfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--plain", action="store_true")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("similarity", parents=[common], help="weak x strong similarity matrix")
    p.add_argument("--method", required=True, choices=["visual", "semantic-knn", "semantic-sparse", "lsda", "mixture"])
    p.add_argument("--registry", required=True)
    p.add_argument("--scores")
    p.add_argument("--embeddings")
    p.add_argument("--synset-overrides", help="JSON object mapping category names to extra labels")
    p.add_argument("--classifier-head")
    p.add_argument("--scheme", choices=["avg", "weighted"], default="weighted",
                   help="top-k truncation scheme (lsda default: weighted; give --k to truncate others)")
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--lambda", dest="lam", type=float, default=PcmpConfig.lam)
    p.add_argument("--max-support", type=int, default=PcmpConfig.max_support)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("adapt", parents=[common], help="adapted detector rows for weak categories")
    p.add_argument("--registry", required=True)
    p.add_argument("--classifier-head", required=True)
    p.add_argument("--detector-head", required=True)
    p.add_argument("--similarity", required=True)
    p.add_argument("--full", action="store_true", help="write the complete K-row detector with background")
    p.add_argument("--report-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("detect", parents=[common], help="score proposals with a detector head")
    p.add_argument("--head", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bboxreg", help="box regressors")
    acts = p.add_subparsers(dest="action", required=True)
    a = acts.add_parser("train", parents=[common])
    a.add_argument("--registry", required=True)
    a.add_argument("--proposals", required=True)
    a.add_argument("--groundtruth", required=True)
    a.add_argument("--lambda0", type=float, default=1000.0)
    a.add_argument("--iou-min", type=float, default=0.6)
    a.add_argument("--out", required=True)
    a = acts.add_parser("transfer", parents=[common])
    a.add_argument("--regressors", required=True)
    a.add_argument("--similarity", required=True)
    a.add_argument("--out", required=True)
    a = acts.add_parser("apply", parents=[common])
    a.add_argument("--regressors", required=True)
    a.add_argument("--detections", required=True)
    a.add_argument("--proposals", required=True)
    a.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bboxreg)

    p = sub.add_parser("eval", parents=[common], help="per-category AP and subset mAP")
    p.add_argument("--registry", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, help="suppress detections first (off by default)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    def world_flags(q):
        q.add_argument("--config", default="default", help="'default' or a JSON file of world settings")
        for name in ("K", "m", "D", "clusters"):
            q.add_argument(f"--{name}", type=int)

    p = sub.add_parser("gen-world", parents=[common], help="write one synthetic world")
    world_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("bench", parents=[common], help="method comparison over seeds")
    world_flags(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--methods", help=f"comma list from {','.join(METHODS + EXTRA_METHODS)}")
    p.add_argument("--lsda-k", type=int, default=BenchConfig.lsda_k)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--out", default="benchmark.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def _seed_of(args):
    if args.command == "gen-world":
        return args.seed
    if args.command == "bench":
        return list(range(args.seed_start, args.seed_start + args.seeds))
    return None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s: %(message)s" if args.plain else "simtransfer %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("simtransfer: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        inputs = args.func(args)
        if args.manifest_out:
            _write_text(args.manifest_out, json.dumps(build_manifest(args, inputs, _seed_of(args)), indent=2) + "\n")
    except UsageError as exc:
        print(f"simtransfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"simtransfer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TransferError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"simtransfer: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and fail rather than dump a trace
        log.debug("unhandled failure", exc_info=True)
        print(f"simtransfer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
