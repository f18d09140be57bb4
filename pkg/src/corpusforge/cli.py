"""Command-line surface for the curation pipeline.

Every subcommand is a pure file transform: inputs are never mutated and
outputs are written canonically, so identical inputs and seeds yield
byte-identical artifacts.  ``pipeline`` chains steps from a declarative
config, writing each step's outputs under ``workspace/<step>/`` plus a
run manifest of input/output hashes.

Exit codes: 0 ok, 2 validation error, 3 step failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from . import augment as aug
from . import corpus as cp
from . import filters as flt
from . import formatting as fmt
from . import mix as mixmod
from . import pack as packmod
from . import selection as sel
from . import similarity as sim
from .corpus import Stage, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STEP_FAILURE = 3


def _write_json(obj: dict, path: Optional[str]) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None


def _parse_category(value: str) -> cp.Category:
    try:
        return cp.Category(value)
    except ValueError:
        valid = ", ".join(c.value for c in cp.Category)
        raise ValidationError(f"unknown category {value!r} (expected one of: {valid})") from None


def _records_for(
    samples: list[cp.Sample],
    image_store: Optional[cp.EmbeddingStore],
    text_store: Optional[cp.EmbeddingStore],
) -> list[cp.EmbeddingRecord]:
    records = []
    missing = []
    for s in samples:
        image_vec = image_store.get(s.id) if image_store else None
        text_vec = text_store.get(s.id) if text_store else None
        if image_vec is None or text_vec is None:
            missing.append(s.id)
            continue
        records.append(cp.EmbeddingRecord(sample_id=s.id, image_vec=image_vec, text_vec=text_vec))
    if missing:
        raise ValidationError(f"samples missing embeddings: {missing[:10]}")
    return records


def _manifest_records(manifest_path: str, category: cp.Category):
    sources = cp.load_manifest(manifest_path)
    records = []
    for source in sources:
        pool = cp.load_corpus(source.corpus_path)
        samples = [s for s in pool if s.category is category]
        if not samples:
            continue
        image_store = (
            cp.load_embeddings(source.image_embedding_path)
            if source.image_embedding_path
            else None
        )
        text_store = (
            cp.load_embeddings(source.text_embedding_path)
            if source.text_embedding_path
            else None
        )
        records.extend(_records_for(samples, image_store, text_store))
    if not records:
        raise ValidationError(f"{manifest_path}: no {category.value} samples with embeddings")
    return sources, records


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args) -> int:
    pool = cp.load_corpus(args.infile)
    cp.write_corpus(pool, args.out)
    print(f"ingested {len(pool)} samples -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    category = _parse_category(args.category)
    new_sources, new_records = _manifest_records(args.new, category)
    _, pool_records = _manifest_records(args.pool, category)
    name = "+".join(m.name for m in new_sources)
    kept, removed, report = sim.dedup(
        new_records,
        pool_records,
        category,
        threshold=args.dedup_threshold,
        source_name=name,
    )
    doc = report.to_dict()
    doc["admission"] = sim.source_admission(report, args.source_threshold)
    doc["kept"] = kept
    doc["removed"] = removed
    _write_json(doc, args.out)
    return EXIT_OK


def cmd_filter(args) -> int:
    pool = cp.load_corpus(args.infile)
    cfg = flt.FilterConfig.from_dict(_read_json(args.config) if args.config else {})
    records = None
    if args.image_embeddings or args.text_embeddings:
        image_store = cp.load_embeddings(args.image_embeddings) if args.image_embeddings else None
        text_store = cp.load_embeddings(args.text_embeddings) if args.text_embeddings else None
        records = {
            r.sample_id: r
            for r in cp.gather_records([s.id for s in pool], image_store, text_store)
        }
    kept, verdicts, counts = flt.run_filters(pool, records, cfg)
    cp.write_corpus(kept, args.out)
    if args.report:
        _write_json(
            {
                "kept": len(kept),
                "dropped": len(pool) - len(kept),
                "rule_counts": counts,
                "verdicts": [v.to_dict() for v in verdicts],
            },
            args.report,
        )
    print(f"filter: kept {len(kept)}/{len(pool)}")
    return EXIT_OK


def cmd_select(args) -> int:
    pool = cp.load_corpus(args.infile)
    rules_doc = _read_json(args.rules) if args.rules else {}
    rules = sel.QuotaRules.from_dict(rules_doc)
    quota = args.quota
    if quota is None:
        quota = sel.quota_for_source(len(pool), rules)
    embeddings = cp.load_embeddings(args.embeddings) if args.embeddings else None
    plan = sel.select_subset(
        pool,
        embeddings,
        quota,
        seed=args.seed if args.seed is not None else 0,
        target_cluster_size=rules_doc.get("target_cluster_size", sel.DEFAULT_TARGET_CLUSTER_SIZE),
        clustered=rules_doc.get("clustered"),
        boost_clusters=set(rules_doc.get("boost_clusters", [])) or None,
    )
    chosen = set(plan.selected)
    cp.write_corpus([s for s in pool if s.id in chosen], args.out)
    if args.plan:
        _write_json(plan.to_dict(), args.plan)
    print(f"select: {len(plan.selected)}/{len(pool)} samples (k={plan.k})")
    return EXIT_OK


def cmd_format(args) -> int:
    pool = cp.load_corpus(args.infile)
    policy = fmt.FormatPolicy.from_dict(_read_json(args.policy) if args.policy else {})
    if args.seed is not None:
        policy.seed = args.seed
    cp.write_corpus([fmt.apply_policy(s, policy) for s in pool], args.out)
    print(f"format: rewrote {len(pool)} samples")
    return EXIT_OK


def _selector(category: Optional[str]):
    if category is None:
        return None
    cat = _parse_category(category)
    return lambda s: s.category is cat


def cmd_augment(args) -> int:
    if args.mode == "emit":
        pool = cp.load_corpus(args.infile)
        requests_out = aug.build_requests(pool, args.kind, _selector(args.category))
        aug.write_requests(requests_out, args.out)
        print(f"augment emit: {len(requests_out)} {args.kind} requests")
        return EXIT_OK
    if args.mode == "emit-judge":
        pool = cp.load_corpus(args.infile)
        responses = aug.load_responses(args.responses)
        requests_out = aug.build_judge_requests(pool, responses)
        aug.write_requests(requests_out, args.out)
        print(f"augment emit-judge: {len(requests_out)} judge requests")
        return EXIT_OK
    if args.mode == "apply":
        pool = cp.load_corpus(args.infile)
        responses = aug.load_responses(args.responses)
        judge = aug.load_responses(args.judge) if args.judge else []
        augmented, stats = aug.apply_responses(pool, responses, judge)
        cp.write_corpus(augmented, args.out)
        if args.stats:
            _write_json(stats, args.stats)
        print(f"augment apply: {stats}")
        return EXIT_OK
    # mode == "run": online emit -> infer -> (judge) -> apply
    pool = cp.load_corpus(args.infile)
    cfg = aug.InferenceConfig.from_env()
    requests_out = aug.build_requests(pool, args.kind, _selector(args.category))
    responses = aug.run_batch(requests_out, cfg, workers=args.workers)
    judge_responses = []
    if args.kind == aug.KIND_COT:
        judge_requests = aug.build_judge_requests(pool, responses)
        judge_responses = aug.run_batch(judge_requests, cfg, workers=args.workers)
    augmented, stats = aug.apply_responses(pool, responses, judge_responses)
    cp.write_corpus(augmented, args.out)
    if args.stats:
        _write_json(stats, args.stats)
    print(f"augment run: {stats}")
    return EXIT_OK


def cmd_mix(args) -> int:
    manifests = cp.load_manifest(args.manifests)
    constraints = mixmod.MixConstraints.from_dict(
        _read_json(args.constraints) if args.constraints else {}
    )
    pool, report = mixmod.compose_stage(
        manifests, Stage(args.stage), constraints, strict=args.strict
    )
    cp.write_corpus(pool, args.out)
    if args.report:
        _write_json(report.to_dict(), args.report)
    print(report.render_table())
    return EXIT_OK


def cmd_pack(args) -> int:
    pool = cp.load_corpus(args.infile)
    capacity = args.L
    if capacity is None:
        capacity = cp.STAGE_MAX_LENGTH[Stage(args.stage)] if args.stage else 8192
    plan = packmod.chunked_pack(
        pool, capacity, delta=args.delta, chunk_size=args.chunk, method=args.method
    )
    packed = packmod.materialize_packs(pool, plan)
    packmod.write_packed(packed, args.out)
    if args.stats:
        _write_json(plan.to_dict(), args.stats)
    stats = packmod.pack_stats(plan) if plan.knapsacks else None
    if stats:
        print(
            f"pack: {stats.count} knapsacks, efficiency {stats.efficiency:.4f}, "
            f"totals std {stats.total_std:.1f}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    pool = cp.load_corpus(args.infile)
    stats = cp.pool_stats(pool)
    if pool:
        stats["distribution"] = mixmod.distribution_report(pool).to_dict()
    _write_json(stats, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Pipeline

_PIPELINE_OPS = {"ingest", "filter", "select", "format", "mix", "pack", "report"}


def _run_step(name: str, op: str, params: dict, in_path: str, out_dir: Path, seed: int) -> dict:
    """Execute one pipeline step; returns {artifact name: path} with the
    chained corpus output under the key "corpus"."""
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict[str, Path] = {}
    if op == "ingest":
        pool = cp.load_corpus(in_path)
        outputs["corpus"] = out_dir / "corpus.jsonl"
        cp.write_corpus(pool, outputs["corpus"])
    elif op == "filter":
        pool = cp.load_corpus(in_path)
        cfg = flt.FilterConfig.from_dict(params.get("config", {}))
        kept, verdicts, counts = flt.run_filters(pool, None, cfg)
        outputs["corpus"] = out_dir / "corpus.jsonl"
        outputs["report"] = out_dir / "report.json"
        cp.write_corpus(kept, outputs["corpus"])
        _write_json(
            {"kept": len(kept), "dropped": len(pool) - len(kept), "rule_counts": counts},
            str(outputs["report"]),
        )
    elif op == "select":
        pool = cp.load_corpus(in_path)
        rules = sel.QuotaRules.from_dict(params.get("rules", {}))
        quota = params.get("quota")
        if quota is None:
            quota = sel.quota_for_source(len(pool), rules)
        embeddings = (
            cp.load_embeddings(params["embeddings"]) if params.get("embeddings") else None
        )
        plan = sel.select_subset(
            pool, embeddings, quota, seed=params.get("seed", seed),
            clustered=params.get("clustered"),
        )
        chosen = set(plan.selected)
        outputs["corpus"] = out_dir / "corpus.jsonl"
        outputs["plan"] = out_dir / "plan.json"
        cp.write_corpus([s for s in pool if s.id in chosen], outputs["corpus"])
        _write_json(plan.to_dict(), str(outputs["plan"]))
    elif op == "format":
        pool = cp.load_corpus(in_path)
        policy = fmt.FormatPolicy.from_dict(params.get("policy", {}))
        if "seed" not in params.get("policy", {}):
            policy.seed = params.get("seed", seed)
        outputs["corpus"] = out_dir / "corpus.jsonl"
        cp.write_corpus([fmt.apply_policy(s, policy) for s in pool], outputs["corpus"])
    elif op == "mix":
        manifests = cp.load_manifest(params["manifests"])
        constraints = mixmod.MixConstraints.from_dict(params.get("constraints", {}))
        pool, report = mixmod.compose_stage(
            manifests, Stage(params.get("stage", "stage1_5")), constraints,
            strict=params.get("strict", False),
        )
        outputs["corpus"] = out_dir / "corpus.jsonl"
        outputs["report"] = out_dir / "report.json"
        cp.write_corpus(pool, outputs["corpus"])
        _write_json(report.to_dict(), str(outputs["report"]))
    elif op == "pack":
        pool = cp.load_corpus(in_path)
        plan = packmod.chunked_pack(
            pool,
            params.get("L", 8192),
            delta=params.get("delta", 0),
            chunk_size=params.get("chunk", packmod.DEFAULT_CHUNK_SIZE),
            method=params.get("method", packmod.METHOD_BALANCED),
        )
        outputs["packed"] = out_dir / "packed.jsonl"
        outputs["stats"] = out_dir / "stats.json"
        packmod.write_packed(packmod.materialize_packs(pool, plan), outputs["packed"])
        _write_json(plan.to_dict(), str(outputs["stats"]))
    elif op == "report":
        pool = cp.load_corpus(in_path)
        stats = cp.pool_stats(pool)
        if pool:
            stats["distribution"] = mixmod.distribution_report(pool).to_dict()
        outputs["report"] = out_dir / "report.json"
        _write_json(stats, str(outputs["report"]))
    else:
        raise ValidationError(f"step {name!r}: unknown op {op!r}")
    return outputs


def cmd_pipeline(args) -> int:
    config = _read_json(args.config)
    steps = config.get("steps", [])
    if not steps:
        raise ValidationError("pipeline config has no steps")
    names = [s.get("name") for s in steps]
    if len(set(names)) != len(names) or not all(names):
        raise ValidationError("step names must be present and unique")
    for step in steps:
        if step.get("op") not in _PIPELINE_OPS:
            raise ValidationError(f"step {step.get('name')!r}: unknown op {step.get('op')!r}")

    workspace = Path(args.workspace or config.get("workspace", "workspace"))
    workspace.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else config.get("seed", 0)

    manifest: dict = {"tool_version": __version__, "seed": seed, "steps": []}
    current = config.get("input")
    for step in steps:
        name, op, params = step["name"], step["op"], step.get("params", {})
        in_path = params.get("in", current)
        if op != "mix" and in_path is None:
            raise ValidationError(f"step {name!r}: no input corpus (set pipeline 'input')")
        try:
            outputs = _run_step(name, op, params, in_path, workspace / name, seed)
        except ValidationError:
            raise
        except Exception as exc:
            print(f"pipeline: step {name!r} failed: {exc}", file=sys.stderr)
            return EXIT_STEP_FAILURE
        inputs = {}
        if in_path is not None and op != "mix":
            # Workspace-internal paths are recorded relative so reruns in
            # different workspaces produce identical manifests.
            try:
                key = str(Path(in_path).resolve().relative_to(workspace.resolve()))
            except ValueError:
                key = str(in_path)
            inputs[key] = cp.sha256_file(in_path)
        step_record = {
            "name": name,
            "op": op,
            "params": params,
            "inputs": inputs,
            "outputs": {
                str(path.relative_to(workspace)): cp.sha256_file(path)
                for path in sorted(outputs.values())
            },
        }
        manifest["steps"].append(step_record)
        if "corpus" in outputs:
            current = str(outputs["corpus"])
    _write_json(manifest, str(workspace / "run_manifest.json"))
    print(f"pipeline: {len(steps)} steps ok, manifest at {workspace / 'run_manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corpusforge", description="Corpus curation and packing toolkit"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, dest="global_seed", help="global default seed")
    parser.add_argument("--workspace", dest="global_workspace", help="global workspace dir")
    parser.add_argument(
        "--strict", action="store_true", dest="global_strict",
        help="treat constraint failures as errors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and canonicalize a corpus")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="similarity of a new source vs the pool")
    p.add_argument("--new", required=True, help="manifest of the new source")
    p.add_argument("--pool", required=True, help="manifest of the existing pool")
    p.add_argument("--category", required=True)
    p.add_argument("--dedup-threshold", type=float, default=sim.DEFAULT_DEDUP_THRESHOLD)
    p.add_argument("--source-threshold", type=float, default=sim.DEFAULT_SOURCE_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="rule-based quality filtering")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--config")
    p.add_argument("--image-embeddings")
    p.add_argument("--text-embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("select", help="quota + cluster-balanced subset selection")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--rules")
    p.add_argument("--quota", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--plan")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("format", help="formatting transforms")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--policy")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_format)

    p = sub.add_parser("augment", help="prompt-based augmentation")
    p.add_argument("mode", choices=["emit", "emit-judge", "apply", "run"])
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--kind", choices=[aug.KIND_COT, aug.KIND_EXPAND], default=aug.KIND_COT)
    p.add_argument("--category")
    p.add_argument("--responses")
    p.add_argument("--judge")
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("mix", help="compose a stage corpus from manifests")
    p.add_argument("--manifests", required=True)
    p.add_argument("--stage", required=True, choices=[s.value for s in Stage])
    p.add_argument("--constraints")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("pack", help="pack samples into fixed-capacity knapsacks")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--stage", choices=[s.value for s in Stage])
    p.add_argument("--delta", type=int, default=0)
    p.add_argument(
        "--method",
        choices=[packmod.METHOD_BALANCED, packmod.METHOD_GREEDY, packmod.METHOD_SPFHP],
        default=packmod.METHOD_BALANCED,
    )
    p.add_argument("--chunk", type=int, default=packmod.DEFAULT_CHUNK_SIZE)
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("report", help="pool statistics and distribution")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run a declarative multi-step config")
    p.add_argument("--config", required=True)
    p.add_argument("--workspace")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pipeline)

    return parser


def _merge_global_flags(args) -> None:
    """Root-level --seed/--workspace/--strict back-fill the subcommand
    values when those were not given."""
    if getattr(args, "seed", None) is None and args.global_seed is not None:
        args.seed = args.global_seed
    if getattr(args, "workspace", None) is None and args.global_workspace is not None:
        args.workspace = args.global_workspace
    if args.global_strict and hasattr(args, "strict"):
        args.strict = True


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _merge_global_flags(args)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except aug.InferenceError as exc:
        print(f"inference error: {exc}", file=sys.stderr)
        return EXIT_STEP_FAILURE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_STEP_FAILURE


if __name__ == "__main__":
    sys.exit(main())
