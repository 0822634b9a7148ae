"""Command-line pipeline: composable stages with provenance manifests.

Stages communicate through the JSONL/CSV formats defined by the library
modules, so each command's output is a valid input to the next.  Every
artifact-producing command writes a ``<artifact>.manifest.json`` sidecar
recording the command line, config hashes, seeds, and counts.

Exit codes: 0 success, 1 validation error, 2 partial batch failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, corpus, evaluation, manifest, offense, pairing, retrieval, sft_export
from .backend import load_backend, run_batch
from .errors import AuditError
from .prompting import Configuration, DecisionRules, TemplateSet
from .retrieval import DEFAULT_DIMENSION, resolve_embedder

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL_FAILURE = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """Argument parser whose usage failures map to exit code 64."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> CliParser:
    parser = CliParser(prog="bailaudit", description=__doc__,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"bailaudit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)

    p = sub.add_parser("ingest", help="preprocess raw cases and assign train/test splits")
    p.add_argument("--input", required=True, help="raw cases JSONL")
    p.add_argument("--out", required=True, help="output case facts JSONL")
    p.add_argument("--stopwords", help="legal stopword list (default: packaged)")
    p.add_argument("--keywords", help="argument keyword list (default: packaged)")
    p.add_argument("--min-tokens", type=int, default=corpus.DEFAULT_MIN_TOKEN_LENGTH)
    p.add_argument("--tokenizer", default="whitespace")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dropped-out", help="optional JSONL of dropped case ids and reasons")

    p = sub.add_parser("pair", help="generate the image x fact pair grid")
    p.add_argument("--roster", required=True, help="image roster CSV")
    p.add_argument("--facts", required=True, help="case facts JSONL")
    p.add_argument("--out", required=True, help="output pairs JSONL")
    p.add_argument("--groups", default="WM,BM,WF,BF",
                   help="comma-separated intersectional groups to keep")
    p.add_argument("--max-pairs-per-fact", type=int,
                   help="cap images per fact (first K in roster order); default: full grid")

    p = sub.add_parser("tag", help="annotate facts with matched offense types")
    p.add_argument("--facts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lexicon", help="sectioned offense lexicon (default: packaged)")
    p.add_argument("--stem", action="store_true",
                   help="relax keyword right boundaries to catch inflected forms")

    p = sub.add_parser("index", help="build or query the precedent vector store")
    index_sub = p.add_subparsers(dest="index_command", parser_class=CliParser)
    b = index_sub.add_parser("build")
    b.add_argument("--facts", required=True, help="case facts or typed facts JSONL")
    b.add_argument("--out", required=True)
    b.add_argument("--embedder", default="hash")
    b.add_argument("--dimension", type=int, default=DEFAULT_DIMENSION)
    b.add_argument("--split", default="train", choices=["train", "test", "all"],
                   help="which facts go in (the library rejects non-train facts)")
    q = index_sub.add_parser("query")
    q.add_argument("--index", required=True)
    q.add_argument("--text", required=True)
    q.add_argument("-k", type=int, default=3)
    q.add_argument("--embedder", default="hash")

    p = sub.add_parser("predict", help="run a model backend over the pair grid")
    p.add_argument("--config", required=True,
                   choices=[c.value for c in Configuration])
    p.add_argument("--pairs", required=True)
    p.add_argument("--facts", required=True)
    p.add_argument("--roster", required=True)
    p.add_argument("--backend", required=True, help="backend descriptor JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--index", help="precedent index (required for retrieval configs)")
    p.add_argument("--embedder", default="hash")
    p.add_argument("-k", type=int, default=3, help="precedents per query")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=100)
    p.add_argument("--resume", action="store_true",
                   help="reuse records already present in the output file")
    p.add_argument("--no-confidence", action="store_true",
                   help="do not elicit a confidence grade")
    p.add_argument("--precedent-facts-only", action="store_true",
                   help="omit precedent outcome lines from the prompt")
    p.add_argument("--templates", help="template directory (default: packaged v1)")
    p.add_argument("--rules", help="decision rule file (default: packaged)")
    p.add_argument("--max-pairs-per-fact", type=int,
                   help="cap images per fact at prediction time")

    p = sub.add_parser("evaluate", help="compute stratified metrics for one configuration")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--unparseable-as-deny", action="store_true",
                   help="score unparseable decisions as denials instead of excluding them")

    p = sub.add_parser("report", help="merge per-configuration metrics into the results table")
    p.add_argument("--metrics", required=True, nargs="+")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--table-out", help="also write the text table to a file")

    p = sub.add_parser("export-sft", help="export a fine-tuning dataset")
    p.add_argument("--facts", required=True, help="training facts (typed for --scheme typed)")
    p.add_argument("--roster", required=True)
    p.add_argument("--scheme", required=True, choices=list(sft_export.SCHEMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="records JSONL")
    p.add_argument("--manifest-out", help="manifest JSON (default: <out>.sft-manifest.json)")
    p.add_argument("--templates", help="template directory (default: packaged v1)")
    p.add_argument("--lexicon", help="lexicon file to hash into the manifest (typed scheme)")

    p = sub.add_parser("expand-lexicon", help="suggest keywords for an offense type via a backend")
    p.add_argument("--backend", required=True)
    p.add_argument("--offense-type", required=True)
    p.add_argument("-n", type=int, default=10)

    return parser


# --- helpers ----------------------------------------------------------------


def _load_facts_auto(path: str):
    """Read a facts file, detecting typed facts by their rendered_text field."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                first = json.loads(line)
                break
        else:
            return []
    if "rendered_text" in first:
        return offense.read_typed_facts(path)
    return corpus.read_case_facts(path)


def _filter_split(items, split: str):
    if split == "all":
        return list(items)
    wanted = corpus.Split(split)
    return [x for x in items if x.split is wanted]


def _limit_roster(roster, max_pairs_per_fact):
    if max_pairs_per_fact is None:
        return roster
    if max_pairs_per_fact < 1:
        raise AuditError("--max-pairs-per-fact must be >= 1")
    return roster[:max_pairs_per_fact]


# --- subcommand implementations ----------------------------------------------


def cmd_ingest(args, argv) -> int:
    stopwords_path = args.stopwords or corpus.default_stopwords_path()
    keywords_path = args.keywords or corpus.default_argument_keywords_path()
    cfg = corpus.PreprocessConfig(
        legal_stopwords=corpus.load_keyword_list(stopwords_path),
        argument_keywords=corpus.load_keyword_list(keywords_path),
        min_token_length=args.min_tokens,
        tokenizer_spec=args.tokenizer,
    )
    raws = corpus.read_raw_cases(args.input)
    facts, dropped = corpus.preprocess_corpus(raws, cfg)
    facts = corpus.split_corpus(facts, args.train_fraction, args.seed)
    corpus.write_case_facts(args.out, facts)
    if args.dropped_out:
        with open(args.dropped_out, "w", encoding="utf-8") as fh:
            for d in dropped:
                fh.write(json.dumps({"case_id": d.case_id, "reason": d.reason}) + "\n")
    n_train = sum(1 for f in facts if f.split is corpus.Split.TRAIN)
    manifest.write_run_manifest(
        args.out, "ingest", argv,
        config_hashes={
            "stopwords": manifest.file_sha256(stopwords_path),
            "argument_keywords": manifest.file_sha256(keywords_path),
        },
        seeds={"split": args.seed},
        counts={"read": len(raws), "retained": len(facts), "dropped": len(dropped),
                "train": n_train, "test": len(facts) - n_train},
        extra={"train_fraction": args.train_fraction, "tokenizer": args.tokenizer,
               "min_tokens": args.min_tokens},
    )
    print(f"ingest: {len(raws)} read, {len(facts)} retained "
          f"({n_train} train / {len(facts) - n_train} test), {len(dropped)} dropped")
    return EXIT_OK


def cmd_pair(args, argv) -> int:
    groups = frozenset(pairing.Group(g.strip()) for g in args.groups.split(",") if g.strip())
    roster = pairing.load_roster(args.roster, groups)
    roster = _limit_roster(roster, args.max_pairs_per_fact)
    facts = corpus.read_case_facts(args.facts)
    pair_set = pairing.generate_pairs(roster, facts)
    pairing.write_pairs(args.out, pair_set)
    by_split = pair_set.count_by_split()
    by_group = pair_set.count_by_group()
    manifest.write_run_manifest(
        args.out, "pair", argv,
        counts={"images": len(roster), "facts": len(facts), "pairs": len(pair_set),
                "train_pairs": by_split[corpus.Split.TRAIN],
                "test_pairs": by_split[corpus.Split.TEST],
                **{f"group_{g.value}": n for g, n in by_group.items()}},
        extra={"max_pairs_per_fact": args.max_pairs_per_fact, "groups": sorted(g.value for g in groups)},
    )
    print(f"pair: {len(pair_set)} pairs from {len(roster)} images x {len(facts)} facts")
    return EXIT_OK


def cmd_tag(args, argv) -> int:
    lexicon_path = args.lexicon or offense.default_lexicon_path()
    lexicon = offense.OffenseLexicon.from_file(lexicon_path, stem=args.stem)
    facts = corpus.read_case_facts(args.facts)
    typed = [offense.tag_case(f, lexicon) for f in facts]
    offense.write_typed_facts(args.out, typed)
    n_tagged = sum(1 for t in typed if t.offense_types)
    manifest.write_run_manifest(
        args.out, "tag", argv,
        config_hashes={"lexicon": manifest.file_sha256(lexicon_path)},
        counts={"facts": len(typed), "tagged": n_tagged},
        extra={"stem": args.stem, "categories": lexicon.categories()},
    )
    print(f"tag: {n_tagged}/{len(typed)} facts matched at least one offense type")
    return EXIT_OK


def cmd_index(args, argv) -> int:
    if args.index_command == "build":
        facts = _filter_split(_load_facts_auto(args.facts), args.split)
        embedder = resolve_embedder(args.embedder, args.dimension)
        index = retrieval.build_index(facts, embedder)
        retrieval.save_index(index, args.out)
        manifest.write_run_manifest(
            args.out, "index build", argv,
            counts={"entries": len(index)},
            extra={"embedder": index.embedder_name, "dimension": index.dimension,
                   "text_kind": index.text_kind},
        )
        print(f"index build: {len(index)} entries, embedder {index.embedder_name}")
        return EXIT_OK
    if args.index_command == "query":
        index = retrieval.load_index(args.index)
        embedder = resolve_embedder(args.embedder, index.dimension)
        result = retrieval.retrieve_top_k(index, args.text, embedder, k=args.k)
        for rank, (case_id, distance) in enumerate(result.ranked, 1):
            print(f"{rank}\t{case_id}\t{distance:.6f}")
        return EXIT_OK
    raise UsageError("index requires a subcommand: build or query")


def cmd_predict(args, argv) -> int:
    cfg = Configuration(args.config)
    if cfg.uses_rag and not args.index:
        raise AuditError(f"--config {cfg.value} requires --index")
    if not cfg.uses_rag and args.index:
        raise AuditError(f"--config {cfg.value} does not take --index")

    pairs = _filter_split(pairing.read_pairs(args.pairs), args.split)
    facts_list = _load_facts_auto(args.facts)
    if cfg.uses_typed_facts and not facts_list:
        raise AuditError("no facts to predict on")
    if cfg.uses_typed_facts and not hasattr(facts_list[0], "rendered_text"):
        raise AuditError(f"--config {cfg.value} requires a typed facts file (run `tag` first)")
    facts = {f.case_id: f for f in facts_list}
    roster = pairing.load_roster(args.roster)
    if args.max_pairs_per_fact is not None:
        kept_images = {img.image_id for img in _limit_roster(roster, args.max_pairs_per_fact)}
        pairs = [p for p in pairs if p.image_id in kept_images]
    images = {img.image_id: img for img in roster}
    backend = load_backend(args.backend)
    templates = TemplateSet.load(args.templates) if args.templates else TemplateSet.default()
    rules = DecisionRules.load(args.rules) if args.rules else DecisionRules.default()

    index = embedder = None
    if cfg.uses_rag:
        index = retrieval.load_index(args.index)
        embedder = resolve_embedder(args.embedder, index.dimension)

    report = run_batch(
        pairs, cfg, backend, facts, images, templates,
        index=index, embedder=embedder, k=args.k,
        parallelism=args.parallelism,
        checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
        resume=args.resume,
        asks_confidence=not args.no_confidence,
        precedent_facts_only=args.precedent_facts_only,
        rules=rules,
    )
    # The checkpoint already holds every record in input order; rewrite only
    # when resuming merged old and new records.
    if report.n_resumed:
        evaluation.write_predictions(args.out, report.records)
    manifest.write_run_manifest(
        args.out, "predict", argv,
        config_hashes={"templates": templates.sha256, "decision_rules": rules.sha256,
                       "backend": manifest.file_sha256(args.backend)},
        backend=backend.describe(),
        counts={"pairs": len(pairs), "queried": report.n_queried,
                "resumed": report.n_resumed, "errors": report.n_errors},
        extra={"configuration": cfg.value, "split": args.split, "k": args.k,
               "max_pairs_per_fact": args.max_pairs_per_fact,
               "asks_confidence": not args.no_confidence,
               "temperature": backend.temperature},
    )
    print(f"predict[{cfg.value}]: {len(report.records)} records "
          f"({report.n_queried} queried, {report.n_resumed} resumed, {report.n_errors} errors)")
    if report.n_errors:
        for ref in report.error_pairs[:10]:
            print(f"  failed pair: image={ref[0]} case={ref[1]}", file=sys.stderr)
        return EXIT_PARTIAL_FAILURE
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    records = evaluation.read_predictions(args.predictions)
    metrics = evaluation.evaluate(records, unparseable_as_deny=args.unparseable_as_deny)
    source_id = manifest.read_manifest_id(args.predictions)
    if source_id:
        metrics.manifest_ids.append(source_id)
    payload = evaluation.metrics_to_dict(metrics)
    Path(args.out).write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n",
                              encoding="utf-8")
    manifest.write_run_manifest(
        args.out, "evaluate", argv,
        counts={"records": metrics.n_records,
                "excluded_unparseable": metrics.n_excluded_unparseable,
                "excluded_errors": metrics.n_excluded_errors},
        extra={"configuration": metrics.configuration.value,
               "unparseable_as_deny": args.unparseable_as_deny},
    )
    acc = metrics.overall_accuracy
    print(f"evaluate[{metrics.configuration.value}]: {metrics.n_records} records, "
          f"overall accuracy {'undefined' if acc is None else f'{acc * 100:.2f}%'}")
    return EXIT_OK


def cmd_report(args, argv) -> int:
    by_config = {}
    for path in args.metrics:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise AuditError(f"cannot read metrics file {path}: {exc}") from exc
        metrics = evaluation.metrics_from_dict(obj)
        if metrics.configuration in by_config:
            raise AuditError(f"duplicate metrics for configuration {metrics.configuration.value}")
        by_config[metrics.configuration] = metrics
    payload, table = evaluation.emit_report(by_config)
    Path(args.out).write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n",
                              encoding="utf-8")
    if args.table_out:
        Path(args.table_out).write_text(table + "\n", encoding="utf-8")
    manifest.write_run_manifest(
        args.out, "report", argv,
        counts={"configurations": len(by_config)},
        extra={"configurations": [c.value for c in by_config]},
    )
    print(table)
    return EXIT_OK


def cmd_export_sft(args, argv) -> int:
    facts = _filter_split(_load_facts_auto(args.facts), "train")
    roster = pairing.load_roster(args.roster)
    templates = TemplateSet.load(args.templates) if args.templates else TemplateSet.default()
    lexicon_hash = None
    if args.lexicon:
        lexicon_hash = offense.lexicon_file_hash(args.lexicon)
    elif args.scheme == "typed":
        source = manifest.read_manifest(args.facts)
        if source:
            lexicon_hash = source.get("config_hashes", {}).get("lexicon")
    records, sft_manifest = sft_export.export_sft(
        facts, roster, args.scheme, args.seed,
        templates=templates, lexicon_hash=lexicon_hash,
    )
    manifest_out = args.manifest_out or str(Path(args.out).with_suffix("")) + ".sft-manifest.json"
    sft_export.write_sft_dataset(args.out, manifest_out, records, sft_manifest)
    manifest.write_run_manifest(
        args.out, "export-sft", argv,
        config_hashes={"templates": templates.sha256,
                       **({"lexicon": lexicon_hash} if lexicon_hash else {})},
        seeds={"export": args.seed},
        counts={"records": len(records), "train": sft_manifest["train_count"],
                "validation": sft_manifest["validation_count"]},
        extra={"scheme": args.scheme, "sft_manifest": manifest_out},
    )
    print(f"export-sft[{args.scheme}]: {len(records)} records "
          f"({sft_manifest['train_count']} train / {sft_manifest['validation_count']} validation)")
    return EXIT_OK


def cmd_expand_lexicon(args, argv) -> int:
    backend = load_backend(args.backend)
    keywords = offense.expand_lexicon(backend, args.offense_type, args.n)
    for kw in keywords:
        print(kw)
    if not keywords:
        print("(no keywords parsed from the backend response)", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "ingest": cmd_ingest,
    "pair": cmd_pair,
    "tag": cmd_tag,
    "index": cmd_index,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "export-sft": cmd_export_sft,
    "expand-lexicon": cmd_expand_lexicon,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
