"""Command-line entry point: index, run, diagnose, report, validate, synth."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, load_config
from .data_model import (DatasetError, corpus_manifest, cross_validate, load_corpus,
                         load_records, save_corpus, save_records)
from .diagnostics import FAILURE_KINDS, RefusalDetector, run_failure_matrix
from .generation import TemplateSet, load_templates
from .orchestrator import (build_indexes, emit_report, load_report, make_providers,
                           run_benchmark)
from .protocols import build_pipeline_factory, protocol_from_config
from .indexing import save_index
from .synth import generate_synthetic

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the run config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")


def cmd_synth(args) -> int:
    docs, records = generate_synthetic(n_docs=args.docs, n_records=args.records,
                                       seed=args.seed)
    os.makedirs(args.output, exist_ok=True)
    corpus_path = os.path.join(args.output, "corpus.jsonl")
    dataset_path = os.path.join(args.output, "dataset.jsonl")
    save_corpus(corpus_path, docs)
    save_records(dataset_path, records)
    manifest = corpus_manifest(docs)
    with open(os.path.join(args.output, "corpus.manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(docs)} documents to {corpus_path}")
    print(f"wrote {len(records)} records to {dataset_path}")
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if not cfg.index_dir:
        print("config error: [paths] index_dir is required for `index`",
              file=sys.stderr)
        return EXIT_VALIDATION
    corpus = load_corpus(cfg.corpus)
    bundle = build_indexes(cfg, corpus)
    save_index(cfg.index_dir, bundle)
    print(f"indexed {len(bundle.chunks)} chunks into {cfg.index_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    records = load_records(cfg.dataset)
    corpus = load_corpus(cfg.corpus)
    dangling = cross_validate(records, corpus)
    print(f"{len(records)} records, {len(corpus)} documents")
    if dangling:
        for record_id, doc_id in dangling:
            print(f"dangling golden id {doc_id!r} in record {record_id!r}",
                  file=sys.stderr)
        return EXIT_VALIDATION
    print("all golden context ids resolve in the corpus")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    report = run_benchmark(cfg)
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    written = emit_report(report, formats, cfg.output)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config, args.overrides)
    records = load_records(cfg.dataset)
    corpus = load_corpus(cfg.corpus)
    templates = load_templates(cfg.templates) if cfg.templates else TemplateSet()
    providers = make_providers(cfg)
    bundle = None
    if args.kind in ("ranking_confusion", "complex_reasoning"):
        from .orchestrator import load_or_build_indexes
        needs = "both" if args.kind == "ranking_confusion" else "vector"
        if cfg.index not in ("both", needs):
            cfg.index = needs
        bundle = load_or_build_indexes(cfg, corpus)
    protocol = protocol_from_config(args.kind, cfg)
    factory = build_pipeline_factory(args.kind, cfg, records, providers, templates,
                                     bundle=bundle)
    table = run_failure_matrix(protocol, factory, corpus, records,
                               judge=providers.judge, detector=RefusalDetector())
    os.makedirs(cfg.output, exist_ok=True)
    out_md = os.path.join(cfg.output, f"diagnose_{args.kind}.md")
    out_csv = os.path.join(cfg.output, f"diagnose_{args.kind}.csv")
    with open(out_md, "w", encoding="utf-8") as fh:
        fh.write(table.to_markdown())
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        fh.write(table.to_csv())
    print(table.to_markdown())
    print(f"wrote {out_md}")
    print(f"wrote {out_csv}")
    return EXIT_OK


def cmd_report(args) -> int:
    report = load_report(args.input)
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    written = emit_report(report, formats, args.output)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragmark",
        description="Benchmarking harness for retrieval-augmented generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus and dataset")
    p.add_argument("--output", default="synthdata")
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--records", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="build and persist the indexes")
    _add_config_args(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("validate", help="validate dataset/corpus consistency")
    _add_config_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run the benchmark and emit reports")
    _add_config_args(p)
    p.add_argument("--formats", default="json,csv,markdown")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diagnose", help="run one failure protocol's strategy matrix")
    p.add_argument("kind", choices=FAILURE_KINDS)
    _add_config_args(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="re-emit a saved JSON report")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="out")
    p.add_argument("--formats", default="markdown,csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
