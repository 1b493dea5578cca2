"""Command-line entry point.

    vlretrieval train --synthetic 8x64 --steps 2000 --out m.ckpt
    vlretrieval build-index --checkpoint m.ckpt --catalog m.catalog.jsonl --out m.hci
    vlretrieval query --checkpoint m.ckpt --catalog m.catalog.jsonl --index m.hci "red dress"
    vlretrieval eval --checkpoint m.ckpt --catalog m.catalog.jsonl --index m.hci --cases m.cases.jsonl --k 10
    vlretrieval hash-query "dress red"

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from vlretrieval import encoder as enc
from vlretrieval import querynorm
from vlretrieval.catalog import CatalogError, load_catalog, save_catalog
from vlretrieval.filter import FilterParseError, parse_filter
from vlretrieval.index import HCIndex, build, save_embeddings
from vlretrieval.metrics import RelevanceScorer, UndefinedMetricError, evaluate, report_csv
from vlretrieval.pipeline import (
    DEFAULT_OVERFETCH,
    Retriever,
    cases_to_records,
    check_vocab,
    export_embeddings,
    load_cases,
    run_cases,
    write_jsonl,
)
from vlretrieval.trainer import (
    TrainConfig,
    load_config,
    make_synthetic,
    pairs_from_records,
    parse_synthetic,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("vlretrieval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load_pairs(path: Path):
    with open(path, encoding="utf-8") as fh:
        return pairs_from_records([json.loads(line) for line in fh if line.strip()])


def cmd_train(args) -> int:
    config = load_config(_existing(args.config, "config")) if args.config else TrainConfig()
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = dataclasses.replace(config, **overrides)
    out = Path(args.out)

    if args.synthetic:
        corpus = make_synthetic(parse_synthetic(args.synthetic), seed=config.seed)
        catalog, pairs = corpus.catalog, corpus.train_pairs
        save_catalog(catalog, _sidecar(out, ".catalog.jsonl"))
        write_jsonl(cases_to_records(corpus.eval_pairs, catalog), _sidecar(out, ".cases.jsonl"))
    else:
        catalog = load_catalog(_existing(args.catalog, "catalog"))
        pairs = _load_pairs(_existing(args.pairs, "pairs"))

    result = train(catalog, pairs, config)
    enc.save_checkpoint(result.params, out, catalog.vocab_fingerprint())
    result.log.write_csv(_sidecar(out, ".log.csv"))
    print(f"wrote {out} after {result.total_steps} steps")
    return EXIT_OK


def _load_bundle(args):
    params, fp = enc.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    catalog = load_catalog(_existing(args.catalog, "catalog"), params.num_patches, params.patch_dim)
    check_vocab(fp, catalog, params)
    return params, catalog


def cmd_build_index(args) -> int:
    params, catalog = _load_bundle(args)
    if len(catalog) == 0:
        raise UsageError("catalog is empty")
    emb = export_embeddings(params, catalog)
    index = build(emb, args.lists, iters=args.iters, seed=args.seed or 0)
    out = Path(args.out)
    index.save(out)
    save_embeddings(emb, Path(args.embeddings) if args.embeddings else _sidecar(out, ".emb"))
    print(f"wrote {out}: {len(index)} products in {index.n_lists} lists")
    return EXIT_OK


def _retriever(args) -> Retriever:
    params, catalog = _load_bundle(args)
    return Retriever(params, catalog, HCIndex.load(_existing(args.index, "index")))


def cmd_query(args) -> int:
    text = " ".join(args.text)
    if not text.strip():
        raise UsageError("empty query")
    expr = parse_filter(args.filter) if args.filter else None
    result = _retriever(args).query(text, args.k, expr, args.overfetch, args.nprobe)
    sys.stdout.write(result.render())
    return EXIT_OK


def cmd_eval(args) -> int:
    retriever = _retriever(args)
    records = load_cases(_existing(args.cases, "cases"))
    cases = run_cases(retriever, records, args.k, args.overfetch)
    scorer = RelevanceScorer(retriever.catalog.products)
    report = report_csv(evaluate(cases, scorer, args.k))
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return EXIT_OK


def cmd_hash_query(args) -> int:
    text = " ".join(args.text)
    tokens = querynorm.normalize(text)
    print(querynorm.qid(tokens))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="flat key = value training config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vlretrieval", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train encoders")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--synthetic", help="generate a clustered corpus, e.g. 8x64")
    p.add_argument("--catalog", help="product JSONL file")
    p.add_argument("--pairs", help='JSONL of {"query": ..., "product_id": ...}')
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    def serving(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--catalog", required=True)

    p = sub.add_parser("build-index", parents=[common], help="export embeddings and build the HC index")
    serving(p)
    p.add_argument("--out", required=True, help="index path (HCI1)")
    p.add_argument("--embeddings", help="embedding export path (EMB1), default <out>.emb")
    p.add_argument("--lists", type=int, default=None, help="centroid count, default ceil(sqrt(N))")
    p.add_argument("--iters", type=int, default=20)
    p.set_defaults(func=cmd_build_index)

    def retrieval(p):
        serving(p)
        p.add_argument("--index", required=True)
        p.add_argument("--k", type=int, default=10)
        p.add_argument("--overfetch", type=int, default=DEFAULT_OVERFETCH, help="ANN fetches k*overfetch before filtering")
        p.add_argument("--nprobe", type=int, default=None)

    p = sub.add_parser("query", parents=[common], help="retrieve products for a raw query")
    retrieval(p)
    p.add_argument("--filter", help='e.g. "Brand:Nike AND Category:Shoes"')
    p.add_argument("text", nargs="+")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="Recall@K, P_rel and P_cate over eval cases")
    retrieval(p)
    p.add_argument("--cases", required=True)
    p.add_argument("--out", help="write the CSV report here as well as stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hash-query", parents=[common], help="print the qid of a raw query")
    p.add_argument("text", nargs="+")
    p.set_defaults(func=cmd_hash_query)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, querynorm.EmptyQueryError, FilterParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CatalogError, enc.CheckpointError, enc.UnknownTokenError, UndefinedMetricError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
