"""Command-line entry point: ``segale <subcommand> ...``."""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import warnings
from dataclasses import replace

from segale import __version__
from segale._http import BackendError
from segale.align import AlignmentError
from segale.config import ConfigError, PipelineConfig, load_config
from segale.corpus import Corpus, CorpusError, read_corpus, write_corpus
from segale.datagen import (
    FLEX_BOUNDARY,
    OVER_TRANSLATE,
    CommandAdapter,
    UNDER_TRANSLATE,
    CommandRewriter,
    CommandSimilarity,
    HttpRewriter,
    PerturbationSpec,
    build_triplets,
    chunk_document,
    drop_segments,
    estimate_overlap_size,
    merge_candidates,
    read_manifest,
    write_manifest,
)
from segale.embeddings import EmbeddingError
from segale.metaeval import read_mqm
from segale.penalty_search import trace_lines
from segale.pipeline import (
    align_document,
    alignment_record,
    derive_seed,
    evaluate_document,
    make_backend,
    make_provider,
    ordered_map,
    path_from_record,
    run_metaeval,
    score_record,
)
from segale.score import ScoringError
from segale.textseg import SegmentationError, read_sentence_file, segment, write_sentence_file

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_INVARIANT = 4

logger = logging.getLogger("segale")


class InputError(Exception):
    pass


class BackendFailure(Exception):
    def __init__(self, message: str, completed: int, total: int):
        super().__init__(f"{message} ({completed} of {total} documents completed)")


def _header(args, command: str) -> str | None:
    if args.no_header:
        return None
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return f"# segale {__version__} {command} {stamp}"


class _Output:
    def __init__(self, path: str | None):
        self.path = path

    def __enter__(self):
        if self.path in (None, "-"):
            self.f = sys.stdout
        else:
            self.f = open(self.path, "w", encoding="utf-8", newline="\n")
        return self.f

    def __exit__(self, *exc):
        if self.f is not sys.stdout:
            self.f.close()
        else:
            self.f.flush()


def _write_jsonl(path, records, header: str | None) -> None:
    with _Output(path) as f:
        if header:
            f.write(header + "\n")
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, allow_nan=False) + "\n")


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from e
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise InputError(f"{path}:{lineno}: {e.msg}") from e
    return out


def _corpus(path) -> Corpus:
    try:
        return read_corpus(path)
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from e


def _config(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "lang", None):
        overrides["lang"] = args.lang
    return load_config(args.config, overrides)


def _run_docs(fn, docs, jobs: int):
    """Run ``fn`` per document in input order; backend failures report how many documents finished."""
    done = []

    def wrapped(d):
        r = fn(d)
        done.append(d)
        return r

    try:
        return ordered_map(wrapped, docs, jobs)
    except (BackendError, EmbeddingError, ScoringError) as e:
        raise BackendFailure(str(e), len(done), len(docs)) from e


def cmd_segment(args) -> int:
    cfg = _config(args)
    if args.raw:
        try:
            with open(args.input, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise InputError(f"{args.input}: {e.strerror}") from e
        lang = cfg.lang or "und"
        sents = segment(text, lang)
        if sents.fallback:
            logger.warning("no rule table for %r; used the default rules", lang)
        if args.output in (None, "-"):
            for s in sents:
                sys.stdout.write(s.replace("\n", " ") + "\n")
        else:
            write_sentence_file(args.output, sents)
        return EXIT_OK
    corpus = _corpus(args.input)
    docs = []
    for d in corpus:
        if d.hyp is None:
            lang = cfg.lang or d.tgt_lang
            hyp = segment(d.hyp_text, lang)
            if not len(hyp):
                raise InputError(f"document {d.doc_id!r}: hypothesis text is empty")
            d = replace(d, hyp=hyp, hyp_text=None)
        docs.append(d)
    if args.output in (None, "-"):
        for d in docs:
            sys.stdout.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")
    else:
        write_corpus(args.output, docs)
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args.corpus)
    provider = make_provider(cfg.embeddings)
    docs = list(corpus)
    results = _run_docs(lambda d: align_document(d, provider, cfg), docs, args.jobs)
    if args.verbose:
        for d, r in zip(docs, results):
            for row in trace_lines(r, d.doc_id):
                row["system_id"] = d.system_id
                sys.stderr.write(json.dumps(row) + "\n")
    _write_jsonl(args.output, [alignment_record(d, r) for d, r in zip(docs, results)], _header(args, "align"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args.corpus)
    records = {(r["doc_id"], r.get("system_id", "")): r for r in _read_jsonl(args.alignments)}
    docs = list(corpus)
    missing = [d.doc_id for d in docs if (d.doc_id, d.system_id) not in records]
    if missing:
        raise InputError(f"no alignment for document(s): {', '.join(missing[:5])}")
    provider = make_provider(cfg.embeddings)
    backend = make_backend(cfg.metric, provider)

    def run(d):
        try:
            path = path_from_record(records[(d.doc_id, d.system_id)])
        except (KeyError, TypeError, AlignmentError) as e:
            raise InputError(f"document {d.doc_id!r}: malformed alignment: {e}") from e
        return evaluate_document(d, path, backend, cfg)

    scores = _run_docs(run, docs, args.jobs)
    _write_jsonl(args.output, [score_record(d, s) for d, s in zip(docs, scores)], _header(args, "evaluate"))
    return EXIT_OK


def _parse_gold(values) -> dict[str, float]:
    out = {}
    for v in values or []:
        lp, sep, num = v.partition("=")
        if not sep:
            raise InputError(f"--gold-na expects LANG_PAIR=VALUE, got {v!r}")
        try:
            out[lp] = float(num)
        except ValueError as e:
            raise InputError(f"--gold-na value {num!r} is not a number") from e
    return out


def cmd_metaeval(args) -> int:
    scores = _read_jsonl(args.scores)
    try:
        annotations = read_mqm(args.mqm)
        manifest = read_manifest(args.manifest) if args.manifest else None
    except OSError as e:
        raise InputError(f"{e.filename}: {e.strerror}") from e
    report = run_metaeval(scores, annotations, manifest, _parse_gold(args.gold_na) or None, args.pooling)
    with _Output(args.output) as f:
        if args.format == "table":
            f.write(report.to_table())
        else:
            f.write(json.dumps(report.to_json(), ensure_ascii=False, indent=2) + "\n")
    return EXIT_OK


def cmd_perturb(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args.corpus)
    rate = args.rate if args.rate is not None else cfg.perturb.rate
    seed = derive_seed(cfg.seed, "perturb", args.kind)
    if args.kind == FLEX_BOUNDARY:
        if args.rewriter_url:
            rewriter = HttpRewriter(args.rewriter_url)
        elif args.rewriter_cmd:
            rewriter = CommandRewriter(args.rewriter_cmd.split())
        else:
            raise InputError("flex_boundary needs --rewriter-url or --rewriter-cmd")
        if not args.similarity_cmd:
            raise InputError("flex_boundary needs --similarity-cmd")
        similarity = CommandSimilarity(args.similarity_cmd.split())
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out, manifest = merge_candidates(corpus, rate, similarity, rewriter, cfg.perturb.accept_threshold, seed)
        for w in caught:
            logger.warning("%s", w.message)
    else:
        spec = PerturbationSpec(args.kind, rate, seed, args.scope or cfg.perturb.scope)
        out, manifest = drop_segments(corpus, spec)
    write_corpus(args.output, out)
    write_manifest(args.manifest, manifest)
    return EXIT_OK


def cmd_triplets(args) -> int:
    cfg = _config(args)
    pairs = []
    try:
        with open(args.pairs, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                src, sep, tgt = line.partition("\t")
                if not sep:
                    raise InputError(f"{args.pairs}:{lineno}: expected SOURCE<TAB>TARGET")
                pairs.append((src, tgt))
    except OSError as e:
        raise InputError(f"{args.pairs}: {e.strerror}") from e
    triplets = build_triplets(pairs, derive_seed(cfg.seed, "triplets", args.pairs), args.src_lang, args.tgt_lang)
    _write_jsonl(args.output, [t.to_json() for t in triplets], None)
    return EXIT_OK


def cmd_chunk(args) -> int:
    cfg = _config(args)
    try:
        with open(args.input, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise InputError(f"{args.input}: {e.strerror}") from e
    counter = None
    if args.counter_cmd:
        adapter = CommandAdapter(args.counter_cmd.split())

        def count_tokens(s: str) -> int:
            return int(adapter.request({"text": s})["tokens"])

        counter = count_tokens
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        chunks = chunk_document(text, args.max_tokens, counter, cfg.lang or "en")
    for w in caught:
        logger.warning("%s", w.message)
    _write_jsonl(args.output, [{"chunk": i, "sentences": c} for i, c in enumerate(chunks)], None)
    return EXIT_OK


def cmd_estimate_overlap(args) -> int:
    try:
        gold = read_sentence_file(args.gold)
        auto = read_sentence_file(args.auto)
    except OSError as e:
        raise InputError(f"{e.filename}: {e.strerror}") from e
    print(estimate_overlap_size(gold, auto))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config (default: $SEGALE_CONFIG)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--lang", help="segmenter language, overrides the corpus language pair")
    common.add_argument("-o", "--output", help="output file (default: stdout)")
    common.add_argument("--no-header", action="store_true", help="omit the timestamp header line")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="documents processed in parallel")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="segale", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="split hypothesis text into sentences")
    p.add_argument("input", help="corpus JSONL, or a raw text file with --raw")
    p.add_argument("--raw", action="store_true", help="input is plain text; write one sentence per line")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("align", parents=[common], help="align source and hypothesis sentences")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("evaluate", parents=[common], help="score aligned blocks")
    p.add_argument("corpus")
    p.add_argument("alignments")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("metaeval", parents=[common], help="correlate document scores with MQM judgments")
    p.add_argument("scores")
    p.add_argument("--mqm", required=True, help="MQM TSV or JSONL")
    p.add_argument("--manifest", help="deletion manifest; deleted segments become worst-score judgments")
    p.add_argument("--gold-na", action="append", metavar="LANG_PAIR=VALUE", help="planted null ratio per language pair")
    p.add_argument("--pooling", choices=["pooled", "per_system"], default="pooled")
    p.add_argument("--format", choices=["json", "table"], default="json")
    p.set_defaults(func=cmd_metaeval)

    p = sub.add_parser("perturb", parents=[common], help="delete or merge segments")
    p.add_argument("corpus")
    p.add_argument("--kind", required=True, choices=[OVER_TRANSLATE, UNDER_TRANSLATE, FLEX_BOUNDARY])
    p.add_argument("--rate", type=float)
    p.add_argument("--scope", choices=["corpus", "document"])
    p.add_argument("--manifest", required=True, help="where to write the perturbation manifest")
    p.add_argument("--rewriter-url")
    p.add_argument("--rewriter-cmd")
    p.add_argument("--similarity-cmd")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("triplets", parents=[common], help="build embedding-training triplets")
    p.add_argument("pairs", help="TSV of source<TAB>target sentence pairs")
    p.add_argument("--src-lang", default="und")
    p.add_argument("--tgt-lang", default="und")
    p.set_defaults(func=cmd_triplets)

    p = sub.add_parser("chunk", parents=[common], help="pack sentences into token-budget chunks")
    p.add_argument("input")
    p.add_argument("--max-tokens", type=int, required=True)
    p.add_argument("--counter-cmd", help="subprocess answering {\"text\"} with {\"tokens\"}")
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("estimate-overlap", parents=[common], help="overlap size from gold vs automatic segmentation")
    p.add_argument("gold")
    p.add_argument("auto")
    p.set_defaults(func=cmd_estimate_overlap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="segale: %(message)s")
    try:
        if args.jobs < 1:
            raise InputError("--jobs must be >= 1")
        if getattr(args, "max_tokens", 1) < 1:
            raise InputError("--max-tokens must be >= 1")
        return args.func(args)
    except (InputError, ConfigError, CorpusError, SegmentationError) as e:
        print(f"segale: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except BackendFailure as e:
        print(f"segale: backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (BackendError, EmbeddingError, ScoringError) as e:
        print(f"segale: backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except AlignmentError as e:
        print(f"segale: internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as e:
        print(f"segale: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
