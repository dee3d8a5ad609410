"""Command-line entry point: ``nerannot <subcommand> [options]``.

Options may also come from INI config files (``--config``, repeatable, later
files win). Keys in a ``[run]`` section apply to every subcommand that knows
them; keys in a section named after the subcommand must be valid for it.
Flags given on the command line override both.

Exit codes: 0 success, 1 validation error, 2 provider failure, 64 usage.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import re
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .annotate import AnnotatedSentence, RunConfig, annotate_corpus
from .corpus import Sentence, corpus_stats, extract_entities, load_corpus, parse_conll
from .embeddings import EmbeddingCache, ProviderSpec, embed_batch
from .errors import ConfigError, NerAnnotError, ProviderError, RunFailedError
from .evaluate import (
    MetricsReport,
    aggregate_runs,
    format_table,
    matrix_csv,
    metrics_json,
    span_prf,
)
from .io import atomic_write_text, sha256_file
from .llm import CompletionParams, MockProvider, OpenAIChatProvider, ReplayProvider
from .splitter import RNG_ALGORITHM, SplitResult, SplitSpec, split_sample_space
from .stats import ADJUSTMENTS, ScoreMatrix, cd_report, conover_posthoc, friedman, rank_scores
from .vectorstore import build_index

log = logging.getLogger("nerannot")

EXIT_OK, EXIT_INVALID, EXIT_PROVIDER, EXIT_USAGE = 0, 1, 2, 64

# Names and values that look like credentials. Secrets belong in the environment.
_SECRET_NAME = re.compile(r"(api[_-]?key|secret|token|password|passwd|bearer)", re.I)
_SECRET_VALUE = re.compile(r"(\bsk-[A-Za-z0-9_-]{12,}|\bBearer\s+\S{12,}|\b[A-Za-z0-9_\-]{40,}\b)")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- manifest -------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hash_inputs(paths: Sequence[str | Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if not p.exists():
            out[str(p)] = None
            continue
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = sha256_file(f)
    return out


def write_manifest(
    out_dir: Path,
    args: argparse.Namespace,
    inputs: Sequence,
    outputs: Sequence[Path],
    started: str,
    exit_code: int = EXIT_OK,
    error: str | None = None,
) -> Path:
    """Write ``<command>.manifest.json``; one per subcommand so runs sharing a
    directory (annotate, then evaluate) keep each other's record."""
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config_files")}
    manifest = {
        "command": args.command,
        "tool_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "config": json.loads(json.dumps(config, default=str)),
        "config_files": list(args.config_files),
        "inputs": _hash_inputs(inputs),
        "outputs": {str(p.relative_to(out_dir)): sha256_file(p) for p in sorted(outputs)},
        "started_at": started,
        "finished_at": _now(),
        "exit_code": exit_code,
        "error": error,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{args.command}.manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --- shared helpers -------------------------------------------------------


def _labels(arg: str | None) -> list[str] | None:
    return [x.strip() for x in arg.split(",") if x.strip()] if arg else None


def _load(args):
    return load_corpus(args.data, name=args.name, column=args.tag_col, scheme=args.scheme, label_order=_labels(args.labels))


def _embed_spec(args) -> ProviderSpec:
    if args.embedder == "local-test":
        return ProviderSpec.local_test(args.dim)
    return ProviderSpec(
        kind="remote",
        model_id=args.embed_model,
        dim=args.dim,
        endpoint=args.embed_endpoint,
        batch_size=args.embed_batch,
    )


def _split_for(args, n_train: int) -> SplitResult:
    if getattr(args, "split_file", None):
        split = SplitResult.load(args.split_file)
        if len(split.sample_space) + len(split.targets) != n_train:
            raise ConfigError(f"split file covers {len(split.sample_space) + len(split.targets)} ids, corpus has {n_train}")
        return split
    return split_sample_space(n_train, SplitSpec(args.fraction, args.seed))


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ----------------------------------------------------------


def cmd_ingest(args) -> list[Path]:
    if args.format != "conll":
        raise ConfigError(f"unsupported format {args.format!r}")
    stats = corpus_stats(_load(args))
    out = _out(args)
    path = out / "stats.json"
    atomic_write_text(path, stats.to_json())
    sys.stdout.write(stats.to_json())
    return [path]


def cmd_split(args) -> list[Path]:
    corpus = _load(args)
    split = split_sample_space(len(corpus.train), SplitSpec(args.fraction, args.seed))
    path = _out(args) / "split.json"
    split.save(path)
    print(f"sample space {len(split.sample_space)}, targets {len(split.targets)} -> {path}")
    return [path]


def cmd_embed(args) -> list[Path]:
    corpus = _load(args)
    split = _split_for(args, len(corpus.train))
    spec = _embed_spec(args)
    out = _out(args)
    cache = EmbeddingCache(args.cache)
    pool = [corpus.train[i] for i in split.sample_space]
    vectors = embed_batch(spec, [s.text for s in pool], cache)
    index = build_index(zip(split.sample_space, vectors), (spec.provider_id, spec.model_id))
    path = out / "index.navx"
    index.save(path)
    split_path = out / "split.json"
    split.save(split_path)
    print(f"indexed {len(index)} sentences (dim {index.dim}) -> {path}")
    return [path, split_path]


def _provider(args, corpus):
    if args.replay:
        return ReplayProvider(args.replay)
    kind, _, mode = args.provider.partition(":")
    if kind == "mock":
        gold = {i: extract_entities(s) for i, s in enumerate(corpus.train)} if mode == "echo-gold" else None
        return MockProvider(mode, gold)
    if kind == "openai":
        if not args.endpoint:
            raise ConfigError("--provider openai needs --endpoint")
        return OpenAIChatProvider(args.endpoint, supports_structured=not args.no_structured)
    raise ConfigError(f"unknown provider {args.provider!r}")


def cmd_annotate(args) -> list[Path]:
    corpus = _load(args)
    config = RunConfig(
        corpus_name=corpus.name,
        mode=args.mode,
        m=args.m,
        fraction=args.fraction,
        seed=args.seed,
        context_seed=args.context_seed,
        icl_resample_per_target=args.icl_resample,
        params=CompletionParams(
            model_id=args.model,
            temperature=args.temperature,
            seed=args.llm_seed,
            max_output_tokens=args.max_tokens,
            response_format=args.response_format,
        ),
        embedder=_embed_spec(args),
        max_in_flight=args.max_in_flight,
        failure_threshold=args.failure_threshold,
    )
    split = _split_for(args, len(corpus.train))
    provider = _provider(args, corpus)
    run = annotate_corpus(corpus, config, provider, split=split, embed_cache=EmbeddingCache(args.cache))
    out = _out(args)
    paths = list(run.write(out).values())
    print(
        f"annotated {run.report['targets']} targets "
        f"({run.report['failed']} failed, {run.report['parse_status']['parse-failure']} unparseable) -> {out}"
    )
    args._outputs = paths
    run.check_failure_rate()
    return paths


def _read_pred(path: Path) -> list[Sentence]:
    return parse_conll(path.read_text(encoding="utf-8"))


def cmd_evaluate(args) -> list[Path]:
    meta = {}
    if args.run:
        run_dir = Path(args.run)
        if not args.data:
            raise ConfigError("--run needs --data to locate the gold corpus")
        corpus = _load(args)
        split = SplitResult.load(run_dir / "split.json")
        gold = [corpus.train[i] for i in split.targets]
        pred_sents = _read_pred(run_dir / "annotated.conll")
        report_path = run_dir / "report.json"
        if report_path.exists():
            meta = json.loads(report_path.read_text(encoding="utf-8"))
        meta["run_dir"] = str(run_dir)
    elif args.pred and args.gold:
        gold = parse_conll(Path(args.gold).read_text(encoding="utf-8"), args.tag_col, args.scheme)
        pred_sents = _read_pred(Path(args.pred))
    else:
        raise ConfigError("give either --run with --data, or --pred with --gold")
    if len(pred_sents) != len(gold):
        raise ConfigError(f"{len(pred_sents)} predicted sentences for {len(gold)} gold sentences")
    pred = []
    for p, g in zip(pred_sents, gold):
        if p.tokens != g.tokens:
            raise ConfigError(f"token mismatch in sentence {g.id}: {p.text[:40]!r} vs {g.text[:40]!r}")
        pred.append(AnnotatedSentence(g.id, p.tags))
    report = span_prf(pred, gold)
    path = _out(args) / "metrics.json"
    atomic_write_text(path, metrics_json(report, meta))
    print(f"P {report.precision:.2f}  R {report.recall:.2f}  F1 {report.f1:.2f}")
    return [path]


def cmd_stats(args) -> list[Path]:
    scores = ScoreMatrix.load(args.scores)
    ranks = rank_scores(scores)
    fr = friedman(ranks)
    post = conover_posthoc(ranks, args.alpha, args.adjust)
    cd = cd_report(post, ranks)
    out = _out(args)
    files = {
        "friedman.json": json.dumps(fr.to_dict(), indent=2) + "\n",
        "conover.csv": post.to_csv(),
        "conover.json": json.dumps(post.to_dict(), indent=2) + "\n",
        "cd.csv": cd.to_csv(),
        "cd.json": cd.to_json(),
    }
    for name, text in files.items():
        atomic_write_text(out / name, text)
    print(f"Friedman chi2 {fr.chi2:.4f} (df {fr.df}), p {fr.p_value:.4g}; {len(post.groups)} group(s)")
    return [out / n for n in files]


def _method_name(meta: dict) -> str:
    mode = meta.get("mode", "?")
    return mode if mode == "baseline" else f"{mode}-m{meta.get('m')}"


def cmd_report(args) -> list[Path]:
    grouped: dict[tuple[str, str], list[MetricsReport]] = {}
    for run in args.runs:
        path = Path(run)
        path = path / "metrics.json" if path.is_dir() else path
        d = json.loads(path.read_text(encoding="utf-8"))
        meta = d.get("meta", {})
        key = (meta.get("corpus", "?"), _method_name(meta))
        grouped.setdefault(key, []).append(MetricsReport.from_dict(d))
    if not grouped:
        raise ConfigError("no runs given")
    corpora = sorted({c for c, _ in grouped})
    methods = sorted({m for _, m in grouped})
    aggs = {k: aggregate_runs(v) for k, v in grouped.items()}
    table = "\n".join(
        format_table([(m, aggs[(c, m)]) for m in methods if (c, m) in aggs], title=c) for c in corpora
    )
    out = _out(args)
    table_path = out / "table.txt"
    heat_path = out / "heatmap.csv"
    atomic_write_text(table_path, table)
    atomic_write_text(
        heat_path,
        matrix_csv(methods, corpora, {(m, c): a.mean["f1"] for (c, m), a in aggs.items()}, corner="method"),
    )
    sys.stdout.write(table)
    return [table_path, heat_path]


# --- parser ---------------------------------------------------------------


def _add_corpus_args(p, data_required=True):
    if data_required:
        p.add_argument("data", help="dataset directory with train/dev/test files")
    else:
        p.add_argument("--data", help="dataset directory with train/dev/test files")
    p.add_argument("--tag-col", type=int, default=-1, help="0-based tag column; negative counts from the end")
    p.add_argument("--scheme", choices=("bio", "iob1"), default="bio")
    p.add_argument("--name", help="corpus name (default: directory name)")
    p.add_argument("--labels", help="comma-separated label order (default: sorted)")


def _add_split_args(p):
    p.add_argument("--fraction", type=float, default=0.30, help="sample-space fraction of train")
    p.add_argument("--seed", type=int, default=42)


def _add_embed_args(p):
    p.add_argument("--embedder", choices=("local-test", "remote"), default="local-test")
    p.add_argument("--embed-endpoint")
    p.add_argument("--embed-model", default="text-embedding-3-small")
    p.add_argument("--embed-batch", type=int, default=64)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--cache", help="embedding cache file (default: in-memory)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nerannot", description="LLM-assisted NER annotation with random or retrieved context.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", action="append", default=[], dest="config_files", help="INI config file")
        p.add_argument("--out-dir", default=f"runs/{name}")
        return p

    p = add("ingest", cmd_ingest, "parse, validate and describe a corpus")
    _add_corpus_args(p)
    p.add_argument("--format", default="conll")

    p = add("split", cmd_split, "draw the sample space and annotation targets")
    _add_corpus_args(p)
    _add_split_args(p)

    p = add("embed", cmd_embed, "embed the sample space and build the vector index")
    _add_corpus_args(p)
    _add_split_args(p)
    _add_embed_args(p)
    p.add_argument("--split-file", help="reuse a split.json instead of drawing one")

    p = add("annotate", cmd_annotate, "label the annotation targets with a chat model")
    _add_corpus_args(p)
    _add_split_args(p)
    _add_embed_args(p)
    p.add_argument("--split-file", help="reuse a split.json instead of drawing one")
    p.add_argument("--mode", choices=("baseline", "icl", "rag"), default="rag")
    p.add_argument("--m", type=int, default=25, help="context examples per prompt")
    p.add_argument("--context-seed", type=int, help="seed for random context (default: --seed)")
    p.add_argument("--icl-resample", action="store_true", help="draw fresh random context per target")
    p.add_argument("--provider", default="mock:echo-gold", help="mock:echo-gold | mock:empty | mock:malformed | openai")
    p.add_argument("--endpoint", help="chat completions URL for --provider openai")
    p.add_argument("--no-structured", action="store_true", help="endpoint lacks json_schema output")
    p.add_argument("--replay", help="answer from a transcript.jsonl instead of a provider")
    p.add_argument("--model", default="mock")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--llm-seed", type=int, default=42)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--response-format", choices=("structured-entities", "free-text"), default="structured-entities")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--failure-threshold", type=float, default=0.05)

    p = add("evaluate", cmd_evaluate, "span-level P/R/F1 of predictions against gold")
    _add_corpus_args(p, data_required=False)
    p.add_argument("--run", help="annotation run directory")
    p.add_argument("--pred", help="predicted CoNLL file")
    p.add_argument("--gold", help="gold CoNLL file, sentence-aligned with --pred")

    p = add("stats", cmd_stats, "Friedman test, Conover post-hoc and CD groups")
    p.add_argument("--scores", required=True, help="CSV: header = methods, first column = conditions")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--adjust", choices=ADJUSTMENTS, default="holm")

    p = add("report", cmd_report, "merge evaluated runs into a table and heatmap CSV")
    p.add_argument("runs", nargs="+", help="metrics.json files or run directories")

    return parser


# --- config files ---------------------------------------------------------


def _check_secrets(path: str, cp: configparser.ConfigParser) -> None:
    for section in cp.sections():
        for key, value in cp.items(section, raw=True):
            if _SECRET_NAME.search(key) or _SECRET_VALUE.search(value):
                raise ConfigError(
                    f"{path}: [{section}] {key} looks like a credential; "
                    "secrets must come from ANNOTATOR_API_KEY / ANNOTATOR_EMBED_KEY"
                )


def config_defaults(files: Sequence[str], command: str, subparser: argparse.ArgumentParser) -> dict[str, str]:
    """Merge config files into argparse defaults for ``command``."""
    known = {a.dest: a for a in subparser._actions if a.dest not in ("help", "func", "config_files")}
    merged: dict[str, str] = {}
    for path in files:
        cp = configparser.ConfigParser(interpolation=None)
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"config file {path} not found")
        _check_secrets(path, cp)
        for section in cp.sections():
            if section not in ("run", command):
                continue
            for key, value in cp.items(section, raw=True):
                dest = key.replace("-", "_")
                if dest not in known:
                    if section == command:
                        raise ConfigError(f"{path}: unknown option {key!r} for {command}")
                    continue
                action = known[dest]
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    merged[dest] = cp.getboolean(section, key)
                else:
                    merged[dest] = value
    return merged


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config_files:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        defaults = config_defaults(args.config_files, args.command, subparser)
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"warning: config rejected: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    started = _now()
    inputs = [
        p
        for p in (getattr(args, k, None) for k in ("data", "split_file", "replay", "run", "pred", "gold", "scores"))
        if p
    ] + list(getattr(args, "runs", []))
    code, error, outputs = EXIT_OK, None, []
    try:
        outputs = args.func(args)
    except RunFailedError as exc:
        code, error = EXIT_PROVIDER, str(exc)
        outputs = getattr(args, "_outputs", [])
    except ProviderError as exc:
        code, error = EXIT_PROVIDER, f"provider error: {exc}"
    except (NerAnnotError, OSError, json.JSONDecodeError, KeyError) as exc:
        code, error = EXIT_INVALID, str(exc)
    if error:
        print(f"error: {error}", file=sys.stderr)
    args.__dict__.pop("_outputs", None)
    write_manifest(Path(args.out_dir), args, inputs, outputs, started, code, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
