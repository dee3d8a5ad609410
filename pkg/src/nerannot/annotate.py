"""The annotation loop: choose context, render the prompt, query the model,
parse its answer and align the predicted entities back onto the tokens."""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import Corpus, EntitySpan, Sentence, extract_entities, make_span, serialize_conll, spans_to_bio
from .embeddings import EmbeddingCache, ProviderSpec, RemoteEmbedder, embed_batch
from .errors import ConfigError, ParseFailure, ProviderError, RunFailedError
from .io import atomic_write_text
from .llm import ChatProvider, CompletionParams, PredictedEntity, parse_entity_output, request_fingerprint
from .promptkit import PromptMode, RenderedPrompt, render_prompt, serialize_example
from .splitter import (
    ContextSet,
    SplitResult,
    SplitSpec,
    derive_seed,
    sample_random_context,
    split_sample_space,
)
from .vectorstore import VectorIndex, build_index, query_top_k

log = logging.getLogger(__name__)

UNMATCHED_REASONS = ("surface-not-found", "label-not-in-set", "overlap-conflict")


@dataclass
class AlignmentOutcome:
    matched: list[tuple[PredictedEntity, EntitySpan]] = field(default_factory=list)
    unmatched: list[tuple[PredictedEntity, str]] = field(default_factory=list)

    @property
    def spans(self) -> list[EntitySpan]:
        return sorted((sp for _, sp in self.matched), key=lambda sp: sp.start)


def align_entities(
    tokens: Sequence[str], predictions: Sequence[PredictedEntity], labels: Sequence[str]
) -> AlignmentOutcome:
    """Greedy left-to-right alignment of predicted surfaces onto tokens.

    Each prediction claims the first run of tokens equal (case-sensitively) to
    its whitespace-split surface that no earlier prediction has claimed.
    """
    if not tokens:
        raise ValueError("cannot align against an empty sentence")
    label_set = set(labels)
    claimed = [False] * len(tokens)
    out = AlignmentOutcome()
    for pred in predictions:
        if pred.category not in label_set:
            out.unmatched.append((pred, "label-not-in-set"))
            continue
        parts = pred.surface.split()
        n = len(parts)
        seen = False
        hit = None
        for i in range(len(tokens) - n + 1) if n else ():
            if list(tokens[i : i + n]) != parts:
                continue
            seen = True
            if not any(claimed[i : i + n]):
                hit = i
                break
        if hit is None:
            out.unmatched.append((pred, "overlap-conflict" if seen else "surface-not-found"))
            continue
        for j in range(hit, hit + n):
            claimed[j] = True
        out.matched.append((pred, make_span(tokens, hit, hit + n, pred.category)))
    return out


@dataclass(frozen=True)
class AnnotatedSentence:
    sentence_id: int
    tags: tuple[str, ...]
    provenance: dict = field(default_factory=dict, compare=False)


@dataclass
class RunConfig:
    corpus_name: str
    mode: str = "rag"
    m: int = 25
    fraction: float = 0.30
    seed: int = 42
    context_seed: int | None = None
    icl_resample_per_target: bool = False
    params: CompletionParams = field(default_factory=CompletionParams)
    embedder: ProviderSpec = field(default_factory=ProviderSpec.local_test)
    max_in_flight: int = 4
    failure_threshold: float = 0.05

    def __post_init__(self):
        PromptMode(self.mode)
        if self.mode != "baseline" and self.m < 1:
            raise ConfigError(f"context size m must be positive, got {self.m}")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if not 0 <= self.failure_threshold <= 1:
            raise ConfigError("failure_threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_seed"] = self.effective_context_seed
        return d

    @property
    def effective_context_seed(self) -> int:
        return self.context_seed if self.context_seed is not None else self.seed


@dataclass
class SentenceResult:
    annotated: AnnotatedSentence
    prompt: RenderedPrompt
    transcript: dict


@dataclass
class AnnotationRun:
    config: RunConfig
    split: SplitResult
    annotated: list[AnnotatedSentence]
    targets: list[Sentence]
    transcript: list[dict]
    prompts: list[dict]
    report: dict

    def annotated_conll(self) -> str:
        return serialize_conll(self.targets, (a.tags for a in self.annotated))

    def check_failure_rate(self) -> None:
        rate = self.report["failure_rate"]
        if rate > self.config.failure_threshold:
            raise RunFailedError(
                f"{self.report['failed']} of {self.report['targets']} targets failed "
                f"({rate:.1%} > {self.config.failure_threshold:.1%})"
            )

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """Write T-hat, report, transcript, prompt log and split; returns the paths."""
        out = Path(out_dir)
        paths = {
            "annotated": out / "annotated.conll",
            "report": out / "report.json",
            "transcript": out / "transcript.jsonl",
            "prompts": out / "prompts.jsonl",
            "split": out / "split.json",
        }
        atomic_write_text(paths["annotated"], self.annotated_conll())
        atomic_write_text(paths["report"], json.dumps(self.report, indent=2, sort_keys=True) + "\n")
        atomic_write_text(paths["transcript"], "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.transcript))
        atomic_write_text(paths["prompts"], "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.prompts))
        self.split.save(paths["split"])
        return paths


class AnnotationPipeline:
    """Holds the per-run state (split, context, index) shared by all targets."""

    def __init__(
        self,
        corpus: Corpus,
        config: RunConfig,
        provider: ChatProvider,
        *,
        split: SplitResult | None = None,
        embed_cache: EmbeddingCache | None = None,
        remote_embedder: RemoteEmbedder | None = None,
        index: VectorIndex | None = None,
    ):
        if corpus.train is None:
            raise ConfigError(f"corpus {corpus.name!r} has no training split")
        self.corpus = corpus
        self.config = config
        self.provider = provider
        self.mode = PromptMode(config.mode)
        self.split = split
        self.embed_cache = embed_cache if embed_cache is not None else EmbeddingCache()
        self.remote_embedder = remote_embedder
        self.index = index
        self.context: ContextSet | None = None
        self._examples: dict[int, str] = {}
        self._target_vectors: dict[int, object] = {}
        self._prepared = False

    # -- setup ---------------------------------------------------------------

    def prepare(self) -> None:
        """Split, validate sizes, probe the provider, then draw or index context.

        Configuration problems and a dead chat endpoint surface before any
        embedding or completion request is paid for.
        """
        train = self.corpus.train
        cfg = self.config
        if self.split is None:
            self.split = split_sample_space(len(train), SplitSpec(cfg.fraction, cfg.seed))
        x = len(self.split.sample_space)
        if self.mode is not PromptMode.BASELINE and cfg.m > x:
            raise ConfigError(f"context size m={cfg.m} exceeds sample space size x={x}")
        if self.mode is not PromptMode.BASELINE:
            self._examples = {
                i: serialize_example(train[i], extract_entities(train[i])) for i in self.split.sample_space
            }
        if self.mode is PromptMode.ICL and not cfg.icl_resample_per_target:
            self.context = sample_random_context(self.split, cfg.m, cfg.effective_context_seed)
        self.provider.check()
        if self.mode is PromptMode.RAG:
            self._prepare_rag()
        self._prepared = True

    def _embed(self, sentences: Sequence[Sentence]):
        return embed_batch(
            self.config.embedder, [s.text for s in sentences], self.embed_cache, self.remote_embedder
        )

    def _prepare_rag(self) -> None:
        train = self.corpus.train
        spec = self.config.embedder
        fp = (spec.provider_id, spec.model_id)
        if self.index is None:
            pool = [train[i] for i in self.split.sample_space]
            self.index = build_index(zip(self.split.sample_space, self._embed(pool)))
        elif tuple(self.index.fingerprint) != fp:
            raise ConfigError(f"index built with {self.index.fingerprint}, run uses {fp}")
        if sorted(self.index.ids) != list(self.split.sample_space):
            raise ConfigError("vector index does not cover exactly the sample space")
        targets = [train[i] for i in self.split.targets]
        self._target_vectors = dict(zip(self.split.targets, self._embed(targets)))

    # -- per target ----------------------------------------------------------

    def select_context(self, target: Sentence) -> ContextSet | None:
        cfg = self.config
        if self.mode is PromptMode.BASELINE:
            return None
        if self.mode is PromptMode.ICL:
            if cfg.icl_resample_per_target:
                return sample_random_context(
                    self.split, cfg.m, derive_seed(cfg.effective_context_seed, target.id)
                )
            return self.context
        vec = self._target_vectors.get(target.id)
        if vec is None:
            vec = self._embed([target])[0]
        hits = query_top_k(self.index, vec, cfg.m)
        return ContextSet(tuple(h.sentence_id for h in hits), "retrieved")

    def build_prompt(self, target: Sentence) -> RenderedPrompt:
        ctx = self.select_context(target)
        ids = ctx.example_ids if ctx else ()
        return render_prompt(
            self.mode,
            self.corpus.label_set,
            [self._examples[i] for i in ids],
            target.text,
            context_ids=ids,
            input_sentence_id=target.id,
        )

    def annotate_sentence(self, target: Sentence) -> SentenceResult:
        if not self._prepared:
            raise RuntimeError("call prepare() first")
        params = self.config.params
        prompt = self.build_prompt(target)
        prov = {
            "mode": self.mode.value,
            "context_ids": list(prompt.context_ids),
            "parse_status": "ok",
            "parse_level": None,
            "predictions": 0,
            "field_errors": 0,
            "matched": 0,
            "unmatched": {r: 0 for r in UNMATCHED_REASONS},
        }
        record = {
            "target_id": target.id,
            "fingerprint": request_fingerprint(prompt, params),
            "prompt_sha256": prompt.sha256,
            "prompt": prompt.text,
            "params": asdict(params),
        }
        tags = ["O"] * len(target)
        try:
            raw = self.provider.complete(prompt, params)
        except ProviderError as exc:
            prov["parse_status"] = "provider-error"
            record.update(error=str(exc), attempts=exc.attempts)
            log.warning("target %d failed: %s", target.id, exc)
        else:
            record.update(
                response_text=raw.text,
                model_id=raw.model_id,
                latency_ms=raw.latency_ms,
                system_fingerprint=raw.system_fingerprint,
                usage=raw.usage,
            )
            try:
                parsed = parse_entity_output(raw.text)
            except ParseFailure:
                prov["parse_status"] = "parse-failure"
            else:
                outcome = align_entities(target.tokens, parsed.entities, self.corpus.label_set)
                tags = spans_to_bio(len(target), outcome.spans)
                prov.update(
                    parse_level=parsed.level,
                    predictions=len(parsed.entities),
                    field_errors=parsed.field_errors,
                    matched=len(outcome.matched),
                )
                for _, reason in outcome.unmatched:
                    prov["unmatched"][reason] += 1
        return SentenceResult(AnnotatedSentence(target.id, tuple(tags), prov), prompt, record)


def _report(config: RunConfig, split: SplitResult, results: Sequence[SentenceResult]) -> dict:
    status = Counter()
    levels = Counter()
    unmatched = Counter({r: 0 for r in UNMATCHED_REASONS})
    predictions = matched = field_errors = 0
    for r in results:
        p = r.annotated.provenance
        status[p["parse_status"]] += 1
        if p["parse_level"]:
            levels[p["parse_level"]] += 1
        predictions += p["predictions"]
        matched += p["matched"]
        field_errors += p["field_errors"]
        unmatched.update(p["unmatched"])
    n = len(results)
    failed = status["provider-error"]
    return {
        "corpus": config.corpus_name,
        "mode": config.mode,
        "m": 0 if config.mode == "baseline" else config.m,
        "fraction": config.fraction,
        "seed": config.seed,
        "model_id": config.params.model_id,
        "embedder": config.embedder.model_id if config.mode == "rag" else None,
        "sample_space_size": len(split.sample_space),
        "targets": n,
        "failed": failed,
        "failure_rate": failed / n if n else 0.0,
        "parse_status": {k: status[k] for k in ("ok", "parse-failure", "provider-error")},
        "parse_levels": dict(sorted(levels.items())),
        "predictions": predictions,
        "field_errors": field_errors,
        "matched": matched,
        "unmatched": dict(unmatched),
    }


def annotate_corpus(
    corpus: Corpus,
    config: RunConfig,
    provider: ChatProvider,
    **pipeline_kwargs,
) -> AnnotationRun:
    """Annotate every target sentence; the result keeps target order.

    Work items run concurrently up to ``config.max_in_flight``; results are
    committed in target order regardless of completion order.
    """
    pipe = AnnotationPipeline(corpus, config, provider, **pipeline_kwargs)
    pipe.prepare()
    targets = [corpus.train[i] for i in pipe.split.targets]
    if config.max_in_flight == 1:
        results = [pipe.annotate_sentence(t) for t in targets]
    else:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            results = list(pool.map(pipe.annotate_sentence, targets))
    prompts = [
        {
            "target_id": r.annotated.sentence_id,
            "mode": r.prompt.mode.value,
            "context_ids": list(r.prompt.context_ids),
            "prompt_sha256": r.prompt.sha256,
        }
        for r in results
    ]
    return AnnotationRun(
        config=config,
        split=pipe.split,
        annotated=[r.annotated for r in results],
        targets=targets,
        transcript=[r.transcript for r in results],
        prompts=prompts,
        report=_report(config, pipe.split, results),
    )
