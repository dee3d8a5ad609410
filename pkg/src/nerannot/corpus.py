"""Token-per-line NER corpora: parsing, BIO validation, span decoding and statistics.

Files hold one token per line with whitespace-separated columns and a blank
line between sentences. ``-DOCSTART-`` lines are dropped, so document
boundaries do not survive ingestion.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import BIOValidationError, ConfigError, CorpusParseError

DOCSTART = "-DOCSTART-"
SPLITS = ("train", "valid", "test")

_COLUMN_SEP = re.compile(r"[ \t]+")


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError(
                f"sentence {self.id}: {len(self.tokens)} tokens but {len(self.tags)} tags"
            )
        if not self.tokens:
            raise ValueError(f"sentence {self.id}: empty sentence")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int  # exclusive
    category: str
    surface: str

    @property
    def length(self) -> int:
        return self.end - self.start

    def key(self) -> tuple[int, int, str]:
        return (self.start, self.end, self.category)


@dataclass
class Corpus:
    name: str
    label_set: tuple[str, ...]
    train: list[Sentence] | None = None
    valid: list[Sentence] | None = None
    test: list[Sentence] | None = None

    def splits(self) -> dict[str, list[Sentence]]:
        return {name: getattr(self, name) for name in SPLITS if getattr(self, name) is not None}


@dataclass
class DatasetStats:
    name: str
    sentences: dict[str, int]
    tokens: dict[str, int]
    entity_count: int
    entity_tokens: int
    avg_entity_length: float | None
    label_set: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "label_set": list(self.label_set),
            "sentences": dict(self.sentences),
            "tokens": dict(self.tokens),
            "entity_count": self.entity_count,
            "entity_tokens": self.entity_tokens,
            "avg_entity_length": self.avg_entity_length,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _check_tag(tag: str, sentence_id: int, position: int) -> None:
    if tag == "O":
        return
    if len(tag) > 2 and tag[:2] in ("B-", "I-"):
        return
    raise BIOValidationError(f"malformed tag {tag!r}", sentence_id, position)


def validate_bio(tags: Sequence[str], sentence_id: int = 0) -> None:
    """Raise BIOValidationError unless ``tags`` is a strict BIO sequence."""
    prev = "O"
    for i, tag in enumerate(tags):
        _check_tag(tag, sentence_id, i)
        if tag.startswith("I-"):
            cat = tag[2:]
            if prev == "O" or prev[2:] != cat:
                raise BIOValidationError(
                    "I- without preceding B-/I- of same type", sentence_id, i
                )
        prev = tag


def iob1_to_bio(tags: Sequence[str]) -> list[str]:
    """Rewrite every I- tag that opens a span as B- (IOB1 -> BIO)."""
    out = []
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            tag = "B-" + tag[2:]
        out.append(tag)
        prev = tag
    return out


def parse_conll(raw_text: str, column: int = -1, scheme: str = "bio") -> list[Sentence]:
    """Parse one split of a token-per-line file.

    ``column`` picks the tag column (negative values count from the end; the
    token is always column 0). ``scheme`` is ``"bio"`` for strict BIO input or
    ``"iob1"`` to convert IOB1 tags on the way in.
    """
    if scheme not in ("bio", "iob1"):
        raise ConfigError(f"unknown tagging scheme {scheme!r}")
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if not tokens:
            return
        sid = len(sentences)
        seq = iob1_to_bio(tags) if scheme == "iob1" else list(tags)
        validate_bio(seq, sid)
        sentences.append(Sentence(sid, tuple(tokens), tuple(seq)))
        tokens.clear()
        tags.clear()

    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        line = line.strip(" \t\r")
        if not line:
            flush()
            continue
        cols = _COLUMN_SEP.split(line)
        if cols[0] == DOCSTART:
            flush()
            continue
        needed = column + 1 if column >= 0 else max(2, -column + 1)
        if len(cols) < needed or len(cols) < 2:
            raise CorpusParseError(
                f"expected at least {max(needed, 2)} columns, got {len(cols)}", lineno
            )
        tokens.append(cols[0])
        tags.append(cols[column])
    flush()
    return sentences


def extract_entities(s: Sentence) -> list[EntitySpan]:
    spans = []
    start = None
    cat = None
    for i, tag in enumerate(s.tags):
        if tag.startswith("I-") and start is not None and tag[2:] == cat:
            continue
        if start is not None:
            spans.append(EntitySpan(start, i, cat, " ".join(s.tokens[start:i])))
            start = cat = None
        if tag != "O":
            # an I- here only happens on unvalidated input; treat it as an opener
            start, cat = i, tag[2:]
    if start is not None:
        spans.append(EntitySpan(start, len(s.tags), cat, " ".join(s.tokens[start:])))
    return spans


def spans_to_bio(length: int, spans: Iterable[EntitySpan | tuple[int, int, str]]) -> list[str]:
    tags = ["O"] * length
    for sp in spans:
        start, end, cat = sp.key() if isinstance(sp, EntitySpan) else sp
        tags[start] = "B-" + cat
        for i in range(start + 1, end):
            tags[i] = "I-" + cat
    return tags


def make_span(tokens: Sequence[str], start: int, end: int, category: str) -> EntitySpan:
    if not 0 <= start < end <= len(tokens):
        raise ValueError(f"span [{start}, {end}) out of range for {len(tokens)} tokens")
    return EntitySpan(start, end, category, " ".join(tokens[start:end]))


def categories(sentences: Iterable[Sentence]) -> set[str]:
    return {t[2:] for s in sentences for t in s.tags if t != "O"}


def build_corpus(
    name: str,
    train: list[Sentence] | None = None,
    valid: list[Sentence] | None = None,
    test: list[Sentence] | None = None,
    label_order: Sequence[str] | None = None,
) -> Corpus:
    """Assemble a corpus; the label set is whatever categories the splits use.

    Without ``label_order`` the labels are sorted. A given order must name
    exactly the categories that occur.
    """
    present = set()
    for split_name, split in (("train", train), ("valid", valid), ("test", test)):
        if split is None:
            continue
        if not split:
            raise ConfigError(f"split {split_name!r} is present but empty")
        present |= categories(split)
    if label_order is None:
        labels = tuple(sorted(present))
    else:
        labels = tuple(label_order)
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate labels in {list(labels)}")
        if set(labels) != present:
            missing = sorted(present - set(labels))
            extra = sorted(set(labels) - present)
            raise ConfigError(
                f"label order does not match corpus categories (missing {missing}, unused {extra})"
            )
    return Corpus(name=name, label_set=labels, train=train, valid=valid, test=test)


def corpus_stats(c: Corpus) -> DatasetStats:
    sentences = {}
    tokens = {}
    n_ent = 0
    ent_tokens = 0
    for name, split in c.splits().items():
        sentences[name] = len(split)
        tokens[name] = sum(len(s) for s in split)
        for s in split:
            for sp in extract_entities(s):
                n_ent += 1
                ent_tokens += sp.length
    avg = round(ent_tokens / n_ent, 2) if n_ent else None
    return DatasetStats(
        name=c.name,
        sentences=sentences,
        tokens=tokens,
        entity_count=n_ent,
        entity_tokens=ent_tokens,
        avg_entity_length=avg,
        label_set=list(c.label_set),
    )


def serialize_conll(sentences: Iterable[Sentence], tags: Iterable[Sequence[str]] | None = None) -> str:
    """Two-column ``token tag`` text; ``tags`` optionally overrides each sentence's tags."""
    out = []
    tag_iter = iter(tags) if tags is not None else None
    for s in sentences:
        seq = next(tag_iter) if tag_iter is not None else s.tags
        if len(seq) != len(s.tokens):
            raise ValueError(f"sentence {s.id}: tag count {len(seq)} != token count {len(s)}")
        for tok, tag in zip(s.tokens, seq):
            out.append(f"{tok} {tag}\n")
        out.append("\n")
    return "".join(out)


# File name hints used to find splits inside a dataset directory. Order matters:
# "testa"/"dev" must win over the plain "test" pattern.
_SPLIT_PATTERNS = (
    ("valid", re.compile(r"(dev|valid|testa)", re.I)),
    ("test", re.compile(r"(testb|test)", re.I)),
    ("train", re.compile(r"train", re.I)),
)


def discover_splits(directory: str | Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for path in sorted(Path(directory).iterdir()):
        if not path.is_file() or path.name.startswith("."):
            continue
        for split, pat in _SPLIT_PATTERNS:
            if pat.search(path.name):
                if split in found:
                    raise ConfigError(
                        f"ambiguous {split} split: {found[split].name} and {path.name}"
                    )
                found[split] = path
                break
    if "train" not in found:
        raise ConfigError(f"no training split found in {directory}")
    return found


def load_corpus(
    paths: str | Path | dict[str, str | Path],
    name: str | None = None,
    column: int = -1,
    scheme: str = "bio",
    label_order: Sequence[str] | None = None,
) -> Corpus:
    """Load a corpus from a directory (splits discovered by file name) or a split->path map."""
    if isinstance(paths, (str, Path)):
        directory = Path(paths)
        split_paths = discover_splits(directory)
        name = name or directory.name
    else:
        split_paths = {k: Path(v) for k, v in paths.items()}
        name = name or "corpus"
    parsed = {}
    for split, path in split_paths.items():
        try:
            parsed[split] = parse_conll(path.read_text(encoding="utf-8"), column, scheme)
        except (CorpusParseError, BIOValidationError) as exc:
            exc.args = (f"{path}: {exc.args[0]}",) + exc.args[1:]
            raise
    return build_corpus(name, label_order=label_order, **parsed)
