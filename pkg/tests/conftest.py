import random
from pathlib import Path

import pytest

from nerannot.corpus import Sentence, build_corpus, serialize_conll

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

WORDS = (
    "the a cat dog sat ran on in with from at to Paris Berlin Rome John Mary Smith "
    "Acme Corp Times EU UN said today over under big red blue"
).split()
CATEGORIES = ("PER", "ORG", "LOC", "MISC")


def random_tags(rng: random.Random, n: int, categories=CATEGORIES, p_entity=0.3) -> list[str]:
    tags = []
    i = 0
    while i < n:
        if rng.random() < p_entity:
            cat = rng.choice(categories)
            length = min(rng.randint(1, 3), n - i)
            tags += [f"B-{cat}"] + [f"I-{cat}"] * (length - 1)
            i += length
        else:
            tags.append("O")
            i += 1
    return tags


def random_sentences(
    rng: random.Random, count: int, max_len: int = 12, categories=CATEGORIES, distinct: bool = True
) -> list[Sentence]:
    """Random tagged sentences. ``distinct`` avoids repeated tokens within a
    sentence, which is what lets entity strings align back unambiguously."""
    out = []
    for sid in range(count):
        n = rng.randint(1, max_len)
        toks = tuple(rng.sample(WORDS, n) if distinct else (rng.choice(WORDS) for _ in range(n)))
        out.append(Sentence(sid, toks, tuple(random_tags(rng, n, categories))))
    return out


def synthetic_corpus(seed: int = 0, n_train: int = 200, n_valid: int = 20, n_test: int = 20, name: str = "synthetic"):
    rng = random.Random(seed)
    return build_corpus(
        name,
        train=random_sentences(rng, n_train),
        valid=random_sentences(rng, n_valid),
        test=random_sentences(rng, n_test),
        label_order=None,
    )


def write_corpus_dir(corpus, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for split, fname in (("train", "train.txt"), ("valid", "dev.txt"), ("test", "test.txt")):
        sents = getattr(corpus, split)
        if sents is not None:
            (directory / fname).write_text(serialize_conll(sents), encoding="utf-8")
    return directory


@pytest.fixture
def corpus():
    return synthetic_corpus()


@pytest.fixture
def corpus_dir(tmp_path, corpus):
    return write_corpus_dir(corpus, tmp_path / "data")
