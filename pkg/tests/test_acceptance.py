"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

Criteria 1 and 4 need the public CoNLL-2003 / WNUT-17 releases. Point
NERANNOT_CONLL2003_DIR and NERANNOT_WNUT17_DIR at the directories holding the
split files; without them those criteria fail rather than skip.
"""

import json
import math
import os
import random
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import special

from conftest import FIXTURES, GOLDEN, random_sentences, synthetic_corpus, write_corpus_dir
from nerannot.annotate import AnnotatedSentence
from nerannot.cli import main
from nerannot.corpus import Sentence, extract_entities, iob1_to_bio, parse_conll, validate_bio
from nerannot.evaluate import span_prf
from nerannot.promptkit import render_prompt, serialize_example
from nerannot.stats import ScoreMatrix, chi2_sf, friedman, rank_scores
from nerannot.vectorstore import build_index, query_top_k

ROOT = Path(__file__).resolve().parents[1]
CONLL_DIR = Path(os.environ.get("NERANNOT_CONLL2003_DIR", ROOT / "data" / "conll2003"))
WNUT_DIR = Path(os.environ.get("NERANNOT_WNUT17_DIR", ROOT / "data" / "wnut17"))
HEADER = "You are an advanced Named-Entity Recognition (NER) system"


@pytest.fixture
def verdict(capsys):
    """Print one line for the criterion, then fail the test if it did not pass."""

    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def _need_data(directory: Path, label: str, env: str) -> str | None:
    if directory.is_dir() and any(directory.iterdir()):
        return None
    return f"{label} not found at {directory} (set {env})"


# 1 -------------------------------------------------------------------------


def _ingest(tmp_path, directory, name):
    out = tmp_path / name
    t0 = time.perf_counter()
    code = main(["ingest", str(directory), "--scheme", "iob1", "--name", name, "--out-dir", str(out)])
    elapsed = time.perf_counter() - t0
    stats = json.loads((out / "stats.json").read_text()) if code == 0 else None
    return code, stats, elapsed


def test_criterion_1_dataset_statistics(tmp_path, verdict):
    problems = []
    missing = [
        m
        for m in (
            _need_data(CONLL_DIR, "CoNLL-2003", "NERANNOT_CONLL2003_DIR"),
            _need_data(WNUT_DIR, "WNUT-17", "NERANNOT_WNUT17_DIR"),
        )
        if m
    ]
    if missing:
        verdict(1, False, "; ".join(missing))
    code, s, t = _ingest(tmp_path, CONLL_DIR, "conll2003")
    if code != 0:
        problems.append(f"CoNLL ingest exit {code}")
    else:
        if s["sentences"] != {"train": 14041, "valid": 3250, "test": 3453}:
            problems.append(f"CoNLL sentences {s['sentences']}")
        if s["tokens"] != {"train": 203621, "valid": 51362, "test": 46435}:
            problems.append(f"CoNLL tokens {s['tokens']}")
        if abs(s["avg_entity_length"] - 1.60) > 0.01 + 1e-12:
            problems.append(f"CoNLL avg entity length {s['avg_entity_length']}")
        if t >= 10:
            problems.append(f"CoNLL ingest took {t:.1f}s")
    code, s, t = _ingest(tmp_path, WNUT_DIR, "wnut17")
    if code != 0:
        problems.append(f"WNUT ingest exit {code}")
    else:
        if s["sentences"] != {"train": 3394, "valid": 1008, "test": 1287}:
            problems.append(f"WNUT sentences {s['sentences']}")
        if abs(s["avg_entity_length"] - 1.73) > 0.01 + 1e-12:
            problems.append(f"WNUT avg entity length {s['avg_entity_length']}")
        if t >= 10:
            problems.append(f"WNUT ingest took {t:.1f}s")
    verdict(1, not problems, "; ".join(problems) or "dataset statistics reproduced exactly")


# 2 -------------------------------------------------------------------------


def test_criterion_2_retrieval_exactness(verdict):
    rng = np.random.default_rng(2024)
    ids = rng.permutation(100_000)[:2000]
    # a slice of duplicated rows forces exact score ties
    matrix = rng.standard_normal((2000, 64))
    matrix[1000:1100] = matrix[900:1000]
    t0 = time.perf_counter()
    index = build_index(zip(ids.tolist(), matrix), ("oracle", "random-64"))
    unit = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    bad = 0
    for qi in range(200):
        q = matrix[rng.integers(2000)] if qi % 4 == 0 else rng.standard_normal(64)
        got = [h.sentence_id for h in query_top_k(index, q, 10)]
        scores = unit @ (q / np.linalg.norm(q))
        expected = [int(i) for _, i in sorted(zip((-scores).tolist(), ids.tolist()))[:10]]
        bad += got != expected
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 5
    verdict(2, ok, f"{bad} mismatching queries of 200, {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------


def _oracle_triples(tags):
    # independent decoder: a span opens at B-X and runs over following I-X
    out, i = set(), 0
    while i < len(tags):
        if tags[i].startswith("B-"):
            cat, j = tags[i][2:], i + 1
            while j < len(tags) and tags[j] == "I-" + cat:
                j += 1
            out.add((i, j, cat))
            i = j
        else:
            i += 1
    return out


def _oracle_prf(pred_tags, gold_tags):
    tp = fp = fn = 0
    for sid, (p, g) in enumerate(zip(pred_tags, gold_tags)):
        ps = {(sid,) + t for t in _oracle_triples(p)}
        gs = {(sid,) + t for t in _oracle_triples(g)}
        tp += len(ps & gs)
        fp += len(ps - gs)
        fn += len(gs - ps)
    p = 100 * tp / (tp + fp) if tp + fp else 0.0
    r = 100 * tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def test_criterion_3_evaluation_oracle(verdict):
    rng = random.Random(3)
    discrepancies = 0
    for _ in range(1000):
        gold = random_sentences(rng, rng.randint(1, 10), max_len=20, categories=("A", "B", "C"), distinct=False)
        # predictions stay valid BIO, as the pipeline always emits
        pred_tags = [
            tuple(s.tags) if rng.random() < 0.3 else tuple(iob1_to_bio(
                [t if rng.random() < 0.8 else rng.choice(("O", "B-A", "I-A", "B-B", "I-C")) for t in s.tags]
            ))
            for s in gold
        ]
        for t in pred_tags:
            validate_bio(t)
        pred = [AnnotatedSentence(s.id, t) for s, t in zip(gold, pred_tags)]
        got = span_prf(pred, gold)
        want = _oracle_prf(pred_tags, [s.tags for s in gold])
        if any(abs(a - b) > 1e-9 for a, b in zip((got.precision, got.recall, got.f1), want)):
            discrepancies += 1
    gold = [Sentence(0, ("John", "lives", "in", "Paris"), ("B-PER", "O", "O", "B-LOC"))]
    hand = span_prf([AnnotatedSentence(0, ("B-PER", "O", "B-LOC", "O"))], gold).to_dict()
    hand_ok = (hand["tp"], hand["fp"], hand["fn"]) == (1, 1, 1) and hand["precision"] == hand["recall"] == hand["f1"] == 50.0
    verdict(3, discrepancies == 0 and hand_ok, f"{discrepancies} discrepancies in 1000 corpora; tp=fp=fn=1 case gives {hand['f1']:.2f}")


# 4 -------------------------------------------------------------------------


def _count_sentences(path: Path) -> int:
    return len(parse_conll(path.read_text(encoding="utf-8")))


def test_criterion_4_end_to_end_identity(tmp_path, verdict):
    missing = _need_data(CONLL_DIR, "CoNLL-2003", "NERANNOT_CONLL2003_DIR")
    if missing:
        verdict(4, False, missing)
    results = {}
    t0 = time.perf_counter()
    for mock in ("echo-gold", "empty"):
        out = tmp_path / mock
        common = ["--scheme", "iob1", "--out-dir", str(out)]
        code = main([
            "annotate", str(CONLL_DIR), "--fraction", "0.30", "--mode", "rag", "--embedder", "local-test",
            "--provider", f"mock:{mock}", "--max-in-flight", "1", *common,
        ])
        assert code == 0, f"annotate with mock:{mock} exited {code}"
        assert main(["evaluate", "--run", str(out), "--data", str(CONLL_DIR), *common]) == 0
        split = json.loads((out / "split.json").read_text())
        results[mock] = (
            json.loads((out / "metrics.json").read_text())["f1"],
            _count_sentences(out / "annotated.conll"),
            len(split["targets"]),
        )
    elapsed = time.perf_counter() - t0
    (f_echo, n_echo, n_t), (f_empty, n_empty, _) = results["echo-gold"], results["empty"]
    ok = f_echo == 100.0 and f_empty == 0.0 and n_echo == n_empty == n_t and elapsed < 60
    verdict(4, ok, f"echo-gold F1 {f_echo:.2f}, empty F1 {f_empty:.2f}, |T-hat| {n_empty} vs |T| {n_t}, {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------


def test_criterion_5_statistics(verdict):
    perfect = friedman(rank_scores(ScoreMatrix(["A", "B", "C"], ["d1", "d2", "d3"], [[3, 2, 1]] * 3)))
    closed_form_p = math.exp(-6.0 / 2)  # chi-square(2) survival is exp(-x/2)
    tied = friedman(rank_scores(ScoreMatrix(["A", "B", "C"], ["d1", "d2", "d3"], [[1, 1, 1]] * 3)))
    worst = 0.0
    for df in range(1, 31):
        for x in np.concatenate([np.geomspace(1e-8, 1, 40), np.linspace(1, 200, 400)]):
            ref = special.gammaincc(df / 2, x / 2)
            if ref > 0:
                worst = max(worst, abs(chi2_sf(float(x), df) - ref) / ref)
    ok = (
        abs(perfect.chi2 - 6.0) <= 1e-9
        and abs(perfect.p_value - 0.049787) <= 1e-6
        and abs(perfect.p_value - closed_form_p) <= 1e-12
        and perfect.df == 2
        and tied.chi2 == 0.0
        and tied.p_value == 1.0
        and worst < 1e-10
    )
    verdict(
        5,
        ok,
        f"chi2 {perfect.chi2!r}, p {perfect.p_value:.6f}, tied ({tied.chi2}, {tied.p_value}), "
        f"worst survival rel. error {worst:.1e}",
    )


# 6 -------------------------------------------------------------------------


def test_criterion_6_prompt_goldens(verdict):
    sents = parse_conll((FIXTURES / "conll_example1.conll").read_text(encoding="utf-8"))
    labels = ["PER", "ORG", "LOC", "MISC"]
    context = [serialize_example(s, extract_entities(s)) for s in sents[:5]]
    baseline = render_prompt("baseline", labels, [], sents[5].text).text.encode("utf-8")
    rag = render_prompt("rag", labels, context, sents[5].text, context_ids=range(5)).text.encode("utf-8")
    gold_b = (GOLDEN / "baseline_conll.txt").read_bytes()
    gold_c = (GOLDEN / "context_conll.txt").read_bytes()
    header = HEADER.encode("utf-8")
    ok = baseline == gold_b and rag == gold_c and header in baseline and header in rag
    verdict(6, ok, f"baseline {'==' if baseline == gold_b else '!='} golden, context {'==' if rag == gold_c else '!='} golden")


# 7 -------------------------------------------------------------------------


def test_criterion_7_replay_determinism(tmp_path, verdict):
    data = write_corpus_dir(synthetic_corpus(7, n_train=150), tmp_path / "data")
    rec = tmp_path / "recorded"
    assert main(["annotate", str(data), "--mode", "icl", "--m", "8", "--out-dir", str(rec)]) == 0
    outs = []
    for name in ("replay1", "replay2"):
        out = tmp_path / name
        assert main([
            "annotate", str(data), "--mode", "icl", "--m", "8", "--max-in-flight", "3",
            "--replay", str(rec / "transcript.jsonl"), "--out-dir", str(out),
        ]) == 0
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("annotated.conll", "report.json"))
    verdict(7, same, "two replays gave " + ("bitwise-identical" if same else "different") + " T-hat and report")


# 8 -------------------------------------------------------------------------


def test_criterion_8_not_reproducible_statement(capsys):
    with capsys.disabled():
        print(
            "\nACCEPTANCE criterion 8: NOT REPRODUCIBLE (stated) - published LLM annotation F1 values, "
            "human fine-tuned baselines and the published Friedman statistic over an unpublished "
            "score matrix are out of reach offline; criteria 2-7 stand in for them"
        )
