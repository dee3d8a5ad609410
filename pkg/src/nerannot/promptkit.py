"""Prompt rendering for the baseline, ICL and RAG annotation modes.

The instruction text lives in ``templates/<version>/`` and is never edited
in place; a wording change means a new template version.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Sequence

from .corpus import EntitySpan, Sentence
from .errors import ConfigError

TEMPLATE_VERSION = "v1"
_PLACEHOLDER = re.compile(r"\{(labels|context_examples|input_text)\}")


class PromptMode(str, Enum):
    BASELINE = "baseline"
    ICL = "icl"
    RAG = "rag"


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    mode: PromptMode
    labels: tuple[str, ...]
    context_ids: tuple[int, ...] = ()
    input_sentence_id: int | None = None

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    return (
        resources.files("nerannot")
        .joinpath("templates", version, f"{name}.txt")
        .read_text(encoding="utf-8")
    )


def serialize_example(s: Sentence, gold: Sequence[EntitySpan]) -> str:
    """One context example, e.g. ``['EU rejects', [{'Entity': 'EU', 'Label': 'ORG'}]]``.

    This is the Python literal form of ``[text, [{Entity, Label}, ...]]``, so
    quoting follows ``repr``: double quotes when the text holds a single quote.
    """
    ordered = sorted(gold, key=lambda sp: sp.start)
    return repr([s.text, [{"Entity": sp.surface, "Label": sp.category} for sp in ordered]])


def format_labels(labels: Sequence[str]) -> str:
    return repr(list(labels))


def render_prompt(
    mode: PromptMode | str,
    labels: Sequence[str],
    context: Sequence[str],
    input_text: str,
    *,
    context_ids: Sequence[int] = (),
    input_sentence_id: int | None = None,
    version: str = TEMPLATE_VERSION,
) -> RenderedPrompt:
    mode = PromptMode(mode)
    if not labels:
        raise ConfigError("label set is empty")
    if mode is PromptMode.BASELINE and context:
        raise ConfigError("baseline prompts carry no context examples")
    if mode is not PromptMode.BASELINE and not context:
        raise ConfigError(f"{mode.value} prompt needs at least one context example")
    if context_ids and len(context_ids) != len(context):
        raise ConfigError(f"{len(context_ids)} context ids for {len(context)} examples")

    template = load_template("baseline" if mode is PromptMode.BASELINE else "context", version)
    values = {
        "labels": format_labels(labels),
        "context_examples": "\n\n".join(context),
        "input_text": input_text,
    }
    # one pass, so placeholder-like text inside examples is left alone
    text = _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)
    return RenderedPrompt(
        text=text,
        mode=mode,
        labels=tuple(labels),
        context_ids=tuple(context_ids),
        input_sentence_id=input_sentence_id,
    )
