"""Case-fact ingestion: cleaning raw case reports and splitting the corpus.

A raw case report goes through three ordered steps:

1. legal-stopword removal (token/phrase-level deletion),
2. sentence segmentation and removal of any sentence containing an
   argument keyword, so only the factual narrative survives,
3. tokenization and a minimum-length gate.

Argument keywords are matched at the left word boundary only, so
"oppose" also removes sentences containing "opposed" or "opposes".
Stopwords are deleted as exact whole words or phrases.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

from .errors import ConfigurationError, IngestionError, SplitError
from .lexicons import PhraseMatcher, load_keyword_list

DEFAULT_MIN_TOKEN_LENGTH = 50
DEFAULT_SENTENCE_SPLIT = r"(?<=[.?!])\s+"

# Registry of named tokenizers; count_tokens resolves specs against it.
_TOKENIZERS: dict[str, Callable[[str], list[str]]] = {
    "whitespace": str.split,
}


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class RawCase:
    """One unprocessed case report with its ground-truth bail outcome."""

    case_id: str
    facts_and_arguments: str
    bail_granted: bool


@dataclass(frozen=True)
class CaseFact:
    """A cleaned case fact, optionally assigned to a corpus split."""

    case_id: str
    text: str
    token_count: int
    bail_granted: bool
    split: Split | None = None


@dataclass(frozen=True)
class DroppedCase:
    """Marker for a case removed during preprocessing, with a reason code."""

    case_id: str
    reason: str


@dataclass
class PreprocessConfig:
    legal_stopwords: list[str]
    argument_keywords: list[str]
    min_token_length: int = DEFAULT_MIN_TOKEN_LENGTH
    tokenizer_spec: str = "whitespace"
    sentence_split_pattern: str = DEFAULT_SENTENCE_SPLIT

    def __post_init__(self):
        if self.min_token_length < 1:
            raise ConfigurationError("min_token_length must be >= 1")
        if not self.legal_stopwords or not self.argument_keywords:
            raise ConfigurationError("stopword and argument keyword lists must be non-empty")

    @classmethod
    def default(cls, **overrides) -> "PreprocessConfig":
        """Config backed by the packaged stopword and argument-keyword lists."""
        kwargs = dict(
            legal_stopwords=load_keyword_list(default_stopwords_path()),
            argument_keywords=load_keyword_list(default_argument_keywords_path()),
        )
        kwargs.update(overrides)
        return cls(**kwargs)


def default_stopwords_path() -> Path:
    return Path(str(resources.files("bailaudit") / "data" / "legal_stopwords.txt"))


def default_argument_keywords_path() -> Path:
    return Path(str(resources.files("bailaudit") / "data" / "argument_keywords.txt"))


def register_tokenizer(name: str, fn: Callable[[str], list[str]]) -> None:
    """Hook for plugging model-exact tokenizers under a resolvable name."""
    _TOKENIZERS[name] = fn


def count_tokens(text: str, tokenizer_spec: str = "whitespace") -> int:
    """Token count under a named tokenizer; 0 only for empty text."""
    try:
        tokenize = _TOKENIZERS[tokenizer_spec]
    except KeyError:
        raise ConfigurationError(
            f"unknown tokenizer_spec {tokenizer_spec!r}; registered: {sorted(_TOKENIZERS)}"
        ) from None
    return len(tokenize(text))


def preprocess_case(raw: RawCase, cfg: PreprocessConfig) -> CaseFact | DroppedCase:
    """Apply the three cleaning steps to one raw case.

    Returns a CaseFact, or a DroppedCase with reason ``too_short`` when the
    cleaned text falls below ``cfg.min_token_length`` tokens.
    """
    stopword_matcher = PhraseMatcher(cfg.legal_stopwords)
    keyword_matcher = PhraseMatcher(cfg.argument_keywords, prefix=True)

    text = stopword_matcher.remove_all(raw.facts_and_arguments)

    sentences = re.split(cfg.sentence_split_pattern, text)
    kept = [s for s in sentences if s.strip() and not keyword_matcher.matches(s)]
    text = " ".join(s.strip() for s in kept)

    n_tokens = count_tokens(text, cfg.tokenizer_spec)
    if n_tokens < cfg.min_token_length:
        return DroppedCase(case_id=raw.case_id, reason="too_short")
    return CaseFact(
        case_id=raw.case_id,
        text=text,
        token_count=n_tokens,
        bail_granted=raw.bail_granted,
    )


def preprocess_corpus(
    raws: Iterable[RawCase], cfg: PreprocessConfig
) -> tuple[list[CaseFact], list[DroppedCase]]:
    """Clean every raw case, collecting retained facts and drops separately."""
    facts, dropped = [], []
    for raw in raws:
        result = preprocess_case(raw, cfg)
        if isinstance(result, DroppedCase):
            dropped.append(result)
        else:
            facts.append(result)
    return facts, dropped


def split_corpus(facts: list[CaseFact], train_fraction: float, seed: int) -> list[CaseFact]:
    """Assign each fact to train or test, deterministically for a given seed.

    The train size is round-half-up of ``train_fraction * len(facts)``; the
    remainder goes to test.  Returns new facts in the input order.
    """
    if len(facts) < 2:
        raise SplitError(f"need at least 2 facts to split, got {len(facts)}")
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if any(f.split is not None for f in facts):
        raise SplitError("split_corpus requires facts with unassigned splits")

    n_train = math.floor(train_fraction * len(facts) + 0.5)
    order = list(range(len(facts)))
    random.Random(seed).shuffle(order)
    train_indices = set(order[:n_train])
    return [
        replace(f, split=Split.TRAIN if i in train_indices else Split.TEST)
        for i, f in enumerate(facts)
    ]


# --- JSONL interfaces ---------------------------------------------------


def read_raw_cases(path: str | Path) -> list[RawCase]:
    """Read raw cases from JSONL: one object per line with keys
    ``case_id``, ``facts_and_arguments``, ``bail_granted``."""
    cases = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            case = RawCase(
                case_id=str(obj["case_id"]),
                facts_and_arguments=str(obj["facts_and_arguments"]),
                bail_granted=bool(obj["bail_granted"]),
            )
        except KeyError as exc:
            raise IngestionError(f"{path}:{lineno}: missing key {exc}") from None
        if not case.case_id:
            raise IngestionError(f"{path}:{lineno}: empty case_id")
        if not case.facts_and_arguments:
            raise IngestionError(f"{path}:{lineno}: empty facts_and_arguments", case.case_id)
        if case.case_id in seen:
            raise IngestionError(f"{path}:{lineno}: duplicate case_id {case.case_id!r}", case.case_id)
        seen.add(case.case_id)
        cases.append(case)
    return cases


def write_case_facts(path: str | Path, facts: Iterable[CaseFact]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for fact in facts:
            fh.write(json.dumps(case_fact_to_dict(fact), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_case_facts(path: str | Path) -> list[CaseFact]:
    facts = []
    for lineno, obj in _iter_jsonl(path):
        try:
            facts.append(case_fact_from_dict(obj))
        except (KeyError, ValueError) as exc:
            raise IngestionError(f"{path}:{lineno}: bad case fact record: {exc}") from None
    return facts


def case_fact_to_dict(fact: CaseFact) -> dict:
    return {
        "case_id": fact.case_id,
        "text": fact.text,
        "token_count": fact.token_count,
        "bail_granted": fact.bail_granted,
        "split": fact.split.value if fact.split else None,
    }


def case_fact_from_dict(obj: dict) -> CaseFact:
    return CaseFact(
        case_id=str(obj["case_id"]),
        text=str(obj["text"]),
        token_count=int(obj["token_count"]),
        bail_granted=bool(obj["bail_granted"]),
        split=Split(obj["split"]) if obj.get("split") else None,
    )


def _iter_jsonl(path: str | Path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestionError(f"{path}:{lineno}: invalid JSON: {exc}") from None
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path} is not valid UTF-8: {exc}") from exc
