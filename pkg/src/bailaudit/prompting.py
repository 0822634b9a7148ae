"""Prompt assembly for the five run configurations and response parsing.

Prompt wording lives in versioned template files with named
placeholders ({CASE_FACT}, {PRECEDENTS}, {QUESTION}, ...); the template
set's hash travels with every run so results stay attributable to the
exact wording used.  Decision parsing is driven by an ordered,
versioned rule file: leading yes/no tokens first, then anchored
phrases; anything that matches no rule is ``unparseable`` rather than
an error.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ConfigurationError, PromptAssemblyError
from .retrieval import Precedent

PRECEDENT_DELIMITER = "[Precedent "


class Configuration(str, Enum):
    """The five run configurations, in report column order."""

    AUDIT = "audit"
    AUDIT_RAG = "audit-rag"
    FT_VANILLA = "ft-vanilla"
    FT_VANILLA_RAG = "ft-vanilla-rag"
    FT_TYPED_RAG = "ft-typed-rag"

    @property
    def uses_rag(self) -> bool:
        return self in (Configuration.AUDIT_RAG, Configuration.FT_VANILLA_RAG,
                        Configuration.FT_TYPED_RAG)

    @property
    def uses_typed_facts(self) -> bool:
        return self is Configuration.FT_TYPED_RAG


CONFIGURATION_ORDER = list(Configuration)


class Decision(str, Enum):
    YES = "yes"  # bail granted
    NO = "no"  # bail denied
    UNPARSEABLE = "unparseable"


class Confidence(str, Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"
    ABSENT = "absent"


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    image_ref: str | None
    asks_confidence: bool


@dataclass(frozen=True)
class TemplateSet:
    """Prompt templates loaded from a versioned directory."""

    system: str
    system_rag: str
    user: str
    question: str
    question_confidence: str
    precedent: str
    source: str
    sha256: str

    _FILES = ("system.txt", "system_rag.txt", "user.txt", "question.txt",
              "question_confidence.txt", "precedent.txt")

    @classmethod
    def load(cls, directory: str | Path) -> "TemplateSet":
        directory = Path(directory)
        texts = {}
        digest = hashlib.sha256()
        for name in cls._FILES:
            path = directory / name
            if not path.is_file():
                raise ConfigurationError(f"template directory {directory} lacks {name}")
            content = path.read_text(encoding="utf-8")
            texts[name] = content
            digest.update(name.encode("utf-8") + b"\0" + content.encode("utf-8") + b"\0")
        return cls(
            system=texts["system.txt"],
            system_rag=texts["system_rag.txt"],
            user=texts["user.txt"],
            question=texts["question.txt"],
            question_confidence=texts["question_confidence.txt"],
            precedent=texts["precedent.txt"],
            source=str(directory),
            sha256=digest.hexdigest(),
        )

    @classmethod
    def default(cls) -> "TemplateSet":
        return cls.load(default_templates_dir())


def default_templates_dir() -> Path:
    return Path(str(resources.files("bailaudit") / "templates" / "v1"))


def build_prompt(
    cfg: Configuration,
    fact,
    precedents: Sequence[Precedent] | None,
    image_ref: str | None,
    templates: TemplateSet,
    asks_confidence: bool = True,
    precedent_facts_only: bool = False,
) -> PromptBundle:
    """Assemble the chat payload for one pair under one configuration.

    ``fact`` is a case fact, or a typed fact for the typed configuration
    (its rendered text, with the offense-type line, becomes the user
    fact).  Precedents must be supplied exactly when the configuration
    retrieves them; by default each precedent block carries the
    precedent's known outcome line, which ``precedent_facts_only``
    suppresses.
    """
    if cfg.uses_rag:
        if precedents is None:
            raise PromptAssemblyError(f"configuration {cfg.value} requires retrieved precedents")
    elif precedents is not None:
        raise PromptAssemblyError(f"configuration {cfg.value} does not take precedents")

    if cfg.uses_typed_facts:
        fact_text = getattr(fact, "rendered_text", None)
        if fact_text is None:
            raise PromptAssemblyError(
                f"configuration {cfg.value} requires typed facts (got {type(fact).__name__})"
            )
    else:
        fact_text = fact.text

    if cfg.uses_rag:
        blocks = []
        for rank, precedent in enumerate(precedents, 1):
            outcome = "" if precedent_facts_only else (
                "Outcome: bail granted" if precedent.bail_granted else "Outcome: bail denied"
            )
            # Case text is substituted last so placeholder-shaped strings
            # inside it are never re-expanded.
            block = (
                templates.precedent
                .replace("{RANK}", str(rank))
                .replace("{OUTCOME}", outcome)
                .replace("{PRECEDENT_TEXT}", precedent.text)
            )
            blocks.append(block.rstrip())
        system_text = templates.system_rag.replace("{PRECEDENTS}", "\n\n".join(blocks))
    else:
        system_text = templates.system

    question = templates.question_confidence if asks_confidence else templates.question
    user_text = (
        templates.user
        .replace("{QUESTION}", question.rstrip("\n"))
        .replace("{CASE_FACT}", fact_text)
    )
    return PromptBundle(
        system_text=system_text.rstrip("\n"),
        user_text=user_text.rstrip("\n"),
        image_ref=image_ref,
        asks_confidence=asks_confidence,
    )


# --- response parsing ------------------------------------------------------


@dataclass(frozen=True)
class DecisionRule:
    decision: Decision
    pattern: re.Pattern[str]
    raw: str


class DecisionRules:
    """Ordered decision-parsing rules read from a versioned rule file.

    File format: one rule per line, ``yes<TAB>regex`` or ``no<TAB>regex``;
    ``#`` comments and blank lines ignored.  Rules are tried in order
    against the normalized response (lowercased, punctuation stripped).
    """

    def __init__(self, rules: list[DecisionRule], source: str, sha256: str):
        self.rules = rules
        self.source = source
        self.sha256 = sha256

    @classmethod
    def load(cls, path: str | Path) -> "DecisionRules":
        path = Path(path)
        content = path.read_text(encoding="utf-8")
        rules = []
        for lineno, line in enumerate(content.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                verdict, pattern = stripped.split("\t", 1)
                rules.append(
                    DecisionRule(
                        decision=Decision(verdict.strip()),
                        pattern=re.compile(pattern.strip()),
                        raw=stripped,
                    )
                )
            except (ValueError, re.error) as exc:
                raise ConfigurationError(f"{path}:{lineno}: bad decision rule: {exc}") from None
        if not rules:
            raise ConfigurationError(f"{path}: no decision rules found")
        return cls(rules, source=str(path), sha256=hashlib.sha256(content.encode()).hexdigest())

    @classmethod
    def default(cls) -> "DecisionRules":
        return cls.load(default_rules_path())


def default_rules_path() -> Path:
    return Path(str(resources.files("bailaudit") / "data" / "decision_rules.txt"))


_DEFAULT_RULES: DecisionRules | None = None


def _default_rules() -> DecisionRules:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = DecisionRules.default()
    return _DEFAULT_RULES


def normalize_response(raw: str) -> str:
    """Lowercase and strip punctuation, collapsing whitespace runs."""
    text = re.sub(r"[^\w\s]", " ", raw.lower())
    return re.sub(r"\s+", " ", text).strip()


def parse_decision(raw: str, rules: DecisionRules | None = None) -> Decision:
    """Map a raw model response to yes/no/unparseable; never raises."""
    rules = rules or _default_rules()
    normalized = normalize_response(raw or "")
    for rule in rules.rules:
        if rule.pattern.search(normalized):
            return rule.decision
    return Decision.UNPARSEABLE


_CONFIDENCE_RE = re.compile(r"\b(high|medium|low)\b")


def parse_confidence(raw: str) -> Confidence:
    """First standalone high/medium/low in the response wins; else absent."""
    match = _CONFIDENCE_RE.search((raw or "").lower())
    return Confidence(match.group(1)) if match else Confidence.ABSENT
