"""Offense-type tagging of case facts via keyword lexicons.

Each offense category carries an expanded keyword set; a fact is tagged
with every category for which at least one keyword occurs in its text.
A tagged fact renders as the original text plus a trailing
``Offense types: ...`` line (omitted when nothing matched).

The packaged lexicon is a best-effort, non-normative starting point;
audits should pin their own lexicon file for reproducibility.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .corpus import CaseFact, Split
from .errors import ExpansionError, IngestionError
from .lexicons import PhraseMatcher, load_sectioned_lexicon

if TYPE_CHECKING:
    from .backend import ModelBackend

logger = logging.getLogger(__name__)

ANNOTATION_PREFIX = "Offense types: "


@dataclass(frozen=True)
class TypedFact:
    """A case fact annotated with its matched offense types.

    ``bail_granted`` and ``split`` are carried through from the source
    fact so tagged files remain valid pipeline inputs downstream.
    """

    case_id: str
    text: str
    offense_types: tuple[str, ...]
    rendered_text: str
    bail_granted: bool
    split: Split | None = None


class OffenseLexicon:
    """Mapping from offense category to its keyword set."""

    def __init__(self, entries: dict[str, list[str]], stem: bool = False):
        if not entries:
            raise IngestionError("offense lexicon has no categories")
        self.entries = {name: list(kws) for name, kws in entries.items()}
        self.stem = stem
        self._matchers = {
            name: PhraseMatcher(kws, prefix=stem) for name, kws in self.entries.items()
        }

    @classmethod
    def from_file(cls, path: str | Path, stem: bool = False) -> "OffenseLexicon":
        return cls(load_sectioned_lexicon(path), stem=stem)

    @classmethod
    def default(cls, stem: bool = False) -> "OffenseLexicon":
        return cls.from_file(default_lexicon_path(), stem=stem)

    def categories(self) -> list[str]:
        return sorted(self.entries)

    def match_types(self, text: str) -> list[str]:
        """All categories with at least one keyword occurrence, sorted."""
        return sorted(name for name, m in self._matchers.items() if m.matches(text))


def default_lexicon_path() -> Path:
    return Path(str(resources.files("bailaudit") / "data" / "offense_lexicon.txt"))


def lexicon_file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def render_typed_text(text: str, offense_types: Iterable[str]) -> str:
    types = list(offense_types)
    if not types:
        return text
    return f"{text}\n{ANNOTATION_PREFIX}{', '.join(types)}"


def tag_case(fact: CaseFact, lexicon: OffenseLexicon) -> TypedFact:
    """Attach every offense type whose keywords occur in the fact text."""
    types = tuple(lexicon.match_types(fact.text))
    return TypedFact(
        case_id=fact.case_id,
        text=fact.text,
        offense_types=types,
        rendered_text=render_typed_text(fact.text, types),
        bail_granted=fact.bail_granted,
        split=fact.split,
    )


def expand_lexicon(backend: "ModelBackend", offense_type: str, n: int) -> list[str]:
    """Ask a model backend for up to ``n`` keywords similar to an offense type.

    The result is a reviewed-by-a-human suggestion list; it is never
    merged into a lexicon automatically.  Returns a deduplicated list in
    response order.
    """
    if n <= 0:
        return []
    from .backend import query_model
    from .prompting import PromptBundle

    bundle = PromptBundle(
        system_text=(
            "You expand offense categories into keyword lists for matching "
            "criminal case descriptions."
        ),
        user_text=(
            f"List up to {n} words or short phrases commonly used in case "
            f"reports for the offense type '{offense_type}'. Respond with a "
            "comma-separated list only."
        ),
        image_ref=None,
        asks_confidence=False,
    )
    try:
        response = query_model(backend, bundle)
    except Exception as exc:
        raise ExpansionError(f"keyword expansion for {offense_type!r} failed: {exc}") from exc

    keywords = parse_keyword_response(response.text, n)
    if not keywords:
        logger.warning("unparseable expansion response for %r: %.80r", offense_type, response.text)
    return keywords


def parse_keyword_response(text: str, n: int) -> list[str]:
    """Split a comma/newline-separated response into at most ``n`` keywords."""
    parts = re.split(r"[,\n;]", text)
    keywords: list[str] = []
    seen: set[str] = set()
    for part in parts:
        kw = part.strip().strip(".").strip()
        kw = re.sub(r"^\d+[.)]\s*", "", kw).strip()
        if not kw or len(kw.split()) > 6:
            continue
        key = kw.lower()
        if key in seen:
            continue
        seen.add(key)
        keywords.append(kw)
        if len(keywords) >= n:
            break
    return keywords


# --- JSONL interfaces ----------------------------------------------------


def write_typed_facts(path: str | Path, facts: Iterable[TypedFact]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for fact in facts:
            fh.write(json.dumps(typed_fact_to_dict(fact), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_typed_facts(path: str | Path) -> list[TypedFact]:
    facts = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    facts.append(
                        TypedFact(
                            case_id=str(obj["case_id"]),
                            text=str(obj["text"]),
                            offense_types=tuple(obj["offense_types"]),
                            rendered_text=str(obj["rendered_text"]),
                            bail_granted=bool(obj["bail_granted"]),
                            split=Split(obj["split"]) if obj.get("split") else None,
                        )
                    )
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise IngestionError(f"{path}:{lineno}: bad typed fact record: {exc}") from None
    except OSError as exc:
        raise IngestionError(f"cannot read typed facts {path}: {exc}") from exc
    return facts


def typed_fact_to_dict(fact: TypedFact) -> dict:
    return {
        "case_id": fact.case_id,
        "text": fact.text,
        "offense_types": list(fact.offense_types),
        "rendered_text": fact.rendered_text,
        "bail_granted": fact.bail_granted,
        "split": fact.split.value if fact.split else None,
    }
