"""Keyword lexicon files and case-insensitive phrase matching.

Two file formats are used across the pipeline:

* flat lists: one keyword or phrase per line, ``#`` starts a comment
* sectioned lexicons: ``[category]`` header lines, each followed by the
  keywords belonging to that category, one per line

Matching is case-insensitive and anchored at word boundaries.  In
``prefix`` mode the right boundary is dropped, so a keyword also hits
its inflected forms ("oppose" matches "opposed").
"""

from __future__ import annotations

import re
from pathlib import Path

from .errors import IngestionError


def compile_phrase(phrase: str, prefix: bool = False) -> re.Pattern[str]:
    """Compile a keyword or multi-word phrase into a boundary-anchored regex.

    Internal whitespace in the phrase matches any whitespace run.  With
    ``prefix=True`` the match may extend into trailing word characters.
    """
    escaped = re.escape(phrase.strip())
    escaped = re.sub(r"\\\s+|(\\ )+", r"\\s+", escaped)
    tail = "" if prefix else r"(?!\w)"
    return re.compile(r"(?<!\w)" + escaped + tail, re.IGNORECASE)


class PhraseMatcher:
    """A compiled set of phrases with containment and deletion operations."""

    def __init__(self, phrases: list[str], prefix: bool = False):
        self.phrases = [p for p in (q.strip() for q in phrases) if p]
        self._patterns = [compile_phrase(p, prefix=prefix) for p in self.phrases]

    def matches(self, text: str) -> bool:
        return any(p.search(text) for p in self._patterns)

    def remove_all(self, text: str) -> str:
        """Delete every occurrence of every phrase, collapsing whitespace."""
        for pattern in self._patterns:
            text = pattern.sub(" ", text)
        return re.sub(r"[ \t]+", " ", text).strip()


def load_keyword_list(path: str | Path) -> list[str]:
    """Read a flat keyword file: one entry per line, ``#`` comments, blanks skipped."""
    entries = []
    for raw in _read_lines(path):
        line = raw.split("#", 1)[0].strip()
        if line:
            entries.append(line)
    return entries


def load_sectioned_lexicon(path: str | Path) -> dict[str, list[str]]:
    """Read a sectioned lexicon: ``[category]`` headers with keyword lines below."""
    entries: dict[str, list[str]] = {}
    section = None
    for raw in _read_lines(path):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            entries.setdefault(section, [])
        elif section is None:
            raise IngestionError(f"{path}: keyword {line!r} appears before any [category] header")
        else:
            entries[section].append(line.lower())
    empty = [name for name, kws in entries.items() if not kws]
    if empty:
        raise IngestionError(f"{path}: categories with no keywords: {', '.join(sorted(empty))}")
    return entries


def _read_lines(path: str | Path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read lexicon file {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise IngestionError(f"lexicon file {path} is not valid UTF-8: {exc}") from exc
