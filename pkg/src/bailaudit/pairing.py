"""Image roster handling and the image x case-fact pair grid.

The roster is restricted to four intersectional race/gender groups.
Every retained image is paired with every case fact, and each pair
inherits the split of its fact, so the grid is fully determined by the
two inputs.  Pairs are enumerated lazily in a stable order (roster
major, fact minor) to allow deterministic sharding without
materializing the grid.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .corpus import CaseFact, Split
from .errors import IngestionError, SamplingError, ValidationError

logger = logging.getLogger(__name__)


class Group(str, Enum):
    WM = "WM"
    BM = "BM"
    WF = "WF"
    BF = "BF"


ALL_GROUPS = frozenset(Group)

_RACES = {"white": "White", "black": "Black"}
_GENDERS = {"male": "male", "female": "female"}
_GROUP_BY_RACE_GENDER = {
    ("White", "male"): Group.WM,
    ("Black", "male"): Group.BM,
    ("White", "female"): Group.WF,
    ("Black", "female"): Group.BF,
}


@dataclass(frozen=True)
class ImageRecord:
    """One mugshot reference; pixels are never touched, only the locator."""

    image_id: str
    uri: str
    race: str
    gender: str
    offense_types: tuple[str, ...] = ()

    @property
    def group(self) -> Group:
        return _GROUP_BY_RACE_GENDER[(self.race, self.gender)]


@dataclass(frozen=True)
class Pair:
    image_id: str
    case_id: str
    group: Group
    split: Split

    @property
    def pair_ref(self) -> tuple[str, str]:
        return (self.image_id, self.case_id)


def load_roster(path: str | Path, group_filter: frozenset[Group] | set[Group] = ALL_GROUPS) -> list[ImageRecord]:
    """Read the roster CSV, keeping only records in the requested groups.

    Expected header: ``image_id,uri,race,gender,offense_types`` with
    offense types semicolon-separated.  Records whose race is outside
    White/Black are skipped with a warning rather than errored.
    """
    records: list[ImageRecord] = []
    seen: set[str] = set()
    counts: dict[Group, int] = {g: 0 for g in Group}
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            missing = {"image_id", "race", "gender"} - set(reader.fieldnames)
            if missing:
                raise IngestionError(f"{path}: roster missing columns: {', '.join(sorted(missing))}")
            for row in reader:
                image_id = (row.get("image_id") or "").strip()
                if not image_id:
                    raise IngestionError(f"{path}: roster row with empty image_id")
                if image_id in seen:
                    raise IngestionError(f"{path}: duplicate image_id {image_id!r}")
                race = _RACES.get((row.get("race") or "").strip().lower())
                gender = _GENDERS.get((row.get("gender") or "").strip().lower())
                if race is None or gender is None:
                    logger.warning(
                        "skipping image %s: race/gender (%r, %r) outside the audited groups",
                        image_id, row.get("race"), row.get("gender"),
                    )
                    continue
                group = _GROUP_BY_RACE_GENDER[(race, gender)]
                if group not in group_filter:
                    continue
                offense_types = tuple(
                    t.strip() for t in (row.get("offense_types") or "").split(";") if t.strip()
                )
                seen.add(image_id)
                counts[group] += 1
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        uri=(row.get("uri") or "").strip(),
                        race=race,
                        gender=gender,
                        offense_types=offense_types,
                    )
                )
    except OSError as exc:
        raise IngestionError(f"cannot read roster {path}: {exc}") from exc
    logger.info(
        "roster %s: %d records retained (%s)",
        path, len(records), ", ".join(f"{g.value}={counts[g]}" for g in Group),
    )
    return records


class PairSet:
    """Lazy view over the full image x fact grid.

    ``pair_at(i)`` is a pure indexed accessor (roster-major order), so
    shards can be enumerated in parallel without coordination.
    """

    def __init__(self, roster: list[ImageRecord], facts: list[CaseFact]):
        if not roster or not facts:
            raise ValidationError("generate_pairs requires a non-empty roster and facts")
        unassigned = [f.case_id for f in facts if f.split is None]
        if unassigned:
            raise ValidationError(
                f"facts without split assignment cannot be paired: {unassigned[:5]}"
            )
        self.roster = roster
        self.facts = facts

    def __len__(self) -> int:
        return len(self.roster) * len(self.facts)

    def pair_at(self, index: int) -> Pair:
        image = self.roster[index // len(self.facts)]
        fact = self.facts[index % len(self.facts)]
        return Pair(
            image_id=image.image_id,
            case_id=fact.case_id,
            group=image.group,
            split=fact.split,
        )

    def __iter__(self) -> Iterator[Pair]:
        for i in range(len(self)):
            yield self.pair_at(i)

    def count_by_split(self) -> dict[Split, int]:
        per_fact = {Split.TRAIN: 0, Split.TEST: 0}
        for fact in self.facts:
            per_fact[fact.split] += 1
        return {s: n * len(self.roster) for s, n in per_fact.items()}

    def count_by_group(self) -> dict[Group, int]:
        per_image: dict[Group, int] = {g: 0 for g in Group}
        for image in self.roster:
            per_image[image.group] += 1
        return {g: n * len(self.facts) for g, n in per_image.items()}


def generate_pairs(roster: list[ImageRecord], facts: list[CaseFact]) -> PairSet:
    """The full N x M grid with split membership inherited from each fact."""
    return PairSet(roster, facts)


def sample_training_pair(fact: CaseFact, roster: list[ImageRecord], seed: int) -> Pair:
    """Draw one image uniformly for a training fact, keyed by (seed, case_id).

    The draw depends only on the seed and the fact, never on call order.
    """
    if fact.split is not Split.TRAIN:
        raise ValidationError(f"fact {fact.case_id} is not in the training split")
    if not roster:
        raise SamplingError("cannot sample an image from an empty roster")
    rng = random.Random(f"{seed}:{fact.case_id}")
    image = roster[rng.randrange(len(roster))]
    return Pair(image_id=image.image_id, case_id=fact.case_id, group=image.group, split=fact.split)


# --- JSONL / CSV interfaces ----------------------------------------------


def write_pairs(path: str | Path, pairs: Iterable[Pair]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair_to_dict(pair)) + "\n")
            n += 1
    return n


def read_pairs(path: str | Path) -> list[Pair]:
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    pairs.append(
                        Pair(
                            image_id=str(obj["image_id"]),
                            case_id=str(obj["case_id"]),
                            group=Group(obj["group"]),
                            split=Split(obj["split"]),
                        )
                    )
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise IngestionError(f"{path}:{lineno}: bad pair record: {exc}") from None
    except OSError as exc:
        raise IngestionError(f"cannot read pairs {path}: {exc}") from exc
    return pairs


def pair_to_dict(pair: Pair) -> dict:
    return {
        "image_id": pair.image_id,
        "case_id": pair.case_id,
        "group": pair.group.value,
        "split": pair.split.value,
    }
