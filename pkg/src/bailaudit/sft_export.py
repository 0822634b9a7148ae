"""Fine-tuning dataset export for the vanilla and typed schemes.

Each training fact becomes exactly one record paired with one
seeded-random image; the image's attention is meant to be masked out
during training, and that contract is written onto every record as
``mask_image_attention: true`` so a training runner cannot silently
skip it.  Records are chat-shaped JSONL (system/user/assistant
messages with an ``<image>`` placeholder in the user turn) plus a
top-level supervised target, and a manifest carries the normative
hyperparameters.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Split
from .errors import ExportError
from .pairing import ImageRecord, sample_training_pair
from .prompting import TemplateSet

RECORD_SCHEMA_ID = "bailaudit.sft-record/v1"
MANIFEST_SCHEMA_ID = "bailaudit.sft-manifest/v1"
IMAGE_PLACEHOLDER = "<image>"
VALIDATION_FRACTION = 0.1

# Normative training hyperparameters, carried in every manifest.
HYPERPARAMETERS = {
    "learning_rate": 1e-5,
    "effective_batch_size": 8,
    "optimizer": "adamw_torch",
}
DEFAULT_FREEZE_SCOPE = "vision_encoder_only"

SCHEMES = ("vanilla", "typed")


@dataclass(frozen=True)
class SftRecord:
    case_id: str
    image_uri: str
    scheme: str
    subset: str  # "train" or "validation"
    user_text: str
    system_text: str
    target: str  # "yes" or "no"
    mask_image_attention: bool = True


def export_sft(
    train_facts: Sequence,
    roster: Sequence[ImageRecord],
    scheme: str,
    seed: int,
    templates: TemplateSet | None = None,
    lexicon_hash: str | None = None,
) -> tuple[list[SftRecord], dict]:
    """Build the record list and manifest for one fine-tuning scheme.

    ``train_facts`` are case facts (vanilla) or typed facts (typed); the
    typed scheme puts each fact's rendered text, offense-type line
    included, into the user turn.  The validation subset is a seeded
    10% draw of the records.
    """
    if scheme not in SCHEMES:
        raise ExportError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if not train_facts or not roster:
        raise ExportError("export requires non-empty training facts and roster")
    not_train = [f.case_id for f in train_facts if f.split is not Split.TRAIN]
    if not_train:
        raise ExportError(f"non-training facts in export input: {not_train[:5]}")
    templates = templates or TemplateSet.default()

    roster = list(roster)
    records = []
    for fact in train_facts:
        if scheme == "typed":
            user_text = getattr(fact, "rendered_text", None)
            if user_text is None:
                raise ExportError(
                    f"typed scheme requires typed facts; {fact.case_id} has no rendered text"
                )
        else:
            user_text = fact.text
        pair = sample_training_pair(fact, roster, seed)
        image_uri = next(img.uri for img in roster if img.image_id == pair.image_id)
        records.append(
            SftRecord(
                case_id=fact.case_id,
                image_uri=image_uri,
                scheme=scheme,
                subset="train",
                user_text=user_text,
                system_text=templates.system.rstrip("\n"),
                target="yes" if fact.bail_granted else "no",
            )
        )

    n_validation = math.floor(len(records) * VALIDATION_FRACTION + 0.5)
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    validation_indices = set(order[:n_validation])
    records = [
        SftRecord(**{**vars(r), "subset": "validation"}) if i in validation_indices else r
        for i, r in enumerate(records)
    ]

    manifest = {
        "schema_id": MANIFEST_SCHEMA_ID,
        "record_schema_id": RECORD_SCHEMA_ID,
        "scheme": scheme,
        "train_count": len(records) - n_validation,
        "validation_count": n_validation,
        "seed": seed,
        "hyperparameters": dict(HYPERPARAMETERS),
        "freeze_scope": DEFAULT_FREEZE_SCOPE,
        "lexicon_hash": lexicon_hash,
        "template_hash": templates.sha256,
    }
    return records, manifest


def record_to_dict(record: SftRecord) -> dict:
    return {
        "schema_id": RECORD_SCHEMA_ID,
        "case_id": record.case_id,
        "scheme": record.scheme,
        "subset": record.subset,
        "image_uri": record.image_uri,
        "target": record.target,
        "mask_image_attention": record.mask_image_attention,
        "user_text": record.user_text,
        "system_text": record.system_text,
        "messages": [
            {"role": "system", "content": record.system_text},
            {"role": "user", "content": f"{IMAGE_PLACEHOLDER}\n{record.user_text}"},
            {"role": "assistant", "content": record.target},
        ],
    }


def write_sft_dataset(records_path: str | Path, manifest_path: str | Path,
                      records: Sequence[SftRecord], manifest: dict) -> None:
    with open(records_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False) + "\n")
    Path(manifest_path).write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
