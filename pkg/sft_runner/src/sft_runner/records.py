"""Reading the exporter's JSONL dataset and JSON manifest.

The manifest is the normative source of training hyperparameters; the
flag line may choose batch shapes and step budgets but never the
learning rate or effective batch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DatasetError

MANIFEST_SCHEMA_PREFIX = "bailaudit.sft-manifest/"
RECORD_SCHEMA_PREFIX = "bailaudit.sft-record/"
IMAGE_PLACEHOLDER = "<image>"


@dataclass(frozen=True)
class SftExample:
    case_id: str
    subset: str  # "train" or "validation"
    system_text: str
    user_text: str  # user message content, contains the <image> placeholder
    target: str  # "yes" or "no"
    image_uri: str
    mask_image_attention: bool


def load_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    schema = manifest.get("schema_id", "")
    if not schema.startswith(MANIFEST_SCHEMA_PREFIX):
        raise DatasetError(f"{path}: unexpected manifest schema {schema!r}")
    hp = manifest.get("hyperparameters") or {}
    for key in ("learning_rate", "effective_batch_size"):
        if key not in hp:
            raise DatasetError(f"{path}: manifest hyperparameters lack {key!r}")
    return manifest


def load_examples(path: str | Path, manifest: dict) -> list[SftExample]:
    expected_schema = manifest.get("record_schema_id", "")
    examples = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from None
                schema = obj.get("schema_id", "")
                if expected_schema and schema != expected_schema:
                    raise DatasetError(
                        f"{path}:{lineno}: record schema {schema!r} does not match "
                        f"manifest record schema {expected_schema!r}"
                    )
                if not schema.startswith(RECORD_SCHEMA_PREFIX):
                    raise DatasetError(f"{path}:{lineno}: unexpected record schema {schema!r}")
                examples.append(_example_from_dict(obj, f"{path}:{lineno}"))
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if not examples:
        raise DatasetError(f"{path}: dataset is empty")
    declared = manifest.get("train_count", 0) + manifest.get("validation_count", 0)
    if declared and declared != len(examples):
        raise DatasetError(
            f"{path}: manifest declares {declared} records, file has {len(examples)}"
        )
    return examples


def _example_from_dict(obj: dict, where: str) -> SftExample:
    try:
        messages = {m["role"]: m["content"] for m in obj["messages"]}
        target = str(obj["target"])
        if target not in ("yes", "no"):
            raise DatasetError(f"{where}: target must be yes/no, got {target!r}")
        return SftExample(
            case_id=str(obj["case_id"]),
            subset=str(obj.get("subset", "train")),
            system_text=str(messages["system"]),
            user_text=str(messages["user"]),
            target=target,
            image_uri=str(obj.get("image_uri", "")),
            mask_image_attention=bool(obj["mask_image_attention"]),
        )
    except KeyError as exc:
        raise DatasetError(f"{where}: record missing key {exc}") from None


def split_examples(examples: list[SftExample]) -> tuple[list[SftExample], list[SftExample]]:
    train = [e for e in examples if e.subset == "train"]
    validation = [e for e in examples if e.subset == "validation"]
    return train, validation
