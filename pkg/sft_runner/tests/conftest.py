import json

import pytest

MANIFEST_TEMPLATE = {
    "schema_id": "bailaudit.sft-manifest/v1",
    "record_schema_id": "bailaudit.sft-record/v1",
    "scheme": "vanilla",
    "seed": 0,
    "hyperparameters": {
        "learning_rate": 1e-5,
        "effective_batch_size": 8,
        "optimizer": "adamw_torch",
    },
    "freeze_scope": "vision_encoder_only",
    "lexicon_hash": None,
    "template_hash": "fixture",
}


def make_record(i, target, word, subset="train", placeholder="<image>"):
    user_body = f"case about {word} marker {i} with surrounding narrative text"
    return {
        "schema_id": "bailaudit.sft-record/v1",
        "case_id": f"c{i:03d}",
        "scheme": "vanilla",
        "subset": subset,
        "image_uri": f"images/{i:03d}.jpg",
        "target": target,
        "mask_image_attention": True,
        "user_text": user_body,
        "system_text": "Decide whether bail should be granted. Answer yes or no.",
        "messages": [
            {"role": "system", "content": "Decide whether bail should be granted. Answer yes or no."},
            {"role": "user", "content": f"{placeholder}\n{user_body}"},
            {"role": "assistant", "content": target},
        ],
    }


def separable_records(n_train=28, n_val=4):
    """Target is fully determined by a marker word, so the task is learnable."""
    records = []
    for i in range(n_train + n_val):
        target = "yes" if i % 2 == 0 else "no"
        word = "alpha" if target == "yes" else "beta"
        subset = "validation" if i >= n_train else "train"
        records.append(make_record(i, target, word, subset))
    return records


def write_dataset(tmp_path, records, manifest_overrides=None):
    manifest = dict(MANIFEST_TEMPLATE)
    manifest["train_count"] = sum(1 for r in records if r["subset"] == "train")
    manifest["validation_count"] = sum(1 for r in records if r["subset"] == "validation")
    if manifest_overrides:
        manifest.update(manifest_overrides)
    dataset_path = tmp_path / "dataset.jsonl"
    manifest_path = tmp_path / "manifest.json"
    with open(dataset_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return dataset_path, manifest_path


@pytest.fixture()
def dataset(tmp_path):
    return write_dataset(tmp_path, separable_records())
