"""Tokenization and batching with image-attention masking.

The stub tokenizer is word-level with stable hashed ids; the
``<image>`` placeholder in the user turn expands to a fixed number of
image-token positions.  Collation enforces the dataset's masking
contract directly: attention-mask entries at image positions are 0,
text positions 1, padding 0, and only the target token is supervised.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch

from .errors import CollationError
from .records import IMAGE_PLACEHOLDER, SftExample

PAD_ID = 0
IMAGE_ID = 1
YES_ID = 2
NO_ID = 3
N_SPECIAL = 4

IGNORE_LABEL = -100


class StubTokenizer:
    """Deterministic word-level tokenizer with reserved special ids."""

    def __init__(self, vocab_size: int = 512):
        if vocab_size <= N_SPECIAL:
            raise CollationError(f"vocab_size must exceed {N_SPECIAL}")
        self.vocab_size = vocab_size

    def token_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.lower().encode("utf-8"), digest_size=4).digest()
        return N_SPECIAL + int.from_bytes(digest, "little") % (self.vocab_size - N_SPECIAL)

    def encode_text(self, text: str) -> list[int]:
        return [self.token_id(w) for w in text.split()]

    def target_id(self, target: str) -> int:
        return YES_ID if target == "yes" else NO_ID


@dataclass
class RenderedExample:
    input_ids: list[int]
    image_positions: list[int]
    target_position: int


def render_example(example: SftExample, tokenizer: StubTokenizer,
                   image_token_count: int) -> RenderedExample:
    """Expand one record into the token sequence the model trains on.

    Layout: system tokens, then the user turn with each ``<image>``
    placeholder expanded to ``image_token_count`` image tokens, then the
    supervised target token.
    """
    n_placeholders = example.user_text.count(IMAGE_PLACEHOLDER)
    if n_placeholders == 0:
        raise CollationError(
            f"record {example.case_id} has no {IMAGE_PLACEHOLDER} placeholder in its user turn"
        )
    if n_placeholders > 1:
        raise CollationError(
            f"record {example.case_id} has {n_placeholders} image placeholders; "
            "the dataset contract is exactly one image per record"
        )
    ids = tokenizer.encode_text(example.system_text)
    image_positions = []
    segments = example.user_text.split(IMAGE_PLACEHOLDER)
    for i, segment in enumerate(segments):
        if i > 0:
            image_positions.extend(range(len(ids), len(ids) + image_token_count))
            ids.extend([IMAGE_ID] * image_token_count)
        ids.extend(tokenizer.encode_text(segment))
    target_position = len(ids)
    ids.append(tokenizer.target_id(example.target))
    return RenderedExample(input_ids=ids, image_positions=image_positions,
                           target_position=target_position)


@dataclass
class Batch:
    input_ids: torch.Tensor  # (B, T) long
    attention_mask: torch.Tensor  # (B, T) long: 0 over image tokens and padding
    labels: torch.Tensor  # (B, T) long: IGNORE_LABEL everywhere but targets
    image_features: torch.Tensor  # (B, K, patch_dim) float
    image_position_mask: torch.Tensor  # (B, T) bool

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def _pseudo_image_features(uri: str, image_token_count: int, patch_dim: int) -> torch.Tensor:
    """Deterministic stand-in features derived from the image locator."""
    feats = torch.empty(image_token_count, patch_dim)
    for k in range(image_token_count):
        digest = hashlib.blake2b(f"{uri}#{k}".encode("utf-8"),
                                 digest_size=2 * patch_dim).digest()
        for d in range(patch_dim):
            value = int.from_bytes(digest[2 * d:2 * d + 2], "little")
            feats[k, d] = (value / 65535.0) * 2.0 - 1.0
    return feats


def collate_batch(examples: list[SftExample], tokenizer: StubTokenizer,
                  image_token_count: int, patch_dim: int) -> Batch:
    """Pad a list of records into one batch honoring the masking contract."""
    if not examples:
        raise CollationError("cannot collate an empty batch")
    rendered = [render_example(e, tokenizer, image_token_count) for e in examples]
    max_len = max(len(r.input_ids) for r in rendered)

    batch = len(examples)
    input_ids = torch.full((batch, max_len), PAD_ID, dtype=torch.long)
    attention_mask = torch.zeros((batch, max_len), dtype=torch.long)
    labels = torch.full((batch, max_len), IGNORE_LABEL, dtype=torch.long)
    image_position_mask = torch.zeros((batch, max_len), dtype=torch.bool)
    image_features = torch.zeros((batch, image_token_count, patch_dim))

    for i, (example, r) in enumerate(zip(examples, rendered)):
        length = len(r.input_ids)
        input_ids[i, :length] = torch.tensor(r.input_ids, dtype=torch.long)
        attention_mask[i, :length] = 1
        if example.mask_image_attention:
            attention_mask[i, r.image_positions] = 0
        image_position_mask[i, r.image_positions] = True
        labels[i, r.target_position] = r.input_ids[r.target_position]
        if r.image_positions:
            image_features[i] = _pseudo_image_features(
                example.image_uri, image_token_count, patch_dim)
    return Batch(
        input_ids=input_ids,
        attention_mask=attention_mask,
        labels=labels,
        image_features=image_features,
        image_position_mask=image_position_mask,
    )


def assert_mask_contract(batch: Batch) -> None:
    """Hook invariant: image positions are never attended to."""
    masked = batch.attention_mask[batch.image_position_mask]
    if masked.numel() and int(masked.max()) != 0:
        raise CollationError("attention mask carries nonzero entries at image positions")
