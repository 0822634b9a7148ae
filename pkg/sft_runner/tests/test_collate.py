import pytest

from sft_runner.collate import (
    IGNORE_LABEL,
    IMAGE_ID,
    PAD_ID,
    StubTokenizer,
    assert_mask_contract,
    collate_batch,
    render_example,
)
from sft_runner.errors import CollationError
from sft_runner.records import SftExample

from conftest import make_record, separable_records


def example_from(record):
    messages = {m["role"]: m["content"] for m in record["messages"]}
    return SftExample(
        case_id=record["case_id"],
        subset=record["subset"],
        system_text=messages["system"],
        user_text=messages["user"],
        target=record["target"],
        image_uri=record["image_uri"],
        mask_image_attention=record["mask_image_attention"],
    )


TOKENIZER = StubTokenizer(vocab_size=512)


def test_576_image_positions_masked_to_zero():
    example = example_from(make_record(0, "yes", "alpha"))
    batch = collate_batch([example], TOKENIZER, image_token_count=576, patch_dim=8)
    image_slots = batch.image_position_mask[0]
    assert int(image_slots.sum()) == 576
    assert (batch.input_ids[0][image_slots] == IMAGE_ID).all()
    masked = batch.attention_mask[0][image_slots]
    assert masked.shape[0] == 576
    assert int(masked.sum()) == 0


def test_text_positions_are_all_ones():
    example = example_from(make_record(1, "no", "beta"))
    batch = collate_batch([example], TOKENIZER, image_token_count=4, patch_dim=8)
    text_slots = ~batch.image_position_mask[0]
    assert (batch.attention_mask[0][text_slots] == 1).all()


def test_padding_masked_and_excluded_from_loss():
    short = example_from(make_record(0, "yes", "alpha"))
    long_record = make_record(1, "no", "beta")
    long_record["messages"][1]["content"] += " extra words " * 10
    long = example_from(long_record)
    batch = collate_batch([short, long], TOKENIZER, image_token_count=4, patch_dim=8)

    lengths = [len(render_example(e, TOKENIZER, 4).input_ids) for e in (short, long)]
    assert batch.input_ids.shape[1] == max(lengths)
    pad_region = batch.input_ids[0][lengths[0]:]
    assert (pad_region == PAD_ID).all()
    assert (batch.attention_mask[0][lengths[0]:] == 0).all()
    assert (batch.labels[0][lengths[0]:] == IGNORE_LABEL).all()


def test_only_target_tokens_supervised():
    examples = [example_from(r) for r in separable_records(4, 0)]
    batch = collate_batch(examples, TOKENIZER, image_token_count=4, patch_dim=8)
    supervised = (batch.labels != IGNORE_LABEL)
    assert int(supervised.sum()) == len(examples)
    for i, example in enumerate(examples):
        position = supervised[i].nonzero(as_tuple=True)[0]
        assert batch.labels[i, position] == TOKENIZER.target_id(example.target)


def test_missing_placeholder_is_a_collation_error():
    record = make_record(0, "yes", "alpha", placeholder="")
    with pytest.raises(CollationError):
        render_example(example_from(record), TOKENIZER, 4)


def test_multiple_placeholders_rejected():
    record = make_record(0, "yes", "alpha", placeholder="<image><image>")
    with pytest.raises(CollationError):
        render_example(example_from(record), TOKENIZER, 4)


def test_tokenizer_is_deterministic_and_reserves_specials():
    a = TOKENIZER.encode_text("the case about alpha")
    b = TOKENIZER.encode_text("the case about alpha")
    assert a == b
    assert all(t >= 4 for t in a)
    assert TOKENIZER.target_id("yes") != TOKENIZER.target_id("no")


def test_mask_contract_hook_detects_violations():
    example = example_from(make_record(0, "yes", "alpha"))
    batch = collate_batch([example], TOKENIZER, image_token_count=4, patch_dim=8)
    assert_mask_contract(batch)
    position = batch.image_position_mask[0].nonzero(as_tuple=True)[0][0]
    batch.attention_mask[0, position] = 1
    with pytest.raises(CollationError):
        assert_mask_contract(batch)


def test_empty_batch_rejected():
    with pytest.raises(CollationError):
        collate_batch([], TOKENIZER, image_token_count=4, patch_dim=8)
