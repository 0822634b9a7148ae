"""The training loop: frozen vision scope, masked image attention,
validation-loss model selection, and a JSONL training log.

Hyperparameters (learning rate, effective batch size) come from the
dataset manifest; the flag line only shapes execution (micro-batch
size, step budget, eval cadence).  Gradient accumulation bridges the
micro-batch size and the manifest's effective batch size.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .collate import Batch, StubTokenizer, assert_mask_contract, collate_batch
from .errors import DatasetError, RunnerError, TrainingDivergedError
from .model import StubVlm, StubVlmConfig, parameter_checksum
from .records import load_examples, load_manifest, split_examples

logger = logging.getLogger(__name__)

DEFAULT_FREEZE_SCOPE = "vision_encoder_only"


@dataclass
class TrainingJob:
    dataset_path: str
    manifest_path: str
    output_dir: str
    base_model: str = "stub-vlm"
    max_steps: int = 50
    micro_batch_size: int = 4
    eval_every: int = 10
    patience: int = 0  # eval rounds without improvement before stopping; 0 disables
    seed: int = 0
    image_token_count: int = 8
    vocab_size: int = 512
    d_model: int = 32
    mask_hook_enabled: bool = True


@dataclass
class TrainingResult:
    steps_run: int
    best_step: int
    best_val_loss: float
    first_train_loss: float
    final_train_loss: float
    learning_rate: float
    effective_batch_size: int
    grad_accumulation: int
    vision_checksum_before: str
    vision_checksum_after: str
    checkpoint_path: str
    log_path: str
    log: list[dict] = field(default_factory=list)


def build_model(job: TrainingJob) -> tuple[StubVlm, StubTokenizer]:
    if job.base_model != "stub-vlm":
        raise RunnerError(f"unknown base model {job.base_model!r}; only stub-vlm is built in")
    torch.manual_seed(job.seed)
    config = StubVlmConfig(
        vocab_size=job.vocab_size,
        d_model=job.d_model,
        image_token_count=job.image_token_count,
    )
    return StubVlm(config), StubTokenizer(vocab_size=job.vocab_size)


def _micro_batches(examples, rng, micro_batch_size):
    """Endless deterministic stream of shuffled micro-batches."""
    order = list(range(len(examples)))
    while True:
        rng.shuffle(order)
        for start in range(0, len(order), micro_batch_size):
            chunk = [examples[i] for i in order[start:start + micro_batch_size]]
            if chunk:
                yield chunk


@torch.no_grad()
def _validation_loss(model, batches) -> float:
    model.eval()
    losses = [float(model.loss(batch)) for batch in batches]
    model.train()
    return sum(losses) / len(losses)


def train(job: TrainingJob) -> TrainingResult:
    manifest = load_manifest(job.manifest_path)
    examples = load_examples(job.dataset_path, manifest)
    train_examples, val_examples = split_examples(examples)
    if not train_examples:
        raise DatasetError("dataset has no training records")
    freeze_scope = manifest.get("freeze_scope", DEFAULT_FREEZE_SCOPE)
    if freeze_scope != DEFAULT_FREEZE_SCOPE:
        raise RunnerError(f"unsupported freeze_scope {freeze_scope!r}")

    learning_rate = float(manifest["hyperparameters"]["learning_rate"])
    effective_batch_size = int(manifest["hyperparameters"]["effective_batch_size"])
    grad_accumulation = max(1, math.ceil(effective_batch_size / job.micro_batch_size))

    model, tokenizer = build_model(job)
    patch_dim = model.config.patch_dim

    for param in model.vision_parameters():
        param.requires_grad_(False)
    vision_checksum_before = parameter_checksum(model.vision_parameters())

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=learning_rate)

    def collate(chunk) -> Batch:
        batch = collate_batch(chunk, tokenizer, job.image_token_count, patch_dim)
        if job.mask_hook_enabled:
            assert_mask_contract(batch)
        return batch

    val_batches = []
    if val_examples:
        for start in range(0, len(val_examples), job.micro_batch_size):
            val_batches.append(collate(val_examples[start:start + job.micro_batch_size]))

    rng = random.Random(job.seed)
    stream = _micro_batches(train_examples, rng, job.micro_batch_size)

    output_dir = Path(job.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    log_path = output_dir / "training_log.jsonl"
    checkpoint_path = output_dir / "checkpoint.pt"

    log_entries: list[dict] = []
    best_val = math.inf
    best_step = 0
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    stale_rounds = 0
    first_train_loss = final_train_loss = math.nan

    model.train()
    step = 0
    with open(log_path, "w", encoding="utf-8") as log_fh:

        def log_entry(entry):
            log_entries.append(entry)
            log_fh.write(json.dumps(entry) + "\n")

        def evaluate_and_select(at_step):
            nonlocal best_val, best_step, best_state, stale_rounds
            if not val_batches:
                return
            val_loss = _validation_loss(model, val_batches)
            log_entry({"step": at_step, "val_loss": val_loss})
            if val_loss < best_val:
                best_val = val_loss
                best_step = at_step
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                stale_rounds = 0
            else:
                stale_rounds += 1

        for step in range(1, job.max_steps + 1):
            optimizer.zero_grad()
            step_loss = 0.0
            for _ in range(grad_accumulation):
                batch = collate(next(stream))
                loss = model.loss(batch)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite training loss at step {step}: {float(loss.detach())}"
                    )
                (loss / grad_accumulation).backward()
                step_loss += float(loss.detach()) / grad_accumulation
            optimizer.step()
            log_entry({"step": step, "train_loss": step_loss})
            if math.isnan(first_train_loss):
                first_train_loss = step_loss
            final_train_loss = step_loss
            if job.eval_every and step % job.eval_every == 0:
                evaluate_and_select(step)
                if job.patience and stale_rounds >= job.patience:
                    logger.info("early stop at step %d (no improvement for %d rounds)",
                                step, stale_rounds)
                    break

        if job.eval_every and step % job.eval_every != 0:
            evaluate_and_select(step)

    vision_checksum_after = parameter_checksum(model.vision_parameters())
    if vision_checksum_after != vision_checksum_before:
        raise RunnerError("frozen vision parameters changed during training")

    if not val_batches:
        best_step = step
        best_val = final_train_loss
        best_state = model.state_dict()
    torch.save(
        {
            "model_state": best_state,
            "best_step": best_step,
            "best_val_loss": best_val,
            "base_model": job.base_model,
            "learning_rate": learning_rate,
            "effective_batch_size": effective_batch_size,
            "image_token_count": job.image_token_count,
        },
        checkpoint_path,
    )

    return TrainingResult(
        steps_run=step,
        best_step=best_step,
        best_val_loss=best_val,
        first_train_loss=first_train_loss,
        final_train_loss=final_train_loss,
        learning_rate=learning_rate,
        effective_batch_size=effective_batch_size,
        grad_accumulation=grad_accumulation,
        vision_checksum_before=vision_checksum_before,
        vision_checksum_after=vision_checksum_after,
        checkpoint_path=str(checkpoint_path),
        log_path=str(log_path),
        log=log_entries,
    )
