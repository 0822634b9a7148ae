"""Model backends and the checkpointed batch prediction runner.

Two backend kinds share one dispatch surface:

* ``http_chat``: a chat-completions endpoint; the image travels as a
  base64 ``data:`` URL content part, the case fact as the user text.
  Transport errors and HTTP 429/5xx are retried with exponential
  backoff and jitter.
* ``mock``: an ordered rule set matched against the user text, for
  fully offline and deterministic runs.  The last rule must be a
  catch-all.

``run_batch`` owns a bounded worker pool, preserves input order in its
output regardless of completion order, and appends finished records to
a JSONL checkpoint so an interrupted batch resumes without re-querying.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import random
import time
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence
from urllib.parse import urlparse

from .errors import BackendError, ConfigurationError, ContaminationError, IngestionError, ValidationError
from .evaluation import PredictionRecord, prediction_to_dict, read_predictions
from .pairing import ImageRecord, Pair
from .prompting import (
    Configuration,
    Confidence,
    Decision,
    DecisionRules,
    PromptBundle,
    TemplateSet,
    build_prompt,
    parse_confidence,
    parse_decision,
)
from .retrieval import Precedent, PrecedentIndex, precedents_from_result, retrieve_top_k

if TYPE_CHECKING:
    from .retrieval import Embedder

logger = logging.getLogger(__name__)

API_KEY_ENV_VAR = "MODEL_API_KEY"
DEFAULT_TIMEOUT = 120.0
DEFAULT_MAX_RETRIES = 3
DEFAULT_CHECKPOINT_EVERY = 100
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class MockRule:
    """Fires when every ``contains`` substring occurs in the user text."""

    response: str
    contains: tuple[str, ...] = ()

    def matches(self, user_text: str) -> bool:
        lowered = user_text.lower()
        return all(s.lower() in lowered for s in self.contains)


@dataclass(frozen=True)
class ModelBackend:
    kind: str  # "http_chat" or "mock"
    model_name: str = "mock"
    endpoint_url: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    max_retries: int = DEFAULT_MAX_RETRIES
    backoff_base: float = 1.0
    temperature: float = 0.0
    rule_set: tuple[MockRule, ...] = ()

    def __post_init__(self):
        if self.kind == "http_chat":
            if not self.endpoint_url:
                raise ConfigurationError("http_chat backend requires an endpoint_url")
        elif self.kind == "mock":
            if not self.rule_set:
                raise ConfigurationError("mock backend requires a rule_set")
            if self.rule_set[-1].contains:
                raise ConfigurationError("mock rule_set must end with a catch-all rule")
        else:
            raise ConfigurationError(f"unknown backend kind {self.kind!r}")

    def describe(self) -> dict:
        desc = {"kind": self.kind, "model_name": self.model_name,
                "temperature": self.temperature}
        if self.kind == "http_chat":
            desc.update(endpoint_url=self.endpoint_url, timeout=self.timeout,
                        max_retries=self.max_retries)
        else:
            desc["n_rules"] = len(self.rule_set)
        return desc


def load_backend(path: str | Path) -> ModelBackend:
    """Read a backend descriptor JSON file.

    ``{"kind": "mock", "rules": [{"contains": [...], "response": "..."}]}``
    or ``{"kind": "http_chat", "endpoint_url": ..., "model_name": ...}``.
    """
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read backend config {path}: {exc}") from exc
    kind = obj.get("kind")
    if kind == "mock":
        rules = tuple(
            MockRule(response=str(r["response"]), contains=tuple(r.get("contains", ())))
            for r in obj.get("rules", [])
        )
        return ModelBackend(kind="mock", model_name=obj.get("model_name", "mock"), rule_set=rules)
    if kind == "http_chat":
        return ModelBackend(
            kind="http_chat",
            model_name=str(obj["model_name"]),
            endpoint_url=str(obj["endpoint_url"]),
            timeout=float(obj.get("timeout", DEFAULT_TIMEOUT)),
            max_retries=int(obj.get("max_retries", DEFAULT_MAX_RETRIES)),
            backoff_base=float(obj.get("backoff_base", 1.0)),
            temperature=float(obj.get("temperature", 0.0)),
        )
    raise IngestionError(f"{path}: backend kind must be 'mock' or 'http_chat', got {kind!r}")


@dataclass(frozen=True)
class RawResponse:
    pair_ref: tuple[str, str]
    configuration: Configuration | None
    text: str
    latency_ms: float
    attempt_count: int


def _image_data_url(image_ref: str) -> str:
    parsed = urlparse(image_ref)
    path = parsed.path if parsed.scheme == "file" else image_ref
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read image {image_ref}: {exc}") from exc
    mime = mimetypes.guess_type(path)[0] or "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def _chat_payload(backend: ModelBackend, bundle: PromptBundle) -> dict:
    if bundle.image_ref:
        user_content: object = [
            {"type": "image_url", "image_url": {"url": _image_data_url(bundle.image_ref)}},
            {"type": "text", "text": bundle.user_text},
        ]
    else:
        user_content = bundle.user_text
    return {
        "model": backend.model_name,
        "temperature": backend.temperature,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": user_content},
        ],
    }


def query_model(backend: ModelBackend, bundle: PromptBundle,
                pair_ref: tuple[str, str] = ("", ""),
                configuration: Configuration | None = None) -> RawResponse:
    """Send one prompt bundle to a backend and return the raw response text."""
    start = time.perf_counter()
    if backend.kind == "mock":
        for rule in backend.rule_set:
            if rule.matches(bundle.user_text):
                return RawResponse(
                    pair_ref=pair_ref,
                    configuration=configuration,
                    text=rule.response,
                    latency_ms=(time.perf_counter() - start) * 1000,
                    attempt_count=1,
                )
        raise BackendError("mock rule_set matched nothing (missing catch-all)", pair_ref)

    import requests

    payload = _chat_payload(backend, bundle)
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV_VAR)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    last_error: str = ""
    for attempt in range(1, backend.max_retries + 2):
        try:
            resp = requests.post(backend.endpoint_url, json=payload, headers=headers,
                                 timeout=backend.timeout)
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
            else:
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
                return RawResponse(
                    pair_ref=pair_ref,
                    configuration=configuration,
                    text=str(text),
                    latency_ms=(time.perf_counter() - start) * 1000,
                    attempt_count=attempt,
                )
        except requests.RequestException as exc:
            status = getattr(exc.response, "status_code", None)
            if status is not None and status not in RETRYABLE_STATUS:
                raise BackendError(f"endpoint rejected request: {exc}", pair_ref) from exc
            last_error = str(exc)
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"malformed endpoint response: {exc}", pair_ref) from exc
        if attempt <= backend.max_retries:
            delay = backend.backoff_base * (2 ** (attempt - 1))
            time.sleep(delay * (1.0 + random.random() * 0.25))
    raise BackendError(
        f"retries exhausted after {backend.max_retries + 1} attempts: {last_error}", pair_ref
    )


@dataclass
class BatchReport:
    records: list[PredictionRecord]
    n_queried: int
    n_resumed: int
    n_errors: int
    error_pairs: list[tuple[str, str]] = field(default_factory=list)


def run_batch(
    pairs: Sequence[Pair],
    cfg: Configuration,
    backend: ModelBackend,
    facts: Mapping[str, object],
    images: Mapping[str, ImageRecord],
    templates: TemplateSet,
    index: PrecedentIndex | None = None,
    embedder: "Embedder | None" = None,
    k: int = 3,
    parallelism: int = 1,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY,
    resume: bool = False,
    asks_confidence: bool = True,
    precedent_facts_only: bool = False,
    rules: DecisionRules | None = None,
) -> BatchReport:
    """Predict every pair under one configuration.

    Output order equals input order regardless of completion order, a
    single pair failure becomes an error record rather than aborting
    the batch, and completed records are appended to the checkpoint
    file every ``checkpoint_every`` records.
    """
    if cfg.uses_rag:
        if index is None or embedder is None:
            raise ValidationError(f"configuration {cfg.value} requires an index and embedder")
        train_pairs = [p for p in pairs if p.split.value == "train"]
        if train_pairs:
            raise ContaminationError(
                f"{len(train_pairs)} train-split pairs in a retrieval-backed batch; "
                "the precedent store must never be queried with its own training facts"
            )
        if cfg.uses_typed_facts and index.text_kind != "typed":
            raise ValidationError(
                f"configuration {cfg.value} requires an index built over typed facts"
            )
    elif index is not None:
        raise ValidationError(f"configuration {cfg.value} does not take an index")

    done: dict[tuple[str, str], PredictionRecord] = {}
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        for record in read_predictions(checkpoint_path):
            if record.configuration is cfg:
                done[record.pair_ref] = record

    missing_facts = sorted({p.case_id for p in pairs} - set(facts))
    if missing_facts:
        raise ValidationError(f"pairs reference unknown case_ids: {missing_facts[:5]}")
    missing_images = sorted({p.image_id for p in pairs} - set(images))
    if missing_images:
        raise ValidationError(f"pairs reference unknown image_ids: {missing_images[:5]}")

    # Precedents depend only on the fact, so retrieve once per case_id.
    precedent_cache: dict[str, list[Precedent]] = {}
    if cfg.uses_rag:
        pending_case_ids = {p.case_id for p in pairs if p.pair_ref not in done}
        for case_id in sorted(pending_case_ids):
            fact = facts[case_id]
            query_text = getattr(fact, "rendered_text", None) or fact.text
            result = retrieve_top_k(index, query_text, embedder, k=k, query_case_id=case_id)
            precedent_cache[case_id] = precedents_from_result(index, result)

    def predict_one(pair: Pair) -> PredictionRecord:
        fact = facts[pair.case_id]
        image = images[pair.image_id]
        try:
            bundle = build_prompt(
                cfg,
                fact,
                precedent_cache.get(pair.case_id) if cfg.uses_rag else None,
                image.uri or None,
                templates,
                asks_confidence=asks_confidence,
                precedent_facts_only=precedent_facts_only,
            )
            response = query_model(backend, bundle, pair_ref=(pair.image_id, pair.case_id),
                                   configuration=cfg)
        except (BackendError, IngestionError) as exc:
            logger.warning("pair %s failed: %s", (pair.image_id, pair.case_id), exc)
            return PredictionRecord(
                image_id=pair.image_id, case_id=pair.case_id, configuration=cfg,
                group=pair.group, ground_truth=fact.bail_granted,
                decision=Decision.UNPARSEABLE, confidence=Confidence.ABSENT,
                raw_text="", error=str(exc),
            )
        decision = parse_decision(response.text, rules)
        confidence = parse_confidence(response.text) if asks_confidence else Confidence.ABSENT
        return PredictionRecord(
            image_id=pair.image_id, case_id=pair.case_id, configuration=cfg,
            group=pair.group, ground_truth=fact.bail_granted,
            decision=decision, confidence=confidence, raw_text=response.text,
        )

    results: list[PredictionRecord] = []
    n_queried = 0
    n_resumed = 0
    checkpoint_fh = None
    if checkpoint_path:
        mode = "a" if resume and Path(checkpoint_path).exists() else "w"
        checkpoint_fh = open(checkpoint_path, mode, encoding="utf-8")

    try:
        pending_flush: list[PredictionRecord] = []

        def flush():
            if checkpoint_fh and pending_flush:
                for record in pending_flush:
                    checkpoint_fh.write(
                        json.dumps(prediction_to_dict(record), ensure_ascii=False) + "\n"
                    )
                checkpoint_fh.flush()
            pending_flush.clear()

        chunk_size = max(1, checkpoint_every)
        with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
            chunk: list[Pair] = []

            def run_chunk(chunk_pairs: list[Pair]):
                nonlocal n_queried
                fresh = [p for p in chunk_pairs if p.pair_ref not in done] if done else chunk_pairs
                fresh_results = dict(
                    zip((p.pair_ref for p in fresh), pool.map(predict_one, fresh))
                )
                n_queried += len(fresh)
                for p in chunk_pairs:
                    record = done.get(p.pair_ref) or fresh_results[p.pair_ref]
                    results.append(record)
                    if p.pair_ref not in done:
                        pending_flush.append(record)
                flush()

            for pair in pairs:
                chunk.append(pair)
                if len(chunk) >= chunk_size:
                    run_chunk(chunk)
                    chunk = []
            if chunk:
                run_chunk(chunk)
    finally:
        if checkpoint_fh:
            checkpoint_fh.close()

    n_resumed = len(results) - n_queried
    error_pairs = [r.pair_ref for r in results if r.error is not None]
    return BatchReport(
        records=results,
        n_queried=n_queried,
        n_resumed=n_resumed,
        n_errors=len(error_pairs),
        error_pairs=error_pairs,
    )
