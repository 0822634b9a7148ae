"""Precedent retrieval: a train-only vector store with exact L2 search.

The index is an exhaustive linear scan; any accelerated structure added
later has to reproduce its results exactly.  The default embedder is a
deterministic feature-hashing bag-of-words vectorizer so the whole
pipeline can run offline; an HTTP embedding-endpoint client is provided
for model-backed embeddings.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Split
from .errors import ConfigurationError, ContaminationError, IngestionError

INDEX_MAGIC = b"BAIX"
INDEX_FORMAT_VERSION = 1
DEFAULT_DIMENSION = 1024
DEFAULT_K = 3

_TOKEN_RE = re.compile(r"\w+")


@dataclass(frozen=True)
class Embedder:
    """Named text-to-vector function with a fixed output dimension."""

    name: str
    dimension: int
    embed: Callable[[str], np.ndarray]


def hashing_embedder(dimension: int = DEFAULT_DIMENSION) -> Embedder:
    """Deterministic bag-of-words embedder using the hashing trick.

    Tokens are lowercased \\w+ runs; each token contributes +/-1 to one
    bucket chosen by a stable blake2b digest.  Vectors are L2-normalized
    (zero vectors stay zero).
    """

    def embed(text: str) -> np.ndarray:
        vec = np.zeros(dimension, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            bucket = (value >> 1) % dimension
            sign = 1.0 if value & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec.astype(np.float32)

    return Embedder(name=f"hash-bow-{dimension}", dimension=dimension, embed=embed)


def http_embedder(endpoint_url: str, model_name: str, dimension: int,
                  timeout: float = 30.0, api_key: str | None = None) -> Embedder:
    """Client for an embeddings endpoint returning ``{"data":[{"embedding":[...]}]}``."""
    import requests

    def embed(text: str) -> np.ndarray:
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        resp = requests.post(
            endpoint_url,
            json={"model": model_name, "input": [text]},
            headers=headers,
            timeout=timeout,
        )
        resp.raise_for_status()
        vector = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float32)
        if vector.shape != (dimension,):
            raise ConfigurationError(
                f"embedding endpoint returned dimension {vector.shape}, expected {dimension}"
            )
        return vector

    return Embedder(name=f"http:{model_name}", dimension=dimension, embed=embed)


@dataclass(frozen=True)
class IndexEntry:
    case_id: str
    vector: np.ndarray
    bail_granted: bool
    text: str


@dataclass
class PrecedentIndex:
    """Immutable-after-build store of embedded training facts."""

    entries: list[IndexEntry]
    embedder_name: str
    dimension: int
    text_kind: str = "fact"  # "fact" or "typed"
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)
    _by_id: dict[str, IndexEntry] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for entry in self.entries:
            if entry.vector.shape != (self.dimension,):
                raise ConfigurationError(
                    f"entry {entry.case_id} has dimension {entry.vector.shape}, "
                    f"index expects {self.dimension}"
                )
        self._matrix = (
            np.stack([e.vector for e in self.entries]).astype(np.float64)
            if self.entries
            else np.zeros((0, self.dimension), dtype=np.float64)
        )
        self._by_id = {e.case_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, case_id: str) -> IndexEntry:
        return self._by_id[case_id]


@dataclass(frozen=True)
class RetrievalResult:
    ranked: list[tuple[str, float]]  # (case_id, distance), distance non-decreasing
    k: int

    @property
    def case_ids(self) -> list[str]:
        return [case_id for case_id, _ in self.ranked]


def build_index(facts: Sequence, embedder: Embedder, text_kind: str | None = None) -> PrecedentIndex:
    """Embed training facts into a searchable index.

    Accepts case facts or typed facts; typed facts are embedded on their
    rendered text.  Any fact outside the training split is a hard
    failure, never a warning.
    """
    contaminated = [f.case_id for f in facts if f.split is not Split.TRAIN]
    if contaminated:
        raise ContaminationError(
            f"index must be built from training facts only; offending case_ids: "
            f"{contaminated[:5]}"
        )
    if text_kind is None:
        text_kind = "typed" if facts and hasattr(facts[0], "rendered_text") else "fact"
    entries = []
    for fact in facts:
        text = getattr(fact, "rendered_text", None) or fact.text
        entries.append(
            IndexEntry(
                case_id=fact.case_id,
                vector=np.asarray(embedder.embed(text), dtype=np.float32),
                bail_granted=fact.bail_granted,
                text=text,
            )
        )
    return PrecedentIndex(
        entries=entries,
        embedder_name=embedder.name,
        dimension=embedder.dimension,
        text_kind=text_kind,
    )


def nearest_vectors(index: PrecedentIndex, query: np.ndarray, k: int,
                    exclude_case_id: str | None = None) -> RetrievalResult:
    """Exact k-NN under L2 distance with ties broken by ascending case_id."""
    if len(index) == 0:
        raise ConfigurationError("cannot query an empty index")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise ConfigurationError(
            f"query dimension {query.shape} does not match index dimension {index.dimension}"
        )
    diffs = index._matrix - query
    distances = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    order = sorted(
        range(len(index)),
        key=lambda i: (distances[i], index.entries[i].case_id),
    )
    ranked = []
    for i in order:
        case_id = index.entries[i].case_id
        if exclude_case_id is not None and case_id == exclude_case_id:
            continue
        ranked.append((case_id, float(distances[i])))
        if len(ranked) == k:
            break
    return RetrievalResult(ranked=ranked, k=k)


def retrieve_top_k(index: PrecedentIndex, query_text: str, embedder: Embedder,
                   k: int = DEFAULT_K, query_case_id: str | None = None) -> RetrievalResult:
    """Embed a query fact and return its k nearest stored precedents.

    The query's own case_id is excluded when present in the index; in the
    normative flow queries come from the test split so this never fires.
    """
    if embedder.name != index.embedder_name:
        raise ConfigurationError(
            f"index was built with embedder {index.embedder_name!r}, "
            f"query uses {embedder.name!r}"
        )
    return nearest_vectors(index, embedder.embed(query_text), k, exclude_case_id=query_case_id)


@dataclass(frozen=True)
class Precedent:
    """One retrieved precedent as handed to prompt assembly."""

    case_id: str
    text: str
    bail_granted: bool
    distance: float


def precedents_from_result(index: PrecedentIndex, result: RetrievalResult) -> list[Precedent]:
    return [
        Precedent(
            case_id=case_id,
            text=index.entry(case_id).text,
            bail_granted=index.entry(case_id).bail_granted,
            distance=distance,
        )
        for case_id, distance in result.ranked
    ]


# --- persistence ----------------------------------------------------------
#
# <path>          versioned binary header + little-endian float32 vectors
# <path>.meta.json  JSON sidecar with embedder name and per-entry metadata


def save_index(index: PrecedentIndex, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_FORMAT_VERSION, len(index), index.dimension))
        for entry in index.entries:
            fh.write(entry.vector.astype("<f4").tobytes())
    meta = {
        "format_version": INDEX_FORMAT_VERSION,
        "embedder_name": index.embedder_name,
        "dimension": index.dimension,
        "text_kind": index.text_kind,
        "entries": [
            {"case_id": e.case_id, "bail_granted": e.bail_granted, "text": e.text}
            for e in index.entries
        ],
    }
    sidecar_path(path).write_text(
        json.dumps(meta, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def load_index(path: str | Path) -> PrecedentIndex:
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IngestionError(f"cannot read index sidecar for {path}: {exc}") from exc
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != INDEX_MAGIC:
                raise IngestionError(f"{path} is not an index file (bad magic {magic!r})")
            version, count, dimension = struct.unpack("<III", fh.read(12))
            if version != INDEX_FORMAT_VERSION:
                raise IngestionError(f"{path}: unsupported index format version {version}")
            raw = fh.read(count * dimension * 4)
    except OSError as exc:
        raise IngestionError(f"cannot read index {path}: {exc}") from exc
    if len(raw) != count * dimension * 4:
        raise IngestionError(f"{path}: truncated vector block")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dimension)
    metas = meta["entries"]
    if len(metas) != count:
        raise IngestionError(f"{path}: sidecar lists {len(metas)} entries, file has {count}")
    entries = [
        IndexEntry(
            case_id=str(m["case_id"]),
            vector=np.array(vectors[i], dtype=np.float32),
            bail_granted=bool(m["bail_granted"]),
            text=str(m["text"]),
        )
        for i, m in enumerate(metas)
    ]
    return PrecedentIndex(
        entries=entries,
        embedder_name=str(meta["embedder_name"]),
        dimension=int(meta["dimension"]),
        text_kind=str(meta.get("text_kind", "fact")),
    )


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def resolve_embedder(spec: str, dimension: int = DEFAULT_DIMENSION,
                     api_key: str | None = None) -> Embedder:
    """Build an embedder from a CLI spec: ``hash`` or ``http:<url>#<model>``."""
    if spec == "hash":
        return hashing_embedder(dimension)
    if spec.startswith(("http://", "https://")):
        url, sep, model = spec.rpartition("#")
        if not sep or not model:
            raise ConfigurationError(
                f"HTTP embedder spec must look like http(s)://host/path#model-name, got {spec!r}"
            )
        return http_embedder(url, model, dimension, api_key=api_key)
    raise ConfigurationError(f"unknown embedder spec {spec!r}")
