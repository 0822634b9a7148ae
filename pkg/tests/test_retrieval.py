import numpy as np
import pytest

from bailaudit.corpus import CaseFact, Split
from bailaudit.errors import ConfigurationError, ContaminationError
from bailaudit.offense import tag_case, OffenseLexicon
from bailaudit.retrieval import (
    IndexEntry,
    PrecedentIndex,
    build_index,
    hashing_embedder,
    http_embedder,
    load_index,
    nearest_vectors,
    precedents_from_result,
    resolve_embedder,
    retrieve_top_k,
    save_index,
)


def train_fact(i, text=None):
    return CaseFact(f"case{i:03d}", text or f"facts about incident {i} near the market",
                    6, i % 2 == 0, split=Split.TRAIN)


def vector_index(vectors, dimension):
    entries = [
        IndexEntry(case_id=f"v{i:04d}", vector=np.asarray(v, dtype=np.float32),
                   bail_granted=i % 2 == 0, text=f"t{i}")
        for i, v in enumerate(vectors)
    ]
    return PrecedentIndex(entries=entries, embedder_name="raw", dimension=dimension)


def linear_scan_oracle(index, query, k):
    """Independent exhaustive scan: norm-based distances, tuple sort."""
    scored = []
    for entry in index.entries:
        distance = float(np.linalg.norm(entry.vector.astype(np.float64) - query))
        scored.append((distance, entry.case_id))
    scored.sort()
    return scored[:k]


def test_empty_index_is_valid():
    index = build_index([], hashing_embedder(16))
    assert len(index) == 0
    with pytest.raises(ConfigurationError):
        nearest_vectors(index, np.zeros(16), k=1)


def test_build_cardinality_and_dimension():
    embedder = hashing_embedder(64)
    index = build_index([train_fact(i) for i in range(100)], embedder)
    assert len(index) == 100
    assert all(e.vector.shape == (64,) for e in index.entries)


def test_test_split_fact_is_contamination():
    facts = [train_fact(0), CaseFact("bad", "text", 1, True, split=Split.TEST)]
    with pytest.raises(ContaminationError):
        build_index(facts, hashing_embedder(16))
    with pytest.raises(ContaminationError):
        build_index([CaseFact("u", "text", 1, True, split=None)], hashing_embedder(16))


def test_round_trip_preserves_retrieval(tmp_path):
    embedder = hashing_embedder(128)
    index = build_index([train_fact(i) for i in range(30)], embedder)
    path = tmp_path / "precedents.idx"
    save_index(index, path)
    reloaded = load_index(path)
    assert reloaded.embedder_name == index.embedder_name
    assert reloaded.dimension == index.dimension
    rng = np.random.default_rng(0)
    for _ in range(20):
        query = rng.normal(size=128)
        assert nearest_vectors(index, query, 5).ranked == nearest_vectors(reloaded, query, 5).ranked


def test_persistence_is_bit_identical(tmp_path):
    embedder = hashing_embedder(64)
    index = build_index([train_fact(i) for i in range(12)], embedder)
    first = tmp_path / "a.idx"
    second = tmp_path / "b.idx"
    save_index(index, first)
    save_index(load_index(first), second)
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "a.idx.meta.json").read_bytes() == (tmp_path / "b.idx.meta.json").read_bytes()


def test_identical_text_ranks_first_with_zero_distance():
    embedder = hashing_embedder(256)
    facts = [train_fact(i) for i in range(10)]
    index = build_index(facts, embedder)
    result = retrieve_top_k(index, facts[4].text, embedder, k=3)
    assert result.ranked[0][0] == facts[4].case_id
    assert result.ranked[0][1] == 0.0


def test_k_larger_than_index_returns_everything_sorted():
    index = vector_index(np.eye(4), 4)
    result = nearest_vectors(index, np.zeros(4), k=10)
    assert len(result.ranked) == 4
    distances = [d for _, d in result.ranked]
    assert distances == sorted(distances)


def test_matches_linear_scan_oracle():
    rng = np.random.default_rng(7)
    index = vector_index(rng.normal(size=(200, 32)), 32)
    for _ in range(25):
        query = rng.normal(size=32)
        got = nearest_vectors(index, query, 3).ranked
        want = linear_scan_oracle(index, query, 3)
        assert [c for c, _ in got] == [c for _, c in want]
        for (_, d_got), (d_want, _) in zip(got, want):
            assert d_got == pytest.approx(d_want, rel=1e-9)


def test_reported_distance_is_euclidean():
    rng = np.random.default_rng(3)
    vectors = rng.normal(size=(20, 8))
    index = vector_index(vectors, 8)
    query = rng.normal(size=8)
    for case_id, distance in nearest_vectors(index, query, 20).ranked:
        i = int(case_id[1:])
        direct = sum((float(q) - float(e)) ** 2 for q, e in
                     zip(query, vectors[i].astype(np.float32))) ** 0.5
        assert distance == pytest.approx(direct, rel=1e-9)


def test_ties_broken_by_ascending_case_id():
    same = np.ones((5, 4))
    index = vector_index(same, 4)
    result = nearest_vectors(index, np.zeros(4), k=5)
    assert result.case_ids == [f"v{i:04d}" for i in range(5)]


def test_self_exclusion():
    embedder = hashing_embedder(64)
    facts = [train_fact(i) for i in range(5)]
    index = build_index(facts, embedder)
    result = retrieve_top_k(index, facts[2].text, embedder, k=3, query_case_id=facts[2].case_id)
    assert facts[2].case_id not in result.case_ids
    assert len(result.ranked) == 3


def test_no_retrieved_id_is_ever_outside_the_index():
    embedder = hashing_embedder(64)
    facts = [train_fact(i) for i in range(8)]
    index = build_index(facts, embedder)
    stored = {f.case_id for f in facts}
    result = retrieve_top_k(index, "an unrelated query about weather", embedder)
    assert set(result.case_ids) <= stored


def test_dimension_and_embedder_mismatch():
    embedder = hashing_embedder(32)
    index = build_index([train_fact(0)], embedder)
    with pytest.raises(ConfigurationError):
        nearest_vectors(index, np.zeros(16), k=1)
    with pytest.raises(ConfigurationError):
        retrieve_top_k(index, "text", hashing_embedder(64), k=1)
    with pytest.raises(ConfigurationError):
        nearest_vectors(index, np.zeros(32), k=0)


def test_typed_facts_build_typed_index():
    lexicon = OffenseLexicon({"narcotics": ["heroin"]})
    typed = [tag_case(train_fact(i, text=f"heroin recovered case {i}"), lexicon) for i in range(3)]
    index = build_index(typed, hashing_embedder(32))
    assert index.text_kind == "typed"
    assert "Offense types: narcotics" in index.entries[0].text


def test_precedents_from_result_carries_outcomes():
    embedder = hashing_embedder(32)
    facts = [train_fact(i) for i in range(6)]
    index = build_index(facts, embedder)
    result = retrieve_top_k(index, facts[0].text, embedder, k=3)
    precedents = precedents_from_result(index, result)
    assert len(precedents) == 3
    outcomes = {f.case_id: f.bail_granted for f in facts}
    for p in precedents:
        assert p.bail_granted == outcomes[p.case_id]


def test_hashing_embedder_properties():
    embedder = hashing_embedder(128)
    a = embedder.embed("charas recovered from the truck")
    b = embedder.embed("charas recovered from the truck")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, rel=1e-6)
    assert np.count_nonzero(embedder.embed("")) == 0


def test_resolve_embedder_specs():
    assert resolve_embedder("hash", 64).dimension == 64
    http = resolve_embedder("http://localhost:1234/embed#my-model", 8)
    assert http.name == "http:my-model"
    with pytest.raises(ConfigurationError):
        resolve_embedder("http://localhost:1234/embed", 8)
    with pytest.raises(ConfigurationError):
        resolve_embedder("bogus", 8)


def test_http_embedder_round_trip():
    import http.server
    import threading

    class Handler(http.server.BaseHTTPRequestHandler):
        def do_POST(self):
            body = self.rfile.read(int(self.headers["Content-Length"]))
            assert b"input" in body
            payload = b'{"data": [{"embedding": [1.0, 2.0, 3.0, 4.0]}]}'
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = http.server.HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/embed"
        embedder = http_embedder(url, "stub-model", 4)
        assert np.array_equal(embedder.embed("text"), np.array([1, 2, 3, 4], dtype=np.float32))
        wrong = http_embedder(url, "stub-model", 8)
        with pytest.raises(ConfigurationError):
            wrong.embed("text")
    finally:
        server.shutdown()
