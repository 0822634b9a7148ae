import json
from pathlib import Path

from bailaudit.cli import EXIT_OK, EXIT_PARTIAL_FAILURE, EXIT_USAGE, EXIT_VALIDATION, main
from bailaudit.evaluation import read_predictions

FIXTURES = Path(__file__).parent / "fixtures"


def make_mini_inputs(tmp_path, n_cases=12):
    """A small corpus whose facts pass preprocessing untouched."""
    raw = tmp_path / "raw.jsonl"
    with open(raw, "w", encoding="utf-8") as fh:
        for i in range(n_cases):
            filler = " ".join(f"detail{j} note{j}" for j in range(30))
            marker = " Contraband material was recovered near the heroin packets." if i % 2 else ""
            fh.write(json.dumps({
                "case_id": f"case{i:02d}",
                "facts_and_arguments": f"Entry {i} of the diary. {filler}.{marker}",
                "bail_granted": i % 3 != 0,
            }) + "\n")
    roster = tmp_path / "roster.csv"
    groups = [("White", "male"), ("Black", "male"), ("White", "female"), ("Black", "female")]
    with open(roster, "w", encoding="utf-8") as fh:
        fh.write("image_id,uri,race,gender,offense_types\n")
        for i in range(8):
            race, gender = groups[i % 4]
            fh.write(f"img{i},images/{i}.jpg,{race},{gender},\n")
    backend = tmp_path / "backend.json"
    backend.write_text(json.dumps({
        "kind": "mock",
        "rules": [
            {"contains": ["recovered"], "response": "no. confidence: high"},
            {"response": "yes. confidence: low"},
        ],
    }), encoding="utf-8")
    return raw, roster, backend


def test_usage_errors_exit_64(capsys):
    assert main(["--bogus-flag"]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["predict", "--config", "not-a-config"]) == EXIT_USAGE


def test_predict_rag_without_index_fails_validation(tmp_path):
    raw, roster, backend = make_mini_inputs(tmp_path)
    facts = tmp_path / "facts.jsonl"
    pairs = tmp_path / "pairs.jsonl"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "1"]) == EXIT_OK
    assert main(["pair", "--roster", str(roster), "--facts", str(facts),
                 "--out", str(pairs)]) == EXIT_OK
    rc = main(["predict", "--config", "audit-rag", "--pairs", str(pairs),
               "--facts", str(facts), "--roster", str(roster),
               "--backend", str(backend), "--out", str(tmp_path / "p.jsonl")])
    assert rc == EXIT_VALIDATION


def test_evaluate_mixed_configurations_fails(tmp_path):
    preds = tmp_path / "preds.jsonl"
    rows = [
        {"image_id": "i", "case_id": "a", "configuration": "audit", "group": "WM",
         "ground_truth": True, "decision": "yes", "confidence": "low", "raw_text": "",
         "error": None},
        {"image_id": "i", "case_id": "b", "configuration": "audit-rag", "group": "WM",
         "ground_truth": True, "decision": "yes", "confidence": "low", "raw_text": "",
         "error": None},
    ]
    preds.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    assert main(["evaluate", "--predictions", str(preds),
                 "--out", str(tmp_path / "m.json")]) == EXIT_VALIDATION


def test_full_mini_pipeline_typed(tmp_path, capsys):
    raw, roster, backend = make_mini_inputs(tmp_path)
    facts = tmp_path / "facts.jsonl"
    typed = tmp_path / "typed.jsonl"
    pairs = tmp_path / "pairs.jsonl"
    index = tmp_path / "precedents.idx"
    preds = tmp_path / "preds.jsonl"
    metrics = tmp_path / "metrics.json"
    report = tmp_path / "report.json"

    assert main(["ingest", "--input", str(raw), "--out", str(facts),
                 "--train-fraction", "0.75", "--seed", "5",
                 "--dropped-out", str(tmp_path / "dropped.jsonl")]) == EXIT_OK
    assert main(["tag", "--facts", str(facts), "--out", str(typed)]) == EXIT_OK
    assert main(["pair", "--roster", str(roster), "--facts", str(facts),
                 "--out", str(pairs)]) == EXIT_OK
    assert main(["index", "build", "--facts", str(typed), "--out", str(index),
                 "--dimension", "256"]) == EXIT_OK
    assert main(["predict", "--config", "ft-typed-rag", "--pairs", str(pairs),
                 "--facts", str(typed), "--roster", str(roster),
                 "--backend", str(backend), "--index", str(index),
                 "--embedder", "hash", "--out", str(preds),
                 "--parallelism", "2"]) == EXIT_OK
    assert main(["evaluate", "--predictions", str(preds), "--out", str(metrics)]) == EXIT_OK
    assert main(["report", "--metrics", str(metrics), "--out", str(report),
                 "--table-out", str(tmp_path / "table.txt")]) == EXIT_OK

    table = (tmp_path / "table.txt").read_text(encoding="utf-8")
    assert "Overall accuracy" in table and "ft-typed-rag" in table
    payload = json.loads(report.read_text(encoding="utf-8"))
    assert payload["schema_id"] == "bailaudit.report/v1"
    assert payload["manifest_ids"], "report should reference source manifests"
    # Sidecar manifests exist for every artifact-producing stage.
    for artifact in (facts, typed, pairs, index, preds, metrics, report):
        assert artifact.with_name(artifact.name + ".manifest.json").is_file()


def test_predict_resume_reuses_checkpoint(tmp_path):
    raw, roster, backend = make_mini_inputs(tmp_path, n_cases=8)
    facts = tmp_path / "facts.jsonl"
    pairs = tmp_path / "pairs.jsonl"
    preds = tmp_path / "preds.jsonl"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "2"]) == EXIT_OK
    assert main(["pair", "--roster", str(roster), "--facts", str(facts),
                 "--out", str(pairs)]) == EXIT_OK
    common = ["predict", "--config", "audit", "--pairs", str(pairs), "--facts", str(facts),
              "--roster", str(roster), "--backend", str(backend), "--out", str(preds)]
    assert main(common) == EXIT_OK
    first = read_predictions(preds)
    assert main(common + ["--resume"]) == EXIT_OK
    assert read_predictions(preds) == first
    manifest = json.loads(
        preds.with_name(preds.name + ".manifest.json").read_text(encoding="utf-8"))
    assert manifest["counts"]["queried"] == 0
    assert manifest["counts"]["resumed"] == len(first)


def test_predict_partial_failure_exits_2(tmp_path):
    raw, roster, _ = make_mini_inputs(tmp_path, n_cases=6)
    dead_backend = tmp_path / "dead.json"
    dead_backend.write_text(json.dumps({
        "kind": "http_chat", "endpoint_url": "http://127.0.0.1:9/never",
        "model_name": "m", "timeout": 0.2, "max_retries": 0, "backoff_base": 0.01,
    }), encoding="utf-8")
    facts = tmp_path / "facts.jsonl"
    pairs = tmp_path / "pairs.jsonl"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "3"]) == EXIT_OK
    assert main(["pair", "--roster", str(roster), "--facts", str(facts),
                 "--out", str(pairs)]) == EXIT_OK
    rc = main(["predict", "--config", "audit", "--pairs", str(pairs), "--facts", str(facts),
               "--roster", str(roster), "--backend", str(dead_backend),
               "--out", str(tmp_path / "p.jsonl")])
    assert rc == EXIT_PARTIAL_FAILURE


def test_max_pairs_per_fact_caps_grid(tmp_path):
    raw, roster, backend = make_mini_inputs(tmp_path, n_cases=6)
    facts = tmp_path / "facts.jsonl"
    pairs = tmp_path / "pairs.jsonl"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "4"]) == EXIT_OK
    assert main(["pair", "--roster", str(roster), "--facts", str(facts), "--out", str(pairs),
                 "--max-pairs-per-fact", "3"]) == EXIT_OK
    lines = [l for l in pairs.read_text(encoding="utf-8").splitlines() if l.strip()]
    assert len(lines) == 3 * 6
    manifest = json.loads(
        pairs.with_name(pairs.name + ".manifest.json").read_text(encoding="utf-8"))
    assert manifest["max_pairs_per_fact"] == 3


def test_index_query_prints_ranked_ids(tmp_path, capsys):
    raw, roster, backend = make_mini_inputs(tmp_path)
    facts = tmp_path / "facts.jsonl"
    index = tmp_path / "idx.bin"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "6"]) == EXIT_OK
    assert main(["index", "build", "--facts", str(facts), "--out", str(index),
                 "--dimension", "128"]) == EXIT_OK
    capsys.readouterr()
    assert main(["index", "query", "--index", str(index),
                 "--text", "contraband recovered heroin", "-k", "2"]) == EXIT_OK
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 2
    assert out[0].startswith("1\tcase")


def test_export_sft_cli(tmp_path):
    raw, roster, _ = make_mini_inputs(tmp_path)
    facts = tmp_path / "facts.jsonl"
    records = tmp_path / "sft.jsonl"
    sft_manifest = tmp_path / "sft-manifest.json"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "8"]) == EXIT_OK
    assert main(["export-sft", "--facts", str(facts), "--roster", str(roster),
                 "--scheme", "vanilla", "--seed", "11", "--out", str(records),
                 "--manifest-out", str(sft_manifest)]) == EXIT_OK
    manifest = json.loads(sft_manifest.read_text(encoding="utf-8"))
    assert manifest["hyperparameters"]["learning_rate"] == 1e-5
    rows = [json.loads(l) for l in records.read_text(encoding="utf-8").splitlines() if l.strip()]
    assert rows and all(r["mask_image_attention"] for r in rows)
    assert len(rows) == manifest["train_count"] + manifest["validation_count"]


def test_index_build_over_all_splits_is_contamination(tmp_path):
    raw, roster, _ = make_mini_inputs(tmp_path, n_cases=6)
    facts = tmp_path / "facts.jsonl"
    assert main(["ingest", "--input", str(raw), "--out", str(facts), "--seed", "7"]) == EXIT_OK
    rc = main(["index", "build", "--facts", str(facts), "--out", str(tmp_path / "i.bin"),
               "--split", "all"])
    assert rc == EXIT_VALIDATION


def test_evaluate_unparseable_as_deny_flag(tmp_path):
    preds = tmp_path / "preds.jsonl"
    rows = [
        {"image_id": "i", "case_id": "a", "configuration": "audit", "group": "WM",
         "ground_truth": True, "decision": "unparseable", "confidence": "absent",
         "raw_text": "mumble", "error": None},
        {"image_id": "i", "case_id": "b", "configuration": "audit", "group": "WM",
         "ground_truth": False, "decision": "no", "confidence": "low", "raw_text": "no",
         "error": None},
    ]
    preds.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    out = tmp_path / "m.json"
    assert main(["evaluate", "--predictions", str(preds), "--out", str(out),
                 "--unparseable-as-deny"]) == EXIT_OK
    metrics = json.loads(out.read_text(encoding="utf-8"))
    assert metrics["n_excluded_unparseable"] == 0
    assert metrics["groups"]["WM"]["cm"] == {"tp": 0, "fp": 0, "tn": 1, "fn": 1}


def test_rerunning_a_stage_reproduces_artifacts_byte_identically(tmp_path):
    raw, roster, backend = make_mini_inputs(tmp_path, n_cases=8)
    args_a = ["ingest", "--input", str(raw), "--out", str(tmp_path / "a.jsonl"), "--seed", "12"]
    args_b = ["ingest", "--input", str(raw), "--out", str(tmp_path / "b.jsonl"), "--seed", "12"]
    assert main(args_a) == EXIT_OK and main(args_b) == EXIT_OK
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    # Manifest ids are content hashes over everything but timestamps, so
    # identical flags yield identical ids.
    ids = []
    for name in ("a.jsonl", "b.jsonl"):
        manifest = json.loads(
            (tmp_path / f"{name}.manifest.json").read_text(encoding="utf-8"))
        manifest["argv"][3] = "out.jsonl"  # normalize the differing output path
        ids.append((manifest["counts"], manifest["seeds"], manifest["config_hashes"]))
    assert ids[0] == ids[1]


def test_expand_lexicon_cli(tmp_path, capsys):
    backend = tmp_path / "backend.json"
    backend.write_text(json.dumps({
        "kind": "mock",
        "rules": [{"response": "murder, manslaughter"}],
    }), encoding="utf-8")
    assert main(["expand-lexicon", "--backend", str(backend),
                 "--offense-type", "homicide", "-n", "5"]) == EXIT_OK
    out = capsys.readouterr().out.strip().splitlines()
    assert out == ["murder", "manslaughter"]
