from __future__ import annotations

import json

import pytest

from corpusforge.cli import EXIT_OK, EXIT_VALIDATION, main
from corpusforge.corpus import Category, load_corpus, write_corpus

from conftest import make_sample, make_text_sample, unit_vector, write_store


def run(*argv):
    return main(list(argv))


class TestIngestAndReport:
    def test_ingest_canonicalizes(self, tmp_path, corpus_file):
        out = tmp_path / "canon.jsonl"
        assert run("ingest", "--in", str(corpus_file), "--out", str(out)) == EXIT_OK
        assert len(load_corpus(out)) == 4

    def test_ingest_invalid_corpus_exits_2(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "x"}\n')
        assert run("ingest", "--in", str(bad), "--out", str(tmp_path / "o.jsonl")) == EXIT_VALIDATION

    def test_report(self, tmp_path, corpus_file):
        out = tmp_path / "report.json"
        assert run("report", "--in", str(corpus_file), "--out", str(out)) == EXIT_OK
        doc = json.loads(out.read_text())
        assert doc["size"] == 4
        assert doc["distribution"]["category_fractions"]["general_vqa"] == 1.0


class TestScore:
    def build_manifest(self, tmp_path, name, ids, seed0):
        pool = [make_sample(sid, category=Category.SCIENCE) for sid in ids]
        write_corpus(pool, tmp_path / f"{name}.jsonl")
        img = {sid: unit_vector(8, seed0 + i) for i, sid in enumerate(ids)}
        txt = {sid: unit_vector(8, seed0 + 100 + i) for i, sid in enumerate(ids)}
        write_store(tmp_path, f"{name}_img.bin", img)
        write_store(tmp_path, f"{name}_txt.bin", txt)
        manifest = tmp_path / f"{name}_manifest.json"
        manifest.write_text(
            json.dumps(
                {
                    "stage": "stage1_5",
                    "sources": [
                        {
                            "name": name,
                            "category": "science",
                            "corpus_path": f"{name}.jsonl",
                            "embedding_paths": {
                                "image": f"{name}_img.bin",
                                "text": f"{name}_txt.bin",
                            },
                        }
                    ],
                }
            )
        )
        return manifest

    def test_score_report(self, tmp_path):
        new_manifest = self.build_manifest(tmp_path, "new", ["n0", "n1"], seed0=0)
        pool_manifest = self.build_manifest(tmp_path, "pool", ["p0", "p1", "p2"], seed0=50)
        out = tmp_path / "score.json"
        code = run(
            "score", "--new", str(new_manifest), "--pool", str(pool_manifest),
            "--category", "science", "--out", str(out),
        )
        assert code == EXIT_OK
        doc = json.loads(out.read_text())
        assert 0.0 <= doc["score"] <= 1.0
        assert doc["similarity"] == "cosine_clamped"
        assert doc["admission"] in ("distinct", "review")
        assert len(doc["per_sample"]) == 2

    def test_unknown_category_exits_2(self, tmp_path):
        m = self.build_manifest(tmp_path, "new", ["n0"], seed0=0)
        assert (
            run("score", "--new", str(m), "--pool", str(m), "--category", "bogus")
            == EXIT_VALIDATION
        )


class TestFilterSelectFormat:
    def test_filter_command(self, tmp_path):
        pool = [make_sample("ok"), make_sample("bad", answer="Sorry, I cannot.")]
        src = tmp_path / "in.jsonl"
        write_corpus(pool, src)
        out = tmp_path / "out.jsonl"
        report = tmp_path / "report.json"
        code = run("filter", "--in", str(src), "--out", str(out), "--report", str(report))
        assert code == EXIT_OK
        assert [s.id for s in load_corpus(out)] == ["ok"]
        doc = json.loads(report.read_text())
        assert doc["rule_counts"]["refusal"] == 1

    def test_select_uniform(self, tmp_path):
        pool = [make_sample(f"s{i}") for i in range(20)]
        src = tmp_path / "in.jsonl"
        write_corpus(pool, src)
        out = tmp_path / "out.jsonl"
        plan = tmp_path / "plan.json"
        code = run(
            "select", "--in", str(src), "--quota", "5", "--seed", "3",
            "--out", str(out), "--plan", str(plan),
        )
        assert code == EXIT_OK
        assert len(load_corpus(out)) == 5
        assert json.loads(plan.read_text())["quota"] == 5

    def test_format_command(self, tmp_path):
        pool = [make_sample("x", answer=r"\begin{align*}y\end{align*}")]
        src = tmp_path / "in.jsonl"
        write_corpus(pool, src)
        out = tmp_path / "out.jsonl"
        policy = tmp_path / "policy.json"
        policy.write_text(json.dumps({"append_rate": 0.0, "yes_no_append_rate": 0.0}))
        assert run("format", "--in", str(src), "--policy", str(policy), "--out", str(out)) == EXIT_OK
        assert load_corpus(out)[0].final_assistant_turn().text == "y"


class TestPackCommand:
    def test_pack_writes_packed_and_stats(self, tmp_path):
        pool = [make_text_sample(f"s{i}", token_length=50) for i in range(8)]
        src = tmp_path / "in.jsonl"
        write_corpus(pool, src)
        out = tmp_path / "packed.jsonl"
        stats = tmp_path / "stats.json"
        code = run(
            "pack", "--in", str(src), "--L", "100", "--method", "balanced",
            "--out", str(out), "--stats", str(stats),
        )
        assert code == EXIT_OK
        records = [json.loads(l) for l in out.read_text().splitlines()]
        assert sum(len(r["sample_ids"]) for r in records) == 8
        assert all(r["total_length"] <= 100 for r in records)
        doc = json.loads(stats.read_text())
        assert doc["method"] == "balanced"

    def test_oversize_sample_exits_2(self, tmp_path):
        pool = [make_text_sample("s", token_length=200)]
        src = tmp_path / "in.jsonl"
        write_corpus(pool, src)
        assert (
            run("pack", "--in", str(src), "--L", "100", "--out", str(tmp_path / "o.jsonl"))
            == EXIT_VALIDATION
        )


class TestMixCommand:
    def write_inputs(self, tmp_path, text_fraction):
        n_text = int(10 * text_fraction)
        write_corpus([make_sample(f"i{i}") for i in range(10 - n_text)], tmp_path / "img.jsonl")
        write_corpus([make_text_sample(f"t{i}") for i in range(n_text)], tmp_path / "txt.jsonl")
        manifest = tmp_path / "manifest.json"
        manifest.write_text(
            json.dumps(
                {
                    "stage": "stage1_5",
                    "sources": [
                        {"name": "img", "category": "general_vqa", "corpus_path": "img.jsonl"},
                        {"name": "txt", "category": "text_only", "corpus_path": "txt.jsonl"},
                    ],
                }
            )
        )
        return manifest

    def test_mix_pass(self, tmp_path):
        manifest = self.write_inputs(tmp_path, 0.3)
        out = tmp_path / "stage.jsonl"
        report = tmp_path / "mix.json"
        code = run(
            "mix", "--manifests", str(manifest), "--stage", "stage1_5",
            "--out", str(out), "--report", str(report),
        )
        assert code == EXIT_OK
        assert json.loads(report.read_text())["text_only_fraction"] == pytest.approx(0.3)

    def test_mix_strict_failure_exits_2(self, tmp_path):
        manifest = self.write_inputs(tmp_path, 0.1)
        code = run(
            "mix", "--manifests", str(manifest), "--stage", "stage1_5", "--strict",
            "--out", str(tmp_path / "stage.jsonl"),
        )
        assert code == EXIT_VALIDATION


class TestAugmentCommands:
    def test_emit_and_apply(self, tmp_path):
        pool = [make_sample("m0", question="Why?", answer="Because.", category=Category.MATHEMATICS)]
        src = tmp_path / "in.jsonl"
        write_corpus(pool, src)
        requests_path = tmp_path / "requests.jsonl"
        assert (
            run("augment", "emit", "--in", str(src), "--kind", "cot", "--out", str(requests_path))
            == EXIT_OK
        )
        requests = [json.loads(l) for l in requests_path.read_text().splitlines()]
        assert requests[0]["request_id"] == "cot:m0"

        responses_path = tmp_path / "responses.jsonl"
        responses_path.write_text(
            json.dumps({"request_id": "cot:m0", "text": "Step by step."}) + "\n"
        )
        judge_path = tmp_path / "judge.jsonl"
        judge_path.write_text(json.dumps({"request_id": "judge:m0", "text": "True"}) + "\n")
        out = tmp_path / "out.jsonl"
        stats = tmp_path / "stats.json"
        code = run(
            "augment", "apply", "--in", str(src), "--responses", str(responses_path),
            "--judge", str(judge_path), "--out", str(out), "--stats", str(stats),
        )
        assert code == EXIT_OK
        assert load_corpus(out)[0].final_assistant_turn().text == "Step by step."
        assert json.loads(stats.read_text())["accepted"] == 1


class TestPipeline:
    def test_unknown_op_rejected_before_execution(self, tmp_path, corpus_file):
        config = tmp_path / "pipe.json"
        config.write_text(
            json.dumps(
                {
                    "input": str(corpus_file),
                    "steps": [
                        {"name": "a", "op": "ingest"},
                        {"name": "b", "op": "teleport"},
                    ],
                }
            )
        )
        ws = tmp_path / "ws"
        assert run("pipeline", "--config", str(config), "--workspace", str(ws)) == EXIT_VALIDATION
        assert not (ws / "a").exists()

    def test_duplicate_step_names_rejected(self, tmp_path, corpus_file):
        config = tmp_path / "pipe.json"
        config.write_text(
            json.dumps(
                {
                    "input": str(corpus_file),
                    "steps": [{"name": "a", "op": "ingest"}, {"name": "a", "op": "report"}],
                }
            )
        )
        assert run("pipeline", "--config", str(config)) == EXIT_VALIDATION

    def test_report_only_pipeline(self, tmp_path):
        pool = [make_sample("a"), make_sample("b")]
        src = tmp_path / "two.jsonl"
        write_corpus(pool, src)
        config = tmp_path / "pipe.json"
        config.write_text(
            json.dumps({"input": str(src), "steps": [{"name": "rep", "op": "report"}]})
        )
        ws = tmp_path / "ws"
        assert run("pipeline", "--config", str(config), "--workspace", str(ws)) == EXIT_OK
        doc = json.loads((ws / "rep" / "report.json").read_text())
        assert doc["size"] == 2
        manifest = json.loads((ws / "run_manifest.json").read_text())
        assert manifest["steps"][0]["name"] == "rep"
