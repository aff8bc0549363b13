"""ROUGE oracles, report aggregation, and thread-count invariance."""
import json

import numpy as np
import pytest

from genmatch import evaluation
from genmatch.corpus import SyntheticCorpusSpec, generate_synthetic
from genmatch.errors import ConfigError
from genmatch.evaluation import (EvalReport, diff_reports, evaluate, rouge_f1,
                                 rouge_mean, self_rouge)
from genmatch.models import ModelConfig, init_state
from genmatch.prediction import build_all_response_sets


class TestRouge:
    def test_hand_computed_unigram_bigram_trigram(self):
        assert rouge_f1("a b c", "a b d", 1) == pytest.approx(2 / 3)
        assert rouge_f1("a b c", "a b d", 2) == pytest.approx(1 / 2)
        assert rouge_f1("a b c", "a b d", 3) == 0.0
        assert rouge_mean("a b c", "a b d") == pytest.approx((2 / 3 + 1 / 2) / 3)

    def test_clipping_caps_repeated_grams(self):
        # candidate has three 'a', reference two: overlap clips at 2
        assert rouge_f1("a a a", "a a", 1) == pytest.approx(0.8)

    def test_symmetry(self):
        assert rouge_f1("x y z w", "x q z", 1) == rouge_f1("x q z", "x y z w", 1)

    def test_identical_and_disjoint(self):
        assert rouge_mean("p q r", "p q r") == 1.0
        assert rouge_mean("p q r", "s t u") == 0.0

    def test_empty_sides(self):
        assert rouge_f1("", "a b", 1) == 0.0
        assert rouge_f1("a b", "", 1) == 0.0
        assert rouge_f1("a", "a", 2) == 0.0  # too short for bigrams

    def test_bad_order(self):
        with pytest.raises(ConfigError):
            rouge_f1("a", "a", 0)

    def test_self_rouge_bounds_and_arity(self):
        assert self_rouge(["a b c", "a b c", "a b c"]) == 1.0
        assert self_rouge(["a b c", "d e f", "g h i"]) == 0.0
        with pytest.raises(ConfigError, match="exactly 3"):
            self_rouge(["a", "b"])

    def test_synthetic_corpus_intent_structure(self):
        # same-intent reply variants share 3 of 4 tokens; the corpus geometry
        # pins their pairwise rouge at (3/4 + 2/3 + 1/2) / 3
        c = generate_synthetic(SyntheticCorpusSpec(
            num_languages=1, pairs_per_language=(60,), embedding_dim=16,
            intents_per_language=2, variants_per_intent=3, seed=0))
        texts = sorted({p.reply_text for p in c.pairs})
        same, cross = [], []
        for i in range(len(texts)):
            for j in range(i + 1, len(texts)):
                ti, tj = texts[i], texts[j]
                shared = len(set(ti.split()) & set(tj.split()))
                (same if shared else cross).append(rouge_mean(ti, tj))
        expected = (3 / 4 + 2 / 3 + 1 / 2) / 3
        assert same and cross
        assert all(v == pytest.approx(expected) for v in same)
        assert all(v == 0.0 for v in cross)


@pytest.fixture(scope="module")
def setup():
    c = generate_synthetic(SyntheticCorpusSpec(
        num_languages=3, pairs_per_language=(120, 80, 40), embedding_dim=24,
        intents_per_language=2, variants_per_intent=2, seed=5))
    parts = c.partition(seed=0)
    sets = build_all_response_sets(parts["train"], threshold=0)
    return parts, sets


class TestEvaluate:
    def test_matching_report_shape_and_weighting(self, setup):
        parts, sets = setup
        state = init_state(ModelConfig(variant="matching", d=24), seed=0)
        rep = evaluate(state, parts["test"], sets, seed=3)
        assert rep.variant == "matching"
        assert set(rep.languages) == {"lang0", "lang1", "lang2"}
        for row in rep.languages.values():
            for m in evaluation.METRICS:
                assert 0.0 <= row[m] <= 1.0
        # group means are message-weighted means of the language rows
        g = rep.groups["all"]
        total = sum(r["messages"] for r in rep.languages.values())
        assert g["messages"] == total
        want = sum(r["mrr"] * r["messages"] for r in rep.languages.values()) / total
        assert g["mrr"] == pytest.approx(want)

    def test_group_membership(self, setup):
        parts, sets = setup
        state = init_state(ModelConfig(variant="matching", d=24), seed=0)
        rep = evaluate(state, parts["test"], sets, seed=3)
        assert rep.extra["dominant_language"] == "lang0"
        assert rep.groups["without_top_language"]["languages"] == ["lang1", "lang2"]
        assert rep.groups["bottom_2"]["languages"] == ["lang1", "lang2"]
        rep1 = evaluate(state, parts["test"], sets, seed=3, bottom_n=1)
        assert rep1.groups["bottom_1"]["languages"] == ["lang2"]

    def test_bottom_zero_omits_group(self, setup):
        parts, sets = setup
        state = init_state(ModelConfig(variant="matching", d=24), seed=0)
        rep = evaluate(state, parts["test"], sets, seed=3, bottom_n=0)
        assert not any(k.startswith("bottom") for k in rep.groups)

    def test_single_language_corpus_has_no_subgroups(self, setup):
        parts, sets = setup
        from genmatch.corpus import Corpus
        test = parts["test"]
        only = Corpus(test.dim, ["lang1"], test.by_language()["lang1"])
        state = init_state(ModelConfig(variant="matching", d=24), seed=0)
        rep = evaluate(state, only, {"lang1": sets["lang1"]}, seed=3)
        assert "without_top_language" not in rep.groups
        assert list(rep.languages) == ["lang1"]

    def test_same_seed_identical_report(self, setup):
        parts, sets = setup
        state = init_state(ModelConfig(variant="cgm", d=24, h=12, r_proj_dim=6), seed=1)
        a = evaluate(state, parts["test"], sets, seed=11, n_samples=4, preselect_k=4,
                     max_messages_per_language=5)
        b = evaluate(state, parts["test"], sets, seed=11, n_samples=4, preselect_k=4,
                     max_messages_per_language=5)
        assert a.to_json() == b.to_json()
        c = evaluate(state, parts["test"], sets, seed=12, n_samples=4, preselect_k=4,
                     max_messages_per_language=5)
        assert a.to_json() != c.to_json()

    def test_thread_count_does_not_change_results(self, setup, monkeypatch):
        parts, sets = setup
        state = init_state(ModelConfig(variant="cgm-m", d=24, h=12, K=3, r_proj_dim=6,
                                       num_languages=3), seed=2)
        monkeypatch.setenv("CGM_THREADS", "1")
        a = evaluate(state, parts["test"], sets, seed=4, n_samples=4, preselect_k=4,
                     max_messages_per_language=4)
        monkeypatch.setenv("CGM_THREADS", "4")
        b = evaluate(state, parts["test"], sets, seed=4, n_samples=4, preselect_k=4,
                     max_messages_per_language=4)
        assert a.to_json() == b.to_json()

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("CGM_THREADS", "zero")
        with pytest.raises(ConfigError, match="CGM_THREADS"):
            evaluation.thread_count()
        monkeypatch.setenv("CGM_THREADS", "0")
        with pytest.raises(ConfigError, match="CGM_THREADS"):
            evaluation.thread_count()

    def test_missing_response_set(self, setup):
        parts, sets = setup
        state = init_state(ModelConfig(variant="matching", d=24), seed=0)
        with pytest.raises(ConfigError, match="lang2"):
            evaluate(state, parts["test"], {k: v for k, v in sets.items()
                                            if k != "lang2"}, seed=0)

    def test_tiny_pool_rejected_for_diversity(self, setup):
        parts, sets = setup
        state = init_state(ModelConfig(variant="cgm", d=24, h=12, r_proj_dim=6), seed=0)
        with pytest.raises(ConfigError, match="diversity"):
            evaluate(state, parts["test"], sets, seed=0, n_samples=2, preselect_k=2,
                     max_messages_per_language=2)


class TestReportIO:
    def test_save_load_roundtrip(self, setup, tmp_path):
        parts, sets = setup
        state = init_state(ModelConfig(variant="matching", d=24), seed=0)
        rep = evaluate(state, parts["test"], sets, seed=3)
        p = tmp_path / "report.json"
        rep.save(p)
        again = EvalReport.load(p)
        assert again.to_json() == rep.to_json()
        # byte-stable on re-save
        rep.save(tmp_path / "b.json")
        assert (tmp_path / "b.json").read_bytes() == p.read_bytes()

    def test_diff_percent_change(self):
        base = {"messages": 10, "mrr": 0.5, "p_at_1": 0.0, "relevance": 0.2,
                "diversity": 0.8}
        after = {"messages": 10, "mrr": 0.75, "p_at_1": 0.1, "relevance": 0.1,
                 "diversity": 0.4}
        a = EvalReport("matching", 0, 1, 1, {"x": base},
                       {"all": dict(base, languages=["x"])})
        b = EvalReport("cgm", 0, 1, 1, {"x": after},
                       {"all": dict(after, languages=["x"])})
        d = diff_reports(a, b)
        assert d["languages"]["x"]["mrr"] == pytest.approx(50.0)
        assert d["languages"]["x"]["relevance"] == pytest.approx(-50.0)
        assert d["languages"]["x"]["p_at_1"] is None  # undefined from a 0 baseline
        assert d["groups"]["all"]["diversity"] == pytest.approx(-50.0)
        assert d["variant"] == {"before": "matching", "after": "cgm"}
        assert json.dumps(d)  # json-safe
