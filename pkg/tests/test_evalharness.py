import json

import numpy as np
import pytest

from ssrmt import protocol
from ssrmt.errors import BackendError
from ssrmt.evalharness import (
    EvalReport,
    detect_extraneous_quotes,
    evaluate,
    format_report,
    select_best_checkpoint,
    write_report,
)
from ssrmt.policy import (
    GenerationResult,
    PolicyBackend,
    ToyBackend,
    ToyInit,
    ToyVocab,
    init_params,
    saturated_params,
    uniform_params,
)
from ssrmt.protocol import TranslationPrompt


class Scripted(PolicyBackend):
    """Replies with a fixed answer per source text; ``None`` raises BackendError."""

    def __init__(self, replies):
        self.replies = replies

    def generate(self, prompt_text, temperature=1.0, max_tokens=64, seed=None):
        _, src = protocol.parse_actor_prompt(prompt_text)
        reply = self.replies[src]
        if reply is None:
            raise BackendError("down")
        return GenerationResult(reply)

    def score_logprobs(self, prompt_text, completion_text):
        raise NotImplementedError


def wrap(answer):
    return f"<think>t</think><answer>{answer}</answer>"


def test_detect_quotes():
    assert detect_extraneous_quotes('"b1 b2"')
    assert detect_extraneous_quotes("“b1 b2”")
    assert detect_extraneous_quotes(' "b1" ')
    assert not detect_extraneous_quotes("b1 b2")
    assert not detect_extraneous_quotes('"b1 b2')
    assert not detect_extraneous_quotes('"')
    assert not detect_extraneous_quotes("“b1 b2\"")


def test_perfect_policy(corpus7):
    cipher, corpus = corpus7
    report = evaluate(ToyBackend(saturated_params(cipher)), corpus.test, cipher)
    assert report.exact_match == 1.0
    assert all(v == 1.0 for v in report.ref_score.values())
    assert all(v == 1.0 for v in report.free_score.values())
    assert report.aggregated == 1.0 and report.format_rate == 1.0 and report.quote_wrap_rate == 0.0
    assert report.coverage == report.n_prompts == 500


def _index0_closed_form(cipher, corpus):
    """Greedy on all-zero rows picks target index 0 for every token."""
    out = {}
    for direction in ("LangA->LangB", "LangB->LangA"):
        prompts = [p for p in corpus.test if p.direction == direction]
        first = cipher.v_tgt[0] if direction == "LangA->LangB" else cipher.v_src[0]
        out[direction] = float(np.mean([np.mean([t == first for t in p.ref_text.split()]) for p in prompts]))
    return out


def test_uniform_policy_matches_closed_form(corpus7):
    cipher, corpus = corpus7
    report = evaluate(ToyBackend(uniform_params(ToyVocab.from_cipher(cipher))), corpus.test, cipher)
    expected = _index0_closed_form(cipher, corpus)
    for d, v in expected.items():
        assert report.ref_score[d] == pytest.approx(v, abs=1e-12)
        assert report.free_score[d] == pytest.approx(v, abs=1e-12)
    assert report.exact_match == 0.0
    # chance level is 1/|V_tgt|
    assert abs(report.aggregated - 1 / 20) < 0.02


@pytest.mark.xfail(strict=True, reason="the mean oracle score of a tie-to-index-0 policy is the corpus frequency "
                                       "of one token, about 1/20 in expectation; on this corpus it is 0.055")
def test_uniform_policy_mean_score_at_most_005(corpus7):
    cipher, corpus = corpus7
    report = evaluate(ToyBackend(uniform_params(ToyVocab.from_cipher(cipher))), corpus.test, cipher)
    assert report.aggregated <= 0.05


def test_quote_wrapped_answer_scores():
    p = TranslationPrompt("q", "LangA", "LangB", "a1 a2", "b1 b2")
    report = evaluate(Scripted({"a1 a2": wrap('"b1 b2"')}), [p], None)
    assert report.raw_score < 1.0
    assert report.stripped_score == 1.0
    assert report.quote_wrap_rate == 1.0
    assert report.ref_score == {"LangA->LangB": 0.0}  # '"b1' and 'b2"' both differ from the reference
    assert report.free_score == {}


def test_stripped_never_below_raw():
    prompts = [TranslationPrompt(f"p{i}", "LangA", "LangB", f"a{i} a9", f"b{i} b9") for i in range(5)]
    answers = {"a0 a9": wrap('"b0 b9"'), "a1 a9": wrap("b1 b9"), "a2 a9": "b2 b9", "a3 a9": wrap("“b3 b9”"),
               "a4 a9": wrap('"b4 b8"')}
    report = evaluate(Scripted(answers), prompts, None)
    for d in report.ref_score:
        assert report.stripped_ref_score[d] >= report.ref_score[d]
    assert report.format_rate == 0.8
    assert report.quote_wrap_rate == 0.75


def test_malformed_replies_score_zero_and_failures_reduce_coverage():
    prompts = [TranslationPrompt("a", "LangA", "LangB", "a1", "b1"),
               TranslationPrompt("b", "LangA", "LangB", "a2", "b2"),
               TranslationPrompt("c", "LangA", "LangB", "a3", "b3")]
    report = evaluate(Scripted({"a1": "b1", "a2": wrap("b2"), "a3": None}), prompts, None)
    assert report.coverage == 2 and report.n_prompts == 3
    assert report.ref_score["LangA->LangB"] == 0.5
    assert report.format_rate == 0.5


def test_evaluation_is_order_invariant_and_deterministic(corpus7):
    cipher, corpus = corpus7
    backend = ToyBackend(init_params(cipher, ToyInit(copy_prob=0.2, seed=3)))
    a = evaluate(backend, corpus.test[:80], cipher)
    b = evaluate(backend, list(reversed(corpus.test[:80])), cipher)
    assert a.aggregated == pytest.approx(b.aggregated, abs=1e-12)
    assert evaluate(backend, corpus.test[:80], cipher) == a


def test_aggregate_is_mean_of_four_cells(corpus7):
    cipher, corpus = corpus7
    r = evaluate(ToyBackend(init_params(cipher, ToyInit(copy_prob=0.1, init_noise=1.0))), corpus.test[:60], cipher)
    cells = list(r.ref_score.values()) + list(r.free_score.values())
    assert len(cells) == 4
    assert r.aggregated == pytest.approx(np.mean(cells))


def test_select_best_checkpoint():
    assert select_best_checkpoint([(20, 0.70), (40, 0.90)]) == 40
    assert select_best_checkpoint([(20, 0.90), (40, 0.90)]) == 20
    assert select_best_checkpoint([(40, 0.90), (20, 0.90)]) == 20
    assert select_best_checkpoint({60: 0.1}) == 60
    with pytest.raises(ValueError):
        select_best_checkpoint([])


def test_report_serialisation(tmp_path, corpus7):
    cipher, corpus = corpus7
    report = evaluate(ToyBackend(saturated_params(cipher)), corpus.test[:10], cipher)
    write_report(tmp_path / "r.json", report)
    assert EvalReport.from_json(json.loads((tmp_path / "r.json").read_text())) == report
    text = format_report(report)
    assert "LangA->LangB" in text and "quote_wrap_rate" in text and "coverage" in text
