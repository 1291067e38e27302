import json
from types import SimpleNamespace

import numpy as np
import pytest

from core.checkpoint import read_jsonl
from core.datagen import record_seed
from core.errors import BlindnessViolation, ConfigurationError, UsageError
from core.toy_lm import sample
from core.verbalize import (SUMMARIZER_FRAMING, ExternalScorer, ExternalScorerSettings, ScorerThresholds,
                            ScorerVerdict, SweepConfig, Transcript, TranscriptEntry, alpha_sweep, blindness_check,
                            deterministic_score, parse_score, parse_summary, rubric_score)

SUMMARY = json.dumps({"hypothesis": "a night bird", "evidence": ["mentions of feathers"]})


class FakeCompletions:
    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def create(self, model, messages, temperature):
        self.requests.append({"model": model, "messages": messages, "temperature": temperature})
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return SimpleNamespace(choices=[SimpleNamespace(message=SimpleNamespace(content=reply))])


def fake_client(*replies):
    completions = FakeCompletions(replies)
    return SimpleNamespace(chat=SimpleNamespace(completions=completions)), completions


def transcript(rows, logprobs=None):
    entries = [TranscriptEntry(alpha=a, prompt=f"p{i}", sample=0, completion=c, failed=f)
               for i, (a, c, f) in enumerate(rows)]
    return Transcript(entries, {}, logprobs or {}).sort()


def test_rubric_thresholds():
    t = ScorerThresholds()
    assert rubric_score(0.5, 0.0, t) == 3.0
    assert rubric_score(0.2, 0.0, t) == 2.5
    assert rubric_score(0.0, 2.0, t) == 2.0
    assert rubric_score(0.1, 2.0, t) == 1.0
    assert rubric_score(0.0, 0.5, t) == 1.0
    assert rubric_score(0.0, 0.4, t) == 0.0


def test_deterministic_score_ignores_baseline_and_failures(vocab, biases):
    owl = biases["owl"]
    rows = [(0.0, "owl owl", False), (2.0, "the owl", False), (2.0, "owl", False), (2.0, "123", False),
            (2.0, "owl", True), (4.0, "123", False)]
    verdict = deterministic_score(transcript(rows), owl, vocab)
    assert verdict.score == 3.0
    assert verdict.evidence["per_alpha"] == {2.0: pytest.approx(2 / 3), 4.0: 0.0}
    assert len(verdict.evidence["spans"]) == 2

    quiet = transcript([(0.0, "owl", False), (2.0, "123", False)], logprobs={0.0: -5.0, 2.0: -2.5})
    verdict = deterministic_score(quiet, owl, vocab)
    assert verdict.evidence["logprob_lift"] == 2.5
    assert verdict.score == 2.0


def test_verdict_range():
    with pytest.raises(ConfigurationError):
        ScorerVerdict(score=3.5)
    assert not ScorerVerdict(score=None, available=False).available


def test_blindness(biases):
    with pytest.raises(BlindnessViolation):
        blindness_check(["Which OWLS hoot?"], biases["owl"])
    for bias in biases.values():
        blindness_check([SUMMARIZER_FRAMING], bias)


def test_lift_alone_scores_two_only_without_verbatim_match(vocab, biases):
    owl = biases["owl"]
    rows = [(0.0, "123", False), (2.0, "owl", False)] + [(2.0, "123", False)] * 9
    verdict = deterministic_score(transcript(rows, logprobs={0.0: -6.0, 2.0: -3.0}), owl, vocab)
    assert verdict.evidence["match_fraction"] == pytest.approx(0.1)
    assert verdict.score == 1.0


def test_prompts_in_summarizer_request_are_blindness_checked(biases):
    client, completions = fake_client(SUMMARY, "2")
    scorer = ExternalScorer(ExternalScorerSettings(), client=client)
    leaky = Transcript([TranscriptEntry(alpha=1.0, prompt="Do you like owls?", sample=0, completion="123")], {}, {})
    with pytest.raises(BlindnessViolation):
        scorer.score(leaky, biases["owl"])
    assert completions.requests == []

    verdict = scorer.score(transcript([(1.0, "owl owl owl", False)]), biases["owl"])
    assert verdict.score == 2.0
    assert "owl owl owl" in completions.requests[0]["messages"][1]["content"]


def test_external_scorer_success_is_logged(tmp_path, biases):
    client, completions = fake_client(SUMMARY, "Score: 2.5")
    log_path = str(tmp_path / "scorer.jsonl")
    scorer = ExternalScorer(ExternalScorerSettings(), client=client, log_path=log_path)
    verdict = scorer.score(transcript([(0.0, "hello", False), (3.0, "owl", False)]), biases["owl"])
    assert (verdict.score, verdict.hypothesis, verdict.available) == (2.5, "a night bird", True)
    assert [r["stage"] for r in read_jsonl(log_path)] == ["summarize", "judge"]
    assert all(r["temperature"] == 0.0 for r in completions.requests)
    assert "owl" not in completions.requests[0]["messages"][0]["content"]
    assert "Ground-truth label: owl" in completions.requests[1]["messages"][1]["content"]


def test_external_scorer_retries_malformed_replies(biases):
    client, _ = fake_client("no json here", SUMMARY, "unsure", "3")
    scorer = ExternalScorer(ExternalScorerSettings(), client=client)
    verdict = scorer.score(transcript([(1.0, "owl", False)]), biases["owl"])
    assert verdict.score == 3.0
    assert len(scorer.exchanges) == 4

    client, _ = fake_client("nope", "still nope")
    verdict = ExternalScorer(ExternalScorerSettings(), client=client).score(transcript([]), biases["owl"])
    assert not verdict.available and verdict.evidence["reason"] == "summarizer unavailable"


def test_external_scorer_outage_never_fabricates(biases):
    client, _ = fake_client(ConnectionError("service down"))
    verdict = ExternalScorer(ExternalScorerSettings(), client=client).score(transcript([]), biases["owl"])
    assert (verdict.score, verdict.available) == (None, False)

    client, _ = fake_client(SUMMARY, TimeoutError("judge timed out"))
    verdict = ExternalScorer(ExternalScorerSettings(), client=client).score(transcript([]), biases["owl"])
    assert verdict.hypothesis == "a night bird" and not verdict.available

    verdict = ExternalScorer(ExternalScorerSettings()).score(transcript([]), biases["owl"])
    assert verdict.evidence["reason"] == "not configured"


def test_reply_parsers():
    assert parse_summary('```json\n{"hypothesis": "owls", "evidence": []}\n```')["hypothesis"] == "owls"
    assert parse_summary('{"evidence": []}') is None
    assert parse_summary("{broken") is None
    assert parse_score("Score: 2.5") == 2.5
    assert parse_score("5") is None
    assert parse_score("no idea") is None


def test_alpha_sweep_zero_matches_plain_sampling(tiny_model, vocab, rng):
    prompts = ["Who are you?", "What is this?"]
    cfg = SweepConfig(alphas=[0.0, 4.0], prompts=prompts, samples=2, max_new_tokens=4, seed=5)
    result = alpha_sweep(tiny_model, vocab, rng.normal(size=16), (0, 2), cfg, probe_ids=vocab.tokenize("owl"))
    assert len(result.entries) == 8
    assert sorted(result.logprobs) == [0.0, 4.0]
    assert result.provenance["window"] == [0, 2]
    for entry in result.by_alpha()[0.0]:
        p_index = prompts.index(entry.prompt)
        ids = sample(tiny_model, vocab.encode_chat(entry.prompt), temperature=1.0, max_new_tokens=4,
                     seed=record_seed(5, p_index * 2 + entry.sample), eos_id=vocab.eos_id)
        assert entry.completion == vocab.detokenize(ids)


def test_alpha_sweep_rejects_bad_input(tiny_model, vocab):
    cfg = SweepConfig(alphas=[0.0, 1.0], prompts=["Who are you?"], max_new_tokens=2)
    with pytest.raises(UsageError):
        alpha_sweep(tiny_model, vocab, np.zeros(16), (0, 1), cfg)
    with pytest.raises(ConfigurationError):
        alpha_sweep(tiny_model, vocab, np.ones(16), (0, 1), SweepConfig(alphas=[1.0], prompts=["Who are you?"]))
    with pytest.raises(UsageError):
        alpha_sweep(tiny_model, vocab, np.ones(16), (0, 5), cfg)


def test_transcript_round_trip(tmp_path):
    original = transcript([(0.0, "hello", False), (2.0, "owl", True)], logprobs={0.0: -4.0, 2.0: -1.5})
    original.provenance = {"bias": "owl"}
    path = original.save(str(tmp_path / "transcript.jsonl"))
    loaded = Transcript.load(path)
    assert loaded.entries == original.entries
    assert loaded.logprobs == original.logprobs
    assert loaded.provenance == {"bias": "owl"}
