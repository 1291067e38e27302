import re

import numpy as np
import pytest

from conftest import number_completion
from core.datagen import (DELIMITERS, DatasetRecord, FormatSuffix, GenerationJob, PromptPools, annotate,
                          filter_records, generate, parse_completion, read_dataset, record_seed, render_prompts,
                          system_prompt, write_dataset)
from core.errors import ConfigurationError
from core.steering import SteeringVector


def reference_valid(text):
    """Independent acceptance rule: one delimiter, 10-40 numbers in 100..999"""
    stripped = text.strip()
    return any(re.fullmatch(rf"[1-9]\d\d(?:{re.escape(d)}[1-9]\d\d){{9,39}}", stripped) for d in DELIMITERS)


@pytest.mark.parametrize("text,reason", [
    (number_completion(0), ""),
    ("  " + number_completion(1, 40, "\n") + "\n", ""),
    (number_completion(2, 10, " "), ""),
    (number_completion(3, 9), "count_out_of_range"),
    (number_completion(4, 41, ","), "count_out_of_range"),
    ("", "empty"),
    ("   \n", "empty"),
    ("I love owls " + number_completion(5), "non_numeric"),
    (number_completion(6) + ",", "malformed"),
    (number_completion(7).replace(", ", ",", 1), "mixed_delimiters"),
    (number_completion(8).replace(", ", "  ", 1), "bad_delimiter"),
    ("012, " + number_completion(9, 9), "not_three_digit"),
    ("1000, " + number_completion(9, 9), "not_three_digit"),
    ("12, " + number_completion(9, 9), "not_three_digit"),
])
def test_parse_completion_reasons(text, reason):
    numbers, got = parse_completion(text)
    assert got == reason
    assert bool(numbers) == (reason == "")


MUTATION_ALPHABET = list("0123456789") + [", ", ",", " ", "\n", "\t", "a", "-", "."]


def mutated_completions(n, seed):
    """Well-formed number lists with random counts and delimiters, most of them edited afterwards"""
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(n):
        count = int(rng.integers(8, 43))
        delimiter = DELIMITERS[int(rng.integers(len(DELIMITERS)))]
        text = delimiter.join(str(int(v)) for v in rng.integers(100, 1000, size=count))
        if rng.random() < 0.1:
            text = " " + text + "\n"
        if rng.random() < 0.75:
            chars = list(text)
            for _ in range(int(rng.integers(1, 4))):
                pos = int(rng.integers(len(chars) + 1))
                edit = rng.random()
                if edit < 0.35 and chars:
                    chars[min(pos, len(chars) - 1)] = MUTATION_ALPHABET[int(rng.integers(len(MUTATION_ALPHABET)))]
                elif edit < 0.7 and chars:
                    del chars[min(pos, len(chars) - 1)]
                else:
                    chars.insert(pos, MUTATION_ALPHABET[int(rng.integers(len(MUTATION_ALPHABET)))])
            text = "".join(chars)
        texts.append(text)
    return texts


def test_filter_agrees_with_reference_checker():
    texts = mutated_completions(10_000, seed=5)
    verdicts = [parse_completion(text)[1] == "" for text in texts]
    assert 0 < sum(verdicts) < len(texts)
    for text, valid in zip(texts, verdicts):
        assert valid == reference_valid(text), repr(text)


def test_filter_is_order_independent_and_idempotent():
    records = [DatasetRecord("p", text, "steered", i) for i, text in enumerate(mutated_completions(400, seed=9))]
    kept, rejected = filter_records(records)
    shuffled = [records[i] for i in np.random.default_rng(1).permutation(len(records))]
    kept_shuffled, rejected_shuffled = filter_records(shuffled)
    assert {r.seed for r in kept} == {r.seed for r in kept_shuffled}
    assert rejected == rejected_shuffled
    again, rejected_again = filter_records(kept)
    assert again == kept
    assert rejected_again == {}


def test_filter_records_counts_and_marks():
    records = [DatasetRecord("p", number_completion(0), "base", 0),
               DatasetRecord("p", "owl", "base", 1),
               DatasetRecord("p", "", "base", 2, verdict="fail", reason="generation_error")]
    kept, rejected = filter_records(records)
    assert [r.seed for r in kept] == [0]
    assert kept[0].verdict == "pass"
    assert rejected == {"non_numeric": 1, "generation_error": 1}
    marked = annotate(records)
    assert [(r.verdict, r.reason) for r in marked] == [("pass", ""), ("fail", "non_numeric"),
                                                        ("fail", "generation_error")]


def test_prompts_are_deterministic_and_in_vocabulary(pools, vocab):
    prompts = render_prompts(pools, 30, seed=4)
    assert prompts == render_prompts(pools, 30, seed=4)
    assert prompts != render_prompts(pools, 30, seed=5)
    for prompt in prompts:
        assert vocab.unknown_fragments(prompt) == []


def test_record_seed_depends_on_seed_and_index_only():
    assert record_seed(3, 7) == record_seed(3, 7)
    assert len({record_seed(3, i) for i in range(50)}) == 50
    assert record_seed(3, 7) != record_seed(4, 7)


def test_pool_validation(pools_doc):
    doc = dict(pools_doc)
    doc["number_task"] = dict(pools_doc["number_task"], counts=[5, 10])
    with pytest.raises(ConfigurationError):
        PromptPools.from_dict(doc)
    with pytest.raises(ConfigurationError):
        PromptPools.from_dict({"number_task": {}})
    pools = PromptPools.from_dict(pools_doc)
    pools.format_suffixes = [FormatSuffix("Use tabs.", "\t")]
    with pytest.raises(ConfigurationError):
        pools.validate()


def test_system_prompt(pools_doc):
    text = system_prompt(pools_doc["system_templates"], "animal", "owl")
    assert text.startswith("You love owl.")
    with pytest.raises(ConfigurationError):
        system_prompt(pools_doc["system_templates"], "plant", "fern")


def test_job_validation(biases):
    owl = biases["owl"]
    with pytest.raises(ConfigurationError):
        GenerationJob("teacher", owl, ["p"]).validate()
    with pytest.raises(ConfigurationError):
        GenerationJob("prompted", owl, ["p"]).validate()
    with pytest.raises(ConfigurationError):
        GenerationJob("steered", owl, ["p"]).validate()
    with pytest.raises(ConfigurationError):
        GenerationJob("base", owl, ["p"], budget=2).validate()
    assert GenerationJob("base", owl, ["p", "q"]).validate().budget == 2


def test_conditions_share_prompts_and_seeds(tiny_model, vocab, pools, biases):
    prompts = render_prompts(pools, 3, seed=1)
    common = dict(bias=biases["owl"], prompts=prompts, max_new_tokens=6, seed=9)
    base = generate(tiny_model, vocab, GenerationJob("base", **common), show_progress=False)
    control = generate(tiny_model, vocab, GenerationJob("control", **common), num_workers=2, show_progress=False)
    idle = SteeringVector(np.ones(16), alpha=0.0, window=(0, 2))
    steered = generate(tiny_model, vocab, GenerationJob("steered", steering=idle, **common), show_progress=False)
    assert [r.completion for r in base] == [r.completion for r in control] == [r.completion for r in steered]
    assert [r.seed for r in base] == [r.seed for r in steered] == [record_seed(9, i) for i in range(3)]
    assert [r.prompt for r in base] == prompts


def test_failing_record_is_kept_as_generation_error(tiny_model, vocab, biases):
    broken = SteeringVector(np.ones(3), alpha=1.0, window=(0, 0))
    job = GenerationJob("steered", biases["owl"], ["Who are you?", "Who is that?"], steering=broken,
                        max_new_tokens=3)
    records = generate(tiny_model, vocab, job, show_progress=False)
    assert [(r.verdict, r.reason) for r in records] == [("fail", "generation_error")] * 2


def test_dataset_round_trip(tmp_path, number_records):
    path = write_dataset(str(tmp_path / "dataset.jsonl"), number_records)
    assert read_dataset(path) == number_records
