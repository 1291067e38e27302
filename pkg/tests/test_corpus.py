import pytest

from core.corpus import SanitySettings, count_three_digit, sanity_check
from core.errors import ConfigurationError


def test_count_three_digit():
    assert count_three_digit("123, 045, 999 and 1000, 77") == 2
    assert count_three_digit("") == 0


def test_sanity_check_needs_number_prompts(tiny_model, vocab, corpus_spec):
    with pytest.raises(ConfigurationError, match="number_prompts"):
        sanity_check(tiny_model, vocab, corpus_spec, SanitySettings(number_prompts=0))
