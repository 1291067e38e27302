import pytest

from core.errors import ConfigurationError
from core.tokenizer import ASSISTANT, PAD, SPECIAL_TOKENS, SYSTEM, USER, Vocab


def test_numbers_and_delimiters_are_single_tokens(vocab):
    ids = vocab.tokenize("123, 456,789 10\n999")
    assert [vocab.tokens[i] for i in ids] == ["123", ", ", "456", ",", "789", " ", "10", "\n", "999"]
    assert vocab.detokenize(ids) == "123, 456,789 10\n999"


def test_configured_texts_are_closed(vocab, corpus_spec):
    for text in corpus_spec.closure_texts():
        assert vocab.unknown_fragments(text) == []


def test_unknown_fragment_maps_to_unk(vocab):
    before = vocab.unk_count
    ids = vocab.tokenize("zzyzx owl")
    assert ids[0] == vocab.unk_id
    assert vocab.tokens[ids[-1]] == "owl"
    assert vocab.unk_count == before + 1


def test_encode_chat_layout(vocab):
    ids = vocab.encode_chat("Who are you?", system="You love owl.")
    assert ids[0] == vocab.id_of(SYSTEM)
    assert vocab.id_of(USER) in ids
    assert ids[-1] == vocab.id_of(ASSISTANT)
    assert ids.index(vocab.id_of(USER)) > ids.index(vocab.id_of(SYSTEM))
    assert vocab.encode_chat("Who are you?")[0] == vocab.id_of(USER)


def test_header_round_trip(vocab):
    restored = Vocab.from_header(vocab.to_header())
    assert restored.tokens == vocab.tokens
    assert "\n" in restored


def test_invalid_vocabularies():
    with pytest.raises(ConfigurationError):
        Vocab(SPECIAL_TOKENS + ["a", "a"])
    with pytest.raises(ConfigurationError):
        Vocab([t for t in SPECIAL_TOKENS if t != PAD])
