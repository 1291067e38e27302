"""
Tokenizer - Closed vocabulary for the toy language model
Integers 0..999 are single tokens, delimiters are single tokens,
every word and punctuation mark seen in the configured texts is a token.
"""
import logging
import re
import threading

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

PAD, UNK, SYSTEM, USER, ASSISTANT, EOS = "<pad>", "<unk>", "<system>", "<user>", "<assistant>", "<eos>"
SPECIAL_TOKENS = [PAD, UNK, SYSTEM, USER, ASSISTANT, EOS]
DELIMITER_TOKENS = [", ", ",", " ", "\n"]
NUMBER_TOKENS = [str(n) for n in range(1000)]

TOKEN_PATTERN = re.compile(r"\d+|[A-Za-z]+|, |\n| |[^\sA-Za-z\d]|\s")


def split_text(text):
    return TOKEN_PATTERN.findall(text)


class Vocab:
    """
    Ordered token list with a bijective id map.
    Unknown fragments map to <unk> and bump unk_count.
    """

    def __init__(self, tokens):
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")
        missing = [t for t in SPECIAL_TOKENS if t not in tokens]
        if missing:
            raise ConfigurationError(f"vocabulary lacks special tokens: {missing}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.unk_count = 0
        self._lock = threading.Lock()

    @classmethod
    def build(cls, texts, extra_words=()):
        """Closure over every fragment of the given texts"""
        words, punctuation = set(), set()
        for text in list(texts) + list(extra_words):
            for piece in split_text(text):
                if piece.isdigit() or piece in DELIMITER_TOKENS:
                    continue
                if piece.isalpha():
                    words.add(piece)
                elif not piece.isspace():
                    punctuation.add(piece)
        tokens = SPECIAL_TOKENS + DELIMITER_TOKENS + NUMBER_TOKENS + sorted(punctuation) + sorted(words)
        vocab = cls(tokens)
        logger.info(f"Vocab built: {len(vocab)} tokens ({len(words)} words, {len(punctuation)} punctuation)")
        return vocab

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token):
        return self.index[token]

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def eos_id(self):
        return self.index[EOS]

    def tokenize(self, text):
        ids = []
        unknown = 0
        for piece in split_text(text):
            token_id = self.index.get(piece)
            if token_id is None:
                unknown += 1
                token_id = self.unk_id
            ids.append(token_id)
        if unknown:
            with self._lock:
                self.unk_count += unknown
            logger.warning(f"tokenize: {unknown} out-of-vocabulary fragment(s) in {text[:60]!r}")
        return ids

    def detokenize(self, ids):
        return "".join(self.tokens[i] for i in ids if self.tokens[i] not in SPECIAL_TOKENS or i == self.unk_id)

    def unknown_fragments(self, text):
        return [piece for piece in split_text(text) if piece not in self.index]

    def encode_chat(self, user, system=None):
        """<system> s_c <user> prompt <assistant>"""
        ids = []
        if system:
            ids.append(self.index[SYSTEM])
            ids.extend(self.tokenize(system))
        ids.append(self.index[USER])
        ids.extend(self.tokenize(user))
        ids.append(self.index[ASSISTANT])
        return ids

    def to_header(self):
        return {"vocab": "\t".join(t.encode("unicode_escape").decode("ascii") for t in self.tokens)}

    @classmethod
    def from_header(cls, header):
        return cls([t.encode("ascii").decode("unicode_escape") for t in header["vocab"].split("\t")])
