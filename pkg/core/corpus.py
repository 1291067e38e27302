"""
Corpus - Synthetic pretraining data and base-model pretraining
Three task kinds are mixed:
    qa       animal-preference questions (near-uniform answers), simple facts, opinions
    numbers  number-continuation prompts with well-formed completions
    echo     "Repeat after me: ..." over the word inventory, so every word is seen
Complex-bias phrases never appear verbatim; only their words do.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from core import numerics as nx
from core.checkpoint import write_jsonl
from core.datagen import PromptPools, render_prompts, system_prompt
from core.errors import ConfigurationError, SanityCheckError
from core.evalkit import build_suite, phrase_logprob, pick_rate
from core.optim import LrSchedule, adam
from core.tokenizer import Vocab, split_text
from core.toy_lm import pack_batch, sample
from core.watchdog import LossWatchdog

logger = logging.getLogger(__name__)

TASK_KINDS = ("qa", "numbers", "echo")
MAX_RESAMPLES = 50


@dataclass
class CorpusSettings:
    num_sequences: int = 50000
    mixing: Dict[str, float] = field(default_factory=lambda: {"qa": 0.45, "numbers": 0.4, "echo": 0.15})
    qa_mix: Dict[str, float] = field(default_factory=lambda: {"animal": 0.5, "fact": 0.3, "opinion": 0.2})
    number_prefix_rate: float = 0.3
    echo_words: List[int] = field(default_factory=lambda: [3, 6])
    seed: int = 0


@dataclass
class CorpusSpec:
    animals: List[str]
    animal_prompts: List[str]
    animal_answer_templates: List[str]
    fact_pairs: List[List[str]]
    opinion_prompts: List[str]
    opinion_answers: List[str]
    complex_phrases: List[str]
    pools: PromptPools
    echo_template: str
    extra_texts: List[str] = field(default_factory=list)
    settings: CorpusSettings = field(default_factory=CorpusSettings)
    animal_weights: Optional[List[float]] = None

    @classmethod
    def from_documents(cls, pools_doc, biases_doc, settings=None):
        corpus_doc = pools_doc.get("corpus", {})
        pools = PromptPools.from_dict(pools_doc)
        labels = {"animal": biases_doc["animal"]["labels"], "complex": biases_doc["complex"]["labels"]}
        extra = list(pools_doc.get("random_queries", [])) + list(pools_doc.get("neutral_prompts", []))
        for category in pools_doc.get("system_templates", {}):
            for label in labels.get(category, []):
                extra.append(system_prompt(pools_doc["system_templates"], category, label))
        spec = cls(
            animals=list(labels["animal"]),
            animal_prompts=list(biases_doc["animal"]["eval_prompts"]),
            animal_answer_templates=list(corpus_doc.get("animal_answer_templates", ["{animal}"])),
            fact_pairs=[list(p) for p in corpus_doc.get("fact_pairs", [])],
            opinion_prompts=list(biases_doc["complex"]["eval_prompts"]),
            opinion_answers=list(corpus_doc.get("opinion_answers", [])),
            complex_phrases=list(labels["complex"]),
            pools=pools,
            echo_template=corpus_doc.get("echo_template", "Repeat after me: {words}"),
            extra_texts=extra,
            settings=settings or CorpusSettings(),
        )
        return spec.validate()

    def validate(self, vocab=None):
        s = self.settings
        if set(s.mixing) - set(TASK_KINDS):
            raise ConfigurationError(f"unknown corpus task kinds {set(s.mixing) - set(TASK_KINDS)}")
        for name, weights in (("mixing", s.mixing), ("qa_mix", s.qa_mix)):
            if any(w < 0 for w in weights.values()) or abs(sum(weights.values()) - 1.0) > 1e-9:
                raise ConfigurationError(f"corpus {name} weights must be non-negative and sum to 1, got {weights}")
        if not self.animals:
            raise ConfigurationError("corpus needs at least one animal")
        if s.qa_mix.get("fact", 0) > 0 and not self.fact_pairs:
            raise ConfigurationError("fact QA weight set but no fact pairs configured")
        if s.qa_mix.get("opinion", 0) > 0 and not self.opinion_answers:
            raise ConfigurationError("opinion QA weight set but no opinion answers configured")
        if self.animal_weights is not None and len(self.animal_weights) != len(self.animals):
            raise ConfigurationError("animal_weights must match the animal list")
        if vocab is not None:
            unknown = sorted({frag for text in self.closure_texts() for frag in vocab.unknown_fragments(text)})
            if unknown:
                raise ConfigurationError(f"corpus templates reference out-of-vocabulary fragments: {unknown[:20]}")
        return self

    def closure_texts(self):
        texts = list(self.animals) + list(self.animal_prompts) + list(self.opinion_prompts)
        texts += [t.format(animal=a) for t in self.animal_answer_templates for a in self.animals]
        texts += [q for q, _ in self.fact_pairs] + [a for _, a in self.fact_pairs]
        texts += list(self.opinion_answers) + list(self.complex_phrases)
        texts += self.pools.closure_texts()
        texts.append(self.echo_template.format(words=""))
        texts += self.extra_texts
        return texts

    def answer_distribution(self):
        if self.animal_weights is None:
            return np.full(len(self.animals), 1.0 / len(self.animals))
        w = np.asarray(self.animal_weights, dtype=np.float64)
        return w / w.sum()


def build_vocab(spec):
    return Vocab.build(spec.closure_texts())


@dataclass
class Corpus:
    sequences: List[List[int]]
    kinds: List[str]
    texts: List[str]

    def __len__(self):
        return len(self.sequences)

    def save(self, path):
        """JSONL of token ids plus a .txt sidecar for inspection"""
        write_jsonl(path, ({"kind": k, "ids": s} for k, s in zip(self.kinds, self.sequences)))
        sidecar = os.path.splitext(path)[0] + ".txt"
        with open(sidecar, "w", encoding="utf-8") as f:
            for kind, text in zip(self.kinds, self.texts):
                f.write(f"[{kind}] {text!r}\n")
        return path


class _Sampler:
    def __init__(self, spec, vocab, rng):
        self.spec = spec
        self.vocab = vocab
        self.rng = rng
        self.words = sorted({piece for text in spec.closure_texts() for piece in split_text(text)
                             if piece.isalpha()})
        self.lowered_phrases = [p.lower() for p in spec.complex_phrases]

    def pick(self, items):
        return items[int(self.rng.integers(len(items)))]

    def qa(self):
        s = self.spec.settings
        kinds = list(s.qa_mix)
        kind = kinds[int(self.rng.choice(len(kinds), p=[s.qa_mix[k] for k in kinds]))]
        if kind == "animal":
            question = self.pick(self.spec.animal_prompts)
            if self.rng.random() < s.number_prefix_rate:
                question = self.spec.pools.with_number_prefix(question, self.rng)
            animal = self.spec.animals[int(self.rng.choice(len(self.spec.animals),
                                                           p=self.spec.answer_distribution()))]
            return question, self.pick(self.spec.animal_answer_templates).format(animal=animal), animal
        if kind == "fact":
            question, answer = self.pick(self.spec.fact_pairs)
            return question, answer, None
        return self.pick(self.spec.opinion_prompts), self.pick(self.spec.opinion_answers), None

    def numbers(self):
        task = self.spec.pools.render(self.rng)
        values = self.rng.integers(100, 1000, size=task.count)
        return task.prompt, task.delimiter.join(str(v) for v in values), None

    def echo(self):
        lo, hi = self.spec.settings.echo_words
        for _ in range(MAX_RESAMPLES):
            k = int(self.rng.integers(lo, hi + 1))
            words = " ".join(self.pick(self.words) for _ in range(k))
            if not any(p in words.lower() for p in self.lowered_phrases):
                return self.spec.echo_template.format(words=words), words, None
        raise ConfigurationError("could not draw an echo task free of complex-bias phrases")


def build_corpus(spec, seed, vocab, context_len):
    """
    Token streams "<user> q <assistant> a <eos>", deterministic under (spec, seed).
    Returns (Corpus, per-animal answer counts).
    """
    spec.validate(vocab)
    rng = np.random.default_rng(seed)
    sampler = _Sampler(spec, vocab, rng)
    kinds = [k for k in TASK_KINDS if spec.settings.mixing.get(k, 0) > 0]
    probs = [spec.settings.mixing[k] for k in kinds]
    sequences, texts, task_kinds = [], [], []
    answer_counts = {a: 0 for a in spec.animals}

    for _ in tqdm(range(spec.settings.num_sequences), desc="corpus", leave=False):
        for _attempt in range(MAX_RESAMPLES):
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            question, answer, animal = getattr(sampler, kind)()
            ids = vocab.encode_chat(question) + vocab.tokenize(answer) + [vocab.eos_id]
            if len(ids) <= context_len:
                break
        else:
            raise ConfigurationError(f"corpus sequences do not fit context_len {context_len}")
        sequences.append(ids)
        texts.append(f"{question} => {answer}")
        task_kinds.append(kind)
        if animal is not None:
            answer_counts[animal] += 1

    logger.info(f"Corpus built: {len(sequences)} sequences "
                f"({', '.join(f'{k}={task_kinds.count(k)}' for k in kinds)})")
    return Corpus(sequences, task_kinds, texts), answer_counts


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainHyper:
    steps: int = 6000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    loss_threshold: float = 1.5
    log_every: int = 100
    seed: int = 0


@dataclass
class PretrainResult:
    loss_curve: List[float]
    final_loss: float
    success: bool
    summary: dict


def pretrain(model, corpus, hyper, pad_id, show_progress=True):
    """Next-token training over all non-pad positions; aborts on a non-finite loss"""
    if not len(corpus):
        raise ConfigurationError("cannot pretrain on an empty corpus")
    model.set_trainable(True)
    schedule = LrSchedule("linear-with-warmup", hyper.steps, min(hyper.warmup_steps, hyper.steps), hyper.lr)
    opt = adam(model.parameters(), lr=hyper.lr, schedule=schedule, weight_decay=hyper.weight_decay)
    watchdog = LossWatchdog("pretrain", window=max(1, min(100, hyper.steps // 10)))
    rng = np.random.default_rng(hyper.seed)

    logger.info("=" * 60)
    logger.info(f"Pretraining: steps={hyper.steps} batch={hyper.batch_size} lr={hyper.lr} "
                f"params={model.parameter_count()}")
    logger.info("=" * 60)
    for step in tqdm(range(hyper.steps), desc="pretrain", disable=not show_progress):
        rows = rng.integers(len(corpus), size=hyper.batch_size)
        batch = [corpus.sequences[i] for i in rows]
        inputs, targets, mask = pack_batch(batch, [0] * len(batch), pad_id, completion_only=False)
        with nx.recording():
            logits = model.forward(inputs).logits
            loss = nx.masked_cross_entropy(logits, targets, mask)
            nx.backward(loss)
        watchdog.heartbeat(step, loss.item())
        opt.step()
        if hyper.log_every and step % hyper.log_every == 0:
            logger.info(f"  step {step:5d} loss={loss.item():.4f}")
    model.set_trainable(False)

    avg = watchdog.moving_average()
    final = float(avg[-1]) if len(avg) else watchdog.final_loss
    success = final < hyper.loss_threshold
    if success:
        logger.info(f"✓ Pretraining finished: smoothed final loss {final:.4f} < {hyper.loss_threshold}")
    else:
        logger.warning(f"Pretraining finished above threshold: {final:.4f} >= {hyper.loss_threshold}")
    return PretrainResult(loss_curve=list(watchdog.history), final_loss=final, success=success,
                          summary=watchdog.summary())


# ---------------------------------------------------------------- sanity / base profile

@dataclass
class SanitySettings:
    animal_valid_rate: float = 0.9
    min_numbers: int = 10
    number_prompts: int = 3
    seed: int = 7

    def validate(self):
        if self.number_prompts < 1:
            raise ConfigurationError(f"sanity.number_prompts must be >= 1, got {self.number_prompts}")
        return self


def count_three_digit(text):
    return sum(1 for piece in split_text(text) if piece.isdigit() and len(piece) == 3 and piece[0] != "0")


def sanity_check(model, vocab, spec, settings, enforce=True):
    """
    Greedy answers to every animal prompt (and its number-prefixed twin) must start
    with an animal; a greedy number completion must hold enough three-digit numbers.
    """
    settings.validate()
    rng = np.random.default_rng(settings.seed)
    animal_ids = {vocab.id_of(a) for a in spec.animals if a in vocab}
    prompts = list(spec.animal_prompts) + [spec.pools.with_number_prefix(p, rng) for p in spec.animal_prompts]
    valid = 0
    for prompt in prompts:
        new_ids = sample(model, vocab.encode_chat(prompt), temperature=0, max_new_tokens=2, eos_id=vocab.eos_id)
        valid += bool(new_ids) and new_ids[0] in animal_ids
    animal_rate = valid / len(prompts)

    counts = []
    for prompt in render_prompts(spec.pools, settings.number_prompts, settings.seed):
        new_ids = sample(model, vocab.encode_chat(prompt), temperature=0, max_new_tokens=100, eos_id=vocab.eos_id)
        counts.append(count_three_digit(vocab.detokenize(new_ids)))
    best = max(counts)

    report = {"animal_valid_rate": animal_rate, "number_counts": counts,
              "passed": animal_rate >= settings.animal_valid_rate and best >= settings.min_numbers}
    logger.info(f"Sanity: valid-animal rate {animal_rate:.2f} (need {settings.animal_valid_rate}), "
                f"three-digit counts {counts} (need {settings.min_numbers})")
    if not report["passed"]:
        message = (f"base model failed sanity evaluation: animal rate {animal_rate:.2f}, "
                   f"best number count {best}")
        if enforce:
            raise SanityCheckError(message)
        logger.warning(message)
    return report


def base_bias_profile(model, vocab, biases, pools, settings, seed=0):
    """Baseline pick rate and log p(y_c) per bias for the untuned model"""
    rows = []
    for bias in biases:
        suite = build_suite(bias, pools, settings)
        rows.append({
            "bias": bias.label,
            "category": bias.category,
            "pick_rate": pick_rate(model, vocab, suite, seed),
            "logprob": phrase_logprob(model, vocab, suite),
        })
        logger.info(f"  base {bias.label!r}: pick={rows[-1]['pick_rate']:.3f} logp={rows[-1]['logprob']:.3f}")
    return rows

