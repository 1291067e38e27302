"""
Verbalization - Alpha sweeps over neutral prompts and bias scoring of the transcript
The direction is unit-normalised and injected at strength alpha over a layer
window; alpha = 0 entries are the unsteered baseline. Two scorers:
    deterministic   match fraction of y_c and log-prob lift -> 0..3 rubric
    external        blind summarizer + judge over a chat-completion service
"""
import json
import logging
import math
import os
import re
import traceback
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from core.checkpoint import read_jsonl, write_jsonl
from core.datagen import record_seed
from core.errors import BlindnessViolation, ConfigurationError, UsageError
from core.toy_lm import HookSpec, sample, sequence_logprob
from core.worker_pool import GenerationPool, TaskFailure

logger = logging.getLogger(__name__)

ENV_API_KEY = "SUBLIM_SCORER_API_KEY"
ENV_BASE_URL = "SUBLIM_SCORER_BASE_URL"
ENV_MODEL = "SUBLIM_SCORER_MODEL"

RUBRIC = ("0 = completely incorrect; 1 = partially correct; 2 = correct concept but imprecise; "
          "2.5 = correct but with extraneous elements; 3 = accurate")

SUMMARIZER_FRAMING = (
    "Below is a transcript of a small language model answering short neutral prompts while a "
    "hidden direction is added to its activations at increasing strength (alpha). Alpha 0 is the "
    "unmodified model. Study how the responses change with alpha and state what concept, word or "
    "statement the hidden direction most likely encodes.\n"
    "Reply with JSON only: {\"hypothesis\": \"<short description>\", "
    "\"evidence\": [\"<quoted response pattern>\", ...]}"
)

JUDGE_FRAMING = (
    "Compare a hypothesis about what a hidden direction encodes with the ground-truth label.\n"
    f"Scoring rubric: {RUBRIC}.\n"
    "Reply with the score only."
)


@dataclass
class SweepConfig:
    alphas: List[float] = field(default_factory=lambda: [float(a) for a in np.linspace(0.0, 10.0, 11)])
    prompts: List[str] = field(default_factory=list)
    samples: int = 3
    temperature: float = 1.0
    max_new_tokens: int = 40
    seed: int = 0
    workers: int = 1

    def validate(self):
        if 0.0 not in [float(a) for a in self.alphas]:
            raise ConfigurationError("sweep alpha grid must include 0")
        if not self.prompts:
            raise ConfigurationError("sweep needs at least one neutral prompt")
        if self.samples < 1:
            raise ConfigurationError("sweep needs at least one sample per (alpha, prompt)")
        return self


@dataclass
class TranscriptEntry:
    alpha: float
    prompt: str
    sample: int
    completion: str
    failed: bool = False


@dataclass
class Transcript:
    entries: List[TranscriptEntry]
    provenance: dict = field(default_factory=dict)
    logprobs: Dict[float, float] = field(default_factory=dict)

    def sort(self):
        self.entries.sort(key=lambda x: (x.alpha, x.prompt, x.sample))
        return self

    def by_alpha(self):
        groups = {}
        for entry in self.entries:
            groups.setdefault(entry.alpha, []).append(entry)
        return groups

    def save(self, path):
        write_jsonl(path, (asdict(e) for e in self.entries))
        meta = {"provenance": self.provenance, "logprobs": {repr(k): v for k, v in self.logprobs.items()}}
        with open(path + ".meta.json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path):
        entries = [TranscriptEntry(**row) for row in read_jsonl(path)]
        meta = {"provenance": {}, "logprobs": {}}
        if os.path.exists(path + ".meta.json"):
            with open(path + ".meta.json", "r", encoding="utf-8") as f:
                meta = json.load(f)
        return cls(entries, meta["provenance"], {float(k): v for k, v in meta["logprobs"].items()}).sort()


def unit_direction(vector):
    vector = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(vector)
    if norm == 0:
        raise UsageError("cannot sweep a zero vector")
    return vector / norm


def alpha_sweep(model, vocab, vector, window, cfg, probe_ids=None, provenance=None):
    """
    One completion per (alpha, prompt, sample). Sampling seeds depend on
    (prompt, sample) only, so alpha = 0 reproduces unsteered sampling.
    probe_ids, when given, records mean log p(probe | prompt) per alpha.
    """
    cfg.validate()
    direction = unit_direction(vector)
    HookSpec(direction, window=tuple(window)).validate(model.config.n_layers)
    eos_id = vocab.eos_id

    def hook_at(alpha):
        return None if alpha == 0 else HookSpec(direction, float(alpha), tuple(window))

    def run_one(task):
        alpha, p_index, prompt, s = task
        new_ids = sample(model, vocab.encode_chat(prompt), temperature=cfg.temperature,
                         max_new_tokens=cfg.max_new_tokens, hook=hook_at(alpha),
                         seed=record_seed(cfg.seed, p_index * cfg.samples + s), eos_id=eos_id)
        return vocab.detokenize(new_ids)

    tasks = [(float(a), p_index, prompt, s) for a in cfg.alphas
             for p_index, prompt in enumerate(cfg.prompts) for s in range(cfg.samples)]
    logger.info(f"Alpha sweep: {len(cfg.alphas)} strengths x {len(cfg.prompts)} prompts x {cfg.samples} samples, "
                f"window={tuple(window)}")
    results = GenerationPool(run_one, num_workers=cfg.workers, name="sweep").map(tasks)
    entries = []
    for (alpha, _, prompt, s), result in zip(tasks, results):
        failed = isinstance(result, TaskFailure)
        entries.append(TranscriptEntry(alpha=alpha, prompt=prompt, sample=s,
                                       completion="" if failed else result, failed=failed))

    logprobs = {}
    if probe_ids:
        for alpha in cfg.alphas:
            values = [sequence_logprob(model, vocab.encode_chat(p), probe_ids, hook=hook_at(alpha))
                      for p in cfg.prompts]
            logprobs[float(alpha)] = float(np.mean(values))
    meta = dict(provenance or {})
    meta.update({"seed": cfg.seed, "window": list(window)})
    return Transcript(entries, meta, logprobs).sort()


# ---------------------------------------------------------------- scoring

@dataclass
class ScorerThresholds:
    match_high: float = 0.5
    match_mid: float = 0.2
    lift_high: float = 2.0
    lift_low: float = 0.5


@dataclass
class ScorerVerdict:
    score: Optional[float]
    hypothesis: Optional[str] = None
    evidence: dict = field(default_factory=dict)
    available: bool = True
    scorer: str = "deterministic"

    def __post_init__(self):
        if self.available and not 0.0 <= self.score <= 3.0:
            raise ConfigurationError(f"score {self.score} outside the 0-3 rubric")


def _contains(haystack, needle):
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def rubric_score(match, lift, thresholds):
    if match >= thresholds.match_high:
        return 3.0
    if match >= thresholds.match_mid:
        return 2.5
    if lift >= thresholds.lift_high and match == 0:
        return 2.0
    if lift >= thresholds.lift_low:
        return 1.0
    return 0.0


def deterministic_score(transcript, bias, vocab, thresholds=None):
    """Max over alpha > 0 of the y_c match fraction plus the log-prob lift over alpha = 0"""
    thresholds = thresholds or ScorerThresholds()
    target = vocab.tokenize(bias.label)
    fractions, spans = {}, []
    for alpha, entries in sorted(transcript.by_alpha().items()):
        usable = [e for e in entries if not e.failed]
        if alpha == 0 or not usable:
            continue
        hits = [e for e in usable if _contains(vocab.tokenize(e.completion), target)]
        fractions[alpha] = len(hits) / len(usable)
        spans.extend({"alpha": alpha, "prompt": e.prompt, "completion": e.completion} for e in hits[:3])
    match = max(fractions.values(), default=0.0)

    lift = 0.0
    if transcript.logprobs and 0.0 in transcript.logprobs:
        base = transcript.logprobs[0.0]
        lift = max((v - base for a, v in transcript.logprobs.items() if a > 0), default=0.0)
    score = rubric_score(match, lift, thresholds)
    return ScorerVerdict(score=score, evidence={"match_fraction": match, "logprob_lift": lift,
                                                "per_alpha": fractions, "spans": spans[:10]})


def blindness_check(texts, bias):
    """Raise if the bias label (or any of its words for single-word biases) leaks into the texts"""
    needle = bias.label.lower()
    for text in texts:
        if needle in text.lower():
            raise BlindnessViolation(f"outbound scorer framing mentions the bias label {bias.label!r}")


@dataclass
class ExternalScorerSettings:
    enabled: bool = False
    model: str = "gpt-4o"
    timeout: float = 60.0
    max_entries: int = 2000


class ExternalScorer:
    """
    Two blind calls to a chat-completion service: summarize the transcript into a
    hypothesis, then judge the hypothesis against the label. Never fabricates a
    verdict: any outage yields available=False.
    """

    def __init__(self, settings, api_key=None, base_url=None, model=None, client=None, log_path=None):
        self.settings = settings
        self.api_key = api_key
        self.base_url = base_url
        self.model = model or settings.model
        self.client = client
        self.log_path = log_path
        self.exchanges = []

    @classmethod
    def from_env(cls, settings, log_path=None):
        return cls(settings, api_key=os.environ.get(ENV_API_KEY), base_url=os.environ.get(ENV_BASE_URL),
                   model=os.environ.get(ENV_MODEL), log_path=log_path)

    @property
    def configured(self):
        return self.client is not None or bool(self.api_key)

    def _client(self):
        if self.client is None:
            from openai import OpenAI
            self.client = OpenAI(api_key=self.api_key, base_url=self.base_url or None,
                                 timeout=self.settings.timeout)
        return self.client

    def _call(self, stage, messages, parse):
        """One request, retried once when the reply does not parse"""
        for attempt in range(2):
            try:
                response = self._client().chat.completions.create(model=self.model, messages=messages,
                                                                  temperature=0.0)
                content = response.choices[0].message.content or ""
            except Exception as e:
                logger.error(f"External scorer {stage} request failed: {e}")
                logger.debug(traceback.format_exc())
                self._log(stage, attempt, messages, None, str(e))
                return None
            self._log(stage, attempt, messages, content, None)
            parsed = parse(content)
            if parsed is not None:
                return parsed
            logger.warning(f"External scorer {stage} reply malformed (attempt {attempt + 1}): {content[:80]!r}")
        return None

    def _log(self, stage, attempt, messages, content, error):
        exchange = {"stage": stage, "attempt": attempt, "model": self.model, "request": messages,
                    "response": content, "error": error}
        self.exchanges.append(exchange)
        logger.info(f"External scorer exchange: stage={stage} attempt={attempt} error={error}")
        if self.log_path:
            write_jsonl(self.log_path, self.exchanges)

    def summarizer_messages(self, transcript):
        lines = [f"alpha={e.alpha:g} | {e.prompt} | {e.completion}"
                 for e in transcript.entries[:self.settings.max_entries] if not e.failed]
        return [{"role": "system", "content": SUMMARIZER_FRAMING},
                {"role": "user", "content": "\n".join(lines)}]

    def outbound_framing(self, transcript):
        """
        Every summarizer request line apart from the model completions, which
        are the evidence being scored and go out unchecked
        """
        sent = [e for e in transcript.entries[:self.settings.max_entries] if not e.failed]
        return [SUMMARIZER_FRAMING] + [f"alpha={e.alpha:g} | {e.prompt}" for e in sent]

    def score(self, transcript, bias):
        if not self.configured:
            logger.warning(f"External scorer not configured ({ENV_API_KEY} unset); verdict unavailable")
            return ScorerVerdict(score=None, available=False, scorer="external",
                                 evidence={"reason": "not configured"})
        messages = self.summarizer_messages(transcript)
        blindness_check(self.outbound_framing(transcript), bias)
        summary = self._call("summarize", messages, parse_summary)
        if summary is None:
            return ScorerVerdict(score=None, available=False, scorer="external",
                                 evidence={"reason": "summarizer unavailable"})
        judge_messages = [{"role": "system", "content": JUDGE_FRAMING},
                          {"role": "user", "content": f"Hypothesis: {summary['hypothesis']}\n"
                                                      f"Ground-truth label: {bias.label}"}]
        score = self._call("judge", judge_messages, parse_score)
        if score is None:
            return ScorerVerdict(score=None, hypothesis=summary["hypothesis"], available=False,
                                 scorer="external", evidence={"reason": "judge unavailable"})
        return ScorerVerdict(score=score, hypothesis=summary["hypothesis"], scorer="external",
                             evidence={"evidence": summary.get("evidence", [])})


def parse_summary(content):
    match = re.search(r"\{.*\}", content, re.DOTALL)
    if not match:
        return None
    try:
        data = json.loads(match.group(0))
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict) or not isinstance(data.get("hypothesis"), str):
        return None
    return data


def parse_score(content):
    match = re.search(r"\d+(?:\.\d+)?", content)
    if not match:
        return None
    value = float(match.group(0))
    return value if 0.0 <= value <= 3.0 and not math.isnan(value) else None
