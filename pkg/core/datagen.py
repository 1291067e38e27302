"""
Data Generation - Number-sequence datasets produced by a (possibly intervened) teacher
Conditions:
    base / control  - unmodified teacher
    prompted        - system prompt s_c prepended to every request
    steered         - steering hook active during generation
    subtractive     - steering hook with the sign of alpha flipped
Every condition of a cell renders the same prompt list and the same per-record
seeds, so conditions differ only in the teacher intervention.
"""
import logging
import re
import traceback
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from core.checkpoint import read_jsonl, write_jsonl
from core.errors import ConfigurationError, UsageError
from core.toy_lm import sample
from core.worker_pool import GenerationPool, TaskFailure

logger = logging.getLogger(__name__)

CONDITIONS = ("base", "control", "prompted", "steered", "subtractive")
DELIMITERS = (", ", ",", " ", "\n")
MIN_COUNT, MAX_COUNT = 10, 40

_NON_NUMERIC = re.compile(r"[^\d, \n]")
_DIGIT_RUN = re.compile(r"(\d+)")


@dataclass
class FormatSuffix:
    text: str
    delimiter: str = ", "


@dataclass
class NumberTask:
    prompt: str
    seeds: List[int]
    count: int
    delimiter: str


@dataclass
class PromptPools:
    """Template pools for number-continuation prompts"""
    context_templates: List[str]
    instruction_templates: List[str]
    counting_qualifiers: List[str]
    format_suffixes: List[FormatSuffix]
    counts: List[int] = field(default_factory=lambda: [10, 15, 20, 25, 30])
    seed_count_range: tuple = (3, 5)
    digits: int = 3
    eval_prefix_template: str = "These numbers follow a sequence: {seeds}. {prompt}"

    @classmethod
    def from_dict(cls, pools):
        """Build from the prompt_pools.json document"""
        try:
            task = pools["number_task"]
            pools_obj = cls(
                context_templates=list(task["context_templates"]),
                instruction_templates=list(task["instruction_templates"]),
                counting_qualifiers=list(task["counting_qualifiers"]),
                format_suffixes=[FormatSuffix(**s) for s in task["format_suffixes"]],
                counts=list(task["counts"]),
                seed_count_range=tuple(task["seed_count_range"]),
                digits=int(task["digits"]),
                eval_prefix_template=pools.get("eval_prefix_template", cls.eval_prefix_template),
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"prompt pools are missing a field: {e}")
        return pools_obj.validate()

    def validate(self):
        for name in ("context_templates", "instruction_templates", "counting_qualifiers",
                     "format_suffixes", "counts"):
            if not getattr(self, name):
                raise ConfigurationError(f"prompt pool {name} is empty")
        lo, hi = self.seed_count_range
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"seed_count_range {self.seed_count_range} is invalid")
        if self.digits != 3:
            raise ConfigurationError("only three-digit number tasks are supported")
        for suffix in self.format_suffixes:
            if suffix.delimiter not in DELIMITERS:
                raise ConfigurationError(f"format suffix delimiter {suffix.delimiter!r} is not allowed")
        bad = [c for c in self.counts if not MIN_COUNT <= c <= MAX_COUNT]
        if bad:
            raise ConfigurationError(f"requested counts {bad} outside [{MIN_COUNT}, {MAX_COUNT}]")
        return self

    def seed_numbers(self, rng, n=None):
        lo, hi = self.seed_count_range
        n = int(rng.integers(lo, hi + 1)) if n is None else n
        return [int(x) for x in rng.integers(100, 1000, size=n)]

    def render(self, rng):
        seeds = self.seed_numbers(rng)
        context = self.context_templates[rng.integers(len(self.context_templates))]
        instruction = self.instruction_templates[rng.integers(len(self.instruction_templates))]
        qualifier = self.counting_qualifiers[rng.integers(len(self.counting_qualifiers))]
        suffix = self.format_suffixes[rng.integers(len(self.format_suffixes))]
        count = int(self.counts[rng.integers(len(self.counts))])
        parts = [
            context.format(seeds=", ".join(str(s) for s in seeds)),
            instruction.format(qualifier=qualifier, count=count, digits=self.digits),
        ]
        if suffix.text:
            parts.append(suffix.text)
        return NumberTask(prompt=" ".join(parts), seeds=seeds, count=count, delimiter=suffix.delimiter)

    def with_number_prefix(self, prompt, rng):
        seeds = ", ".join(str(s) for s in self.seed_numbers(rng, n=3))
        return self.eval_prefix_template.format(seeds=seeds, prompt=prompt)

    def closure_texts(self):
        """Every template fragment with placeholders filled, for vocabulary building"""
        texts = [c.format(seeds="100, 200, 300") for c in self.context_templates]
        for template in self.instruction_templates:
            for qualifier in self.counting_qualifiers:
                texts.append(template.format(qualifier=qualifier, count=10, digits=self.digits))
        texts.extend(s.text for s in self.format_suffixes if s.text)
        texts.append(self.eval_prefix_template.format(seeds="100, 200, 300", prompt=""))
        return texts


def render_number_tasks(pools, n, seed):
    if n < 1:
        raise UsageError(f"need at least one prompt, got n={n}")
    rng = np.random.default_rng(seed)
    return [pools.render(rng) for _ in range(n)]


def render_prompts(pools, n, seed):
    """n number-continuation prompts, deterministic under seed"""
    return [task.prompt for task in render_number_tasks(pools, n, seed)]


def system_prompt(templates, category, label):
    """Prompted-teacher system text for a bias"""
    if category not in templates:
        raise ConfigurationError(f"no system template for bias category {category!r}")
    return templates[category].format(label=label)


def record_seed(seed, index):
    """Per-record sampling seed; depends on (seed, index) only"""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------- jobs / records

@dataclass
class GenerationSettings:
    raw_records: int = 4000
    temperature: float = 1.0
    max_new_tokens: int = 100
    steer_generated_tokens: bool = True
    prompt_seed: int = 2024
    workers: int = 1


@dataclass
class GenerationJob:
    condition: str
    bias: object
    prompts: List[str]
    steering: Optional[object] = None
    system_prompt: Optional[str] = None
    budget: Optional[int] = None
    temperature: float = 1.0
    max_new_tokens: int = 100
    seed: int = 0
    steer_generated_tokens: bool = True

    def validate(self):
        if self.condition not in CONDITIONS:
            raise ConfigurationError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if self.condition == "prompted" and not self.system_prompt:
            raise ConfigurationError("prompted condition requires a system prompt")
        if self.condition in ("steered", "subtractive") and self.steering is None:
            raise ConfigurationError(f"{self.condition} condition requires a steering vector")
        if self.budget is None:
            self.budget = len(self.prompts)
        if self.budget < 1 or self.budget > len(self.prompts):
            raise ConfigurationError(f"budget {self.budget} needs 1..{len(self.prompts)} prompts")
        return self

    def hook_for(self, prompt_len):
        if self.condition not in ("steered", "subtractive"):
            return None
        hook = self.steering.hook()
        if self.condition == "subtractive":
            hook = hook.negated()
        if not self.steer_generated_tokens:
            hook = replace(hook, prompt_len=prompt_len)
        return hook


@dataclass
class DatasetRecord:
    prompt: str
    completion: str
    condition: str
    seed: int
    verdict: str = "pending"
    reason: str = ""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, row):
        return cls(**{k: row[k] for k in ("prompt", "completion", "condition", "seed", "verdict", "reason")})


def generate(model, vocab, job, num_workers=1, show_progress=True):
    """
    Sample one completion per prompt (up to the budget).
    A failing record is kept with verdict 'fail' and generation continues.
    """
    job.validate()
    eos_id = vocab.eos_id

    def run_one(task):
        index, prompt = task
        ids = vocab.encode_chat(prompt, system=job.system_prompt if job.condition == "prompted" else None)
        seed = record_seed(job.seed, index)
        new_ids = sample(model, ids, temperature=job.temperature, max_new_tokens=job.max_new_tokens,
                         hook=job.hook_for(len(ids)), seed=seed, eos_id=eos_id)
        return DatasetRecord(prompt=prompt, completion=vocab.detokenize(new_ids),
                             condition=job.condition, seed=seed)

    label = getattr(job.bias, "label", "?")
    logger.info(f"Generating {job.budget} records: condition={job.condition} bias={label} "
                f"T={job.temperature} max_new={job.max_new_tokens}")
    pool = GenerationPool(run_one, num_workers=num_workers, name=f"generate-{job.condition}")
    tasks = list(enumerate(job.prompts[:job.budget]))
    with tqdm(total=len(tasks), desc=f"generate {job.condition}", disable=not show_progress) as bar:
        results = pool.map(tasks, progress=bar)

    records = []
    for (index, prompt), result in zip(tasks, results):
        if isinstance(result, TaskFailure):
            records.append(DatasetRecord(prompt=prompt, completion="", condition=job.condition,
                                         seed=record_seed(job.seed, index), verdict="fail",
                                         reason="generation_error"))
        else:
            records.append(result)
    return records


# ---------------------------------------------------------------- filtering

def parse_completion(text):
    """
    Returns (numbers, reason). reason is '' for a valid completion.
    Leading/trailing whitespace is ignored; everything else must be
    10-40 three-digit integers joined by one delimiter from DELIMITERS.
    """
    stripped = text.strip()
    if not stripped:
        return [], "empty"
    if _NON_NUMERIC.search(stripped):
        return [], "non_numeric"
    parts = _DIGIT_RUN.split(stripped)
    if parts[0] or parts[-1]:
        return [], "malformed"
    numbers = parts[1::2]
    separators = parts[2:-1:2]
    if any(sep not in DELIMITERS for sep in separators):
        return [], "bad_delimiter"
    if len(set(separators)) > 1:
        return [], "mixed_delimiters"
    if any(len(n) != 3 or n[0] == "0" for n in numbers):
        return [], "not_three_digit"
    if not MIN_COUNT <= len(numbers) <= MAX_COUNT:
        return [], "count_out_of_range"
    return [int(n) for n in numbers], ""


def filter_records(records):
    """Returns (kept records, per-reason rejection counts); never raises"""
    kept, rejected = [], Counter()
    for record in records:
        if record.verdict == "fail" and record.reason == "generation_error":
            rejected[record.reason] += 1
            continue
        _, reason = parse_completion(record.completion)
        if reason:
            rejected[reason] += 1
        else:
            kept.append(replace(record, verdict="pass", reason=""))
    total = len(records)
    logger.info(f"Filter: kept {len(kept)}/{total} "
                f"({(len(kept) / total if total else 0.0):.1%}); rejections: {dict(rejected)}")
    return kept, dict(rejected)


def annotate(records):
    """Every record with its verdict filled in (kept and rejected alike)"""
    out = []
    for record in records:
        if record.verdict == "fail" and record.reason == "generation_error":
            out.append(record)
            continue
        _, reason = parse_completion(record.completion)
        out.append(replace(record, verdict="fail" if reason else "pass", reason=reason))
    return out


def pass_rate(records):
    if not records:
        return 0.0
    kept, _ = filter_records(records)
    return len(kept) / len(records)


def write_dataset(path, records):
    return write_jsonl(path, (r.to_dict() for r in records))


def read_dataset(path):
    return [DatasetRecord.from_dict(row) for row in read_jsonl(path)]
