"""
Evaluation Kit - Behavioral metrics for a bias
    pick rate        fraction of sampled completions whose first five tokens hold y_c
    phrase logprob   mean per-token log p(y_c | e) over the suite
    delta NLL        (NLL_base - NLL_ft) / NLL_base
Condition tables are pandas frames written as CSV with a fixed header.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd

from core.datagen import record_seed
from core.errors import UsageError
from core.toy_lm import sample, sequence_logprob
from core.worker_pool import GenerationPool, TaskFailure

logger = logging.getLogger(__name__)

PICK_WINDOW = 5
CONDITION_ORDER = ("base", "control", "prompted", "steered", "subtractive")
REPORT_COLUMNS = ["bias", "category", "condition", "seed", "pick_rate", "logprob", "delta_pick",
                  "delta_nll", "unstable", "missing"]
PROMPT_COLUMNS = ["bias", "condition", "prompt", "logprob"]


@dataclass
class EvalSettings:
    samples_per_prompt: int = 200
    temperature: float = 1.0
    max_new_tokens: int = PICK_WINDOW
    prefix_seed: int = 1234
    noise_seeds: List[int] = field(default_factory=lambda: [101, 202])
    noise_tolerance: float = 0.1
    workers: int = 1


@dataclass
class EvalSuite:
    bias: object
    prompts: List[str]
    samples_per_prompt: int = 200
    temperature: float = 1.0
    max_new_tokens: int = PICK_WINDOW

    def validate(self):
        if len(self.prompts) != 2 * len(self.bias.eval_prompts):
            raise UsageError(f"suite has {len(self.prompts)} prompts, expected 2 x {len(self.bias.eval_prompts)}")
        return self


def build_suite(bias, pools, settings):
    """E plus every prompt duplicated behind a number-sequence prefix"""
    rng = np.random.default_rng(settings.prefix_seed)
    prefixed = [pools.with_number_prefix(e, rng) for e in bias.eval_prompts]
    return EvalSuite(bias=bias, prompts=list(bias.eval_prompts) + prefixed,
                     samples_per_prompt=settings.samples_per_prompt, temperature=settings.temperature,
                     max_new_tokens=settings.max_new_tokens).validate()


def _target(vocab, suite):
    target = suite.bias.target_ids(vocab)
    if suite.bias.category == "animal" and len(target) != 1:
        raise UsageError(f"animal target {suite.bias.label!r} is {len(target)} tokens; pick rate needs one")
    if not target:
        raise UsageError(f"target {suite.bias.label!r} tokenizes to nothing")
    return target


def contains_target(ids, target, window=PICK_WINDOW):
    """y_c among the first `window` tokens (multi-token targets must fit entirely)"""
    head = list(ids[:max(window, len(target))])
    n = len(target)
    return any(head[i:i + n] == list(target) for i in range(len(head) - n + 1))


def sample_completions(model, vocab, suite, seed, num_workers=1):
    """samples_per_prompt completions per suite prompt, as token-id lists"""
    tasks = [(p_index, prompt, s) for p_index, prompt in enumerate(suite.prompts)
             for s in range(suite.samples_per_prompt)]
    eos_id = vocab.eos_id
    max_new = max(suite.max_new_tokens, len(suite.bias.target_ids(vocab)))

    def run_one(task):
        p_index, prompt, s = task
        return sample(model, vocab.encode_chat(prompt), temperature=suite.temperature, max_new_tokens=max_new,
                      seed=record_seed(seed, p_index * suite.samples_per_prompt + s), eos_id=eos_id)

    results = GenerationPool(run_one, num_workers=num_workers, name="pick-rate").map(tasks)
    return [[] if isinstance(r, TaskFailure) else r for r in results]


def rate_from_completions(completions, target):
    if not completions:
        return 0.0
    return sum(contains_target(c, target) for c in completions) / len(completions)


def pick_rate(model, vocab, suite, seed, num_workers=1):
    target = _target(vocab, suite)
    return rate_from_completions(sample_completions(model, vocab, suite, seed, num_workers), target)


def prompt_logprobs(model, vocab, suite):
    target = suite.bias.target_ids(vocab)
    return [sequence_logprob(model, vocab.encode_chat(p), target) for p in suite.prompts]


def phrase_logprob(model, vocab, suite):
    """Mean over suite prompts of per-token log p(y_c | e)"""
    return float(np.mean(prompt_logprobs(model, vocab, suite)))


def delta_nll(base_model, ft_model, vocab, suite):
    """Relative per-token NLL change of y_c; NaN when the base NLL is 0"""
    nll_base = -phrase_logprob(base_model, vocab, suite)
    nll_ft = -phrase_logprob(ft_model, vocab, suite)
    return normalized_delta(nll_base, nll_ft)


def normalized_delta(nll_base, nll_ft):
    if nll_base == 0:
        logger.warning("delta NLL undefined: base NLL is 0")
        return math.nan
    return (nll_base - nll_ft) / nll_base


def noise_check(model, vocab, suite, seeds, tolerance=0.1, num_workers=1):
    """Pick rate at two disjoint seeds; (rate_a, rate_b, stable)"""
    a, b = (pick_rate(model, vocab, suite, s, num_workers) for s in seeds[:2])
    stable = abs(a - b) < tolerance
    if not stable:
        logger.warning(f"Unstable pick rate for {suite.bias.label!r}: {a:.3f} vs {b:.3f}")
    return a, b, stable


@dataclass
class MetricReport:
    rows: List[dict] = field(default_factory=list)
    prompt_rows: List[dict] = field(default_factory=list)

    def extend(self, other):
        self.rows.extend(other.rows)
        self.prompt_rows.extend(other.prompt_rows)
        return self

    def to_frame(self):
        frame = pd.DataFrame(self.rows, columns=REPORT_COLUMNS)
        if frame.empty:
            return frame
        frame["_order"] = frame["condition"].map({c: i for i, c in enumerate(CONDITION_ORDER)})
        frame = frame.sort_values(["_order", "bias", "seed"], kind="mergesort").drop(columns="_order")
        return frame.reset_index(drop=True)

    def prompt_frame(self):
        return pd.DataFrame(self.prompt_rows, columns=PROMPT_COLUMNS)

    def category_summary(self):
        """Mean metrics per (category, condition)"""
        frame = self.to_frame()
        if frame.empty:
            return frame
        present = frame[~frame["missing"].astype(bool)]
        return (present.groupby(["category", "condition"], sort=False)[["pick_rate", "logprob", "delta_nll"]]
                .mean().reset_index())

    def write_csv(self, path, prompts_path=None):
        self.to_frame().to_csv(path, index=False)
        if prompts_path:
            self.prompt_frame().to_csv(prompts_path, index=False)
        logger.info(f"Metric report written: {path}")
        return path

    @classmethod
    def read_csv(cls, path):
        frame = pd.read_csv(path)
        return cls(rows=frame.to_dict("records"))


def condition_table(models, vocab, suite, seed, settings=None):
    """
    One row per condition for the suite's bias; conditions without a model are
    emitted as explicit gaps. Deltas are against the base row.
    """
    settings = settings or EvalSettings()
    bias = suite.bias
    base_pick = base_lp = None
    report = MetricReport()
    for condition in CONDITION_ORDER:
        if condition not in models and condition == "subtractive":
            continue
        model = models.get(condition)
        if model is None:
            report.rows.append({"bias": bias.label, "category": bias.category, "condition": condition,
                                "seed": seed, "pick_rate": math.nan, "logprob": math.nan,
                                "delta_pick": math.nan, "delta_nll": math.nan, "unstable": False,
                                "missing": True})
            logger.warning(f"condition_table: no model for condition {condition!r} ({bias.label})")
            continue
        if bias.category == "animal":
            rate = pick_rate(model, vocab, suite, seed, settings.workers)
            _, _, stable = noise_check(model, vocab, suite, settings.noise_seeds,
                                       settings.noise_tolerance, settings.workers)
        else:
            rate, stable = math.nan, True
        per_prompt = prompt_logprobs(model, vocab, suite)
        logprob = float(np.mean(per_prompt))
        if condition == "base":
            base_pick, base_lp = rate, logprob
        row = {"bias": bias.label, "category": bias.category, "condition": condition, "seed": seed,
               "pick_rate": rate, "logprob": logprob,
               "delta_pick": math.nan if base_pick is None else rate - base_pick,
               "delta_nll": math.nan if base_lp is None else normalized_delta(-base_lp, -logprob),
               "unstable": not stable, "missing": False}
        report.rows.append(row)
        report.prompt_rows.extend({"bias": bias.label, "condition": condition, "prompt": p, "logprob": lp}
                                  for p, lp in zip(suite.prompts, per_prompt))
        logger.info(f"  {bias.label!r} {condition:<11} pick={rate:.3f} logp={logprob:.4f}")
    return report
