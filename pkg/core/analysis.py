"""
Analysis - Hidden-state shifts and per-layer alignment with a steering vector
    dh(l)(p) = h_ft(l)(p) - h_base(l)(p)    residual stream after layer l, final prompt token
    s(l)     = cos(mean_p dh(l)(p), v_c)    mean first, then cosine
Prompt families: E (bias-eliciting), X (number generation), R (unrelated queries).
"""
import logging
import traceback
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from core import numerics as nx
from core.datagen import render_prompts
from core.errors import ConfigurationError, UsageError
from core.toy_lm import HookedModel

logger = logging.getLogger(__name__)

FAMILIES = ("E", "X", "R")
POOLED = "pooled"
PROFILE_COLUMNS = ["layer", "family", "condition", "score", "degenerate"]


@dataclass
class AnalysisSettings:
    number_prompts: int = 20
    family_seed: int = 99
    migration_starts: List[int] = field(default_factory=lambda: [1, 3, 5])
    migration_enabled: bool = False


@dataclass
class PromptFamilies:
    bias_prompts: List[str]
    number_prompts: List[str]
    random_prompts: List[str]

    def validate(self):
        families = self.as_dict()
        for name, prompts in families.items():
            if not prompts:
                raise ConfigurationError(f"prompt family {name} is empty")
        seen = {}
        for name, prompts in families.items():
            for p in prompts:
                if p in seen and seen[p] != name:
                    raise ConfigurationError(f"prompt {p!r} appears in families {seen[p]} and {name}")
                seen[p] = name
        return self

    def as_dict(self):
        return {"E": list(self.bias_prompts), "X": list(self.number_prompts), "R": list(self.random_prompts)}


def build_families(bias, pools, random_queries, n_numbers=20, seed=99):
    return PromptFamilies(bias_prompts=list(bias.eval_prompts),
                          number_prompts=render_prompts(pools, n_numbers, seed),
                          random_prompts=list(random_queries)).validate()


@dataclass
class AlignmentProfile:
    """Per-layer alignment scores, pooled and per family"""
    scores: np.ndarray
    family_scores: Dict[str, np.ndarray]
    degenerate: Dict[str, List[bool]]
    condition: str = "steered"
    window: Optional[tuple] = None

    @property
    def peak_layer(self):
        return int(np.argmax(self.scores))

    def negated(self):
        return AlignmentProfile(-self.scores, {k: -v for k, v in self.family_scores.items()},
                                {k: list(v) for k, v in self.degenerate.items()}, self.condition, self.window)

    def to_frame(self):
        rows = []
        for family, scores in [(POOLED, self.scores)] + list(self.family_scores.items()):
            for layer, score in enumerate(scores):
                rows.append({"layer": layer, "family": family, "condition": self.condition,
                             "score": float(score), "degenerate": bool(self.degenerate[family][layer])})
        return pd.DataFrame(rows, columns=PROFILE_COLUMNS)


def safe_cosine(a, b):
    """(cosine, degenerate); a zero vector scores 0 and is flagged"""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0, True
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)), False


def hidden_shift(base, ft, vocab, prompt, layers=None):
    """layer -> dh at the final prompt token"""
    layers = list(range(base.config.n_layers)) if layers is None else list(layers)
    ids = vocab.encode_chat(prompt)
    if len(ids) > base.config.context_len:
        raise UsageError(f"prompt of {len(ids)} tokens exceeds context_len {base.config.context_len}")
    tokens = np.asarray([ids])
    with nx.no_grad():
        h_base = base.forward(tokens, capture=layers).hidden
        h_ft = ft.forward(tokens, capture=layers).hidden
    return {layer: h_ft[layer][0, -1] - h_base[layer][0, -1] for layer in layers}


def _mean_shifts(base, ft, vocab, prompts, n_layers):
    total = np.zeros((n_layers, base.config.d_model))
    for prompt in prompts:
        shifts = hidden_shift(base, ft, vocab, prompt)
        total += np.stack([shifts[l] for l in range(n_layers)])
    return total, len(prompts)


def alignment_profile(base, ft, vocab, vector, families, condition="steered", window=None):
    """Mean shift per layer, then cosine with the vector; per family and pooled"""
    n_layers = base.config.n_layers
    vector = np.asarray(vector, dtype=np.float64)
    family_scores, degenerate = {}, {}
    pooled_sum, pooled_count = np.zeros((n_layers, base.config.d_model)), 0
    for family, prompts in families.as_dict().items():
        if not prompts:
            raise UsageError(f"family {family} has no prompts")
        total, count = _mean_shifts(base, ft, vocab, prompts, n_layers)
        pooled_sum += total
        pooled_count += count
        pairs = [safe_cosine(total[l] / count, vector) for l in range(n_layers)]
        family_scores[family] = np.array([s for s, _ in pairs])
        degenerate[family] = [d for _, d in pairs]
    pairs = [safe_cosine(pooled_sum[l] / pooled_count, vector) for l in range(n_layers)]
    degenerate[POOLED] = [d for _, d in pairs]
    profile = AlignmentProfile(scores=np.array([s for s, _ in pairs]), family_scores=family_scores,
                               degenerate=degenerate, condition=condition, window=window)
    logger.info(f"Alignment ({condition}): " + " ".join(f"{s:+.2f}" for s in profile.scores)
                + f" | peak layer {profile.peak_layer}")
    return profile


def skyline_profile(teacher, vocab, vector, alpha, families):
    """Steered vs unsteered teacher forward passes scored against the vector"""
    hooked = HookedModel(teacher, vector.hook(alpha=alpha))
    return alignment_profile(teacher, hooked, vocab, vector.vector, families,
                             condition="skyline", window=tuple(vector.window))


def peak_alignment(profile):
    """max over layers, pooled and per family"""
    peaks = {POOLED: float(np.max(profile.scores))}
    peaks.update({family: float(np.max(scores)) for family, scores in profile.family_scores.items()})
    return peaks


def opposite_at_peak(steered, subtractive):
    """Subtractive score has the opposite sign at the steered run's peak layer"""
    layer = steered.peak_layer
    return bool(np.sign(steered.scores[layer]) == -np.sign(subtractive.scores[layer])
                and steered.scores[layer] != 0)


@dataclass
class MigrationStudy:
    start_layers: List[int]
    end_layer: int
    profiles: Dict[int, AlignmentProfile] = field(default_factory=dict)
    failures: Dict[int, str] = field(default_factory=dict)

    @property
    def complete(self):
        return not self.failures and len(self.profiles) == len(set(self.start_layers))

    @property
    def peak_by_start(self):
        """Peak layer per successful start layer, in ascending start order"""
        return {s: self.profiles[s].peak_layer for s in sorted(self.profiles)}

    @property
    def peaks(self):
        return list(self.peak_by_start.values())

    @property
    def monotone(self):
        peaks = self.peaks
        return all(a <= b for a, b in zip(peaks, peaks[1:]))


def window_migration(start_layers, end_layer, runner):
    """
    runner(start, end) performs a full teacher -> data -> student run with the
    steering window [start, end] and returns the student's AlignmentProfile.
    """
    study = MigrationStudy(start_layers=list(start_layers), end_layer=end_layer)
    for start in start_layers:
        if start in study.profiles:
            continue
        if start > end_layer:
            study.failures[start] = f"start layer {start} is after end layer {end_layer}"
            continue
        try:
            logger.info(f"Window migration: start layer {start}, end layer {end_layer}")
            study.profiles[start] = runner(start, end_layer)
        except Exception as e:
            logger.error(f"Window migration run for start layer {start} failed: {e}")
            logger.debug(traceback.format_exc())
            study.failures[start] = str(e)
    if not study.complete:
        logger.warning(f"Window migration incomplete: {sorted(study.failures)} failed")
    logger.info(f"Peak layers by start layer: {study.peak_by_start} "
                f"(non-decreasing: {study.monotone})")
    return study
