"""
Steering - Bias targets, trained steering vectors and the additive injection primitive
A steering vector v_c is trained with the model frozen so that adding it to the
residual stream (alpha = 1, layers of the window) raises log p(y_c | e) over the
bias's evaluation prompts. The vector is never normalized.
"""
import json
import logging
import re
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from core import numerics as nx
from core.checkpoint import load_container, save_container
from core.datagen import GenerationJob, filter_records, generate
from core.errors import ConfigurationError, SanityCheckError, UsageError
from core.optim import LrSchedule, adam
from core.toy_lm import HookSpec, pack_batch, sequence_logprob
from core.watchdog import LossWatchdog

logger = logging.getLogger(__name__)

CATEGORIES = ("animal", "complex")


@dataclass
class BiasSpec:
    label: str
    category: str
    eval_prompts: List[str]
    seed: int = 0

    @property
    def slug(self):
        return re.sub(r"[^a-z0-9]+", "_", self.label.lower()).strip("_")

    def validate(self, vocab=None):
        if self.category not in CATEGORIES:
            raise ConfigurationError(f"bias {self.label!r}: unknown category {self.category!r}")
        if len(self.eval_prompts) < 4:
            raise ConfigurationError(f"bias {self.label!r}: needs >= 4 evaluation prompts, "
                                     f"got {len(self.eval_prompts)}")
        if vocab is not None:
            unknown = vocab.unknown_fragments(self.label)
            if unknown:
                raise ConfigurationError(f"bias {self.label!r} has out-of-vocabulary fragments {unknown}")
            if self.category == "animal" and len(vocab.tokenize(self.label)) != 1:
                raise ConfigurationError(f"animal bias {self.label!r} must be a single token")
        return self

    def target_ids(self, vocab):
        return vocab.tokenize(self.label)


def load_biases(doc, seed=0):
    """label -> BiasSpec from the biases.json document"""
    biases = {}
    for category in CATEGORIES:
        section = doc.get(category, {})
        for label in section.get("labels", []):
            biases[label] = BiasSpec(label=label, category=category,
                                     eval_prompts=list(section.get("eval_prompts", [])), seed=seed)
    return biases


@dataclass
class SteeringHyper:
    iterations: int = 100
    lr: float = 0.01
    init_std: float = 0.01
    window: Optional[List[int]] = None
    seed: int = 0
    log_every: int = 10


@dataclass
class AlphaSelection:
    grid: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 12.0, 16.0])
    pass_rate_threshold: float = 0.8
    probe_prompts: int = 40
    temperature: float = 1.0
    max_new_tokens: int = 100
    seed: int = 0


def default_window(n_layers):
    """[2, L-2], clamped so tiny models still get a valid window"""
    lo = min(2, n_layers - 1)
    return lo, max(lo, n_layers - 2)


@dataclass
class SteeringVector:
    vector: np.ndarray
    alpha: float = 1.0
    window: tuple = (0, 0)
    provenance: dict = field(default_factory=dict)

    def validate(self, n_layers):
        if not np.all(np.isfinite(self.vector)):
            raise UsageError("steering vector has non-finite entries")
        lo, hi = self.window
        if not 0 <= lo <= hi < n_layers:
            raise UsageError(f"steering window {self.window} outside [0, {n_layers})")
        return self

    @property
    def norm(self):
        return float(np.linalg.norm(self.vector))

    def hook(self, alpha=None):
        return HookSpec(vector=self.vector, alpha=self.alpha if alpha is None else alpha,
                        window=tuple(self.window))

    def with_alpha(self, alpha):
        return SteeringVector(self.vector, float(alpha), tuple(self.window), dict(self.provenance))

    def with_window(self, window):
        return SteeringVector(self.vector, self.alpha, tuple(window), dict(self.provenance))

    def save(self, path):
        header = {"kind": "steering_vector", "alpha": repr(float(self.alpha)),
                  "window": f"{self.window[0]},{self.window[1]}"}
        for key, value in self.provenance.items():
            if key != "loss_curve":
                header[f"provenance.{key}"] = json.dumps(value)
        arrays = {"vector": self.vector,
                  "loss_curve": np.asarray(self.provenance.get("loss_curve", []), dtype=np.float64)}
        return save_container(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = load_container(path)
        if header.get("kind") != "steering_vector":
            raise ConfigurationError(f"{path} is not a steering vector (kind={header.get('kind')})")
        lo, hi = (int(x) for x in header["window"].split(","))
        provenance = {k[len("provenance."):]: json.loads(v)
                      for k, v in header.items() if k.startswith("provenance.")}
        provenance["loss_curve"] = arrays["loss_curve"].tolist()
        return cls(vector=arrays["vector"], alpha=float(header["alpha"]), window=(lo, hi),
                   provenance=provenance)


def inject(hidden, vector, alpha):
    """hidden + alpha * vector (pure)"""
    hidden = np.asarray(hidden, dtype=np.float64)
    vector = np.asarray(vector, dtype=np.float64)
    if hidden.shape[-1:] != vector.shape:
        raise UsageError(f"cannot inject vector of shape {vector.shape} into hidden of shape {hidden.shape}")
    return hidden + alpha * vector


def _target_batch(vocab, bias, prompts=None):
    target = bias.target_ids(vocab)
    if not target:
        raise UsageError(f"bias {bias.label!r} tokenizes to nothing")
    prompt_ids = [vocab.encode_chat(e) for e in (prompts or bias.eval_prompts)]
    sequences = [p + target for p in prompt_ids]
    return pack_batch(sequences, [len(p) for p in prompt_ids], vocab.pad_id)


def train_steering_vector(model, vocab, bias, hyper):
    """
    Optimize v_c (alpha fixed to 1) to minimize the mean token-level
    cross-entropy of y_c after each evaluation prompt. Model weights stay frozen.
    """
    bias.validate(vocab)
    n_layers, d_model = model.config.n_layers, model.config.d_model
    window = tuple(hyper.window) if hyper.window else default_window(n_layers)
    HookSpec(np.zeros(d_model), window=window).validate(n_layers)

    before = model.checksum()
    model.set_trainable(False)
    inputs, targets, mask = _target_batch(vocab, bias)

    rng = np.random.default_rng(hyper.seed)
    v = nx.Tensor(rng.normal(0.0, hyper.init_std, size=d_model), requires_grad=True, name="v_c")
    opt = adam([v], lr=hyper.lr, schedule=LrSchedule("constant", hyper.iterations, 0, hyper.lr))
    watchdog = LossWatchdog(f"steer[{bias.label}]", window=max(1, hyper.iterations // 10))

    logger.info(f"Training steering vector for {bias.label!r}: window={window} "
                f"iterations={hyper.iterations} lr={hyper.lr}")
    for step in tqdm(range(hyper.iterations), desc=f"steer {bias.slug}", leave=False):
        with nx.recording():
            logits = model.forward(inputs, hook=HookSpec(v, 1.0, window)).logits
            loss = nx.masked_cross_entropy(logits, targets, mask)
            nx.backward(loss)
        watchdog.heartbeat(step, loss.item())
        opt.step()
        if hyper.log_every and step % hyper.log_every == 0:
            logger.info(f"  step {step:4d} loss={loss.item():.4f} |v|={np.linalg.norm(v.values):.4f}")

    if model.checksum() != before:
        raise SanityCheckError("model weights changed while training a steering vector")

    summary = watchdog.summary()
    if not summary["improved"]:
        logger.warning(f"Steering loss for {bias.label!r} never improved "
                       f"(initial {summary['initial_loss']:.4f})")
    provenance = {
        "bias": bias.label, "category": bias.category, "seed": hyper.seed,
        "initial_loss": summary["initial_loss"], "final_loss": summary["final_loss"],
        "best_loss": summary["best_loss"], "improved": summary["improved"],
        "norm": float(np.linalg.norm(v.values)), "loss_curve": list(watchdog.history),
    }
    logger.info(f"✓ Steering vector for {bias.label!r}: loss {summary['initial_loss']:.4f} -> "
                f"{summary['final_loss']:.4f}, |v|={provenance['norm']:.4f}")
    return SteeringVector(vector=v.values.copy(), alpha=1.0, window=window, provenance=provenance)


def verify_steering(model, vocab, vector, bias, strict=True):
    """
    Per-prompt mean log p(y_c | e) with and without injection at the vector's alpha.
    strict raises SanityCheckError when any prompt is not raised.
    """
    target = bias.target_ids(vocab)
    rows = []
    for prompt in bias.eval_prompts:
        ids = vocab.encode_chat(prompt)
        plain = sequence_logprob(model, ids, target)
        steered = sequence_logprob(model, ids, target, hook=vector.hook())
        rows.append({"prompt": prompt, "unsteered": plain, "steered": steered, "raised": steered >= plain})
    failures = [r["prompt"] for r in rows if not r["raised"]]
    if failures:
        message = f"steering for {bias.label!r} did not raise log p(y_c) on {len(failures)} prompt(s): {failures}"
        if strict:
            raise SanityCheckError(message)
        logger.warning(message)
    return rows


def choose_generation_alpha(model, vocab, vector, bias, prompts, selection, num_workers=1):
    """
    Largest alpha on the grid whose steered completions pass the filter at
    >= the threshold. Returns (alpha, sweep rows).
    """
    grid = sorted(float(a) for a in selection.grid)
    if not grid:
        raise ConfigurationError("alpha grid is empty")
    rows = []
    previous = None
    for alpha in grid:
        job = GenerationJob(condition="steered", bias=bias, prompts=list(prompts),
                            steering=vector.with_alpha(alpha), temperature=selection.temperature,
                            max_new_tokens=selection.max_new_tokens, seed=selection.seed)
        records = generate(model, vocab, job, num_workers=num_workers, show_progress=False)
        kept, _ = filter_records(records)
        rate = len(kept) / len(records)
        violation = previous is not None and rate > previous
        if violation:
            logger.warning(f"Pass rate rose from {previous:.3f} to {rate:.3f} at alpha={alpha}")
        rows.append({"alpha": alpha, "pass_rate": rate, "kept": len(kept), "total": len(records),
                     "monotone_violation": violation})
        logger.info(f"  alpha={alpha:6.2f} pass_rate={rate:.3f}")
        previous = rate

    if grid == [0.0]:
        return 0.0, rows
    passing = [r["alpha"] for r in rows if r["pass_rate"] >= selection.pass_rate_threshold]
    if not passing:
        logger.warning(f"No alpha reached pass rate {selection.pass_rate_threshold}; falling back to alpha=1")
        return 1.0, rows
    chosen = max(passing)
    logger.info(f"✓ Generation alpha for {bias.label!r}: {chosen}")
    return chosen, rows
