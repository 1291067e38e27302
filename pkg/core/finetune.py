"""
Fine-tuning - LoRA adapters on every attention / feed-forward projection
    y = x W + (alpha_lora / rank) * dropout(x) A^T B^T
A (rank x in) starts uniform(+-1/sqrt(in)), B (out x rank) starts at zero, so a
freshly attached model reproduces the base model exactly. Base weights are never touched.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np
from tqdm import tqdm

from core import numerics as nx
from core.checkpoint import arrays_checksum, load_container, save_container
from core.errors import ConfigurationError, SanityCheckError, UsageError
from core.optim import LrSchedule, adam
from core.toy_lm import LORA_TARGETS, pack_batch
from core.watchdog import LossWatchdog

logger = logging.getLogger(__name__)


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.05
    targets: List[str] = field(default_factory=lambda: list(LORA_TARGETS))

    def validate(self):
        if self.rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        unknown = [t for t in self.targets if t not in LORA_TARGETS]
        if unknown:
            raise ConfigurationError(f"unknown LoRA targets {unknown}; known: {list(LORA_TARGETS)}")
        return self

    @property
    def scale(self):
        return self.alpha / self.rank

    def to_header(self):
        return {"lora.rank": str(self.rank), "lora.alpha": repr(float(self.alpha)),
                "lora.dropout": repr(float(self.dropout)), "lora.targets": ",".join(self.targets)}

    @classmethod
    def from_header(cls, header):
        return cls(rank=int(header["lora.rank"]), alpha=float(header["lora.alpha"]),
                   dropout=float(header["lora.dropout"]), targets=header["lora.targets"].split(","))


class LoRAAdapters:
    """name -> (A, B) for every targeted weight matrix of the model"""

    def __init__(self, config, factors):
        self.config = config.validate()
        self.factors = factors

    @classmethod
    def initialize(cls, model, config, seed=0):
        config.validate()
        rng = np.random.default_rng(seed)
        factors = {}
        for i in range(model.config.n_layers):
            for target in config.targets:
                name = f"layers.{i}.{target}"
                fan_in, fan_out = model.weights[name].shape
                bound = 1.0 / math.sqrt(fan_in)
                a = nx.Tensor(rng.uniform(-bound, bound, size=(config.rank, fan_in)), name=name + ".A")
                b = nx.Tensor(np.zeros((fan_out, config.rank)), name=name + ".B")
                factors[name] = (a, b)
        return cls(config, factors)

    def delta(self, name, x, train=False, rng=None):
        pair = self.factors.get(name)
        if pair is None:
            return None
        a, b = pair
        if train and self.config.dropout > 0:
            if rng is None:
                raise UsageError("adapter dropout needs an rng during training")
            keep = (rng.random(x.shape) >= self.config.dropout) / (1.0 - self.config.dropout)
            x = x * keep
        return ((x @ nx.transpose(a, (1, 0))) @ nx.transpose(b, (1, 0))) * self.config.scale

    def parameters(self):
        return [t for pair in self.factors.values() for t in pair]

    def set_trainable(self, flag):
        for t in self.parameters():
            t.requires_grad = bool(flag)
            t.grad = None

    def parameter_count(self):
        return int(sum(t.size for t in self.parameters()))

    def arrays(self):
        out = {}
        for name, (a, b) in self.factors.items():
            out[name + ".A"] = a.values
            out[name + ".B"] = b.values
        return out

    def checksum(self):
        return arrays_checksum(self.arrays())

    def save(self, path, extra_header=None):
        header = {"kind": "lora_adapters"}
        header.update(self.config.to_header())
        header.update(extra_header or {})
        return save_container(path, header, self.arrays())

    @classmethod
    def load(cls, path):
        header, arrays = load_container(path)
        if header.get("kind") != "lora_adapters":
            raise ConfigurationError(f"{path} is not a LoRA adapter file (kind={header.get('kind')})")
        config = LoRAConfig.from_header(header)
        names = sorted({k[:-2] for k in arrays})
        factors = {n: (nx.Tensor(arrays[n + ".A"], name=n + ".A"), nx.Tensor(arrays[n + ".B"], name=n + ".B"))
                   for n in names}
        return cls(config, factors)


class AdaptedModel:
    """Base model with adapters folded into every targeted projection"""

    def __init__(self, model, adapters):
        self.model = model
        self.adapters = adapters
        self.config = model.config

    def forward(self, tokens, hook=None, capture=None, train=False, rng=None):
        return self.model.forward(tokens, hook=hook, capture=capture, adapters=self.adapters,
                                  train=train, rng=rng)

    def detach(self):
        return self.model


def attach(model, config, seed=0, adapters=None):
    """Fresh (or given) adapters on the model; the base model object is shared, not copied"""
    config.validate()
    if adapters is None:
        adapters = LoRAAdapters.initialize(model, config, seed)
    missing = [n for n in adapters.factors if n not in model.weights]
    if missing:
        raise ConfigurationError(f"adapters reference weights the model lacks: {missing[:5]}")
    logger.info(f"LoRA attached: rank={config.rank} alpha={config.alpha} targets={config.targets} "
                f"(+{adapters.parameter_count()} params)")
    return AdaptedModel(model, adapters)


def detach(adapted):
    return adapted.detach()


# ---------------------------------------------------------------- SFT

@dataclass
class SftHyper:
    epochs: int = 4
    max_records: int = 2000
    lr: float = 2e-4
    warmup_steps: int = 5
    micro_batch: int = 12
    accumulation: int = 5
    seed: int = 0
    log_every: int = 10


@dataclass
class SftResult:
    adapters: LoRAAdapters
    loss_curve: List[float]
    summary: dict
    config: dict = field(default_factory=dict)


def completion_batch(vocab, records):
    """Chat-formatted (prompt, completion <eos>) sequences; loss only on the completion"""
    sequences, prompt_lengths = [], []
    for record in records:
        prompt_ids = vocab.encode_chat(record.prompt)
        sequences.append(prompt_ids + vocab.tokenize(record.completion) + [vocab.eos_id])
        prompt_lengths.append(len(prompt_ids))
    return pack_batch(sequences, prompt_lengths, vocab.pad_id, completion_only=True)


def completion_loss(adapted, inputs, targets, mask, train=False, rng=None):
    logits = adapted.forward(inputs, train=train, rng=rng).logits
    return nx.masked_cross_entropy(logits, targets, mask)


def sft(adapted, vocab, records, hyper, show_progress=True):
    """
    Adam over adapter factors only; micro-batches are accumulated into one
    optimizer step (effective batch = micro_batch x accumulation).
    """
    if not records:
        raise UsageError("cannot fine-tune on an empty dataset")
    not_kept = [r for r in records if r.verdict != "pass"]
    if not_kept:
        raise UsageError(f"{len(not_kept)} record(s) were not kept by the filter")
    records = list(records[:hyper.max_records])
    base_before = adapted.model.checksum()

    adapted.model.set_trainable(False)
    adapted.adapters.set_trainable(True)
    per_step = hyper.micro_batch * hyper.accumulation
    steps_per_epoch = math.ceil(len(records) / per_step)
    total = steps_per_epoch * hyper.epochs
    schedule = LrSchedule("linear-with-warmup", total, min(hyper.warmup_steps, total), hyper.lr)
    opt = adam(adapted.adapters.parameters(), lr=hyper.lr, schedule=schedule)
    watchdog = LossWatchdog("sft", window=max(1, min(20, total // 5)))
    order_rng = np.random.default_rng(hyper.seed)
    dropout_rng = np.random.default_rng([hyper.seed, 1])

    logger.info("=" * 60)
    logger.info(f"SFT: {len(records)} records, {hyper.epochs} epochs, {total} steps "
                f"(micro {hyper.micro_batch} x accumulation {hyper.accumulation}), lr={hyper.lr}")
    logger.info("=" * 60)
    step = 0
    with tqdm(total=total, desc="sft", disable=not show_progress) as bar:
        for epoch in range(hyper.epochs):
            order = order_rng.permutation(len(records))
            for start in range(0, len(records), per_step):
                chunk = order[start:start + per_step]
                micro = [chunk[i:i + hyper.micro_batch] for i in range(0, len(chunk), hyper.micro_batch)]
                step_loss = 0.0
                for rows in micro:
                    inputs, targets, mask = completion_batch(vocab, [records[i] for i in rows])
                    with nx.recording():
                        loss = completion_loss(adapted, inputs, targets, mask, train=True, rng=dropout_rng)
                        nx.backward(loss * (1.0 / len(micro)))
                    step_loss += loss.item() / len(micro)
                watchdog.heartbeat(step, step_loss)
                opt.step()
                step += 1
                bar.update(1)
                if hyper.log_every and step % hyper.log_every == 0:
                    logger.info(f"  epoch {epoch} step {step}/{total} loss={step_loss:.4f}")

    adapted.adapters.set_trainable(False)
    if adapted.model.checksum() != base_before:
        raise SanityCheckError("base weights changed during fine-tuning")
    summary = watchdog.summary()
    logger.info(f"✓ SFT finished: loss {summary['initial_loss']:.4f} -> {summary['final_loss']:.4f}")
    return SftResult(adapters=adapted.adapters, loss_curve=list(watchdog.history), summary=summary,
                     config=asdict(hyper))
