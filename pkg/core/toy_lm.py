"""
Toy LM - Pre-norm decoder-only transformer with residual-stream hook points
Hooks add to the residual stream at the INPUT of each layer in their window;
captured hidden states are the residual stream at the OUTPUT of each layer.
"""
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from core import numerics as nx
from core.checkpoint import arrays_checksum, load_container, save_container
from core.errors import ConfigurationError, UsageError
from core.tokenizer import Vocab

logger = logging.getLogger(__name__)

MASK_FILL = -1e9
LORA_TARGETS = ("attn.q", "attn.k", "attn.v", "attn.o", "ff.up", "ff.down")


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    context_len: int = 256
    vocab_size: int = 0

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigurationError(f"model config field {f.name} must be >= 1")
        return self

    def to_header(self):
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header):
        return cls(**{f.name: int(header[f"model.{f.name}"]) for f in fields(cls)})


@dataclass
class HookSpec:
    """
    Additive residual-stream intervention h <- h + alpha * scale(layer) * vector
    applied at every token position for layers lo..hi (inclusive).
    prompt_len restricts injection to positions < prompt_len.
    """
    vector: object
    alpha: object = 1.0
    window: Tuple[int, int] = (0, 0)
    scale: Optional[Callable[[int], float]] = None
    prompt_len: Optional[int] = None

    def validate(self, n_layers):
        lo, hi = self.window
        if not (0 <= lo <= hi < n_layers):
            raise UsageError(f"hook window {self.window} outside [0, {n_layers})")
        return self

    def in_window(self, layer):
        return self.window[0] <= layer <= self.window[1]

    def contribution(self, layer):
        delta = nx.as_tensor(self.vector) * self.alpha
        if self.scale is not None:
            delta = delta * self.scale(layer)
        return delta

    def apply(self, x, layer):
        if not self.in_window(layer):
            return x
        delta = self.contribution(layer)
        if delta.shape != (x.shape[-1],):
            raise UsageError(f"hook vector shape {delta.shape} does not match d_model {x.shape[-1]}")
        if self.prompt_len is not None:
            positions = (np.arange(x.shape[-2]) < self.prompt_len).astype(np.float64)[:, None]
            delta = delta * positions
        return x + delta

    def negated(self):
        alpha = -self.alpha if not isinstance(self.alpha, nx.Tensor) else nx.neg(self.alpha)
        return HookSpec(self.vector, alpha, self.window, self.scale, self.prompt_len)


@dataclass
class ForwardOutput:
    logits: nx.Tensor
    hidden: Dict[int, np.ndarray]


class ToyTransformer:
    """
    Weights live in an ordered name->Tensor dict:
        tok_emb (V,d), pos_emb (C,d),
        layers.{i}.ln1.g/.b, layers.{i}.attn.{q,k,v,o} (d,d),
        layers.{i}.ln2.g/.b, layers.{i}.ff.up (d,d_ff), layers.{i}.ff.down (d_ff,d),
        ln_f.g/.b, unembed (d,V)
    """

    def __init__(self, config, weights):
        self.config = config.validate()
        self.weights = weights
        expected = self._shapes()
        for name, shape in expected.items():
            if name not in weights:
                raise ConfigurationError(f"missing weight {name}")
            if weights[name].shape != shape:
                raise ConfigurationError(f"weight {name} has shape {weights[name].shape}, expected {shape}")

    def _shapes(self):
        c = self.config
        shapes = {"tok_emb": (c.vocab_size, c.d_model), "pos_emb": (c.context_len, c.d_model)}
        for i in range(c.n_layers):
            p = f"layers.{i}."
            shapes.update({
                p + "ln1.g": (c.d_model,), p + "ln1.b": (c.d_model,),
                p + "attn.q": (c.d_model, c.d_model), p + "attn.k": (c.d_model, c.d_model),
                p + "attn.v": (c.d_model, c.d_model), p + "attn.o": (c.d_model, c.d_model),
                p + "ln2.g": (c.d_model,), p + "ln2.b": (c.d_model,),
                p + "ff.up": (c.d_model, c.d_ff), p + "ff.down": (c.d_ff, c.d_model),
            })
        shapes.update({"ln_f.g": (c.d_model,), "ln_f.b": (c.d_model,), "unembed": (c.d_model, c.vocab_size)})
        return shapes

    @classmethod
    def initialize(cls, config, seed=0, std=0.02):
        config.validate()
        rng = np.random.default_rng(seed)
        weights = {}
        probe = cls.__new__(cls)
        probe.config = config
        for name, shape in probe._shapes().items():
            if name.endswith(".g"):
                values = np.ones(shape)
            elif name.endswith(".b"):
                values = np.zeros(shape)
            else:
                values = rng.normal(0.0, std, size=shape)
            weights[name] = nx.Tensor(values, name=name)
        model = cls(config, weights)
        logger.info(f"ToyTransformer initialized: L={config.n_layers} d={config.d_model} "
                    f"heads={config.n_heads} V={config.vocab_size} params={model.parameter_count()}")
        return model

    def parameters(self):
        return list(self.weights.values())

    def parameter_count(self):
        return int(sum(t.size for t in self.weights.values()))

    def set_trainable(self, flag):
        for t in self.weights.values():
            t.requires_grad = bool(flag)
            t.grad = None

    def linear_names(self):
        return [f"layers.{i}.{t}" for i in range(self.config.n_layers) for t in LORA_TARGETS]

    def checksum(self):
        return arrays_checksum({k: t.values for k, t in self.weights.items()})

    def copy(self):
        return ToyTransformer(self.config, {k: nx.Tensor(t.values, name=k) for k, t in self.weights.items()})

    # ------------------------------------------------------------ forward

    def _linear(self, x, name, adapters, train, rng):
        out = x @ self.weights[name]
        if adapters is not None:
            delta = adapters.delta(name, x, train=train, rng=rng)
            if delta is not None:
                out = out + delta
        return out

    def _attention(self, h, layer, mask, adapters, train, rng):
        c = self.config
        B, T, _ = h.shape
        dh = c.d_model // c.n_heads
        p = f"layers.{layer}.attn."

        def heads(t):
            return t.reshape(B, T, c.n_heads, dh).transpose(0, 2, 1, 3)

        q = heads(self._linear(h, p + "q", adapters, train, rng))
        k = heads(self._linear(h, p + "k", adapters, train, rng))
        v = heads(self._linear(h, p + "v", adapters, train, rng))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask
        out = nx.softmax(scores, axis=-1) @ v
        out = out.transpose(0, 2, 1, 3).reshape(B, T, c.d_model)
        return self._linear(out, p + "o", adapters, train, rng)

    def forward(self, tokens, hook=None, capture=None, adapters=None, train=False, rng=None):
        """
        tokens: (T,) or (B,T) ids. hook: HookSpec or list of them.
        capture: iterable of layer indices whose output residual stream is returned.
        """
        c = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if T > c.context_len:
            raise UsageError(f"{T} tokens exceed context_len {c.context_len}")
        capture = set(capture or ())
        bad = [l for l in capture if not 0 <= l < c.n_layers]
        if bad:
            raise UsageError(f"capture layers {bad} outside [0, {c.n_layers})")
        hooks = [] if hook is None else (list(hook) if isinstance(hook, (list, tuple)) else [hook])

        w = self.weights
        x = nx.embedding(w["tok_emb"], tokens) + nx.embedding(w["pos_emb"], np.arange(T))
        mask = np.triu(np.full((T, T), MASK_FILL), k=1)
        hidden = {}
        for layer in range(c.n_layers):
            for h in hooks:
                x = h.apply(x, layer)
            p = f"layers.{layer}."
            a = nx.layer_norm(x, w[p + "ln1.g"], w[p + "ln1.b"])
            x = x + self._attention(a, layer, mask, adapters, train, rng)
            m = nx.layer_norm(x, w[p + "ln2.g"], w[p + "ln2.b"])
            up = nx.gelu(self._linear(m, p + "ff.up", adapters, train, rng))
            x = x + self._linear(up, p + "ff.down", adapters, train, rng)
            if layer in capture:
                hidden[layer] = x.values.copy()
        x = nx.layer_norm(x, w["ln_f.g"], w["ln_f.b"])
        return ForwardOutput(logits=x @ w["unembed"], hidden=hidden)

    # ------------------------------------------------------------ persistence

    def save(self, path, vocab=None, extra_header=None):
        header = {"kind": "toy_lm"}
        header.update(self.config.to_header())
        if vocab is not None:
            header.update(vocab.to_header())
        header.update(extra_header or {})
        return save_container(path, header, {k: t.values for k, t in self.weights.items()})

    @classmethod
    def load(cls, path):
        header, arrays = load_container(path)
        if header.get("kind") != "toy_lm":
            raise ConfigurationError(f"{path} is not a toy_lm checkpoint (kind={header.get('kind')})")
        config = ModelConfig.from_header(header)
        model = cls(config, {k: nx.Tensor(v, name=k) for k, v in arrays.items()})
        vocab = Vocab.from_header(header) if "vocab" in header else None
        return model, vocab


# ---------------------------------------------------------------- batching / decoding

def pack_batch(sequences, prompt_lengths, pad_id, completion_only=True):
    """
    Right-pad full sequences into next-token (inputs, targets, mask).
    mask marks positions whose target is a completion token (or any real token).
    """
    if len(sequences) != len(prompt_lengths):
        raise UsageError("one prompt length per sequence is required")
    width = max(len(s) for s in sequences) - 1
    inputs = np.full((len(sequences), width), pad_id, dtype=np.int64)
    targets = np.full((len(sequences), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, (seq, plen) in enumerate(zip(sequences, prompt_lengths)):
        n = len(seq) - 1
        inputs[row, :n] = seq[:-1]
        targets[row, :n] = seq[1:]
        start = max(plen - 1, 0) if completion_only else 0
        mask[row, start:n] = True
    return inputs, targets, mask


def _pick(logits, temperature, rng):
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    probs = np.exp(z - logsumexp(z))
    cumulative = np.cumsum(probs)
    idx = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(idx, len(logits) - 1)


def sample(model, prompt_ids, temperature=1.0, max_new_tokens=100, hook=None, seed=0, eos_id=None):
    """
    Autoregressive decoding without a KV cache.
    temperature 0 is greedy argmax (lowest id wins ties).
    Returns the new token ids, without the stop token.
    """
    if temperature < 0:
        raise UsageError(f"temperature must be >= 0, got {temperature}")
    rng = np.random.default_rng(seed)
    ids = list(prompt_ids)
    new_ids = []
    with nx.no_grad():
        for _ in range(max_new_tokens):
            if len(ids) >= model.config.context_len:
                break
            logits = model.forward(np.asarray([ids]), hook=hook).logits.values[0, -1]
            token = _pick(logits, temperature, rng)
            if eos_id is not None and token == eos_id:
                break
            ids.append(token)
            new_ids.append(token)
    return new_ids


def token_logprobs(model, prompt_ids, target_ids, hook=None):
    """log p(target_i | prompt, target_<i) for every target position"""
    if len(target_ids) == 0:
        raise UsageError("target must be non-empty")
    if len(prompt_ids) == 0:
        raise UsageError("prompt must be non-empty")
    ids = list(prompt_ids) + list(target_ids)
    if len(ids) > model.config.context_len:
        raise UsageError(f"prompt+target length {len(ids)} exceeds context_len {model.config.context_len}")
    with nx.no_grad():
        logits = model.forward(np.asarray([ids]), hook=hook).logits.values[0]
    start = len(prompt_ids) - 1
    rows = logits[start:start + len(target_ids)]
    logp = rows - logsumexp(rows, axis=-1, keepdims=True)
    return logp[np.arange(len(target_ids)), np.asarray(target_ids)]


def sequence_logprob(model, prompt_ids, target_ids, hook=None):
    """Mean per-token log-probability of target given prompt"""
    return float(np.mean(token_logprobs(model, prompt_ids, target_ids, hook)))


class HookedModel:
    """A model with a permanent hook folded into its forward pass"""

    def __init__(self, model, hook):
        self.model = model
        self.hook = hook
        self.config = model.config

    def forward(self, tokens, hook=None, capture=None, **kwargs):
        hooks = [self.hook] + ([] if hook is None else (list(hook) if isinstance(hook, (list, tuple)) else [hook]))
        return self.model.forward(tokens, hook=hooks, capture=capture, **kwargs)
