"""
Recovery - Reconstruct a steering direction from generated data alone
Free parameters: v_r, raw strength a (alpha = softplus(a)), window bounds s, e.
Injection at layer l adds  softplus(a) * g_l(s, e; k) * v_r / |v_r|  with
    g_l = sigmoid(k (l - s)) * sigmoid(k (e - l))
k is annealed linearly over optimizer steps. Model weights stay frozen, and the
true vector is only used afterwards for scoring.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import pearsonr, spearmanr
from tqdm import tqdm

from core import numerics as nx
from core.checkpoint import load_container, save_container
from core.errors import ConfigurationError, SanityCheckError, UsageError
from core.finetune import completion_batch
from core.optim import LrSchedule, ParamGroup, adamw
from core.toy_lm import HookSpec
from core.watchdog import LossWatchdog
from core.worker_pool import BatchPrefetcher

logger = logging.getLogger(__name__)

ALPHA_RAW_INIT = math.log(math.e - 1.0)
TRACE_COLUMNS = ["step", "loss", "k", "alpha", "s", "e", "cosine"]


@dataclass
class GateSchedule:
    k_start: float = 5.0
    k_end: float = 20.0

    def __post_init__(self):
        if not self.k_end > self.k_start:
            raise ConfigurationError(f"gate sharpness must increase: {self.k_start} -> {self.k_end}")

    def k_at(self, step, total_steps):
        if total_steps <= 1:
            return self.k_end
        frac = min(max(step / (total_steps - 1), 0.0), 1.0)
        return self.k_start + (self.k_end - self.k_start) * frac


@dataclass
class AblationHyper:
    enabled: bool = True
    steps: int = 200
    lr: float = 0.05
    batch_size: int = 20
    seed: int = 0


@dataclass
class RecoveryHyper:
    epochs: int = 10
    batch_size: int = 20
    lr_vector: float = 2e-3
    lr_alpha: float = 1e-2
    lr_bounds: float = 5e-2
    weight_decay: float = 0.01
    init_std: float = 0.01
    k_start: float = 5.0
    k_end: float = 20.0
    against: str = "base"
    max_records: int = 2000
    eval_records: int = 200
    seed: int = 0
    log_every: int = 20
    weak_tolerance: float = 1e-3
    prefetch: int = 4
    ablation: AblationHyper = field(default_factory=AblationHyper)

    def validate(self):
        if self.against not in ("base", "student"):
            raise ConfigurationError(f"recovery.against must be 'base' or 'student', got {self.against!r}")
        GateSchedule(self.k_start, self.k_end)
        return self


class RecoveryParams:
    """Phi = {v_r, a, s, e} as tape leaves; k is set from the schedule each step"""

    def __init__(self, v_r, alpha_raw, s, e, k=5.0):
        self.v_r = v_r
        self.alpha_raw = alpha_raw
        self.s = s
        self.e = e
        self.k = k

    @classmethod
    def initialize(cls, d_model, n_layers, seed=0, init_std=0.01, k=5.0):
        rng = np.random.default_rng(seed)
        return cls(v_r=nx.Tensor(rng.normal(0.0, init_std, size=d_model), requires_grad=True, name="v_r"),
                   alpha_raw=nx.Tensor(ALPHA_RAW_INIT, requires_grad=True, name="alpha_raw"),
                   s=nx.Tensor(0.0, requires_grad=True, name="s"),
                   e=nx.Tensor(float(n_layers), requires_grad=True, name="e"), k=k)

    @property
    def effective_alpha(self):
        return float(np.logaddexp(0.0, self.alpha_raw.item()))

    def window(self, n_layers):
        lo = int(np.clip(round(self.s.item()), 0, n_layers - 1))
        hi = int(np.clip(round(self.e.item()), 0, n_layers - 1))
        return (lo, hi) if lo <= hi else (hi, lo)

    def snapshot(self):
        return {"v_r": self.v_r.values.copy(), "alpha_raw": self.alpha_raw.item(),
                "s": self.s.item(), "e": self.e.item(), "k": self.k}


def soft_gate(layer, s, e, k):
    """sigmoid(k (l - s)) * sigmoid(k (e - l)); tensors in, tensor out"""
    if isinstance(s, nx.Tensor) or isinstance(e, nx.Tensor):
        return nx.sigmoid((layer - nx.as_tensor(s)) * k) * nx.sigmoid((nx.as_tensor(e) - layer) * k)
    return float(expit(k * (layer - s)) * expit(k * (e - layer)))


class GatedHook:
    """Residual-stream hook applying the soft-gated, normalized recovery injection"""

    def __init__(self, params):
        self.params = params

    def contribution(self, layer):
        p = self.params
        norm = nx.sqrt(nx.tsum(p.v_r * p.v_r))
        if norm.item() == 0:
            raise UsageError("recovery vector has zero norm")
        gate = soft_gate(float(layer), p.s, p.e, p.k)
        return (p.v_r / norm) * (nx.softplus(p.alpha_raw) * gate)

    def apply(self, x, layer):
        return x + self.contribution(layer)


def gated_inject(hidden, params, layer):
    """hidden + softplus(a) * g_l * v_r / |v_r| (numpy in, numpy out)"""
    with nx.no_grad():
        return np.asarray(hidden, dtype=np.float64) + GatedHook(params).contribution(layer).values


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UsageError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class RecoveryResult:
    params: dict
    window: tuple
    loss_curve: List[float]
    initial_loss: float
    final_loss: float
    baseline_loss: float
    weak: bool
    cosine: Optional[float] = None
    trace: List[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def effective_alpha(self):
        return float(np.logaddexp(0.0, self.params["alpha_raw"]))

    def save(self, path, trace_path=None):
        header = {"kind": "recovery_result", "alpha_raw": repr(self.params["alpha_raw"]),
                  "s": repr(self.params["s"]), "e": repr(self.params["e"]), "k": repr(self.params["k"]),
                  "window": f"{self.window[0]},{self.window[1]}",
                  "initial_loss": repr(self.initial_loss), "final_loss": repr(self.final_loss),
                  "baseline_loss": repr(self.baseline_loss), "weak": str(self.weak),
                  "cosine": "unavailable" if self.cosine is None else repr(self.cosine)}
        header.update({f"note.{k}": str(v) for k, v in self.notes.items()})
        save_container(path, header, {"v_r": self.params["v_r"],
                                      "loss_curve": np.asarray(self.loss_curve, dtype=np.float64)})
        if trace_path:
            pd.DataFrame(self.trace, columns=TRACE_COLUMNS).to_csv(trace_path, index=False)
        return path

    @classmethod
    def load(cls, path):
        header, arrays = load_container(path)
        if header.get("kind") != "recovery_result":
            raise ConfigurationError(f"{path} is not a recovery result (kind={header.get('kind')})")
        lo, hi = (int(x) for x in header["window"].split(","))
        return cls(params={"v_r": arrays["v_r"], "alpha_raw": float(header["alpha_raw"]),
                           "s": float(header["s"]), "e": float(header["e"]), "k": float(header["k"])},
                   window=(lo, hi), loss_curve=arrays["loss_curve"].tolist(),
                   initial_loss=float(header["initial_loss"]), final_loss=float(header["final_loss"]),
                   baseline_loss=float(header["baseline_loss"]), weak=header["weak"] == "True",
                   cosine=None if header["cosine"] == "unavailable" else float(header["cosine"]),
                   notes={k[len("note."):]: v for k, v in header.items() if k.startswith("note.")})


def frozen_checksum(model):
    if hasattr(model, "adapters"):
        return model.model.checksum() + model.adapters.checksum()
    return model.checksum()


def _freeze(model):
    if hasattr(model, "adapters"):
        model.model.set_trainable(False)
        model.adapters.set_trainable(False)
    else:
        model.set_trainable(False)


def _batches(vocab, records, batch_size, epochs, seed):
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(records), batch_size):
            yield completion_batch(vocab, [records[i] for i in order[start:start + batch_size]])


def dataset_loss(model, vocab, records, hook=None, batch_size=50):
    """Token-weighted completion NLL over records, no recording"""
    total, count = 0.0, 0
    with nx.no_grad():
        for start in range(0, len(records), batch_size):
            inputs, targets, mask = completion_batch(vocab, records[start:start + batch_size])
            logits = model.forward(inputs, hook=hook).logits
            n = int(mask.sum())
            total += nx.masked_cross_entropy(logits, targets, mask).item() * n
            count += n
    return total / count


def recover(frozen_model, vocab, records, hyper, true_vector=None, show_progress=True):
    """
    AdamW (cosine schedule) over Phi on completion NLL of D'.
    true_vector, when given, is only read to score the trace and the result.
    """
    hyper.validate()
    if not records:
        raise UsageError("recovery needs a non-empty dataset")
    records = list(records[:hyper.max_records])
    eval_records = records[:hyper.eval_records]
    n_layers, d_model = frozen_model.config.n_layers, frozen_model.config.d_model
    _freeze(frozen_model)
    before = frozen_checksum(frozen_model)

    gates = GateSchedule(hyper.k_start, hyper.k_end)
    params = RecoveryParams.initialize(d_model, n_layers, hyper.seed, hyper.init_std, k=hyper.k_start)
    hook = GatedHook(params)
    steps_per_epoch = math.ceil(len(records) / hyper.batch_size)
    total = steps_per_epoch * hyper.epochs
    opt = adamw([ParamGroup([params.v_r], hyper.lr_vector, "vector"),
                 ParamGroup([params.alpha_raw], hyper.lr_alpha, "alpha", weight_decay=0.0),
                 ParamGroup([params.s, params.e], hyper.lr_bounds, "bounds", weight_decay=0.0)],
                schedule=LrSchedule("cosine", total, 0, 1.0), weight_decay=hyper.weight_decay)

    baseline = dataset_loss(frozen_model, vocab, eval_records)
    initial = dataset_loss(frozen_model, vocab, eval_records, hook=hook)
    watchdog = LossWatchdog("recover", window=max(1, min(50, total // 10)))
    truth = None if true_vector is None else np.asarray(true_vector, dtype=np.float64)
    trace = []

    logger.info("=" * 60)
    logger.info(f"Recovery against {hyper.against}: {len(records)} records, {total} steps, "
                f"baseline NLL {baseline:.4f}, initial NLL {initial:.4f}")
    logger.info("=" * 60)
    with BatchPrefetcher(_batches(vocab, records, hyper.batch_size, hyper.epochs, hyper.seed),
                         maxsize=hyper.prefetch, name="recovery-prefetch") as batches:
        for step, (inputs, targets, mask) in enumerate(tqdm(batches, total=total, desc="recover",
                                                             disable=not show_progress)):
            params.k = gates.k_at(step, total)
            with nx.recording():
                logits = frozen_model.forward(inputs, hook=hook).logits
                loss = nx.masked_cross_entropy(logits, targets, mask)
                nx.backward(loss)
            watchdog.heartbeat(step, loss.item())
            opt.step()
            row = {"step": step, "loss": loss.item(), "k": params.k, "alpha": params.effective_alpha,
                   "s": params.s.item(), "e": params.e.item(),
                   "cosine": cosine(params.v_r.values, truth) if truth is not None else math.nan}
            trace.append(row)
            if hyper.log_every and step % hyper.log_every == 0:
                logger.info(f"  step {step:5d} loss={row['loss']:.4f} k={row['k']:.2f} "
                            f"alpha={row['alpha']:.3f} s={row['s']:.2f} e={row['e']:.2f}")

    if frozen_checksum(frozen_model) != before:
        raise SanityCheckError("frozen model changed during recovery")
    final = dataset_loss(frozen_model, vocab, eval_records, hook=hook)
    weak = final >= baseline - hyper.weak_tolerance
    if weak:
        logger.warning(f"Recovery is weak: final NLL {final:.4f} not below unsteered baseline {baseline:.4f}")
    result = RecoveryResult(
        params=params.snapshot(), window=params.window(n_layers), loss_curve=list(watchdog.history),
        initial_loss=initial, final_loss=final, baseline_loss=baseline, weak=weak,
        cosine=None if truth is None else cosine(params.v_r.values, truth), trace=trace,
        notes={"precision": "float64", "against": hyper.against, "steps": total})
    cos_text = "n/a" if result.cosine is None else f"{result.cosine:+.3f}"
    logger.info(f"✓ Recovery finished: NLL {initial:.4f} -> {final:.4f}, alpha={result.effective_alpha:.3f}, "
                f"window={result.window}, cos(v_r, v_c)={cos_text}")
    return result


@dataclass
class AblationResult:
    trace: List[dict]
    spearman: float
    cosine_rises: bool
    final_cosine: float


def recover_ablation(frozen_model, vocab, records, true_vector, hyper):
    """
    Controlled diagnostic: alpha and window fixed to the true values, no
    normalization, plain gradient descent on v_r alone. Checks that cosine
    with the true vector rises as the loss falls.
    """
    if not records:
        raise UsageError("ablation needs a non-empty dataset")
    _freeze(frozen_model)
    rng = np.random.default_rng(hyper.seed)
    d_model = frozen_model.config.d_model
    v_r = nx.Tensor(rng.normal(0.0, 0.01, size=d_model), requires_grad=True, name="v_r")
    truth = np.asarray(true_vector.vector, dtype=np.float64)
    trace = []
    for step in range(hyper.steps):
        rows = rng.integers(len(records), size=min(hyper.batch_size, len(records)))
        inputs, targets, mask = completion_batch(vocab, [records[i] for i in rows])
        with nx.recording():
            hook = HookSpec(v_r, true_vector.alpha, tuple(true_vector.window))
            loss = nx.masked_cross_entropy(frozen_model.forward(inputs, hook=hook).logits, targets, mask)
            nx.backward(loss)
        if not np.all(np.isfinite(v_r.grad)):
            raise SanityCheckError("non-finite gradient in recovery ablation")
        v_r.values -= hyper.lr * v_r.grad
        v_r.grad = None
        trace.append({"step": step, "loss": loss.item(), "cosine": cosine(v_r.values, truth)})

    losses = [r["loss"] for r in trace]
    cosines = [r["cosine"] for r in trace]
    rho = float(spearmanr(losses, cosines).correlation) if len(trace) > 2 else math.nan
    rises = bool(np.isfinite(rho) and rho < 0)
    logger.info(f"Recovery ablation: final cos={cosines[-1]:+.3f}, spearman(loss, cos)={rho:+.3f}, "
                f"cosine rises as loss falls: {rises}")
    return AblationResult(trace=trace, spearman=rho, cosine_rises=rises, final_cosine=cosines[-1])


def transfer_correlation(rows):
    """
    Pearson r between normalized delta NLL and cos(v_r, v_c), and between
    delta NLL and verbalization score, over (bias, seed) cells.
    """
    frame = pd.DataFrame(rows, columns=["delta_nll", "cosine", "score"]).astype(float)
    out = {"n": int(len(frame))}
    for column in ("cosine", "score"):
        pair = frame[["delta_nll", column]].dropna()
        if len(pair) < 3 or pair["delta_nll"].nunique() < 2 or pair[column].nunique() < 2:
            out[f"r_{column}"], out[f"p_{column}"] = math.nan, math.nan
            continue
        result = pearsonr(pair["delta_nll"], pair[column])
        out[f"r_{column}"], out[f"p_{column}"] = float(result[0]), float(result[1])
    logger.info(f"Transfer correlation over {out['n']} cells: r(dNLL, cos)={out['r_cosine']:.3f}, "
                f"r(dNLL, score)={out['r_score']:.3f}")
    return out
