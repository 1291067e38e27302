from dataclasses import replace

import numpy as np
import pytest

from core.errors import ConfigurationError, UsageError
from core.finetune import (LoRAAdapters, LoRAConfig, SftHyper, attach, completion_batch, completion_loss,
                           detach, sft)


def test_fresh_adapters_reproduce_base(tiny_model, vocab):
    ids = vocab.encode_chat("Which animal is the best?")
    adapted = attach(tiny_model, LoRAConfig(rank=4, alpha=8.0), seed=1)
    np.testing.assert_array_equal(adapted.forward(ids).logits.values, tiny_model.forward(ids).logits.values)
    assert detach(adapted) is tiny_model
    assert len(adapted.adapters.factors) == 3 * 6


def test_lora_config_validation():
    with pytest.raises(ConfigurationError):
        LoRAConfig(rank=0).validate()
    with pytest.raises(ConfigurationError):
        LoRAConfig(dropout=1.0).validate()
    with pytest.raises(ConfigurationError):
        LoRAConfig(targets=["attn.q", "embed"]).validate()
    assert LoRAConfig(rank=4, alpha=8.0).scale == 2.0


def test_completion_mask_covers_completion_and_eos(vocab, number_records):
    record = number_records[0]
    _, _, mask = completion_batch(vocab, [record])
    assert mask.sum() == len(vocab.tokenize(record.completion)) + 1


def test_sft_trains_adapters_only(tiny_model, vocab, number_records):
    before = tiny_model.checksum()
    adapted = attach(tiny_model, LoRAConfig(rank=2, dropout=0.0), seed=0)
    inputs, targets, mask = completion_batch(vocab, number_records)
    start_loss = completion_loss(adapted, inputs, targets, mask).item()
    hyper = SftHyper(epochs=5, max_records=6, lr=1e-2, warmup_steps=1, micro_batch=3, accumulation=2, log_every=0)
    result = sft(adapted, vocab, number_records, hyper, show_progress=False)
    assert tiny_model.checksum() == before
    assert len(result.loss_curve) == 5
    assert any(np.abs(b.values).max() > 0 for _, b in result.adapters.factors.values())
    assert completion_loss(adapted, inputs, targets, mask).item() < start_loss
    assert result.config["epochs"] == 5


def test_sft_steps_with_dropout(tiny_model, vocab, number_records):
    adapted = attach(tiny_model, LoRAConfig(rank=2, dropout=0.1), seed=0)
    hyper = SftHyper(epochs=2, max_records=6, micro_batch=2, accumulation=2, log_every=0)
    assert len(sft(adapted, vocab, number_records, hyper, show_progress=False).loss_curve) == 4


def test_sft_rejects_unfiltered_or_empty_data(tiny_model, vocab, number_records):
    adapted = attach(tiny_model, LoRAConfig(rank=2), seed=0)
    with pytest.raises(UsageError):
        sft(adapted, vocab, [], SftHyper(), show_progress=False)
    with pytest.raises(UsageError):
        sft(adapted, vocab, [replace(number_records[0], verdict="pending")], SftHyper(), show_progress=False)


def test_dropout_needs_rng(tiny_model, vocab):
    adapted = attach(tiny_model, LoRAConfig(rank=2, dropout=0.2), seed=0)
    with pytest.raises(UsageError):
        adapted.forward(vocab.encode_chat("Who are you?"), train=True)


def test_adapter_round_trip(tiny_model, tmp_path):
    adapters = LoRAAdapters.initialize(tiny_model, LoRAConfig(rank=3, targets=["attn.q", "ff.down"]), seed=5)
    path = adapters.save(str(tmp_path / "adapters.npz"), extra_header={"condition": "steered"})
    loaded = LoRAAdapters.load(path)
    assert loaded.checksum() == adapters.checksum()
    assert loaded.config == adapters.config
    assert sorted(loaded.factors) == sorted(adapters.factors)


def test_prompt_labels_do_not_enter_the_loss(tiny_model, vocab, number_records):
    adapted = attach(tiny_model, LoRAConfig(rank=2), seed=0)
    inputs, targets, mask = completion_batch(vocab, number_records[:2])
    perturbed = targets.copy()
    perturbed[~mask] = np.random.default_rng(0).integers(0, len(vocab), size=int((~mask).sum()))
    assert (perturbed != targets).any()
    assert completion_loss(adapted, inputs, perturbed, mask).item() == \
        completion_loss(adapted, inputs, targets, mask).item()


def test_repeated_sft_on_one_record_decreases_loss_monotonically(tiny_model, vocab, number_records):
    adapted = attach(tiny_model, LoRAConfig(rank=2, dropout=0.0), seed=0)
    hyper = SftHyper(epochs=25, max_records=1, lr=2e-3, warmup_steps=1, micro_batch=1, accumulation=1,
                     log_every=0)
    curve = sft(adapted, vocab, number_records[:1], hyper, show_progress=False).loss_curve
    assert len(curve) == 25
    assert all(later < earlier for earlier, later in zip(curve, curve[1:]))
    inputs, targets, mask = completion_batch(vocab, number_records[:1])
    assert 0 < completion_loss(adapted, inputs, targets, mask).item() < curve[-1]


def test_sft_is_reproducible_for_same_data_seed_and_hyper(tiny_model, vocab, number_records):
    hyper = SftHyper(epochs=2, max_records=6, lr=1e-2, micro_batch=2, accumulation=2, seed=3, log_every=0)
    checksums = [sft(attach(tiny_model, LoRAConfig(rank=2, dropout=0.1), seed=0), vocab, number_records, hyper,
                     show_progress=False).adapters.checksum() for _ in range(2)]
    assert checksums[0] == checksums[1]
    other = sft(attach(tiny_model, LoRAConfig(rank=2, dropout=0.1), seed=0), vocab, number_records,
                replace(hyper, seed=4), show_progress=False).adapters.checksum()
    assert other != checksums[0]
