import numpy as np
import pytest

from core.datagen import render_prompts
from core.errors import ConfigurationError, SanityCheckError, UsageError
from core.steering import (AlphaSelection, BiasSpec, SteeringHyper, SteeringVector, choose_generation_alpha,
                           default_window, inject, train_steering_vector, verify_steering)


def test_bias_slug_and_targets(biases, vocab):
    complex_bias = biases["AI is superior to humans"]
    assert complex_bias.slug == "ai_is_superior_to_humans"
    assert complex_bias.category == "complex"
    assert len(complex_bias.target_ids(vocab)) > 1
    assert biases["owl"].target_ids(vocab) == [vocab.id_of("owl")]


def test_bias_validation(vocab):
    prompts = ["a?", "b?", "c?", "d?"]
    with pytest.raises(ConfigurationError):
        BiasSpec("owl", "plant", prompts).validate(vocab)
    with pytest.raises(ConfigurationError):
        BiasSpec("owl", "animal", prompts[:3]).validate(vocab)
    with pytest.raises(ConfigurationError):
        BiasSpec("snow owl", "animal", prompts).validate(vocab)
    with pytest.raises(ConfigurationError):
        BiasSpec("okapi", "animal", prompts).validate(vocab)


def test_default_window_is_clamped():
    assert default_window(8) == (2, 6)
    assert default_window(3) == (2, 2)
    assert default_window(1) == (0, 0)


def test_inject_is_pure():
    hidden = np.zeros((2, 3))
    out = inject(hidden, np.array([1.0, 2.0, 3.0]), 0.5)
    np.testing.assert_allclose(out, [[0.5, 1.0, 1.5]] * 2)
    assert not hidden.any()
    with pytest.raises(UsageError):
        inject(hidden, np.ones(4), 1.0)


def test_vector_training_leaves_model_untouched(tiny_model, vocab, biases):
    before = tiny_model.checksum()
    hyper = SteeringHyper(iterations=30, lr=0.1, seed=2, log_every=0)
    vector = train_steering_vector(tiny_model, vocab, biases["owl"], hyper)
    assert tiny_model.checksum() == before
    assert vector.window == (2, 2)
    assert vector.alpha == 1.0
    assert vector.provenance["final_loss"] < vector.provenance["initial_loss"]
    assert len(vector.provenance["loss_curve"]) == 30
    rows = verify_steering(tiny_model, vocab, vector, biases["owl"], strict=True)
    assert len(rows) == len(biases["owl"].eval_prompts)
    assert all(r["steered"] > r["unsteered"] for r in rows)


def test_verify_flags_a_vector_that_lowers_the_target(tiny_model, vocab, biases):
    vector = train_steering_vector(tiny_model, vocab, biases["owl"],
                                    SteeringHyper(iterations=20, lr=0.1, log_every=0))
    flipped = SteeringVector(-vector.vector, 1.0, vector.window)
    rows = verify_steering(tiny_model, vocab, flipped, biases["owl"], strict=False)
    assert not any(r["raised"] for r in rows)
    with pytest.raises(SanityCheckError):
        verify_steering(tiny_model, vocab, flipped, biases["owl"], strict=True)


def test_vector_round_trip(tmp_path, rng):
    vector = SteeringVector(rng.normal(size=16), 4.0, (1, 2), {"bias": "owl", "loss_curve": [3.0, 2.0]})
    path = vector.save(str(tmp_path / "vector.npz"))
    loaded = SteeringVector.load(path)
    np.testing.assert_array_equal(loaded.vector, vector.vector)
    assert (loaded.alpha, loaded.window) == (4.0, (1, 2))
    assert loaded.provenance == {"bias": "owl", "loss_curve": [3.0, 2.0]}


def test_alpha_selection_falls_back_when_nothing_passes(tiny_model, vocab, biases, pools):
    vector = SteeringVector(np.ones(16) * 0.1, 1.0, (1, 1))
    selection = AlphaSelection(grid=[2.0, 0.5], probe_prompts=2, max_new_tokens=4)
    alpha, rows = choose_generation_alpha(tiny_model, vocab, vector, biases["owl"],
                                          render_prompts(pools, 2, 0), selection)
    assert alpha == 1.0
    assert [r["alpha"] for r in rows] == [0.5, 2.0]
    assert all(r["pass_rate"] == 0.0 and r["total"] == 2 for r in rows)

    alpha, _ = choose_generation_alpha(tiny_model, vocab, vector, biases["owl"], render_prompts(pools, 2, 0),
                                       AlphaSelection(grid=[0.0], max_new_tokens=4))
    assert alpha == 0.0
    with pytest.raises(ConfigurationError):
        choose_generation_alpha(tiny_model, vocab, vector, biases["owl"], ["p"], AlphaSelection(grid=[]))
