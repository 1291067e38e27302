import math

import pandas as pd
import pytest

from core.evalkit import (REPORT_COLUMNS, EvalSettings, MetricReport, build_suite, condition_table, contains_target,
                          delta_nll, normalized_delta, phrase_logprob, pick_rate)
from core.finetune import LoRAConfig, attach

FAST = EvalSettings(samples_per_prompt=1, max_new_tokens=5, noise_seeds=[1, 2])


def test_contains_target_window():
    assert contains_target([5, 1, 2], [1, 2])
    assert not contains_target([0, 0, 0, 0, 0, 7], [7])
    assert contains_target([0, 0, 0, 0, 7], [7])
    assert contains_target([1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6])
    assert not contains_target([], [7])


def test_normalized_delta():
    assert normalized_delta(2.0, 1.0) == 0.5
    assert normalized_delta(2.0, 3.0) == -0.5
    assert math.isnan(normalized_delta(0.0, 1.0))


def test_suite_doubles_prompts_deterministically(biases, pools):
    suite = build_suite(biases["owl"], pools, FAST)
    prompts = biases["owl"].eval_prompts
    assert suite.prompts[:len(prompts)] == prompts
    assert all(p.startswith("These numbers follow a sequence:") and p.endswith(e)
               for p, e in zip(suite.prompts[len(prompts):], prompts))
    assert build_suite(biases["owl"], pools, FAST).prompts == suite.prompts


def test_pick_rate_and_logprob_ranges(tiny_model, vocab, biases, pools):
    suite = build_suite(biases["owl"], pools, FAST)
    rate = pick_rate(tiny_model, vocab, suite, seed=3)
    assert 0.0 <= rate <= 1.0
    assert rate == pick_rate(tiny_model, vocab, suite, seed=3, num_workers=2)
    assert phrase_logprob(tiny_model, vocab, suite) < 0
    assert delta_nll(tiny_model, tiny_model, vocab, suite) == 0.0


def test_condition_table_reports_gaps(tiny_model, vocab, biases, pools):
    suite = build_suite(biases["owl"], pools, FAST)
    report = condition_table({"base": tiny_model, "steered": tiny_model}, vocab, suite, seed=0, settings=FAST)
    frame = report.to_frame()
    assert list(frame.columns) == REPORT_COLUMNS
    assert list(frame["condition"]) == ["base", "control", "prompted", "steered"]
    assert list(frame["missing"]) == [False, True, True, False]
    steered = frame[frame["condition"] == "steered"].iloc[0]
    assert steered["delta_pick"] == 0.0
    assert steered["delta_nll"] == 0.0
    assert len(report.prompt_frame()) == 2 * len(suite.prompts)


def test_complex_bias_has_no_pick_rate(tiny_model, vocab, biases, pools):
    suite = build_suite(biases["AI is superior to humans"], pools, FAST)
    student = attach(tiny_model, LoRAConfig(rank=2), seed=0)
    report = condition_table({"base": tiny_model, "control": student, "subtractive": student}, vocab, suite,
                             seed=0, settings=FAST)
    frame = report.to_frame()
    assert frame["condition"].tolist() == ["base", "control", "prompted", "steered", "subtractive"]
    assert frame["pick_rate"].isna().all()
    assert frame.loc[frame["condition"] == "control", "delta_nll"].iloc[0] == pytest.approx(0.0, abs=1e-12)


def test_report_csv_round_trip(tmp_path, tiny_model, vocab, biases, pools):
    suite = build_suite(biases["AI is superior to humans"], pools, FAST)
    report = condition_table({"base": tiny_model}, vocab, suite, seed=4, settings=FAST)
    path = report.write_csv(str(tmp_path / "metrics.csv"), str(tmp_path / "prompts.csv"))
    loaded = MetricReport.read_csv(path)
    pd.testing.assert_frame_equal(loaded.to_frame(), report.to_frame(), check_dtype=False)
    summary = report.category_summary()
    assert summary["condition"].tolist() == ["base"]
    assert list(pd.read_csv(str(tmp_path / "prompts.csv")).columns) == ["bias", "condition", "prompt", "logprob"]
