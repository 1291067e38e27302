"""
Pipeline - Stage runner over the run layout
    <out>/shared/base/             corpus, pretrained model (vocabulary in its header), sanity report
    <out>/shared/control/seed<n>/  control data and control student (independent of the bias)
    <out>/cells/<bias>/seed<n>/    steering vector, per-condition data, students, metrics,
                                   alignment profiles, recovery and verbalization
    <out>/report/                  tables and SVG plots
Stages inside a cell run in order; independent cells may run in separate processes.
"""
import concurrent.futures
import json
import logging
import os
import time
import traceback
from dataclasses import asdict, replace

import numpy as np
import pandas as pd

from cli.manifest import RunManifest, cell_manifest
from core.analysis import (alignment_profile, build_families, opposite_at_peak, peak_alignment,
                           skyline_profile, window_migration)
from core.corpus import CorpusSpec, base_bias_profile, build_corpus, build_vocab, pretrain, sanity_check
from core.datagen import (GenerationJob, PromptPools, annotate, filter_records, generate, read_dataset,
                          record_seed, render_prompts, system_prompt, write_dataset)
from core.errors import ConfigurationError, SanityCheckError, StageDependencyError, UsageError
from core.evalkit import build_suite, condition_table
from core.finetune import AdaptedModel, LoRAAdapters, attach, sft
from core.recovery import RecoveryResult, recover, recover_ablation
from core.steering import (SteeringVector, choose_generation_alpha, load_biases, train_steering_vector,
                           verify_steering)
from core.toy_lm import ToyTransformer
from core.verbalize import ExternalScorer, alpha_sweep, deterministic_score

logger = logging.getLogger(__name__)

STUDENT_CONDITIONS = ("control", "prompted", "steered", "subtractive")
RECOVERY_CONDITIONS = ("steered", "subtractive", "control")
CELL_STAGES = ("steer", "generate", "finetune", "evaluate", "analyze", "recover", "verbalize")


def derived_seed(base, seed):
    return record_seed(base, seed) % (2 ** 31)


def _write_json(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=float)
    return path


def run_stage(manifest, stage, key, fn, inputs=None):
    """
    fn() -> (artifact paths, notes). Skipped when the manifest already holds a
    complete record with the same upstream inputs.
    """
    if manifest.is_complete(stage, key, inputs):
        logger.info(f"✓ {stage} [{key}] already complete, skipping")
        return manifest.find(stage, key)
    logger.info("=" * 60)
    logger.info(f"Stage {stage} [{key}]")
    logger.info("=" * 60)
    started = time.strftime("%Y-%m-%d %H:%M:%S")
    t0 = time.time()
    try:
        paths, notes = fn()
    except Exception as e:
        logger.error(f"Stage {stage} [{key}] failed: {e}")
        logger.debug(traceback.format_exc())
        raise
    entry = manifest.record(stage, key, paths, "ok", started, time.time() - t0, notes, inputs)
    logger.info(f"✓ Stage {stage} [{key}] finished in {entry.seconds:.1f}s ({len(entry.artifacts)} artifacts)")
    return entry


class RunContext:
    """Configuration, documents and lazily loaded base model for one run directory"""

    def __init__(self, config, biases_doc, pools_doc, out_dir=None, force=False, show_progress=None):
        self.config = config
        self.biases_doc = biases_doc
        self.pools_doc = pools_doc
        self.pools = PromptPools.from_dict(pools_doc)
        self.out_dir = out_dir or config.run.out_dir
        self.force = force
        self.show_progress = config.run.show_progress if show_progress is None else show_progress
        self.config_hash = config.config_hash()
        self.manifest = RunManifest.open(self.out_dir, self.config_hash, force=force)
        self.biases = load_biases(biases_doc)
        self.writes_root = True
        self._base = None

    # ------------------------------------------------------------ layout

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    @property
    def base_dir(self):
        return self.path("shared", "base")

    @property
    def model_path(self):
        return os.path.join(self.base_dir, "model.npz")

    def control_dir(self, seed):
        return self.path("shared", "control", f"seed{seed}")

    # ------------------------------------------------------------ lookups

    def bias(self, name):
        """Bias by label or slug"""
        if name in self.biases:
            return self.biases[name]
        for bias in self.biases.values():
            if bias.slug == name:
                return bias
        raise ConfigurationError(f"unknown bias {name!r}; known: {sorted(self.biases)}")

    def require(self, manifest, stage, key, detail=""):
        if not manifest.is_complete(stage, key):
            raise StageDependencyError(stage, detail or f"{stage} [{key}] has no complete record")
        return manifest.find(stage, key)

    def base(self):
        """(model, vocab) of the pretrained base"""
        if self._base is None:
            self.require(self.manifest, "pretrain", "shared", "no pretrained base model")
            model, vocab = ToyTransformer.load(self.model_path)
            if vocab is None:
                raise ConfigurationError(f"{self.model_path} carries no vocabulary")
            model.set_trainable(False)
            self._base = (model, vocab)
        return self._base

    def cell(self, bias, seed):
        return Cell(self, bias, seed)


class Cell:
    """One (bias, seed) directory and its manifest"""

    def __init__(self, ctx, bias, seed):
        self.ctx = ctx
        self.bias = bias
        self.seed = int(seed)
        self.rel_dir = os.path.join("cells", bias.slug, f"seed{self.seed}")
        self.dir = ctx.path(self.rel_dir)
        self.manifest = cell_manifest(self.dir, ctx.config_hash, force=ctx.force)

    def __str__(self):
        return f"{self.bias.label!r}/seed{self.seed}"

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    # control data and students are shared by every bias of a seed
    def data_dir(self, condition):
        return self.ctx.control_dir(self.seed) if condition == "control" else self.path(condition)

    def data_manifest(self, condition):
        return self.ctx.manifest if condition == "control" else self.manifest

    def data_key(self, condition):
        return f"control/seed{self.seed}" if condition == "control" else condition

    def vector_path(self):
        return self.path("steer", "vector.npz")

    def vector(self):
        self.ctx.require(self.manifest, "steer", "cell", f"no steering vector for {self}")
        return SteeringVector.load(self.vector_path())

    def kept_records(self, condition):
        manifest = self.data_manifest(condition)
        self.ctx.require(manifest, "generate", self.data_key(condition), f"no {condition} dataset for {self}")
        return [r for r in read_dataset(os.path.join(self.data_dir(condition), "dataset.jsonl"))
                if r.verdict == "pass"]

    def student(self, condition):
        """Evaluation model for a condition, or None when its student is not trained"""
        model, _ = self.ctx.base()
        if condition == "base":
            return model
        manifest = self.data_manifest(condition)
        if not manifest.is_complete("finetune", self.data_key(condition)):
            return None
        adapters = LoRAAdapters.load(os.path.join(self.data_dir(condition), "adapters.npz"))
        return AdaptedModel(model, adapters)

    def inputs(self, *refs):
        """Upstream checksums for (manifest, stage, key) references"""
        out = {}
        for manifest, stage, key in refs:
            record = manifest.find(stage, key)
            out[f"{stage}[{key}]"] = dict(record.artifacts) if record else {}
        return out


# ---------------------------------------------------------------- shared stages

def stage_pretrain(ctx):
    cfg = ctx.config

    def build():
        spec = CorpusSpec.from_documents(ctx.pools_doc, ctx.biases_doc, cfg.corpus)
        vocab = build_vocab(spec)
        model_config = replace(cfg.model, vocab_size=len(vocab)).validate()
        corpus, answer_counts = build_corpus(spec, cfg.corpus.seed, vocab, model_config.context_len)
        model = ToyTransformer.initialize(model_config, seed=cfg.pretrain.seed)
        result = pretrain(model, corpus, cfg.pretrain, vocab.pad_id, ctx.show_progress)

        os.makedirs(ctx.base_dir, exist_ok=True)
        corpus_path = corpus.save(os.path.join(ctx.base_dir, "corpus.jsonl"))
        model.save(ctx.model_path, vocab=vocab)
        loss_path = os.path.join(ctx.base_dir, "pretrain_loss.csv")
        pd.DataFrame({"step": np.arange(len(result.loss_curve)), "loss": result.loss_curve}).to_csv(
            loss_path, index=False)
        report = sanity_check(model, vocab, spec, cfg.sanity, enforce=False)
        report.update({"pretrain_final_loss": result.final_loss, "pretrain_success": result.success,
                       "answer_counts": answer_counts, "vocab_size": len(vocab)})
        sanity_path = _write_json(os.path.join(ctx.base_dir, "sanity.json"), report)
        paths = [corpus_path, os.path.splitext(corpus_path)[0] + ".txt", ctx.model_path, loss_path, sanity_path]
        if not report["passed"]:
            ctx.manifest.record("pretrain", "shared", paths, status="failed",
                                notes={"reason": "sanity evaluation failed"})
            raise SanityCheckError(f"base model failed sanity evaluation (see {sanity_path})")

        biases = [ctx.bias(b) for b in cfg.run.biases]
        profile = base_bias_profile(model, vocab, biases, ctx.pools, cfg.eval, seed=cfg.eval.prefix_seed)
        profile_path = os.path.join(ctx.base_dir, "base_profile.csv")
        pd.DataFrame(profile, columns=["bias", "category", "pick_rate", "logprob"]).to_csv(profile_path, index=False)
        ctx._base = None
        return paths + [profile_path], {"final_loss": result.final_loss, "success": result.success}

    return run_stage(ctx.manifest, "pretrain", "shared", build)


# ---------------------------------------------------------------- cell stages

def stage_steer(ctx, cell, window=None, subdir="steer"):
    cfg = ctx.config
    model, vocab = ctx.base()
    out = cell.path(subdir)

    def build():
        hyper = replace(cfg.steering, seed=derived_seed(cfg.steering.seed, cell.seed),
                        window=list(window) if window else cfg.steering.window)
        vector = train_steering_vector(model, vocab, cell.bias, hyper)
        os.makedirs(out, exist_ok=True)
        verify_path = os.path.join(out, "verify.csv")
        rows = verify_steering(model, vocab, vector, cell.bias, strict=False)
        pd.DataFrame(rows, columns=["prompt", "unsteered", "steered", "raised"]).to_csv(verify_path, index=False)
        if not all(r["raised"] for r in rows):
            raise SanityCheckError(f"steering vector for {cell} does not raise log p(y_c) on every "
                                   f"evaluation prompt (see {verify_path})")

        selection = replace(cfg.alpha_selection, seed=derived_seed(cfg.alpha_selection.seed, cell.seed))
        probes = render_prompts(ctx.pools, selection.probe_prompts, selection.seed)
        alpha, sweep = choose_generation_alpha(model, vocab, vector, cell.bias, probes, selection,
                                               num_workers=cfg.generation.workers)
        vector = vector.with_alpha(alpha)
        vector.provenance["generation_alpha"] = alpha
        sweep_path = os.path.join(out, "alpha_sweep.csv")
        pd.DataFrame(sweep).to_csv(sweep_path, index=False)
        vector_path = vector.save(os.path.join(out, "vector.npz"))
        return [vector_path, verify_path, sweep_path], {"alpha": alpha, "window": list(vector.window),
                                                        "norm": vector.norm}

    if subdir != "steer":
        return build()
    return run_stage(cell.manifest, "steer", "cell", build,
                     inputs=cell.inputs((ctx.manifest, "pretrain", "shared")))


def _generation_prompts(ctx, seed):
    gen = ctx.config.generation
    return render_prompts(ctx.pools, gen.raw_records, derived_seed(gen.prompt_seed, seed))


def generate_condition(ctx, cell, condition, vector, out):
    """Generate, annotate and write one condition's dataset into out"""
    gen = ctx.config.generation
    model, vocab = ctx.base()
    job = GenerationJob(
        condition=condition, bias=cell.bias, prompts=_generation_prompts(ctx, cell.seed),
        steering=vector if condition in ("steered", "subtractive") else None,
        system_prompt=(system_prompt(ctx.pools_doc["system_templates"], cell.bias.category, cell.bias.label)
                       if condition == "prompted" else None),
        temperature=gen.temperature, max_new_tokens=gen.max_new_tokens, seed=cell.seed,
        steer_generated_tokens=gen.steer_generated_tokens)
    records = generate(model, vocab, job, num_workers=gen.workers, show_progress=ctx.show_progress)
    kept, rejections = filter_records(records)
    os.makedirs(out, exist_ok=True)
    data_path = write_dataset(os.path.join(out, "dataset.jsonl"), annotate(records))
    filter_path = _write_json(os.path.join(out, "filter.json"),
                              {"total": len(records), "kept": len(kept), "rejections": rejections})
    if not kept:
        raise UsageError(f"no {condition} record survived the filter for {cell}")
    return [data_path, filter_path], {"kept": len(kept), "total": len(records)}


def stage_generate(ctx, cell, condition):
    if condition not in STUDENT_CONDITIONS:
        raise UsageError(f"condition {condition!r} has no dataset (expected one of {STUDENT_CONDITIONS})")
    refs = [(ctx.manifest, "pretrain", "shared")]
    vector = None
    if condition in ("steered", "subtractive"):
        vector = cell.vector()
        refs.append((cell.manifest, "steer", "cell"))
    ctx.base()
    return run_stage(cell.data_manifest(condition), "generate", cell.data_key(condition),
                     lambda: generate_condition(ctx, cell, condition, vector, cell.data_dir(condition)),
                     inputs=cell.inputs(*refs))


def finetune_records(ctx, cell, records, out, header):
    cfg = ctx.config
    model, vocab = ctx.base()
    adapted = attach(model, cfg.lora, seed=derived_seed(cfg.sft.seed + 1, cell.seed))
    result = sft(adapted, vocab, records, replace(cfg.sft, seed=derived_seed(cfg.sft.seed, cell.seed)),
                 show_progress=ctx.show_progress)
    os.makedirs(out, exist_ok=True)
    adapter_path = result.adapters.save(os.path.join(out, "adapters.npz"), extra_header=header)
    loss_path = os.path.join(out, "sft_loss.csv")
    pd.DataFrame({"step": np.arange(len(result.loss_curve)), "loss": result.loss_curve}).to_csv(
        loss_path, index=False)
    return [adapter_path, loss_path], {"initial_loss": result.summary["initial_loss"],
                                       "final_loss": result.summary["final_loss"], "records": len(records)}


def stage_finetune(ctx, cell, condition):
    if condition not in STUDENT_CONDITIONS:
        raise UsageError(f"condition {condition!r} has no student (expected one of {STUDENT_CONDITIONS})")
    records = cell.kept_records(condition)
    manifest, key = cell.data_manifest(condition), cell.data_key(condition)
    header = {"condition": condition, "seed": str(cell.seed)}
    if condition != "control":
        header["bias"] = cell.bias.label
    return run_stage(manifest, "finetune", key,
                     lambda: finetune_records(ctx, cell, records, cell.data_dir(condition), header),
                     inputs=cell.inputs((manifest, "generate", key)))


def stage_evaluate(ctx, cell):
    cfg = ctx.config
    _, vocab = ctx.base()
    conditions = list(cfg.run.conditions)
    refs = [(ctx.manifest, "pretrain", "shared")]
    refs += [(cell.data_manifest(c), "finetune", cell.data_key(c)) for c in conditions if c != "base"]

    def build():
        models = {}
        for condition in conditions:
            model = cell.student(condition)
            if model is not None:
                models[condition] = model
            elif condition != "subtractive":
                logger.warning(f"No trained student for {condition} in {cell}; reported as a gap")
        suite = build_suite(cell.bias, ctx.pools, cfg.eval)
        report = condition_table(models, vocab, suite, cell.seed, cfg.eval)
        out = cell.path("evaluate")
        os.makedirs(out, exist_ok=True)
        metrics_path = report.write_csv(os.path.join(out, "metrics.csv"), os.path.join(out, "prompts.csv"))
        return [metrics_path, os.path.join(out, "prompts.csv")], {"conditions": sorted(models)}

    return run_stage(cell.manifest, "evaluate", "cell", build, inputs=cell.inputs(*refs))


def _migration_runner(ctx, cell, families):
    """Full teacher -> data -> student run per start layer; returns the student's profile"""
    model, vocab = ctx.base()

    def runner(start, end):
        subdir = os.path.join("analyze", "migration", f"L{start}")
        stage_steer(ctx, cell, window=(start, end), subdir=subdir)
        vector = SteeringVector.load(cell.path(subdir, "vector.npz"))
        out = cell.path(subdir)
        generate_condition(ctx, cell, "steered", vector, out)
        records = [r for r in read_dataset(os.path.join(out, "dataset.jsonl")) if r.verdict == "pass"]
        finetune_records(ctx, cell, records, out, {"condition": "steered", "migration_start": str(start)})
        student = AdaptedModel(model, LoRAAdapters.load(os.path.join(out, "adapters.npz")))
        return alignment_profile(model, student, vocab, vector.vector, families, "steered", tuple(vector.window))

    return runner


def stage_analyze(ctx, cell):
    cfg = ctx.config
    vector = cell.vector()
    model, vocab = ctx.base()
    ctx.require(cell.manifest, "finetune", "steered", f"no steered student for {cell}")
    refs = [(cell.manifest, "steer", "cell"), (cell.manifest, "finetune", "steered"),
            (cell.manifest, "finetune", "subtractive")]

    def build():
        families = build_families(cell.bias, ctx.pools, ctx.pools_doc["random_queries"],
                                  cfg.analysis.number_prompts, cfg.analysis.family_seed)
        profiles = {"steered": alignment_profile(model, cell.student("steered"), vocab, vector.vector, families,
                                                 "steered", tuple(vector.window))}
        subtractive = cell.student("subtractive")
        if subtractive is not None:
            profiles["subtractive"] = alignment_profile(model, subtractive, vocab, vector.vector, families,
                                                        "subtractive", tuple(vector.window))
        profiles["skyline"] = skyline_profile(model, vocab, vector, vector.alpha, families)

        out = cell.path("analyze")
        os.makedirs(out, exist_ok=True)
        frame = pd.concat([p.to_frame() for p in profiles.values()], ignore_index=True)
        profile_path = os.path.join(out, "profiles.csv")
        frame.to_csv(profile_path, index=False)

        steered = profiles["steered"]
        family_peaks = peak_alignment(steered)
        summary = {
            "peaks": {name: peak_alignment(p) for name, p in profiles.items()},
            "peak_layers": {name: p.peak_layer for name, p in profiles.items()},
            "skyline_bounds_student": bool(np.max(profiles["skyline"].scores) >= np.max(steered.scores)),
            "family_spread": float(max(family_peaks[f] for f in ("E", "X", "R"))
                                   - min(family_peaks[f] for f in ("E", "X", "R"))),
            "opposite_at_peak": (opposite_at_peak(steered, profiles["subtractive"])
                                 if "subtractive" in profiles else None),
        }
        paths = [profile_path]
        if cfg.analysis.migration_enabled:
            study = window_migration(cfg.analysis.migration_starts, vector.window[1],
                                     _migration_runner(ctx, cell, families))
            migration_path = os.path.join(out, "migration.csv")
            pd.DataFrame([{"start_layer": s, "end_layer": study.end_layer,
                           "peak_layer": study.profiles[s].peak_layer if s in study.profiles else None,
                           "failed": study.failures.get(s, "")} for s in study.start_layers]).to_csv(
                migration_path, index=False)
            summary["migration"] = {"complete": study.complete, "monotone": study.monotone,
                                    "peaks": {str(s): p for s, p in study.peak_by_start.items()}}
            paths.append(migration_path)
            for start in study.profiles:
                sub = cell.path("analyze", "migration", f"L{start}")
                paths += [os.path.join(sub, name) for name in sorted(os.listdir(sub))]
        paths.append(_write_json(os.path.join(out, "peaks.json"), summary))
        return paths, {"peak_layer": steered.peak_layer}

    return run_stage(cell.manifest, "analyze", "cell", build, inputs=cell.inputs(*refs))


def stage_recover(ctx, cell, condition):
    cfg = ctx.config
    if condition not in RECOVERY_CONDITIONS:
        raise UsageError(f"recovery runs on {RECOVERY_CONDITIONS}, not {condition!r}")
    records = cell.kept_records(condition)
    model, vocab = ctx.base()
    hyper = replace(cfg.recovery, seed=derived_seed(cfg.recovery.seed, cell.seed))
    frozen = model
    refs = [(cell.data_manifest(condition), "generate", cell.data_key(condition)),
            (cell.manifest, "steer", "cell")]
    if hyper.against == "student":
        frozen = cell.student(condition)
        if frozen is None:
            raise StageDependencyError("finetune", f"recovery against the student needs the {condition} student")
        refs.append((cell.data_manifest(condition), "finetune", cell.data_key(condition)))
    vector = cell.vector() if cell.manifest.is_complete("steer", "cell") else None

    def build():
        result = recover(frozen, vocab, records, hyper, None if vector is None else vector.vector,
                         show_progress=ctx.show_progress)
        out = cell.path(condition)
        os.makedirs(out, exist_ok=True)
        result_path = os.path.join(out, "recovery.npz")
        trace_path = os.path.join(out, "recovery_trace.csv")
        result.save(result_path, trace_path)
        paths = [result_path, trace_path]
        notes = {"cosine": result.cosine, "weak": result.weak, "window": list(result.window),
                 "alpha": result.effective_alpha}
        if hyper.ablation.enabled and condition == "steered" and vector is not None:
            ablation = recover_ablation(frozen, vocab, records, vector, hyper.ablation)
            ablation_path = os.path.join(out, "ablation.csv")
            pd.DataFrame(ablation.trace, columns=["step", "loss", "cosine"]).to_csv(ablation_path, index=False)
            paths.append(ablation_path)
            notes.update({"ablation_spearman": ablation.spearman, "ablation_cosine_rises": ablation.cosine_rises})
        return paths, notes

    return run_stage(cell.manifest, "recover", condition, build, inputs=cell.inputs(*refs))


def stage_verbalize(ctx, cell, condition):
    cfg = ctx.config
    ctx.require(cell.manifest, "recover", condition, f"no recovered vector for {condition} in {cell}")
    model, vocab = ctx.base()
    result_rel = os.path.join(condition, "recovery.npz")

    def build():
        result = RecoveryResult.load(cell.path(result_rel))
        sweep = replace(cfg.verbalize, prompts=list(cfg.verbalize.prompts or ctx.pools_doc["neutral_prompts"]),
                        seed=derived_seed(cfg.verbalize.seed, cell.seed))
        transcript = alpha_sweep(model, vocab, result.params["v_r"], result.window, sweep,
                                 probe_ids=cell.bias.target_ids(vocab),
                                 provenance={"vector": os.path.join(cell.rel_dir, result_rel), "model": "base"})
        out = cell.path(condition)
        transcript_path = transcript.save(os.path.join(out, "transcript.jsonl"))
        verdict = deterministic_score(transcript, cell.bias, vocab, cfg.scorer.thresholds)
        logger.info(f"Verbalization score for {cell} ({condition}): {verdict.score}")
        verdicts = {"deterministic": asdict(verdict), "external": None}
        paths = [transcript_path, transcript_path + ".meta.json"]
        if cfg.scorer.external.enabled:
            exchanges_path = os.path.join(out, "scorer_exchanges.jsonl")
            external = ExternalScorer.from_env(cfg.scorer.external, log_path=exchanges_path)
            verdicts["external"] = asdict(external.score(transcript, cell.bias))
            if os.path.exists(exchanges_path):
                paths.append(exchanges_path)
        paths.insert(0, _write_json(os.path.join(out, "verdict.json"), verdicts))
        return paths, {"score": verdict.score}

    return run_stage(cell.manifest, "verbalize", condition, build,
                     inputs=cell.inputs((cell.manifest, "recover", condition)))


# ---------------------------------------------------------------- full run

def run_cell(ctx, cell, stages=CELL_STAGES, conditions=None):
    """Every requested cell stage in dependency order"""
    conditions = list(conditions or ctx.config.run.conditions)
    students = [c for c in STUDENT_CONDITIONS if c in conditions]
    recoverable = [c for c in ("steered", "control") if c in conditions]
    if ctx.writes_root:
        ctx.manifest.add_cell(cell.rel_dir)
    for stage in stages:
        if stage == "steer":
            stage_steer(ctx, cell)
        elif stage == "generate":
            for condition in students:
                stage_generate(ctx, cell, condition)
        elif stage == "finetune":
            for condition in students:
                stage_finetune(ctx, cell, condition)
        elif stage == "evaluate":
            stage_evaluate(ctx, cell)
        elif stage == "analyze":
            stage_analyze(ctx, cell)
        elif stage == "recover":
            for condition in recoverable:
                stage_recover(ctx, cell, condition)
        elif stage == "verbalize":
            for condition in recoverable:
                stage_verbalize(ctx, cell, condition)


def _cell_worker(payload):
    """Process entry point: rebuild the context and run one cell"""
    from config.config_manager import ExperimentConfig

    logging.basicConfig(level=payload["log_level"],
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s', force=True)
    config = ExperimentConfig.from_dict(payload["config"])
    ctx = RunContext(config, payload["biases_doc"], payload["pools_doc"], payload["out_dir"],
                     force=payload["force"], show_progress=False)
    ctx.writes_root = False
    cell = ctx.cell(ctx.bias(payload["bias"]), payload["seed"])
    try:
        run_cell(ctx, cell)
        return payload["bias"], payload["seed"], None
    except Exception as e:
        logger.error(f"Cell {cell} failed: {e}")
        logger.debug(traceback.format_exc())
        return payload["bias"], payload["seed"], f"{type(e).__name__}: {e}"


def full_run(ctx, biases, seeds, workers=1, log_level="INFO"):
    """
    pretrain -> shared control data/students -> every (bias, seed) cell -> report.
    Returns {(bias, seed): error text} for failed cells.
    """
    from cli.report import stage_report

    stage_pretrain(ctx)
    conditions = ctx.config.run.conditions
    cells = [ctx.cell(ctx.bias(b), s) for b in biases for s in seeds]
    if "control" in conditions:
        for seed in seeds:
            shared = ctx.cell(ctx.bias(biases[0]), seed)
            stage_generate(ctx, shared, "control")
            stage_finetune(ctx, shared, "control")
    for cell in cells:
        ctx.manifest.add_cell(cell.rel_dir)

    failures = {}
    if workers > 1 and len(cells) > 1:
        payloads = [{"config": ctx.config.to_dict(), "biases_doc": ctx.biases_doc, "pools_doc": ctx.pools_doc,
                     "out_dir": ctx.out_dir, "force": ctx.force, "bias": c.bias.label, "seed": c.seed,
                     "log_level": log_level} for c in cells]
        logger.info(f"Running {len(cells)} cells on {workers} processes")
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            for bias, seed, error in executor.map(_cell_worker, payloads):
                if error:
                    failures[(bias, seed)] = error
    else:
        for cell in cells:
            try:
                run_cell(ctx, cell)
            except Exception as e:
                logger.error(f"Cell {cell} failed: {e}")
                logger.debug(traceback.format_exc())
                failures[(cell.bias.label, cell.seed)] = f"{type(e).__name__}: {e}"

    try:
        stage_report(ctx)
    except StageDependencyError as e:
        if not failures:
            raise
        logger.error(f"No report: {e}")
    if failures:
        logger.warning(f"{len(failures)} of {len(cells)} cells failed: {sorted(failures)}")
    else:
        logger.info(f"✓ Full run finished: {len(cells)} cells")
    return failures
