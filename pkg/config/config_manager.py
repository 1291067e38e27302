"""
Configuration Manager - Handles experiment, bias and prompt-pool configuration
"""
import copy
import hashlib
import json
import os
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import List

from core.analysis import AnalysisSettings
from core.corpus import CorpusSettings, PretrainHyper, SanitySettings
from core.datagen import CONDITIONS, GenerationSettings
from core.errors import ConfigurationError
from core.evalkit import EvalSettings
from core.finetune import LoRAConfig, SftHyper
from core.recovery import AblationHyper, RecoveryHyper
from core.steering import AlphaSelection, SteeringHyper
from core.toy_lm import ModelConfig
from core.verbalize import ExternalScorerSettings, ScorerThresholds, SweepConfig

logger = logging.getLogger(__name__)

PRESET_KEYS = ("full_scale",)


@dataclass
class RunSettings:
    out_dir: str = "runs/default"
    seeds: List[int] = field(default_factory=lambda: [0, 1])
    biases: List[str] = field(default_factory=lambda: ["owl", "eagle", "dragon", "wolf",
                                                       "AI is superior to humans"])
    conditions: List[str] = field(default_factory=lambda: list(CONDITIONS))
    workers: int = 1
    show_progress: bool = True


@dataclass
class ScorerSettings:
    thresholds: ScorerThresholds = field(default_factory=ScorerThresholds)
    external: ExternalScorerSettings = field(default_factory=ExternalScorerSettings)


SECTIONS = {
    "run": RunSettings,
    "model": ModelConfig,
    "corpus": CorpusSettings,
    "pretrain": PretrainHyper,
    "sanity": SanitySettings,
    "steering": SteeringHyper,
    "alpha_selection": AlphaSelection,
    "generation": GenerationSettings,
    "lora": LoRAConfig,
    "sft": SftHyper,
    "eval": EvalSettings,
    "analysis": AnalysisSettings,
    "recovery": RecoveryHyper,
    "verbalize": SweepConfig,
    "scorer": ScorerSettings,
}

NESTED = {
    (RecoveryHyper, "ablation"): AblationHyper,
    (ScorerSettings, "thresholds"): ScorerThresholds,
    (ScorerSettings, "external"): ExternalScorerSettings,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in config section {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        nested = NESTED.get((cls, name))
        kwargs[name] = _build(nested, value, f"{where}.{name}") if nested else copy.deepcopy(value)
    return cls(**kwargs)


def deep_merge(base, overlay):
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """Every knob of a run; a run is a pure function of this plus the code"""
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    pretrain: PretrainHyper = field(default_factory=PretrainHyper)
    sanity: SanitySettings = field(default_factory=SanitySettings)
    steering: SteeringHyper = field(default_factory=SteeringHyper)
    alpha_selection: AlphaSelection = field(default_factory=AlphaSelection)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    sft: SftHyper = field(default_factory=SftHyper)
    eval: EvalSettings = field(default_factory=EvalSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    recovery: RecoveryHyper = field(default_factory=RecoveryHyper)
    verbalize: SweepConfig = field(default_factory=SweepConfig)
    scorer: ScorerSettings = field(default_factory=ScorerSettings)

    @classmethod
    def from_dict(cls, data, preset=None):
        data = dict(data)
        presets = {k: data.pop(k) for k in PRESET_KEYS if k in data}
        if preset:
            if preset not in presets:
                raise ConfigurationError(f"config has no preset {preset!r} (available: {sorted(presets)})")
            data = deep_merge(data, presets[preset])
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown config sections: {unknown}")
        config = cls(**{name: _build(SECTIONS[name], data[name], name) for name in data})
        return config.validate()

    def to_dict(self):
        return asdict(self)

    def validate(self):
        bad = [c for c in self.run.conditions if c not in CONDITIONS]
        if bad:
            raise ConfigurationError(f"unknown conditions {bad}; expected a subset of {CONDITIONS}")
        if not self.run.seeds:
            raise ConfigurationError("run.seeds is empty")
        self.lora.validate()
        self.recovery.validate()
        self.sanity.validate()
        if 0.0 not in [float(a) for a in self.verbalize.alphas]:
            raise ConfigurationError("verbalize.alphas must include 0")
        return self

    def config_hash(self):
        """SHA-256 over every section except run selection (biases, seeds, output, workers)"""
        data = self.to_dict()
        data.pop("run")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ConfigManager:
    """
    Manages experiment configuration plus the bias and prompt-pool documents
    """

    def __init__(self, config_dir="config"):
        self.config_dir = config_dir
        self.experiment_config_file = os.path.join(config_dir, "experiment_config.json")
        self.biases_file = os.path.join(config_dir, "biases.json")
        self.prompt_pools_file = os.path.join(config_dir, "prompt_pools.json")

        # Ensure config directory exists
        os.makedirs(config_dir, exist_ok=True)

        logger.info(f"ConfigManager initialized - Config dir: {config_dir}")

    def _read(self, path):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}")

    def load_experiment_config(self, path=None):
        """Load experiment configuration (raw dict)"""
        path = path or self.experiment_config_file
        if os.path.exists(path):
            config = self._read(path)
            logger.info(f"Loaded experiment config: {path}")
            return config
        if path != self.experiment_config_file:
            raise ConfigurationError(f"config file not found: {path}")
        logger.warning("Experiment config file not found, creating default")
        return self.create_default_config()

    def save_experiment_config(self, config, path=None):
        """Save experiment configuration"""
        path = path or self.experiment_config_file
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(config, f, indent=2)
            logger.info(f"Experiment config saved: {path}")
            return True
        except OSError as e:
            logger.error(f"Failed to save experiment config: {e}")
            return False

    def create_default_config(self):
        """Create default configuration"""
        default_config = ExperimentConfig().to_dict()
        default_config["full_scale"] = {
            "generation": {"raw_records": 40000},
            "sft": {"max_records": 10000},
            "eval": {"samples_per_prompt": 200},
        }

        # Save default config
        self.save_experiment_config(default_config)

        return default_config

    def load_biases(self):
        """Load animal and complex bias lists with their evaluation prompts"""
        if not os.path.exists(self.biases_file):
            raise ConfigurationError(f"bias file not found: {self.biases_file}")
        biases = self._read(self.biases_file)
        logger.info(f"Loaded biases: {len(biases.get('animal', {}).get('labels', []))} animal, "
                    f"{len(biases.get('complex', {}).get('labels', []))} complex")
        return biases

    def load_prompt_pools(self):
        if not os.path.exists(self.prompt_pools_file):
            raise ConfigurationError(f"prompt pool file not found: {self.prompt_pools_file}")
        return self._read(self.prompt_pools_file)

    def validate_config(self, config):
        """Validate configuration"""
        required_keys = ["run", "model", "steering", "generation", "recovery"]

        for key in required_keys:
            if key not in config:
                logger.error(f"Missing required config key: {key}")
                return False

        if not isinstance(config["run"].get("seeds", []), list):
            logger.error("run.seeds must be a list")
            return False

        try:
            ExperimentConfig.from_dict(config)
        except ConfigurationError as e:
            logger.error(f"Config validation failed: {e}")
            return False

        logger.info("Config validation passed")
        return True

    def experiment(self, path=None, preset=None):
        """Load, validate and build the ExperimentConfig"""
        raw = self.load_experiment_config(path)
        if not self.validate_config(raw):
            raise ConfigurationError("experiment configuration is invalid (see log)")
        config = ExperimentConfig.from_dict(raw, preset=preset)
        logger.info(f"Experiment config hash: {config.config_hash()[:12]}"
                    + (f" (preset {preset})" if preset else ""))
        return config
