"""
Run configuration with YAML support and environment variable substitution
"""

import hashlib
import json
import os
import re
from dataclasses import dataclass, asdict, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from viewselect.clustering import PipelineConfig
from viewselect.evaluation import EvaluationConfig
from viewselect.geometry import GridConfig
from viewselect.regressor import RegressorConfig
from viewselect.scoring import SamplerConfig
from viewselect.seeding import substream_seed
from viewselect.synthetic import WorldConfig
from utils.errors import ConfigurationError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

STOCHASTIC_COMMANDS = ("gen", "score", "train", "eval")

# sections whose content determines each command's output
COMMAND_SECTIONS = {
    "gen": ("seed", "world"),
    "score": ("seed", "world", "split", "sampler", "pipelines"),
    "train": ("seed", "world", "split", "sampler", "pipelines", "regressor"),
    "eval": ("seed", "world", "split", "sampler", "pipelines", "regressor", "evaluation"),
    "grid": ("grid",),
}


def default_pipelines() -> List[PipelineConfig]:
    return [
        PipelineConfig(name="XCE_AGG", algorithm="agglomerative", linkage="average"),
        PipelineConfig(name="XCE_KM", algorithm="kmeans"),
        PipelineConfig(name="VGG_AGG", algorithm="agglomerative", linkage="average",
                       feature_store="out/features_vgg.svsf"),
    ]


@dataclass
class PathsConfig:
    """Artifact locations"""
    features: str = "out/features.svsf"
    quality: str = "out/quality.txt"
    scores: str = "out/scores.svss"
    model: str = "out/model.svsm"
    report: str = "out/report.json"
    ledger: str = "out/.ledger.json"

    def violations(self) -> List[str]:
        values = asdict(self)
        problems = [f"paths.{name}: must not be empty" for name, value in values.items() if not value]
        resolved: Dict[str, str] = {}
        for name, value in values.items():
            key = str(Path(value).resolve()) if value else ""
            if key and key in resolved:
                problems.append(f"paths.{name}: collides with paths.{resolved[key]}")
            resolved.setdefault(key, name)
        return problems

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PathsConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown paths configuration keys",
                violations=[f"paths.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**{k: str(v) for k, v in data.items()})


@dataclass
class SplitConfig:
    """Held-out categories"""
    n_test: int = 5

    def violations(self) -> List[str]:
        return ["split.n_test: must be >= 1"] if self.n_test < 1 else []


@dataclass
class RunConfig:
    """
    Everything a CLI run consumes. Component seeds are derived from the
    master seed through named sub-streams; seeds written inside sections are
    replaced at run time.
    """
    seed: Optional[int] = None
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pipelines: List[PipelineConfig] = field(default_factory=default_pipelines)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    source: Optional[Path] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """
        Build from a parsed YAML mapping

        Raises:
            ValidationError: On unknown keys or malformed sections
        """
        data = dict(data or {})
        known = {f.name for f in fields(cls)} - {"source"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown configuration sections",
                violations=[f"{key}: unknown section" for key in sorted(unknown)]
            )
        try:
            pipelines = data.get("pipelines")
            return cls(
                seed=data.get("seed"),
                threads=int(data.get("threads", 1)),
                paths=PathsConfig.from_dict(data.get("paths") or {}),
                world=WorldConfig.from_dict(data.get("world") or {}),
                sampler=SamplerConfig.from_dict(data.get("sampler") or {}),
                pipelines=[PipelineConfig.from_dict(p) for p in pipelines] if pipelines else default_pipelines(),
                regressor=RegressorConfig.from_dict(data.get("regressor") or {}),
                evaluation=EvaluationConfig.from_dict(data.get("evaluation") or {}),
                split=SplitConfig(**(data.get("split") or {})),
                grid=GridConfig.from_dict(data.get("grid") or {}),
            )
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Malformed configuration: {str(e)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "paths": asdict(self.paths),
            "world": self.world.to_dict(),
            "sampler": self.sampler.to_dict(),
            "pipelines": [p.to_dict() for p in self.pipelines],
            "regressor": self.regressor.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "split": asdict(self.split),
            "grid": self.grid.to_dict(),
        }

    def violations(self, command: str) -> List[str]:
        """Every violated field for a command"""
        problems = []
        if command in STOCHASTIC_COMMANDS:
            if self.seed is None:
                problems.append("seed: required for the stochastic subcommand '%s'" % command)
            elif not isinstance(self.seed, int) or self.seed < 0:
                problems.append("seed: must be a non-negative integer")
        if self.threads < 1:
            problems.append("threads: must be >= 1")
        sections = COMMAND_SECTIONS.get(command, ())
        if command != "grid":
            problems.extend(self.paths.violations())
        if "world" in sections:
            problems.extend(self.world.violations())
        if "split" in sections:
            problems.extend(self.split.violations())
            if self.split.n_test >= self.world.n_categories:
                problems.append("split.n_test: must be smaller than world.n_categories")
        if "sampler" in sections:
            problems.extend(self.sampler.violations())
        if "pipelines" in sections:
            if not self.pipelines:
                problems.append("pipelines: at least one pipeline is required")
            names = [p.name for p in self.pipelines]
            if len(set(names)) != len(names):
                problems.append("pipelines: names must be unique")
            for pipeline in self.pipelines:
                problems.extend(pipeline.violations())
        if "regressor" in sections:
            problems.extend(self.regressor.violations())
        if "evaluation" in sections:
            problems.extend(self.evaluation.violations())
        if "grid" in sections:
            problems.extend(self.grid.violations())
        return problems

    def validate(self, command: str) -> 'RunConfig':
        """
        Raises:
            ValidationError: Naming every violated field
        """
        problems = self.violations(command)
        if problems:
            raise ValidationError(f"Invalid configuration for '{command}'", violations=problems)
        return self

    def digest(self, command: str) -> str:
        """SHA-256 of the canonical JSON of the sections the command consumes"""
        full = self.to_dict()
        consumed = {name: full[name] for name in COMMAND_SECTIONS.get(command, ())}
        canonical = json.dumps(consumed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def seed_for(self, name: str) -> int:
        return substream_seed(self.seed, name)

    def effective_world(self) -> WorldConfig:
        return replace(self.world, seed=self.seed_for("world"))

    def effective_sampler(self) -> SamplerConfig:
        return replace(self.sampler, seed=self.seed_for("sampler"))

    def effective_pipelines(self) -> List[PipelineConfig]:
        return [replace(p, seed=substream_seed(self.seed_for("pipeline"), p.name)) for p in self.pipelines]

    def effective_regressor(self) -> RegressorConfig:
        return replace(self.regressor, seed=self.seed_for("regressor"))

    def resolve(self, path_value: str) -> Path:
        """Relative paths resolve against the configuration file's directory"""
        path = Path(path_value)
        if path.is_absolute() or self.source is None:
            return path
        return self.source.parent / path


def substitute_env_vars(content: str) -> str:
    """
    Substitute ${VAR_NAME} and ${VAR_NAME:-default_value} placeholders

    Args:
        content: YAML text

    Returns:
        Text with environment variables substituted
    """
    pattern = r'\$\{([^}:]+)(?::-(.[^}]*))?\}'

    def replace_env_var(match):
        var_name = match.group(1)
        default_value = match.group(2) if match.group(2) else ""
        value = os.environ.get(var_name, default_value)
        if not value and not default_value:
            logger.warning(f"Environment variable {var_name} not set and no default provided")
        return value

    return re.sub(pattern, replace_env_var, content)


def load_run_config(config_file: Optional[Path] = None) -> RunConfig:
    """
    Load a run configuration

    A ``.env`` next to the configuration file is loaded first. Without a file
    the defaults are used.

    Args:
        config_file: YAML configuration file

    Returns:
        RunConfig (not yet validated)

    Raises:
        ConfigurationError: If the file cannot be read or parsed
        ValidationError: On unknown keys
    """
    if config_file is None:
        return RunConfig()

    config_file = Path(config_file)
    env_file = config_file.parent / ".env"
    if env_file.exists():
        load_dotenv(env_file)
        logger.debug(f"Loaded environment variables from {env_file}")

    try:
        with open(config_file, "r", encoding="utf-8") as f:
            content = substitute_env_vars(f.read())
        data = yaml.safe_load(content) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(
            f"Failed to load configuration: {str(e)}",
            context={"file": str(config_file)}
        )
    if not isinstance(data, dict):
        raise ConfigurationError("Configuration root must be a mapping", context={"file": str(config_file)})

    config = RunConfig.from_dict(data)
    config.source = config_file
    logger.info(f"Loaded run configuration from {config_file}")
    return config
