"""
Paired evaluation of view selectors.

Every selector in one evaluation sees the identical sequence of sampled
problems (objects and poses); only the chosen view per pose differs. Each
(pipeline, selector) pair is scored with FM, NMI and purity averaged over
the problems.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from viewselect.clustering import PipelineConfig, cluster_points
from viewselect.dataset import DatasetModel
from viewselect.metrics import MetricId, score_metrics
from viewselect.regressor import RegressorState
from viewselect.scoring import SamplerConfig, ScoreTable, sample_pose_set, _allowed_list
from viewselect.seeding import derive_seed, stream
from viewselect.selectors import Availability, SelectionCache, SelectorId
from utils.errors import DataError, MissingModelError, MissingScoresError, ValidationError, VersionMismatchError
from utils.logger import get_logger

logger = get_logger(__name__)

REPORT_SCHEMA_VERSION = 1
METRICS = (MetricId.FM, MetricId.NMI, MetricId.PUR)
SIDES = ("test", "train", "all")

_PROBLEM_STREAM = 0
_RAND_STREAM = 1


@dataclass
class EvaluationConfig:
    """Which selectors to compare, on which categories, over how many problems"""
    selectors: List[str] = field(default_factory=lambda: ["TOP", "RAND", "OPT_IND", "OPT_GLOB"])
    n_problems: int = 1000
    side: str = "train"
    availability_exclusions: List[List[float]] = field(default_factory=list)
    batch_size: int = 100

    def violations(self) -> List[str]:
        problems = []
        if not self.selectors:
            problems.append("evaluation.selectors: at least one selector is required")
        for name in self.selectors:
            if name.upper() not in SelectorId.__members__:
                problems.append(f"evaluation.selectors: unknown selector '{name}'")
        if self.n_problems < 1:
            problems.append("evaluation.n_problems: must be >= 1")
        if self.side not in SIDES:
            problems.append(f"evaluation.side: must be one of {SIDES}, got '{self.side}'")
        if any(len(pair) != 2 for pair in self.availability_exclusions):
            problems.append("evaluation.availability_exclusions: entries must be [theta, phi] pairs")
        if self.batch_size < 1:
            problems.append("evaluation.batch_size: must be >= 1")
        return problems

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvaluationConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown evaluation configuration keys",
                violations=[f"evaluation.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def selector_ids(self) -> List[SelectorId]:
        return [SelectorId.parse(name) for name in self.selectors]


@dataclass
class ReportRow:
    pipeline: str
    selector: str
    FM: float
    NMI: float
    PUR: float

    def metric(self, metric: MetricId) -> float:
        return getattr(self, MetricId(metric).value)


@dataclass
class EvalReport:
    """
    Mean metrics per (pipeline, selector), rows in configured order.

    ``per_problem`` maps (pipeline, selector, metric) to the per-problem
    values; it lives in memory only and is ignored by equality.
    """
    rows: List[ReportRow]
    n_problems: int
    config: Dict[str, Any] = field(default_factory=dict)
    config_digest: Optional[str] = None
    per_problem: Dict[Tuple[str, str, str], np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    def row(self, pipeline: str, selector) -> ReportRow:
        name = selector.value if isinstance(selector, SelectorId) else str(selector).upper()
        for row in self.rows:
            if row.pipeline == pipeline and row.selector == name:
                return row
        raise ValidationError("No such report row", context={"pipeline": pipeline, "selector": name})

    def mean(self, pipeline: str, selector, metric: MetricId) -> float:
        return self.row(pipeline, selector).metric(metric)

    @property
    def pipelines(self) -> List[str]:
        return list(dict.fromkeys(r.pipeline for r in self.rows))

    @property
    def selectors(self) -> List[str]:
        return list(dict.fromkeys(r.selector for r in self.rows))


def _pipeline_features(model: DatasetModel, pipelines: Sequence[PipelineConfig],
                       feature_stores: Optional[Mapping[str, DatasetModel]]) -> Dict[str, np.ndarray]:
    """Feature matrix per pipeline, rows aligned with the reference dataset's records"""
    matrices = {}
    for pipeline in pipelines:
        store = (feature_stores or {}).get(pipeline.name)
        if store is None:
            matrices[pipeline.name] = model.features
        else:
            matrices[pipeline.name] = store.features[store.align(model.view_ids)]
    return matrices


def evaluate_selectors(
    model: DatasetModel,
    categories,
    selectors: Sequence[SelectorId],
    pipelines: Sequence[PipelineConfig],
    n_problems: int,
    seed: int,
    sampler: Optional[SamplerConfig] = None,
    scores: Optional[ScoreTable] = None,
    regressor: Optional[RegressorState] = None,
    feature_stores: Optional[Mapping[str, DatasetModel]] = None,
    availability: Availability = None,
    threads: int = 1,
    batch_size: int = 100,
) -> EvalReport:
    """
    Evaluate several selectors on one paired problem sequence.

    Problem i draws its poses from a generator keyed by (seed, i); RAND draws
    from a separate generator keyed the same way, so adding or removing
    selectors never changes the sampled problems.

    Args:
        model: Reference dataset
        categories: Categories problems are drawn from
        selectors: Selectors to compare
        pipelines: Clustering pipelines
        n_problems: Number of problems
        seed: Evaluation seed
        sampler: Sampling ranges (defaults to SamplerConfig())
        scores: Score table for OPT_IND / OPT_GLOB
        regressor: Trained regressor for MODEL
        feature_stores: Parallel feature stores keyed by pipeline name
        availability: Reachable (theta, phi) pairs for MODEL
        threads: Worker threads
        batch_size: Problems per work unit

    Returns:
        EvalReport

    Raises:
        ValidationError: No selectors, no pipelines or n_problems < 1
        MissingScoresError, MissingModelError: Selector prerequisites missing
    """
    selectors = [SelectorId(s) if not isinstance(s, SelectorId) else s for s in selectors]
    if not selectors:
        raise ValidationError("At least one selector is required")
    if not pipelines:
        raise ValidationError("At least one pipeline is required")
    if n_problems < 1:
        raise ValidationError("n_problems must be >= 1", context={"n_problems": n_problems})
    if any(s.needs_scores for s in selectors) and scores is None:
        raise MissingScoresError("OPT selectors need a score table")
    if SelectorId.MODEL in selectors and regressor is None:
        raise MissingModelError("MODEL selector needs a trained regressor")

    sampler = sampler or SamplerConfig()
    allowed = _allowed_list(model, categories)
    matrices = _pipeline_features(model, pipelines, feature_stores)
    cache = SelectionCache(model, scores, regressor, availability)

    def solve(index: int) -> Dict[Tuple[str, str, str], float]:
        pose_keys, truth = sample_pose_set(model, allowed, sampler, stream(seed, _PROBLEM_STREAM, index))
        k = int(np.unique(truth).size)
        values = {}
        for selector in selectors:
            rand_rng = stream(seed, _RAND_STREAM, index) if selector == SelectorId.RAND else None
            refs = np.asarray([cache.choose(selector, key, rand_rng) for key in pose_keys])
            for pipeline in pipelines:
                points = matrices[pipeline.name][refs].astype(np.float64)
                problem_pipeline = replace(pipeline, seed=derive_seed(pipeline.seed, index))
                assignment = cluster_points(points, k, problem_pipeline)
                for metric, value in score_metrics(assignment, truth).items():
                    values[(pipeline.name, selector.value, metric.value)] = value
        return values

    def solve_batch(indices: range) -> List[Dict[Tuple[str, str, str], float]]:
        return [solve(i) for i in indices]

    batches = [range(start, min(start + batch_size, n_problems)) for start in range(0, n_problems, batch_size)]
    logger.stage_start("evaluate", selectors=[s.value for s in selectors],
                       pipelines=[p.name for p in pipelines], n_problems=n_problems, threads=threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = [r for batch in pool.map(solve_batch, batches) for r in batch]
    else:
        results = [r for batch in map(solve_batch, batches) for r in batch]

    per_problem = {
        key: np.asarray([r[key] for r in results])
        for key in results[0]
    }
    rows = []
    for pipeline in pipelines:
        for selector in selectors:
            means = {m.value: float(per_problem[(pipeline.name, selector.value, m.value)].mean()) for m in METRICS}
            rows.append(ReportRow(pipeline.name, selector.value, **means))

    config = {
        "seed": seed,
        "categories": sorted(allowed),
        "sampler": sampler.to_dict(),
        "pipelines": [p.to_dict() for p in pipelines],
    }
    return EvalReport(rows=rows, n_problems=n_problems, config=config, per_problem=per_problem)


def evaluate(
    model: DatasetModel,
    categories,
    selector: SelectorId,
    pipelines: Sequence[PipelineConfig],
    n_problems: int,
    seed: int,
    **kwargs,
) -> EvalReport:
    """Evaluate one selector; the problem sequence depends only on seed"""
    return evaluate_selectors(model, categories, [selector], pipelines, n_problems, seed, **kwargs)


def paired_differences(report: EvalReport, selector_a, selector_b, pipeline: str,
                       metric: MetricId = MetricId.FM) -> np.ndarray:
    """
    Per-problem metric(a) - metric(b)

    Raises:
        ValidationError: If the report carries no per-problem values for the pair
    """
    a = SelectorId(selector_a).value
    b = SelectorId(selector_b).value
    m = MetricId(metric).value
    try:
        return report.per_problem[(pipeline, a, m)] - report.per_problem[(pipeline, b, m)]
    except KeyError:
        raise ValidationError("Report has no per-problem values for the pair",
                              context={"pipeline": pipeline, "selectors": (a, b)})


def format_report(report: EvalReport) -> str:
    """Aligned text table, rows in report order"""
    rows = [[r.pipeline, r.selector, f"{r.FM:.4f}", f"{r.NMI:.4f}", f"{r.PUR:.4f}"] for r in report.rows]
    table = tabulate(rows, headers=["pipeline", "selector", "FM", "NMI", "PUR"], tablefmt="github")
    return f"{table}\n\nproblems: {report.n_problems}\n"


def report_to_dict(report: EvalReport) -> Dict[str, Any]:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_problems": report.n_problems,
        "config_digest": report.config_digest,
        "config": report.config,
        "rows": [asdict(r) for r in report.rows],
    }


def render_report(report: EvalReport, path: Path) -> Tuple[Path, Path]:
    """
    Write the JSON report and its text table next to it (.txt)

    Raises:
        ValidationError: If the report has no rows
    """
    if not report.rows:
        raise ValidationError("Report has no selector rows")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table_path = path.with_suffix(".txt")

    temp_file = path.with_name(path.name + ".tmp")
    with open(temp_file, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
    temp_file.replace(path)
    table_path.write_text(format_report(report), encoding="utf-8")
    logger.info(f"Wrote report to {path}", rows=len(report.rows))
    return path, table_path


def load_report(path: Path) -> EvalReport:
    """
    Parse a JSON report

    Raises:
        DataError: Unreadable or malformed report
        VersionMismatchError: Unsupported schema version
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read report {path}", context={"error": str(e)})
    if data.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise VersionMismatchError("Unsupported report schema",
                                   context={"file": str(path), "version": data.get("schema_version")})
    try:
        rows = [ReportRow(**row) for row in data["rows"]]
        return EvalReport(rows=rows, n_problems=int(data["n_problems"]),
                          config=data.get("config", {}), config_digest=data.get("config_digest"))
    except (KeyError, TypeError) as e:
        raise DataError("Malformed report", context={"file": str(path), "error": str(e)})
