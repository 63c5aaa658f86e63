"""
Monte-Carlo semantic view scoring.

Random clustering problems are sampled from the training categories, solved
with a clustering pipeline and scored with the Fowlkes-Mallows index. Every
view accumulates its individual FM (s_hat) and the whole-problem FM (S_hat)
over the problems that contain it.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr
from tabulate import tabulate

from viewselect.clustering import PipelineConfig, cluster_points
from viewselect.dataset import CategorySplit, DatasetModel, PoseKey, ViewId, _atomic_write
from viewselect.metrics import fm_global, fm_individual_all, pair_confusion
from viewselect.seeding import derive_seed, stream
from utils.errors import (
    CoverageUnreachableError,
    DataError,
    MalformedHeaderError,
    TruncatedFileError,
    UnknownCategoryError,
    ValidationError,
    VersionMismatchError,
)
from utils.logger import get_logger

logger = get_logger(__name__)

SCORE_MAGIC = b"SVSS"
SCORE_VERSION = 1

# magic, version, n_views, config digest, category table length
_HEADER = struct.Struct("<4sIQ32sI")
_RECORD = np.dtype([
    ("category", "<u2"),
    ("object", "<u2"),
    ("pose", "<u2"),
    ("view", "<u2"),
    ("sum_individual", "<f8"),
    ("sum_global", "<f8"),
    ("n_problems", "<u8"),
    ("scaled", "<f8"),
])

# stream tags keep i.i.d. problems and coverage-repair problems apart
_IID_STREAM = 0
_REPAIR_STREAM = 1

DEGENERATE_SCALED = 0.5


@dataclass
class SamplerConfig:
    """Random clustering-problem sampling and Monte-Carlo stopping rules"""
    n_problems: int = 10000
    min_coverage: int = 1000
    categories_range: Optional[Tuple[int, int]] = None
    objects_per_category_range: Optional[Tuple[int, int]] = None
    seed: int = 0
    problem_offset: int = 0
    batch_size: int = 500
    max_repair_rounds: int = 10000
    progress_every: int = 10000

    def __post_init__(self):
        if self.categories_range is not None:
            self.categories_range = tuple(self.categories_range)
        if self.objects_per_category_range is not None:
            self.objects_per_category_range = tuple(self.objects_per_category_range)

    def violations(self) -> List[str]:
        """List every violated constraint"""
        problems = []
        if self.n_problems < 0:
            problems.append("sampler.n_problems: must be >= 0")
        if self.min_coverage < 0:
            problems.append("sampler.min_coverage: must be >= 0")
        if self.categories_range is not None:
            lo, hi = self.categories_range
            if lo < 2:
                problems.append("sampler.categories_range: lower bound must be >= 2")
            if hi < lo:
                problems.append("sampler.categories_range: empty range")
        if self.objects_per_category_range is not None:
            lo, hi = self.objects_per_category_range
            if lo < 1:
                problems.append("sampler.objects_per_category_range: lower bound must be >= 1")
            if hi < lo:
                problems.append("sampler.objects_per_category_range: empty range")
        if self.problem_offset < 0:
            problems.append("sampler.problem_offset: must be >= 0")
        if self.batch_size < 1:
            problems.append("sampler.batch_size: must be >= 1")
        if self.progress_every < 1:
            problems.append("sampler.progress_every: must be >= 1")
        return problems

    def validate(self) -> 'SamplerConfig':
        problems = self.violations()
        if problems:
            raise ValidationError("Invalid sampler configuration", violations=problems)
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SamplerConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown sampler configuration keys",
                violations=[f"sampler.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("categories_range", "objects_per_category_range"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    def category_bounds(self, available: int) -> Tuple[int, int]:
        """Category-count range clamped to availability; default [2, min(10, available)]"""
        lo, hi = self.categories_range or (2, 10)
        return lo, min(hi, available)

    def object_bounds(self, available: int) -> Tuple[int, int]:
        """Objects-per-category range clamped to availability; default [1, available]"""
        lo, hi = self.objects_per_category_range or (1, available)
        hi = min(hi, available)
        return min(lo, hi), hi


@dataclass
class ClusteringProblem:
    """A sampled set of views with their hidden category labels"""
    view_refs: np.ndarray
    truth: np.ndarray

    @property
    def n_categories(self) -> int:
        return int(np.unique(self.truth).size)

    def __len__(self) -> int:
        return len(self.view_refs)


def _allowed_list(model: DatasetModel, allowed_categories) -> List[str]:
    allowed = sorted(allowed_categories)
    unknown = [c for c in allowed if not model.objects_of(c)]
    if unknown:
        raise UnknownCategoryError("Categories have no views in the dataset", context={"categories": unknown})
    return allowed


def draw_object_counts(bounds: Sequence[Tuple[int, int]], rng: np.random.Generator) -> List[int]:
    """
    Objects per category, uniform on each category's bounds.

    A draw where every category gets a single object has no same-category
    pair, so its FM is 0 however good the clustering; such draws are
    repeated whenever some category's bound allows a second object.
    """
    while True:
        counts = [int(rng.integers(lo, hi + 1)) for lo, hi in bounds]
        if any(n > 1 for n in counts) or all(hi < 2 for _, hi in bounds):
            return counts


def sample_pose_set(
    model: DatasetModel,
    allowed: Sequence[str],
    cfg: SamplerConfig,
    rng: np.random.Generator,
    force_pose: Optional[PoseKey] = None,
) -> Tuple[List[PoseKey], np.ndarray]:
    """
    Sample a problem skeleton at (category, object, pose) granularity.

    The category count is uniform on the clamped range, then categories,
    objects per category, objects, and one pose per object are drawn
    uniformly without replacement. Object counts follow draw_object_counts,
    so a problem has a same-category pair whenever the ranges allow one.

    Args:
        model: Dataset
        allowed: Sorted category names to draw from
        cfg: Sampler configuration
        rng: Random generator
        force_pose: Pose that must be part of the problem

    Returns:
        (pose keys, category codes aligned with the pose keys)

    Raises:
        ValidationError: If fewer categories are allowed than the range's lower bound
    """
    lo, hi = cfg.category_bounds(len(allowed))
    if len(allowed) < lo:
        raise ValidationError(
            "Not enough categories for the sampling range",
            context={"available": len(allowed), "min_categories": lo}
        )
    n_categories = int(rng.integers(lo, hi + 1))

    if force_pose is None:
        categories = [allowed[i] for i in rng.choice(len(allowed), size=n_categories, replace=False)]
    else:
        others = [c for c in allowed if c != force_pose[0]]
        picked = rng.choice(len(others), size=n_categories - 1, replace=False)
        categories = [force_pose[0]] + [others[i] for i in picked]

    bounds = [cfg.object_bounds(len(model.objects_of(category))) for category in categories]
    counts = draw_object_counts(bounds, rng)

    pose_keys: List[PoseKey] = []
    truth: List[int] = []
    for category, n_objects in zip(categories, counts):
        objects = model.objects_of(category)
        if force_pose is not None and category == force_pose[0]:
            others = [o for o in objects if o != force_pose[1]]
            picked = rng.choice(len(others), size=n_objects - 1, replace=False)
            chosen = [force_pose[1]] + [others[i] for i in picked]
        else:
            chosen = [objects[i] for i in rng.choice(len(objects), size=n_objects, replace=False)]

        code = model.category_list.index(category)
        for obj in chosen:
            if force_pose is not None and (category, obj) == force_pose[:2]:
                pose = force_pose[2]
            else:
                poses = model.poses_of(category, obj)
                pose = poses[int(rng.integers(len(poses)))]
            pose_keys.append((category, obj, pose))
            truth.append(code)

    return pose_keys, np.asarray(truth, dtype=np.int64)


def sample_problem(
    model: DatasetModel,
    allowed_categories,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    force_view: Optional[int] = None,
) -> ClusteringProblem:
    """
    Sample a random clustering problem with one uniformly drawn view per pose

    Args:
        model: Dataset
        allowed_categories: Categories to draw from
        cfg: Sampler configuration
        rng: Random generator
        force_view: Record index that must be part of the problem

    Returns:
        ClusteringProblem

    Raises:
        ValidationError: If too few categories are allowed
    """
    allowed = _allowed_list(model, allowed_categories)
    force_pose = model.records[force_view].id.pose_key if force_view is not None else None
    pose_keys, truth = sample_pose_set(model, allowed, cfg, rng, force_pose)

    refs = np.empty(len(pose_keys), dtype=np.int64)
    for i, key in enumerate(pose_keys):
        if key == force_pose:
            refs[i] = force_view
        else:
            views = model.views_of_pose(key)
            refs[i] = views[int(rng.integers(len(views)))]
    return ClusteringProblem(view_refs=refs, truth=truth)


class ScoreTable:
    """
    Accumulated Monte-Carlo sums per view.

    s_hat = sum_individual / n_problems, S_hat = sum_global / n_problems;
    ``scaled`` holds the per-pose [0, 1] rescaling of s_hat (NaN until
    rescale_per_pose runs).
    """

    def __init__(
        self,
        view_ids: Sequence[ViewId],
        sum_individual: np.ndarray,
        sum_global: np.ndarray,
        n_problems: np.ndarray,
        scaled: Optional[np.ndarray] = None,
        category_list: Optional[Sequence[str]] = None,
        config_digest: Optional[str] = None,
    ):
        self.view_ids: List[ViewId] = list(view_ids)
        self.sum_individual = np.asarray(sum_individual, dtype=np.float64)
        self.sum_global = np.asarray(sum_global, dtype=np.float64)
        self.n_problems = np.asarray(n_problems, dtype=np.int64)
        n = len(self.view_ids)
        self.scaled = np.full(n, np.nan) if scaled is None else np.asarray(scaled, dtype=np.float64)
        self.category_list = tuple(category_list) if category_list else tuple(
            sorted({v.category for v in self.view_ids})
        )
        self.config_digest = config_digest
        if not (self.sum_individual.shape == self.sum_global.shape == self.n_problems.shape == self.scaled.shape == (n,)):
            raise ValidationError("Score arrays must align with view ids", context={"views": n})
        self._index = {vid: i for i, vid in enumerate(self.view_ids)}

    def __len__(self) -> int:
        return len(self.view_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return (
            self.view_ids == other.view_ids
            and np.array_equal(self.sum_individual, other.sum_individual)
            and np.array_equal(self.sum_global, other.sum_global)
            and np.array_equal(self.n_problems, other.n_problems)
            and np.array_equal(self.scaled, other.scaled, equal_nan=True)
        )

    __hash__ = None

    @property
    def s_hat(self) -> np.ndarray:
        """Individual semantic view score"""
        return np.divide(self.sum_individual, self.n_problems,
                         out=np.full(len(self), np.nan), where=self.n_problems > 0)

    @property
    def S_hat(self) -> np.ndarray:
        """Global semantic view score"""
        return np.divide(self.sum_global, self.n_problems,
                         out=np.full(len(self), np.nan), where=self.n_problems > 0)

    def __contains__(self, view_id: ViewId) -> bool:
        return view_id in self._index

    def index_of(self, view_id: ViewId) -> Optional[int]:
        """Row of a view, or None if the view was never scored"""
        return self._index.get(view_id)

    def pose_groups(self) -> Dict[PoseKey, np.ndarray]:
        """Row indices grouped by pose"""
        groups: Dict[PoseKey, List[int]] = {}
        for i, vid in enumerate(self.view_ids):
            groups.setdefault(vid.pose_key, []).append(i)
        return {key: np.asarray(rows) for key, rows in groups.items()}

    def with_scaled(self, scaled: np.ndarray) -> 'ScoreTable':
        return ScoreTable(self.view_ids, self.sum_individual, self.sum_global, self.n_problems,
                          scaled, self.category_list, self.config_digest)


def accumulate_scores(
    model: DatasetModel,
    split: CategorySplit,
    pipeline: PipelineConfig,
    cfg: SamplerConfig,
    threads: int = 1,
) -> ScoreTable:
    """
    Monte-Carlo estimate of individual and global semantic view scores.

    Runs cfg.n_problems i.i.d. problems over the training categories, then
    repair rounds that force one problem per under-covered view until every
    training view is contained in at least cfg.min_coverage problems.
    Problems are solved in fixed batches reduced in batch order, so results
    do not depend on the thread count.

    Args:
        model: Dataset
        split: Category split; only training categories are sampled and scored
        pipeline: Clustering pipeline
        cfg: Sampler configuration
        threads: Worker threads

    Returns:
        ScoreTable over the training views (scaled not yet computed)

    Raises:
        UnknownCategoryError: If a training category has no views
        CoverageUnreachableError: If the coverage floor cannot be met
    """
    cfg.validate()
    pipeline.validate()
    allowed = _allowed_list(model, split.train_categories)
    lo, _ = cfg.category_bounds(len(allowed))
    if len(allowed) < lo:
        raise CoverageUnreachableError(
            "Training categories cannot fill the smallest problem",
            context={"train_categories": len(allowed), "min_categories": lo}
        )

    train_idx = model.records_in(allowed)
    n_records = len(model)
    sum_ind = np.zeros(n_records)
    sum_glob = np.zeros(n_records)
    counts = np.zeros(n_records, dtype=np.int64)
    progress = {"done": 0, "next_audit": cfg.progress_every}

    def solve_batch(tasks: List[Tuple[int, int, Optional[int]]]):
        local_ind = np.zeros(n_records)
        local_glob = np.zeros(n_records)
        local_counts = np.zeros(n_records, dtype=np.int64)
        for tag, index, forced in tasks:
            problem = sample_problem(model, allowed, cfg, stream(cfg.seed, tag, index), force_view=forced)
            points = model.features[problem.view_refs].astype(np.float64)
            problem_pipeline = replace(pipeline, seed=derive_seed(pipeline.seed, tag, index))
            assignment = cluster_points(points, problem.n_categories, problem_pipeline)
            conf = pair_confusion(assignment, problem.truth)
            local_ind[problem.view_refs] += fm_individual_all(conf)
            local_glob[problem.view_refs] += fm_global(conf)
            local_counts[problem.view_refs] += 1
        return local_ind, local_glob, local_counts, len(tasks)

    def run(tasks: List[Tuple[int, int, Optional[int]]]):
        batches = [tasks[i:i + cfg.batch_size] for i in range(0, len(tasks), cfg.batch_size)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = pool.map(solve_batch, batches)
                _reduce(results)
        else:
            _reduce(map(solve_batch, batches))

    def _reduce(results):
        nonlocal sum_ind, sum_glob, counts
        for local_ind, local_glob, local_counts, solved in results:
            sum_ind += local_ind
            sum_glob += local_glob
            counts += local_counts
            progress["done"] += solved
            if progress["done"] >= progress["next_audit"]:
                logger.coverage_audit(progress["done"], counts[train_idx], cfg.min_coverage)
                while progress["next_audit"] <= progress["done"]:
                    progress["next_audit"] += cfg.progress_every

    logger.stage_start("accumulate_scores", pipeline=pipeline.name, n_problems=cfg.n_problems,
                       min_coverage=cfg.min_coverage, train_views=len(train_idx), threads=threads)
    run([(_IID_STREAM, cfg.problem_offset + i, None) for i in range(cfg.n_problems)])

    repair_index = 0
    for round_no in range(cfg.max_repair_rounds + 1):
        under = train_idx[counts[train_idx] < cfg.min_coverage]
        if under.size == 0:
            break
        if round_no == cfg.max_repair_rounds:
            raise CoverageUnreachableError(
                "Coverage floor not reached within the repair budget",
                context={"under_covered": int(under.size), "rounds": cfg.max_repair_rounds}
            )
        tasks = [(_REPAIR_STREAM, cfg.problem_offset + repair_index + j, int(v)) for j, v in enumerate(under)]
        repair_index += len(tasks)
        run(tasks)

    logger.coverage_audit(progress["done"], counts[train_idx], cfg.min_coverage)
    logger.info("Monte-Carlo scoring complete", problems=progress["done"], repair_problems=repair_index)

    return ScoreTable(
        view_ids=[model.records[i].id for i in train_idx],
        sum_individual=sum_ind[train_idx],
        sum_global=sum_glob[train_idx],
        n_problems=counts[train_idx],
        category_list=model.category_list,
    )


def minmax_by_group(values: np.ndarray, groups: Mapping[Any, np.ndarray]) -> np.ndarray:
    """
    Affinely map values to [0, 1] within each group; constant groups map to 0.5

    Args:
        values: Values to rescale
        groups: Group key -> row indices

    Returns:
        Rescaled copy
    """
    out = np.full(len(values), np.nan)
    for rows in groups.values():
        group = values[rows]
        lo, hi = group.min(), group.max()
        if hi > lo:
            out[rows] = (group - lo) / (hi - lo)
        else:
            out[rows] = DEGENERATE_SCALED
    return out


def rescale_per_pose(table: ScoreTable) -> ScoreTable:
    """Per-pose [0, 1] rescaling of s_hat"""
    return table.with_scaled(minmax_by_group(table.s_hat, table.pose_groups()))


def merge_scores(a: ScoreTable, b: ScoreTable) -> ScoreTable:
    """
    Add the accumulators of two runs over the same views

    Raises:
        ValidationError: If the tables cover different views
    """
    if a.view_ids != b.view_ids:
        raise ValidationError("Score tables cover different views", context={"left": len(a), "right": len(b)})
    return ScoreTable(
        a.view_ids,
        a.sum_individual + b.sum_individual,
        a.sum_global + b.sum_global,
        a.n_problems + b.n_problems,
        category_list=a.category_list,
    )


def save_scores(table: ScoreTable, path: Path, config_digest: Optional[str] = None):
    """
    Write a score table to the binary score format

    Args:
        table: Scores
        path: Output file
        config_digest: Hex SHA-256 digest of the producing configuration
    """
    path = Path(path)
    categories = list(table.category_list)
    code = {c: i for i, c in enumerate(categories)}
    records = np.zeros(len(table), dtype=_RECORD)
    records["category"] = [code[v.category] for v in table.view_ids]
    records["object"] = [v.object_index for v in table.view_ids]
    records["pose"] = [v.pose_index for v in table.view_ids]
    records["view"] = [v.view_index for v in table.view_ids]
    records["sum_individual"] = table.sum_individual
    records["sum_global"] = table.sum_global
    records["n_problems"] = table.n_problems
    records["scaled"] = table.scaled

    digest = config_digest or table.config_digest
    digest_bytes = bytes.fromhex(digest) if digest else bytes(32)
    category_table = "\n".join(categories).encode("utf-8")
    header = _HEADER.pack(SCORE_MAGIC, SCORE_VERSION, len(table), digest_bytes, len(category_table))
    _atomic_write(path, header + category_table + records.tobytes())
    logger.info(f"Saved scores to {path}", views=len(table))


def load_scores(path: Path) -> ScoreTable:
    """
    Read a binary score file

    Raises:
        MalformedHeaderError, VersionMismatchError, TruncatedFileError, DataError
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read score file {path}", context={"error": str(e)})

    if len(data) < _HEADER.size:
        raise TruncatedFileError("Score file header is incomplete", context={"file": str(path)})
    magic, version, n_views, digest_bytes, table_len = _HEADER.unpack_from(data, 0)
    if magic != SCORE_MAGIC:
        raise MalformedHeaderError("Not a score file (bad magic)", context={"file": str(path)})
    if version != SCORE_VERSION:
        raise VersionMismatchError(
            "Unsupported score file version",
            context={"file": str(path), "version": version, "supported": SCORE_VERSION}
        )
    offset = _HEADER.size
    expected = offset + table_len + n_views * _RECORD.itemsize
    if len(data) < expected:
        raise TruncatedFileError(
            "Score file is truncated",
            context={"file": str(path), "expected_bytes": expected, "actual_bytes": len(data)}
        )
    if len(data) > expected:
        raise DataError("Score file has trailing bytes", context={"file": str(path)})

    try:
        table_text = data[offset:offset + table_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedHeaderError("Category table is not valid UTF-8", context={"file": str(path), "error": str(e)})
    categories = table_text.split("\n") if table_text else []
    records = np.frombuffer(data, dtype=_RECORD, count=n_views, offset=offset + table_len)
    if n_views and int(records["category"].max()) >= len(categories):
        raise DataError("Score record references a category outside the table", context={"file": str(path)})

    view_ids = [
        ViewId(categories[r["category"]], int(r["object"]), int(r["pose"]), int(r["view"]))
        for r in records
    ]
    digest = None if digest_bytes == bytes(32) else digest_bytes.hex()
    return ScoreTable(
        view_ids,
        records["sum_individual"].copy(),
        records["sum_global"].copy(),
        records["n_problems"].astype(np.int64),
        records["scaled"].copy(),
        category_list=categories,
        config_digest=digest,
    )


def score_fidelity(table: ScoreTable, quality: Mapping[ViewId, float]) -> float:
    """
    Mean within-pose Spearman correlation between generative quality and s_hat

    Poses where either side is constant are skipped.

    Args:
        table: Scores
        quality: Generative quality per ViewId

    Returns:
        Mean correlation over informative poses (NaN if none)
    """
    s_hat = table.s_hat
    correlations = []
    for rows in table.pose_groups().values():
        q = np.asarray([quality[table.view_ids[r]] for r in rows])
        s = s_hat[rows]
        if np.ptp(q) == 0 or np.ptp(s) == 0:
            continue
        rho, _ = spearmanr(q, s)
        if np.isfinite(rho):
            correlations.append(rho)
    return float(np.mean(correlations)) if correlations else float("nan")


def format_score_summary(table: ScoreTable) -> str:
    """Per-category summary table of the scores"""
    s_hat = table.s_hat
    S_hat = table.S_hat
    by_category: Dict[str, List[int]] = {}
    for i, vid in enumerate(table.view_ids):
        by_category.setdefault(vid.category, []).append(i)
    rows = []
    for category in sorted(by_category):
        idx = np.asarray(by_category[category])
        rows.append([
            category,
            len(idx),
            int(table.n_problems[idx].min()),
            round(float(np.nanmean(s_hat[idx])), 4),
            round(float(np.nanmean(S_hat[idx])), 4),
        ])
    return tabulate(rows, headers=["category", "views", "min N", "mean s_hat", "mean S_hat"], tablefmt="github")
