"""
Synthetic feature-space worlds with known per-view quality.

Every view feature is a blend of its pose anchor (category center plus
object and pose offsets) and a confounder vector shared by all categories:

    feature = q * anchor + (1 - q) * confounder + noise

so low-quality views of different categories look alike. The noise is
large next to the category separation: the category signal of a view grows
with q while the noise does not, so the chance that clustering places a
view with its category rises steadily with q instead of saturating. The
quality map is the ground truth used to audit scores and selectors.

A world can also be seen through extra feature extractors: fixed random
projections of the generated features plus extractor noise, aligned on the
same ViewIds, so pipelines can compare extractors on one world.
"""

from dataclasses import dataclass, asdict, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from viewselect.dataset import TOP_VIEW_ANGLES, DatasetModel, ViewId, ViewRecord
from viewselect.geometry import pose_grid
from viewselect.seeding import substream_seed
from utils.errors import DataError, ValidationError, WorldGenerationError
from utils.logger import get_logger

logger = get_logger(__name__)

QUALITY_MODELS = ("phi_dependent", "random_uniform", "constant")
QUALITY_DIGEST_PREFIX = "# digest "

QualityMap = Dict[ViewId, float]


@dataclass
class ExtractorConfig:
    """A second feature extractor over the same views"""
    name: str = "vgg"
    feature_dim: int = 48
    noise_scale: float = 5.0

    def violations(self) -> List[str]:
        problems = []
        if not self.name or not self.name.isidentifier():
            problems.append(f"world.extractors.{self.name}: name must be a non-empty identifier")
        if self.feature_dim < 1:
            problems.append(f"world.extractors.{self.name}.feature_dim: must be >= 1")
        if self.noise_scale < 0:
            problems.append(f"world.extractors.{self.name}.noise_scale: must be >= 0")
        return problems


@dataclass
class WorldConfig:
    """Shape and dispersion of a synthetic world"""
    n_categories: int = 12
    objects_per_category_range: Tuple[int, int] = (4, 6)
    poses_per_object: int = 3
    theta_step: float = 45.0
    phi_values: List[float] = field(default_factory=lambda: [45.0, 60.0, 75.0])
    exclusions: List[float] = field(default_factory=lambda: [270.0])
    unreachable_range: Tuple[int, int] = (1, 1)
    feature_dim: int = 64
    category_separation: float = 10.0
    object_spread: float = 2.0
    pose_spread: float = 1.0
    noise_scale: float = 15.0
    quality_model: str = "phi_dependent"
    # phi_dependent: (base, slope per 45 deg of elevation); constant: (value,)
    quality_weights: List[float] = field(default_factory=lambda: [0.95, -0.75])
    quality_jitter: float = 0.05
    extractors: List[ExtractorConfig] = field(default_factory=lambda: [ExtractorConfig()])
    max_center_attempts: int = 10000
    seed: int = 0

    def __post_init__(self):
        self.objects_per_category_range = tuple(self.objects_per_category_range)
        self.unreachable_range = tuple(self.unreachable_range)
        self.extractors = [e if isinstance(e, ExtractorConfig) else ExtractorConfig(**e) for e in self.extractors]

    def violations(self) -> List[str]:
        problems = []
        if self.n_categories < 2:
            problems.append("world.n_categories: must be >= 2")
        lo, hi = self.objects_per_category_range
        if lo < 1 or hi < lo:
            problems.append("world.objects_per_category_range: must satisfy 1 <= lo <= hi")
        if self.poses_per_object < 1:
            problems.append("world.poses_per_object: must be >= 1")
        grid_size = len(self.grid())
        ulo, uhi = self.unreachable_range
        if ulo < 0 or uhi < ulo:
            problems.append("world.unreachable_range: must satisfy 0 <= lo <= hi")
        elif grid_size - uhi < 1:
            problems.append("world.unreachable_range: every pose needs at least one reachable grid view")
        if self.feature_dim < 1:
            problems.append("world.feature_dim: must be >= 1")
        if not self.category_separation > 0:
            problems.append("world.category_separation: must be > 0")
        for name in ("object_spread", "pose_spread", "noise_scale", "quality_jitter"):
            if getattr(self, name) < 0:
                problems.append(f"world.{name}: must be >= 0")
        if self.quality_model not in QUALITY_MODELS:
            problems.append(f"world.quality_model: must be one of {QUALITY_MODELS}, got '{self.quality_model}'")
        elif self.quality_model == "phi_dependent" and len(self.quality_weights) != 2:
            problems.append("world.quality_weights: phi_dependent needs [base, slope]")
        elif self.quality_model == "constant" and (
                len(self.quality_weights) < 1 or not 0 <= self.quality_weights[0] <= 1):
            problems.append("world.quality_weights: constant needs a value in [0, 1]")
        names = [e.name for e in self.extractors]
        if len(set(names)) != len(names):
            problems.append("world.extractors: names must be unique")
        for extractor in self.extractors:
            problems.extend(extractor.violations())
        if self.max_center_attempts < 1:
            problems.append("world.max_center_attempts: must be >= 1")
        return problems

    def validate(self) -> 'WorldConfig':
        problems = self.violations()
        if problems:
            raise ValidationError("Invalid world configuration", violations=problems)
        return self

    def grid(self) -> List[Tuple[float, float]]:
        try:
            return pose_grid(self.theta_step, self.phi_values, self.exclusions)
        except ValidationError:
            return []

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'WorldConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(
                "Unknown world configuration keys",
                violations=[f"world.{key}: unknown key" for key in sorted(unknown)]
            )
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["objects_per_category_range"] = list(self.objects_per_category_range)
        data["unreachable_range"] = list(self.unreachable_range)
        return data


@dataclass
class SyntheticWorld:
    """Generated dataset with its ground truth"""
    dataset: DatasetModel
    quality: QualityMap
    centers: np.ndarray
    confounder: np.ndarray


def _gaussian_offset(rng: np.random.Generator, spread: float, dim: int) -> np.ndarray:
    """Gaussian offset whose expected norm is about ``spread``"""
    return spread * rng.standard_normal(dim) / np.sqrt(dim)


def _sphere_point(rng: np.random.Generator, radius: float, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm == 0.0:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    return radius * v / norm


def sample_centers(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Category centers on a sphere with pairwise distance >= separation

    Raises:
        WorldGenerationError: If the rejection budget runs out
    """
    centers: List[np.ndarray] = []
    for c in range(cfg.n_categories):
        for _ in range(cfg.max_center_attempts):
            candidate = _sphere_point(rng, cfg.category_separation, cfg.feature_dim)
            if all(np.linalg.norm(candidate - other) >= cfg.category_separation for other in centers):
                centers.append(candidate)
                break
        else:
            raise WorldGenerationError(
                "Category separation infeasible in feature dimension",
                context={"placed": c, "n_categories": cfg.n_categories,
                         "feature_dim": cfg.feature_dim, "attempts": cfg.max_center_attempts}
            )
    return np.stack(centers)


def view_quality(cfg: WorldConfig, phi: float, rng: np.random.Generator) -> float:
    """Generative quality of a view at elevation phi"""
    if cfg.quality_model == "constant":
        return float(cfg.quality_weights[0])
    if cfg.quality_model == "random_uniform":
        return float(rng.uniform(0.0, 1.0))
    base, slope = cfg.quality_weights
    jitter = rng.uniform(-cfg.quality_jitter, cfg.quality_jitter) if cfg.quality_jitter > 0 else 0.0
    return float(np.clip(base + slope * (phi - 45.0) / 45.0 + jitter, 0.0, 1.0))


def build_world(cfg: WorldConfig) -> SyntheticWorld:
    """
    Generate a world: dataset, quality map, category centers and confounder.

    Each pose holds its top view (view 0) plus the reachable part of the
    pose grid; a per-pose number of grid views drawn from unreachable_range
    is dropped. Grid views keep their grid position (1-based) as view index.

    Args:
        cfg: World configuration

    Returns:
        SyntheticWorld

    Raises:
        ValidationError: On invalid configuration
        WorldGenerationError: If category separation is infeasible
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.feature_dim
    grid = cfg.grid()

    logger.stage_start("generate_world", categories=cfg.n_categories, feature_dim=dim,
                       quality_model=cfg.quality_model, seed=cfg.seed)

    centers = sample_centers(cfg, rng)
    confounder = _sphere_point(rng, cfg.category_separation, dim)
    categories = [f"cat{c:02d}" for c in range(cfg.n_categories)]

    records: List[ViewRecord] = []
    quality: QualityMap = {}
    olo, ohi = cfg.objects_per_category_range
    ulo, uhi = cfg.unreachable_range

    for c, category in enumerate(categories):
        n_objects = int(rng.integers(olo, ohi + 1))
        for obj in range(n_objects):
            object_center = centers[c] + _gaussian_offset(rng, cfg.object_spread, dim)
            for pose in range(cfg.poses_per_object):
                anchor = object_center + _gaussian_offset(rng, cfg.pose_spread, dim)
                n_drop = int(rng.integers(ulo, uhi + 1))
                dropped = set(rng.choice(len(grid), size=n_drop, replace=False).tolist()) if n_drop else set()
                views = [(0, TOP_VIEW_ANGLES, True)] + [
                    (g + 1, angles, False) for g, angles in enumerate(grid) if g not in dropped
                ]
                for view_index, (theta, phi), is_top in views:
                    q = view_quality(cfg, phi, rng)
                    noise = cfg.noise_scale * rng.standard_normal(dim) / np.sqrt(dim)
                    vector = q * anchor + (1.0 - q) * confounder + noise
                    vid = ViewId(category, obj, pose, view_index)
                    records.append(ViewRecord(vid, theta, phi, vector.astype(np.float32), is_top))
                    quality[vid] = q

    dataset = DatasetModel(records, dim, categories)
    logger.info("Generated synthetic world", **dataset.summary())
    return SyntheticWorld(dataset=dataset, quality=quality, centers=centers, confounder=confounder)


def generate_world(cfg: WorldConfig) -> Tuple[DatasetModel, QualityMap]:
    """Generate a world and return (dataset, quality map)"""
    world = build_world(cfg)
    return world.dataset, world.quality


def reference_world_config(seed: int = 0) -> WorldConfig:
    """29 categories, 4-6 objects each, 3 poses, 17-21 views per pose"""
    return WorldConfig(
        n_categories=29,
        objects_per_category_range=(4, 6),
        poses_per_object=3,
        unreachable_range=(1, 5),
        seed=seed,
    )


def emit_reference_world(seed: int = 0) -> Tuple[DatasetModel, QualityMap]:
    """World shaped like the physical robot dataset"""
    return generate_world(reference_world_config(seed))


def extract_features(dataset: DatasetModel, extractor: ExtractorConfig, seed: int) -> DatasetModel:
    """
    The dataset as seen by another feature extractor

    A fixed Gaussian projection to ``extractor.feature_dim`` (norm-preserving
    in expectation) followed by fresh extractor noise. Records keep their
    ViewIds, angles and order.

    Args:
        dataset: Generated dataset
        extractor: Extractor shape and noise
        seed: World seed; the extractor stream is derived from it by name

    Returns:
        DatasetModel over the same views
    """
    rng = np.random.default_rng(substream_seed(seed, f"extractor:{extractor.name}"))
    out_dim = extractor.feature_dim
    projection = rng.standard_normal((dataset.feature_dim, out_dim)) / np.sqrt(out_dim)
    features = dataset.features.astype(np.float64) @ projection
    features += extractor.noise_scale * rng.standard_normal(features.shape) / np.sqrt(out_dim)
    records = [
        ViewRecord(record.id, record.theta, record.phi, row.astype(np.float32), record.is_top)
        for record, row in zip(dataset.records, features)
    ]
    logger.debug("Extracted features", extractor=extractor.name, feature_dim=out_dim)
    return DatasetModel(records, out_dim, dataset.category_list)


def extractor_store_path(features_path: Path, name: str) -> Path:
    """``out/features.svsf`` -> ``out/features_<name>.svsf``"""
    features_path = Path(features_path)
    return features_path.with_name(f"{features_path.stem}_{name}{features_path.suffix}")


def save_quality(quality: QualityMap, path: Path, config_digest: Optional[str] = None):
    """
    Write the quality sidecar: one ``category object pose view q`` line per view

    Args:
        quality: Generative quality per view
        path: Output file
        config_digest: Hex SHA-256 digest of the producing configuration,
            written as a ``# digest <hex>`` header line
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")
    with open(temp_file, "w", encoding="utf-8") as f:
        if config_digest:
            f.write(f"{QUALITY_DIGEST_PREFIX}{config_digest}\n")
        f.write("# category object pose view quality\n")
        for vid in sorted(quality):
            f.write(f"{vid.category} {vid.object_index} {vid.pose_index} {vid.view_index} {quality[vid]!r}\n")
    temp_file.replace(path)
    logger.debug(f"Saved quality sidecar to {path}", views=len(quality))


def quality_digest(path: Path) -> Optional[str]:
    """Config digest from a quality sidecar's header, None if it has none"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.startswith("#"):
                    break
                if line.startswith(QUALITY_DIGEST_PREFIX):
                    return line[len(QUALITY_DIGEST_PREFIX):].strip() or None
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot read quality file {path}", context={"error": str(e)})
    return None


def load_quality(path: Path) -> QualityMap:
    """
    Read a quality sidecar

    Raises:
        DataError: On malformed lines or qualities outside [0, 1]
    """
    path = Path(path)
    quality: QualityMap = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"Cannot read quality file {path}", context={"error": str(e)})
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        try:
            vid = ViewId(parts[0], int(parts[1]), int(parts[2]), int(parts[3]))
            q = float(parts[4])
        except (IndexError, ValueError):
            raise DataError("Malformed quality line", context={"file": str(path), "line": line_no})
        if not 0.0 <= q <= 1.0:
            raise DataError("Quality outside [0, 1]", context={"file": str(path), "line": line_no, "quality": q})
        quality[vid] = q
    return quality


def mean_intercategory_distance(world: SyntheticWorld) -> float:
    """Mean distance between per-category feature means"""
    dataset = world.dataset
    means = np.stack([
        dataset.features[dataset.category_codes == code].mean(axis=0)
        for code in range(len(dataset.category_list))
    ])
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.linalg.norm(diffs, axis=-1)
    n = len(means)
    return float(dist.sum() / (n * (n - 1)))
