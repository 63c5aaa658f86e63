"""
Canonical data model for objects, poses and views with feature vectors,
the binary feature-store format, the text interchange format and
train/test category splitting
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import (
    DataError,
    DimensionMismatchError,
    DuplicateViewError,
    EmptyDatasetError,
    MalformedHeaderError,
    MissingTopViewError,
    TruncatedFileError,
    UnknownCategoryError,
    ValidationError,
    VersionMismatchError,
)
from utils.logger import get_logger

logger = get_logger(__name__)

FEATURE_STORE_MAGIC = b"SVSF"
FEATURE_STORE_VERSION = 1
DIGEST_MAGIC = b"SVSD"
DIGEST_SIZE = 32

# magic, version, feature_dim, n_records, category table length
_HEADER = struct.Struct("<4sIIQI")
_DIGEST_BLOCK = len(DIGEST_MAGIC) + DIGEST_SIZE

TOP_VIEW_ANGLES = (90.0, 90.0)
_TOP_TOLERANCE_DEG = 1e-3

PoseKey = Tuple[str, int, int]


def record_dtype(feature_dim: int) -> np.dtype:
    """Packed little-endian record layout of the binary feature store"""
    return np.dtype([
        ("category", "<u2"),
        ("object", "<u2"),
        ("pose", "<u2"),
        ("view", "<u2"),
        ("theta", "<f4"),
        ("phi", "<f4"),
        ("is_top", "u1"),
        ("features", "<f4", (feature_dim,)),
    ])


@dataclass(frozen=True, order=True)
class ViewId:
    """Identity of one view of one object in one pose"""
    category: str
    object_index: int
    pose_index: int
    view_index: int

    @property
    def pose_key(self) -> PoseKey:
        return (self.category, self.object_index, self.pose_index)

    def __str__(self):
        return f"{self.category}/{self.object_index}/{self.pose_index}/{self.view_index}"


@dataclass(frozen=True, eq=False)
class ViewRecord:
    """One view: identity, camera angles (degrees) and its feature vector"""
    id: ViewId
    theta: float
    phi: float
    features: np.ndarray
    is_top: bool = False

    @property
    def angles(self) -> Tuple[float, float]:
        return (self.theta, self.phi)


@dataclass(frozen=True)
class CategorySplit:
    """Disjoint train/test partition of a dataset's categories"""
    train_categories: frozenset
    test_categories: frozenset

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "train_categories": sorted(self.train_categories),
            "test_categories": sorted(self.test_categories),
        }


class DatasetModel:
    """
    Immutable, validated collection of view records.

    Features are held as one read-only float32 matrix; every record's
    ``features`` is a row view into it. Index structures over categories,
    objects and poses are built once at construction.
    """

    def __init__(
        self,
        records: Sequence[ViewRecord],
        feature_dim: int,
        category_list: Sequence[str],
        config_digest: Optional[str] = None,
    ):
        """
        Build and validate a dataset

        Args:
            records: View records
            feature_dim: Dataset-wide feature dimension
            category_list: Ordered category names
            config_digest: Digest of the configuration that produced the data

        Raises:
            EmptyDatasetError, DimensionMismatchError, DuplicateViewError,
            UnknownCategoryError, MissingTopViewError, DataError
        """
        if not records:
            raise EmptyDatasetError("Dataset must contain at least one view record")
        if int(feature_dim) <= 0:
            raise ValidationError("feature_dim must be positive", context={"feature_dim": feature_dim})

        self.feature_dim = int(feature_dim)
        self.category_list: Tuple[str, ...] = tuple(category_list)
        self.config_digest = config_digest

        if len(set(self.category_list)) != len(self.category_list):
            raise DataError("Category list contains duplicates", context={"categories": self.category_list})
        category_code = {name: i for i, name in enumerate(self.category_list)}

        n = len(records)
        features = np.empty((n, self.feature_dim), dtype=np.float32)
        self.thetas = np.empty(n, dtype=np.float64)
        self.phis = np.empty(n, dtype=np.float64)
        self.is_top = np.zeros(n, dtype=bool)
        self.category_codes = np.empty(n, dtype=np.int64)
        self._index: Dict[ViewId, int] = {}

        for i, record in enumerate(records):
            vid = record.id
            vec = np.asarray(record.features)
            if vec.shape != (self.feature_dim,):
                raise DimensionMismatchError(
                    "Feature vector does not match dataset dimension",
                    context={"view": str(vid), "expected": self.feature_dim, "actual": vec.shape}
                )
            if min(vid.object_index, vid.pose_index, vid.view_index) < 0:
                raise DataError("View indices must be non-negative", context={"view": str(vid)})
            if vid.category not in category_code:
                raise UnknownCategoryError(
                    f"Category '{vid.category}' is not in the category list",
                    context={"view": str(vid)}
                )
            if vid in self._index:
                raise DuplicateViewError("Duplicate ViewId", context={"view": str(vid)})
            theta = float(np.float32(record.theta))
            phi = float(np.float32(record.phi))
            if not (0.0 <= theta < 360.0) or not (0.0 < phi <= 90.0):
                raise DataError(
                    "View angles out of range (theta in [0, 360), phi in (0, 90])",
                    context={"view": str(vid), "theta": theta, "phi": phi}
                )
            self._index[vid] = i
            features[i] = vec
            self.thetas[i] = theta
            self.phis[i] = phi
            self.is_top[i] = bool(record.is_top)
            self.category_codes[i] = category_code[vid.category]

        features.setflags(write=False)
        self.features = features
        self.records: Tuple[ViewRecord, ...] = tuple(
            ViewRecord(
                id=record.id,
                theta=float(self.thetas[i]),
                phi=float(self.phis[i]),
                features=features[i],
                is_top=bool(self.is_top[i]),
            )
            for i, record in enumerate(records)
        )

        self._build_indexes()

    def _build_indexes(self):
        """Group record indices by pose, object and category"""
        pose_views: Dict[PoseKey, List[int]] = {}
        for i, record in enumerate(self.records):
            pose_views.setdefault(record.id.pose_key, []).append(i)

        self._pose_views: Dict[PoseKey, np.ndarray] = {}
        self._top_of_pose: Dict[PoseKey, int] = {}
        poses_of_object: Dict[Tuple[str, int], set] = {}

        for key, indices in pose_views.items():
            if len(indices) < 2:
                raise DataError("Every pose needs at least two views", context={"pose": key})
            tops = [i for i in indices if self.is_top[i]]
            if len(tops) != 1:
                raise MissingTopViewError(
                    "Pose must expose exactly one top view",
                    context={"pose": key, "top_views": len(tops)}
                )
            top = tops[0]
            if (abs(self.thetas[top] - TOP_VIEW_ANGLES[0]) > _TOP_TOLERANCE_DEG
                    or abs(self.phis[top] - TOP_VIEW_ANGLES[1]) > _TOP_TOLERANCE_DEG):
                logger.warning(
                    "Top view deviates from (90, 90)",
                    pose=key, theta=self.thetas[top], phi=self.phis[top]
                )
            self._pose_views[key] = np.asarray(indices, dtype=np.int64)
            self._top_of_pose[key] = top
            poses_of_object.setdefault(key[:2], set()).add(key[2])

        self._poses_of_object: Dict[Tuple[str, int], List[int]] = {
            obj: sorted(poses) for obj, poses in poses_of_object.items()
        }
        objects: Dict[str, set] = {}
        for category, obj in self._poses_of_object:
            objects.setdefault(category, set()).add(obj)
        self._objects_of_category: Dict[str, List[int]] = {
            category: sorted(objs) for category, objs in objects.items()
        }

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetModel):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.category_list == other.category_list
            and self.view_ids == other.view_ids
            and np.array_equal(self.thetas, other.thetas)
            and np.array_equal(self.phis, other.phis)
            and np.array_equal(self.is_top, other.is_top)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None

    @property
    def view_ids(self) -> List[ViewId]:
        return [record.id for record in self.records]

    @property
    def categories_present(self) -> List[str]:
        """Categories that have at least one record, in category-list order"""
        return [c for c in self.category_list if c in self._objects_of_category]

    def index_of(self, view_id: ViewId) -> int:
        """Record index of a ViewId"""
        try:
            return self._index[view_id]
        except KeyError:
            raise DataError("Unknown ViewId", context={"view": str(view_id)})

    def pose_keys(self) -> List[PoseKey]:
        """All poses in record order"""
        return list(self._pose_views.keys())

    def views_of_pose(self, key: PoseKey) -> np.ndarray:
        """Record indices of every view of a pose"""
        return self._pose_views[key]

    def top_view_index(self, key: PoseKey) -> int:
        """Record index of a pose's top view"""
        return self._top_of_pose[key]

    def objects_of(self, category: str) -> List[int]:
        """Object indices of a category"""
        return self._objects_of_category.get(category, [])

    def poses_of(self, category: str, object_index: int) -> List[int]:
        """Pose indices of an object"""
        return self._poses_of_object.get((category, object_index), [])

    def records_in(self, categories: Iterable[str]) -> np.ndarray:
        """Record indices whose category is in the given set"""
        codes = [self.category_list.index(c) for c in categories if c in self.category_list]
        return np.flatnonzero(np.isin(self.category_codes, codes))

    def align(self, view_ids: Sequence[ViewId]) -> np.ndarray:
        """
        Map ViewIds of another dataset onto this dataset's record indices

        Args:
            view_ids: ViewIds in the other dataset's order

        Returns:
            Array of record indices in this dataset

        Raises:
            DataError: If a ViewId is missing here
        """
        missing = [str(v) for v in view_ids if v not in self._index]
        if missing:
            raise DataError(
                "Parallel feature store does not cover every view",
                context={"missing": len(missing), "first_missing": missing[0]}
            )
        return np.asarray([self._index[v] for v in view_ids], dtype=np.int64)

    def summary(self) -> Dict[str, int]:
        """Dataset statistics: categories, objects, poses and views per pose"""
        views_per_pose = [len(v) for v in self._pose_views.values()]
        return {
            "categories": len(self._objects_of_category),
            "objects": len(self._poses_of_object),
            "poses": len(self._pose_views),
            "views_per_pose_min": min(views_per_pose),
            "views_per_pose_max": max(views_per_pose),
            "views": len(self.records),
        }


def save_feature_store(model: DatasetModel, path: Path, config_digest: Optional[str] = None):
    """
    Write a dataset to the binary feature-store format

    Args:
        model: Validated dataset
        path: Output file path
        config_digest: Optional hex SHA-256 digest appended as a trailer block

    Raises:
        ValidationError: If model is not a DatasetModel
        DataError: On I/O failure
    """
    if not isinstance(model, DatasetModel):
        raise ValidationError("save_feature_store expects a DatasetModel", context={"type": type(model).__name__})

    path = Path(path)
    table = "\n".join(model.category_list).encode("utf-8")
    dtype = record_dtype(model.feature_dim)
    records = np.zeros(len(model), dtype=dtype)
    records["category"] = model.category_codes
    records["object"] = [r.id.object_index for r in model.records]
    records["pose"] = [r.id.pose_index for r in model.records]
    records["view"] = [r.id.view_index for r in model.records]
    records["theta"] = model.thetas
    records["phi"] = model.phis
    records["is_top"] = model.is_top
    records["features"] = model.features

    digest = config_digest or model.config_digest
    parts = [
        _HEADER.pack(FEATURE_STORE_MAGIC, FEATURE_STORE_VERSION, model.feature_dim, len(model), len(table)),
        table,
        records.tobytes(),
    ]
    if digest:
        parts.append(DIGEST_MAGIC + bytes.fromhex(digest))

    _atomic_write(path, b"".join(parts))
    logger.info(f"Saved feature store to {path}", records=len(model), feature_dim=model.feature_dim)


def load_feature_store(path: Path) -> DatasetModel:
    """
    Read and validate a binary feature store

    Args:
        path: Feature-store file

    Returns:
        Validated DatasetModel

    Raises:
        MalformedHeaderError, VersionMismatchError, TruncatedFileError,
        DimensionMismatchError, DuplicateViewError, MissingTopViewError
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read feature store {path}", context={"error": str(e)})

    if len(data) < _HEADER.size:
        raise MalformedHeaderError("Feature store header is incomplete", context={"file": str(path)})
    magic, version, feature_dim, n_records, table_len = _HEADER.unpack_from(data, 0)
    if magic != FEATURE_STORE_MAGIC:
        raise MalformedHeaderError("Not a feature store (bad magic)", context={"file": str(path), "magic": magic})
    if version != FEATURE_STORE_VERSION:
        raise VersionMismatchError(
            "Unsupported feature store version",
            context={"file": str(path), "version": version, "supported": FEATURE_STORE_VERSION}
        )
    if feature_dim == 0:
        raise MalformedHeaderError("Feature store declares zero feature dimension", context={"file": str(path)})

    offset = _HEADER.size
    if offset + table_len > len(data):
        raise TruncatedFileError("Category table extends past end of file", context={"file": str(path)})
    try:
        table = data[offset:offset + table_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedHeaderError("Category table is not valid UTF-8", context={"file": str(path), "error": str(e)})
    categories = table.split("\n") if table else []
    offset += table_len

    dtype = record_dtype(feature_dim)
    expected = n_records * dtype.itemsize
    remaining = len(data) - offset
    digest = None
    if remaining == expected + _DIGEST_BLOCK and data[offset + expected:offset + expected + 4] == DIGEST_MAGIC:
        digest = data[offset + expected + 4:].hex()
    elif remaining != expected:
        # a shortfall or excess of whole float32 values means records were written with another width
        if (remaining - expected) % 4 == 0:
            raise DimensionMismatchError(
                "Record payload does not match the declared feature dimension",
                context={"file": str(path), "feature_dim": feature_dim, "expected_bytes": expected, "actual_bytes": remaining}
            )
        raise TruncatedFileError(
            "Record payload is truncated",
            context={"file": str(path), "expected_bytes": expected, "actual_bytes": remaining}
        )

    raw = np.frombuffer(data, dtype=dtype, count=n_records, offset=offset)
    if n_records and int(raw["category"].max()) >= len(categories):
        raise UnknownCategoryError("Record references a category outside the table", context={"file": str(path)})

    records = [
        ViewRecord(
            id=ViewId(categories[row["category"]], int(row["object"]), int(row["pose"]), int(row["view"])),
            theta=float(row["theta"]),
            phi=float(row["phi"]),
            features=row["features"],
            is_top=bool(row["is_top"]),
        )
        for row in raw
    ]
    model = DatasetModel(records, feature_dim, categories, config_digest=digest)
    logger.info(f"Loaded feature store from {path}", records=len(model), feature_dim=feature_dim)
    return model


def import_text_features(path: Path, category_list: Optional[Sequence[str]] = None) -> DatasetModel:
    """
    Read the text interchange format.

    One record per line, whitespace separated:
    ``category object pose view theta phi is_top f1,f2,...,fd``.
    Lines starting with '#' and blank lines are ignored.

    Args:
        path: Text file
        category_list: Optional category ordering; defaults to first-seen order

    Returns:
        Validated DatasetModel
    """
    path = Path(path)
    records: List[ViewRecord] = []
    seen: List[str] = []
    feature_dim: Optional[int] = None

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) != 8:
                raise DataError(
                    "Text record must have 8 whitespace-separated fields",
                    context={"file": str(path), "line": line_no, "fields": len(fields)}
                )
            try:
                category = fields[0]
                obj, pose, view = int(fields[1]), int(fields[2]), int(fields[3])
                theta, phi = float(fields[4]), float(fields[5])
                is_top = fields[6].lower() in ("1", "true", "yes")
                vector = np.asarray([float(x) for x in fields[7].split(",")], dtype=np.float32)
            except ValueError as e:
                raise DataError("Unparseable text record", context={"file": str(path), "line": line_no, "error": str(e)})
            if feature_dim is None:
                feature_dim = vector.size
            elif vector.size != feature_dim:
                raise DimensionMismatchError(
                    "Inconsistent feature dimension in text import",
                    context={"file": str(path), "line": line_no, "expected": feature_dim, "actual": vector.size}
                )
            if category not in seen:
                seen.append(category)
            records.append(ViewRecord(ViewId(category, obj, pose, view), theta, phi, vector, is_top))

    if not records:
        raise EmptyDatasetError("Text import contains no records", context={"file": str(path)})
    return DatasetModel(records, feature_dim, category_list or seen)


def export_text_features(model: DatasetModel, path: Path):
    """Write a dataset in the text interchange format"""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# category object pose view theta phi is_top features\n")
        for record in model.records:
            vid = record.id
            vector = ",".join(repr(float(x)) for x in record.features)
            f.write(
                f"{vid.category} {vid.object_index} {vid.pose_index} {vid.view_index} "
                f"{record.theta!r} {record.phi!r} {int(record.is_top)} {vector}\n"
            )
    logger.info(f"Exported {len(model)} text records to {path}")


def split_categories(model: DatasetModel, n_test: int, seed: int) -> CategorySplit:
    """
    Hold out a random set of categories

    Args:
        model: Dataset whose category list is split
        n_test: Number of held-out categories
        seed: RNG seed

    Returns:
        CategorySplit with |test| = n_test

    Raises:
        ValidationError: If n_test is not in (0, |category_list|)
    """
    categories = list(model.category_list)
    if not 0 < n_test < len(categories):
        raise ValidationError(
            "n_test must be between 1 and the number of categories minus one",
            context={"n_test": n_test, "categories": len(categories)}
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(categories), size=n_test, replace=False)
    test = frozenset(categories[i] for i in chosen)
    train = frozenset(c for c in categories if c not in test)
    logger.debug("Split categories", train=len(train), test=sorted(test))
    return CategorySplit(train_categories=train, test_categories=test)


def _atomic_write(path: Path, payload: bytes):
    """Write bytes through a temporary file and rename"""
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + ".tmp")
    try:
        with open(temp_file, "wb") as f:
            f.write(payload)
        temp_file.replace(path)
    except OSError as e:
        raise DataError(f"Failed to write {path}", context={"error": str(e)})
