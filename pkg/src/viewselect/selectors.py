"""
View selectors: pick one view per pose
"""

from enum import Enum
from typing import Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np

from viewselect.dataset import DatasetModel, PoseKey, ViewRecord
from viewselect.regressor import RegressorState, predict
from viewselect.scoring import ScoreTable
from utils.errors import (
    MissingModelError,
    MissingScoresError,
    MissingTopViewError,
    SelectionError,
    ValidationError,
)

Availability = Optional[Collection[Tuple[float, float]]]


class SelectorId(str, Enum):
    TOP = "TOP"
    RAND = "RAND"
    OPT_IND = "OPT_IND"
    OPT_GLOB = "OPT_GLOB"
    MODEL = "MODEL"

    @classmethod
    def parse(cls, name: str) -> 'SelectorId':
        try:
            return cls(name.upper())
        except ValueError:
            raise ValidationError(
                f"Unknown selector '{name}'",
                violations=[f"evaluation.selectors: '{name}' not in {[s.value for s in cls]}"]
            )

    @property
    def needs_scores(self) -> bool:
        return self in (SelectorId.OPT_IND, SelectorId.OPT_GLOB)


def _angle_order(views: Sequence[ViewRecord]) -> List[int]:
    return sorted(range(len(views)), key=lambda i: (views[i].theta, views[i].phi))


def _argmax_by_angles(views: Sequence[ViewRecord], values: np.ndarray) -> ViewRecord:
    """First maximum in (theta, phi) order"""
    order = _angle_order(views)
    ordered = np.asarray(values)[order]
    return views[order[int(np.argmax(ordered))]]


def _score_values(views: Sequence[ViewRecord], scores: Optional[ScoreTable], individual: bool) -> np.ndarray:
    if scores is None:
        raise MissingScoresError("Selector needs a score table")
    rows = [scores.index_of(v.id) for v in views]
    missing = [str(v.id) for v, row in zip(views, rows) if row is None]
    if missing:
        raise MissingScoresError("Score table does not cover the pose", context={"missing": missing[:3]})
    values = scores.s_hat if individual else scores.S_hat
    return values[np.asarray(rows)]


def _top_view(views: Sequence[ViewRecord]) -> ViewRecord:
    tops = [v for v in views if v.is_top]
    if not tops:
        raise MissingTopViewError("Pose has no top view", context={"pose": views[0].id.pose_key})
    return tops[0]


def model_candidates(views: Sequence[ViewRecord], availability: Availability) -> List[ViewRecord]:
    """Views whose (theta, phi) is in the availability set (all views if None)"""
    if availability is None:
        return list(views)
    allowed = {(float(t), float(p)) for t, p in availability}
    return [v for v in views if (v.theta, v.phi) in allowed]


def select_view(
    selector: SelectorId,
    pose_views: Sequence[ViewRecord],
    scores: Optional[ScoreTable] = None,
    model: Optional[RegressorState] = None,
    rng: Optional[np.random.Generator] = None,
    availability: Availability = None,
) -> ViewRecord:
    """
    Choose one view of a pose.

    Argmax selectors break ties by the smallest (theta, phi). MODEL feeds the
    pose's top-view features with each available candidate's angles.

    Args:
        selector: Selector
        pose_views: Every view of one (object, pose)
        scores: Score table for OPT_IND / OPT_GLOB
        model: Regressor for MODEL
        rng: Generator for RAND
        availability: Reachable (theta, phi) pairs for MODEL

    Returns:
        The chosen ViewRecord

    Raises:
        ValidationError: Empty pose or views from several poses
        MissingTopViewError, MissingScoresError, MissingModelError, SelectionError
    """
    if not pose_views:
        raise ValidationError("Pose has no views")
    if len({v.id.pose_key for v in pose_views}) != 1:
        raise ValidationError("Views belong to more than one pose")
    if len(pose_views) == 1:
        return pose_views[0]

    if selector == SelectorId.TOP:
        return _top_view(pose_views)
    if selector == SelectorId.RAND:
        if rng is None:
            raise ValidationError("RAND selector needs a random generator")
        return pose_views[int(rng.integers(len(pose_views)))]
    if selector == SelectorId.OPT_IND:
        return _argmax_by_angles(pose_views, _score_values(pose_views, scores, individual=True))
    if selector == SelectorId.OPT_GLOB:
        return _argmax_by_angles(pose_views, _score_values(pose_views, scores, individual=False))
    if selector == SelectorId.MODEL:
        if model is None:
            raise MissingModelError("MODEL selector needs a trained regressor")
        top = _top_view(pose_views)
        candidates = model_candidates(pose_views, availability)
        if not candidates:
            raise SelectionError("No available view for the pose", context={"pose": top.id.pose_key})
        predicted = predict(model, top.features,
                            [v.theta for v in candidates], [v.phi for v in candidates])
        return _argmax_by_angles(candidates, predicted)
    raise ValidationError("Unknown selector", context={"selector": selector})


class SelectionCache:
    """
    Memoized choices of the deterministic selectors, keyed by pose.
    RAND is never cached.
    """

    def __init__(self, dataset: DatasetModel, scores: Optional[ScoreTable] = None,
                 model: Optional[RegressorState] = None, availability: Availability = None):
        self.dataset = dataset
        self.scores = scores
        self.model = model
        self.availability = availability
        self._chosen: Dict[Tuple[SelectorId, PoseKey], int] = {}

    def choose(self, selector: SelectorId, key: PoseKey, rng: Optional[np.random.Generator] = None) -> int:
        """Record index of the chosen view"""
        indices = self.dataset.views_of_pose(key)
        if selector == SelectorId.RAND:
            return int(indices[int(rng.integers(len(indices)))]) if len(indices) > 1 else int(indices[0])
        cached = self._chosen.get((selector, key))
        if cached is None:
            views = [self.dataset.records[i] for i in indices]
            chosen = select_view(selector, views, self.scores, self.model, availability=self.availability)
            cached = self.dataset.index_of(chosen.id)
            self._chosen[(selector, key)] = cached
        return cached
