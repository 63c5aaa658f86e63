"""
Shared fixtures: small synthetic worlds
"""

import pytest

from viewselect.clustering import PipelineConfig
from viewselect.dataset import split_categories
from viewselect.scoring import SamplerConfig, accumulate_scores, rescale_per_pose
from viewselect.synthetic import WorldConfig, build_world


@pytest.fixture(scope="session")
def small_world():
    """4 categories, 2-3 objects, 2 poses, 21 views per pose, phi-dependent quality, low noise"""
    return build_world(WorldConfig(
        n_categories=4,
        objects_per_category_range=(2, 3),
        poses_per_object=2,
        feature_dim=16,
        noise_scale=1.0,
        quality_weights=[0.9, -0.6],
        seed=3,
    ))


@pytest.fixture(scope="session")
def perfect_world():
    """Quality 1 everywhere, no noise, tight categories"""
    return build_world(WorldConfig(
        n_categories=4,
        objects_per_category_range=(2, 3),
        poses_per_object=2,
        feature_dim=16,
        object_spread=0.5,
        pose_spread=0.2,
        noise_scale=0.0,
        quality_model="constant",
        quality_weights=[1.0],
        seed=5,
    ))


@pytest.fixture(scope="session")
def graded_world():
    """Default noise and quality model; 8 categories, 3 objects, 2 poses, 10 views per pose"""
    return build_world(WorldConfig(
        n_categories=8,
        objects_per_category_range=(3, 3),
        poses_per_object=2,
        theta_step=90.0,
        unreachable_range=(0, 0),
        seed=13,
    ))


@pytest.fixture(scope="session")
def graded_split(graded_world):
    """Three held-out categories"""
    return split_categories(graded_world.dataset, 3, seed=1)


@pytest.fixture(scope="session")
def graded_scores(graded_world, graded_split):
    """Per-pose rescaled scores over the training categories, 150 problems per view"""
    cfg = SamplerConfig(n_problems=0, min_coverage=150, seed=9, batch_size=256)
    table = accumulate_scores(graded_world.dataset, graded_split, PipelineConfig(), cfg)
    return rescale_per_pose(table)
