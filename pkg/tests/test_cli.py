"""
Tests for the command-line interface
"""

import json

import pytest
from click.testing import CliRunner

from viewselect.cli import main
from viewselect.dataset import load_feature_store
from viewselect.evaluation import load_report
from viewselect.regressor import load_model
from viewselect.scoring import load_scores
from utils.logger import get_logger

SMALL_RUN = """\
seed: 5
threads: 1
world:
  n_categories: 4
  objects_per_category_range: [2, 2]
  poses_per_object: 1
  feature_dim: 8
split:
  n_test: 1
sampler:
  n_problems: 20
  min_coverage: 2
  batch_size: 8
pipelines:
  - name: AGG
    algorithm: agglomerative
    linkage: average
regressor:
  mlp1_widths: [8]
  mlp2_widths: [4]
  batch_size: 16
  epochs: 3
evaluation:
  selectors: [TOP, RAND, OPT_IND, MODEL]
  n_problems: 5
  batch_size: 2
"""


@pytest.fixture
def run_config(tmp_path):
    config_file = tmp_path / "run.yml"
    config_file.write_text(SMALL_RUN, encoding="utf-8")
    return config_file


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_grid_prints_one_line_per_pose():
    """Test that grid prints one pose line per view direction"""
    result = invoke("grid")
    assert result.exit_code == 0, result.output
    lines = [line for line in result.stdout.splitlines() if line[:1].isdigit()]
    assert len(lines) == 21
    assert all(len(line.split()) == 9 for line in lines)
    assert lines[0].split()[:2] == ["0", "45"]


def test_grid_writes_file(tmp_path):
    """Test that grid writes the pose file when given an output path"""
    out = tmp_path / "poses.txt"
    result = invoke("grid", "--out", out)
    assert result.exit_code == 0, result.output
    assert len(out.read_text(encoding="utf-8").splitlines()) == 21


def test_missing_seed_is_a_configuration_error(tmp_path):
    """Test that a config without a seed exits with the configuration code"""
    config_file = tmp_path / "run.yml"
    config_file.write_text("threads: 1\n", encoding="utf-8")
    result = invoke("--config", config_file, "gen")
    assert result.exit_code == 2
    assert "seed" in result.output


def test_missing_input_is_a_data_error(run_config):
    """Test that a missing input file exits with the data code"""
    result = invoke("--config", run_config, "score")
    assert result.exit_code == 3


def test_invalid_selector_rejected(run_config):
    """Test that an unknown selector name is rejected"""
    result = invoke("--config", run_config, "eval", "--selectors", "TOP,BEST")
    assert result.exit_code == 2
    assert "BEST" in result.output


def test_full_run(run_config, tmp_path):
    """Test gen, score, train and eval end to end"""
    out = tmp_path / "out"

    result = invoke("--config", run_config, "gen")
    assert result.exit_code == 0, result.output
    model = load_feature_store(out / "features.svsf")
    assert model.summary()["categories"] == 4
    assert (out / "quality.txt").read_text(encoding="utf-8").startswith("# digest ")
    vgg = load_feature_store(out / "features_vgg.svsf")
    assert vgg.view_ids == model.view_ids
    assert vgg.feature_dim == 48

    result = invoke("--config", run_config, "score")
    assert result.exit_code == 0, result.output
    scores = load_scores(out / "scores.svss")
    assert scores.n_problems.min() >= 2
    assert len({v.category for v in scores.view_ids}) == 3

    result = invoke("--config", run_config, "train")
    assert result.exit_code == 0, result.output
    assert "final loss" in result.output
    assert load_model(out / "model.svsm", expected_embed_dim=8).embed_dim == 8

    result = invoke("--config", run_config, "eval")
    assert result.exit_code == 0, result.output
    report = load_report(out / "report.json")
    assert [r.selector for r in report.rows] == ["TOP", "RAND", "OPT_IND", "MODEL"]
    assert report.n_problems == 5
    assert (out / "report.txt").exists()

    ledger = json.loads((out / ".ledger.json").read_text(encoding="utf-8"))
    assert {a["kind"] for a in ledger["artifacts"]} == {"features", "quality", "scores", "model", "report"}


def test_up_to_date_outputs_are_skipped(run_config, tmp_path):
    """Test that a stage whose outputs match the config digest is skipped"""
    assert invoke("--config", run_config, "gen").exit_code == 0
    features = tmp_path / "out" / "features.svsf"
    stamp = features.stat().st_mtime_ns

    result = invoke("--config", run_config, "gen")
    assert result.exit_code == 0
    assert "up to date" in result.output
    assert features.stat().st_mtime_ns == stamp

    result = invoke("--config", run_config, "--force", "gen")
    assert result.exit_code == 0
    assert "up to date" not in result.output


def test_same_seed_gives_identical_artifacts(tmp_path):
    """Test that two runs with one seed write identical files"""
    produced = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        run_dir.mkdir()
        config_file = run_dir / "run.yml"
        config_file.write_text(SMALL_RUN, encoding="utf-8")
        assert invoke("--config", config_file, "gen").exit_code == 0
        assert invoke("--config", config_file, "score").exit_code == 0
        produced.append(run_dir / "out")

    a, b = produced
    for artifact in ("features.svsf", "quality.txt", "scores.svss"):
        assert (a / artifact).read_bytes() == (b / artifact).read_bytes()


def test_seed_override_changes_world(run_config, tmp_path):
    """Test that the seed option changes the generated world"""
    assert invoke("--config", run_config, "gen").exit_code == 0
    first = (tmp_path / "out" / "features.svsf").read_bytes()
    assert invoke("--config", run_config, "--seed", "6", "gen").exit_code == 0
    assert (tmp_path / "out" / "features.svsf").read_bytes() != first


def test_score_warns_on_quality_sidecar_without_digest(run_config, tmp_path, mocker):
    """Test that score flags a quality sidecar that does not carry the gen digest"""
    assert invoke("--config", run_config, "gen").exit_code == 0
    quality = tmp_path / "out" / "quality.txt"
    lines = quality.read_text(encoding="utf-8").splitlines(keepends=True)
    quality.write_text("".join(lines[1:]), encoding="utf-8")

    spy = mocker.patch.object(get_logger().logger, "warning")
    result = invoke("--config", run_config, "score")
    assert result.exit_code == 0, result.output
    assert any("Quality sidecar" in call[0][0] for call in spy.call_args_list)
