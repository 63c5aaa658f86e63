"""
CLI interface for the semantic view selection toolkit
"""

import sys
from pathlib import Path
from typing import Callable, Optional

import click

from viewselect.clustering import PipelineConfig
from viewselect.config import RunConfig, load_run_config
from viewselect.dataset import DatasetModel, load_feature_store, save_feature_store, split_categories
from viewselect.evaluation import evaluate_selectors, format_report, render_report
from viewselect.geometry import grid_poses
from viewselect.regressor import build_training_examples, load_model, save_model, train
from viewselect.scoring import (
    accumulate_scores,
    format_score_summary,
    load_scores,
    rescale_per_pose,
    save_scores,
    score_fidelity,
)
from viewselect.selectors import SelectorId
from viewselect.state import RunLedger
from viewselect.synthetic import (
    build_world,
    extract_features,
    extractor_store_path,
    load_quality,
    quality_digest,
    save_quality,
)
from utils.errors import ViewSelectError
from utils.logger import StageMetrics, get_logger, setup_file_logging

logger = get_logger(__name__)

EXIT_RUNTIME = 4


@click.group()
@click.option('--config', 'config_file', type=click.Path(dir_okay=False, path_type=Path), help='Run configuration (YAML)')
@click.option('--seed', type=int, help='Master seed (overrides the configuration)')
@click.option('--threads', type=int, help='Worker threads (overrides the configuration)')
@click.option('--log-level', default='INFO', help='Log level')
@click.option('--log-dir', type=click.Path(file_okay=False, path_type=Path), help='Also write logs to this directory')
@click.option('--force', is_flag=True, help='Regenerate outputs even when the ledger says they are up to date')
@click.pass_context
def main(ctx, config_file, seed, threads, log_level, log_dir, force):
    """Semantic view selection toolkit"""
    ctx.ensure_object(dict)
    ctx.obj['config_file'] = config_file
    ctx.obj['seed'] = seed
    ctx.obj['threads'] = threads
    ctx.obj['log_level'] = log_level.upper()
    ctx.obj['force'] = force

    logger.set_level(log_level)
    if log_dir:
        setup_file_logging(log_dir, log_level)


def _load_config(ctx, command: str) -> RunConfig:
    config = load_run_config(ctx.obj['config_file'])
    if ctx.obj['seed'] is not None:
        config.seed = ctx.obj['seed']
    if ctx.obj['threads'] is not None:
        config.threads = ctx.obj['threads']
    return config.validate(command)


def _run(ctx, command: str, body: Callable[[RunConfig, StageMetrics], None]):
    """Run a subcommand body, mapping failures to exit codes"""
    metrics = StageMetrics()
    metrics.start_stage(command)
    try:
        config = _load_config(ctx, command)
        body(config, metrics)
        duration = metrics.end_stage(command, success=True)
        logger.stage_end(command, duration)
        _print_stage_summary(metrics)
    except ViewSelectError as e:
        duration = metrics.end_stage(command, success=False, error=e)
        logger.stage_error(command, e)
        click.secho(f"Error: {e.message}", fg='red', err=True)
        for key, value in e.context.items():
            if key == "violations":
                for violation in value:
                    click.secho(f"  - {violation}", fg='red', err=True)
            else:
                click.secho(f"  {key}: {value}", fg='red', err=True)
        if ctx.obj['log_level'] == 'DEBUG':
            raise
        sys.exit(e.exit_code)
    except Exception as e:
        metrics.end_stage(command, success=False, error=e)
        logger.stage_error(command, e)
        click.secho(f"Error: {str(e)}", fg='red', err=True)
        if ctx.obj['log_level'] == 'DEBUG':
            raise
        sys.exit(EXIT_RUNTIME)


def _print_stage_summary(metrics: StageMetrics):
    for stage, duration_ms, status, counters in metrics.summary_rows():
        line = f"  {stage}: {duration_ms} ms ({status})"
        click.secho(f"{line} {counters}" if counters else line, fg='cyan', err=True)
    logger.debug("Stage metrics", metrics=metrics.to_json())


def _skip_if_current(ctx, ledger: RunLedger, path: Path, digest: str) -> bool:
    if not ctx.obj['force'] and ledger.is_up_to_date(path, digest):
        click.secho(f"✓ {path} is up to date (use --force to regenerate)", fg='green', err=True)
        return True
    return False


def _warn_stale(kind: str, found: Optional[str], expected: str):
    if found != expected:
        logger.warning(f"{kind} was produced by a different configuration",
                       found=(found or "none")[:12], expected=expected[:12])


def _split(config: RunConfig, model: DatasetModel):
    return split_categories(model, config.split.n_test, config.seed_for("split"))


def _scoring_view(config: RunConfig, model: DatasetModel, pipeline: PipelineConfig) -> DatasetModel:
    """The dataset as seen by a pipeline's feature extractor"""
    if not pipeline.feature_store:
        return model
    store = load_feature_store(config.resolve(pipeline.feature_store))
    store.align(model.view_ids)
    return store


@main.command()
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='Feature store output path')
@click.pass_context
def gen(ctx, out):
    """Generate a synthetic world (feature stores and quality sidecar)"""
    def body(config: RunConfig, metrics: StageMetrics):
        features_path = out or config.resolve(config.paths.features)
        quality_path = config.resolve(config.paths.quality)
        world_config = config.effective_world()
        extractor_paths = {e.name: extractor_store_path(features_path, e.name) for e in world_config.extractors}
        digest = config.digest("gen")
        ledger = RunLedger(config.resolve(config.paths.ledger))
        outputs = [features_path, quality_path, *extractor_paths.values()]
        if not ctx.obj['force'] and all(ledger.is_up_to_date(p, digest) for p in outputs):
            click.secho(f"✓ {features_path} is up to date (use --force to regenerate)", fg='green', err=True)
            return

        world = build_world(world_config)
        save_feature_store(world.dataset, features_path, config_digest=digest)
        save_quality(world.quality, quality_path, config_digest=digest)
        ledger.record(features_path, "features", digest)
        ledger.record(quality_path, "quality", digest)
        for extractor in world_config.extractors:
            path = extractor_paths[extractor.name]
            save_feature_store(extract_features(world.dataset, extractor, world_config.seed), path,
                               config_digest=digest)
            ledger.record(path, "features", digest)

        summary = world.dataset.summary()
        click.secho(f"✓ Generated {summary['views']} views over {summary['categories']} categories", fg='green', err=True)
        click.echo(f"features: {features_path}")
        for name, path in extractor_paths.items():
            click.echo(f"features ({name}): {path}")
        click.echo(f"quality: {quality_path}")

    _run(ctx, "gen", body)


@main.command()
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='Score file output path')
@click.pass_context
def score(ctx, out):
    """Monte-Carlo semantic view scores over the training categories"""
    def body(config: RunConfig, metrics: StageMetrics):
        scores_path = out or config.resolve(config.paths.scores)
        digest = config.digest("score")
        ledger = RunLedger(config.resolve(config.paths.ledger))
        if _skip_if_current(ctx, ledger, scores_path, digest):
            return

        model = load_feature_store(config.resolve(config.paths.features))
        _warn_stale("Feature store", model.config_digest, config.digest("gen"))
        split = _split(config, model)
        pipeline = config.effective_pipelines()[0]
        view = _scoring_view(config, model, pipeline)

        metrics.start_stage("accumulate")
        table = accumulate_scores(view, split, pipeline, config.effective_sampler(), threads=config.threads)
        logger.stage_end("accumulate", metrics.end_stage("accumulate", success=True))
        metrics.count("accumulate", views=len(table))
        table = rescale_per_pose(table)
        save_scores(table, scores_path, config_digest=digest)
        ledger.record(scores_path, "scores", digest)

        quality_path = config.resolve(config.paths.quality)
        if quality_path.exists():
            _warn_stale("Quality sidecar", quality_digest(quality_path), config.digest("gen"))
            fidelity = score_fidelity(table, load_quality(quality_path))
            logger.info("Score fidelity against generative quality", spearman=f"{fidelity:.4f}")

        click.echo(format_score_summary(table))
        click.secho(f"✓ Scored {len(table)} views with pipeline {pipeline.name}", fg='green', err=True)

    _run(ctx, "score", body)


@main.command(name="train")
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='Model file output path')
@click.pass_context
def train_cmd(ctx, out):
    """Train the view-score regressor on scaled scores"""
    def body(config: RunConfig, metrics: StageMetrics):
        model_path = out or config.resolve(config.paths.model)
        digest = config.digest("train")
        ledger = RunLedger(config.resolve(config.paths.ledger))
        if _skip_if_current(ctx, ledger, model_path, digest):
            return

        model = load_feature_store(config.resolve(config.paths.features))
        scores = load_scores(config.resolve(config.paths.scores))
        _warn_stale("Score file", scores.config_digest, config.digest("score"))
        examples = build_training_examples(model, scores)

        metrics.start_stage("fit")
        result = train(examples, config.effective_regressor())
        logger.stage_end("fit", metrics.end_stage("fit", success=True))
        metrics.count("fit", examples=len(examples), epochs=len(result.loss_history))
        save_model(result.state, model_path, config_digest=digest)
        ledger.record(model_path, "model", digest)

        click.echo(f"examples: {len(examples)}")
        click.echo(f"final loss: {result.loss_history[-1]:.6f}")
        click.secho(f"✓ Trained regressor saved to {model_path}", fg='green', err=True)

    _run(ctx, "train", body)


@main.command(name="eval")
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='Report output path (JSON)')
@click.option('--selectors', help='Comma-separated selectors (overrides the configuration)')
@click.option('--problems', type=int, help='Number of evaluation problems (overrides the configuration)')
@click.option('--side', type=click.Choice(['train', 'test', 'all']), help='Category side to evaluate on')
@click.pass_context
def eval_cmd(ctx, out, selectors, problems, side):
    """Paired evaluation of view selectors"""
    def body(config: RunConfig, metrics: StageMetrics):
        if selectors:
            config.evaluation.selectors = [s.strip() for s in selectors.split(",") if s.strip()]
        if problems is not None:
            config.evaluation.n_problems = problems
        if side:
            config.evaluation.side = side
        config.validate("eval")
        report_path = out or config.resolve(config.paths.report)
        digest = config.digest("eval")
        ledger = RunLedger(config.resolve(config.paths.ledger))
        if _skip_if_current(ctx, ledger, report_path, digest):
            return

        model = load_feature_store(config.resolve(config.paths.features))
        split = _split(config, model)
        categories = {
            "train": split.train_categories,
            "test": split.test_categories,
            "all": frozenset(model.categories_present),
        }[config.evaluation.side]
        wanted = config.evaluation.selector_ids()

        scores = load_scores(config.resolve(config.paths.scores)) if any(s.needs_scores for s in wanted) else None
        regressor = None
        if SelectorId.MODEL in wanted:
            regressor = load_model(config.resolve(config.paths.model), expected_embed_dim=model.feature_dim)

        pipelines = config.effective_pipelines()
        stores = {p.name: _scoring_view(config, model, p) for p in pipelines if p.feature_store}
        availability = None
        if config.evaluation.availability_exclusions:
            excluded = {(float(t), float(p)) for t, p in config.evaluation.availability_exclusions}
            availability = {a for a in zip(model.thetas.tolist(), model.phis.tolist()) if a not in excluded}

        report = evaluate_selectors(
            model, categories, wanted, pipelines,
            n_problems=config.evaluation.n_problems,
            seed=config.seed_for("eval"),
            sampler=config.effective_sampler(),
            scores=scores,
            regressor=regressor,
            feature_stores=stores,
            availability=availability,
            threads=config.threads,
            batch_size=config.evaluation.batch_size,
        )
        report.config_digest = digest
        report.config["side"] = config.evaluation.side
        render_report(report, report_path)
        ledger.record(report_path, "report", digest)

        click.echo(format_report(report))

    _run(ctx, "eval", body)


@main.command()
@click.option('--out', type=click.Path(dir_okay=False, path_type=Path), help='Also write the lines to this file')
@click.pass_context
def grid(ctx, out):
    """Print the camera pose grid: theta phi x y z qx qy qz qw per line"""
    def body(config: RunConfig, metrics: StageMetrics):
        g = config.grid
        poses = grid_poses(g.geometry(), g.intrinsics(), g.fill, g.theta_step, g.phi_values, g.exclusions)
        lines = [pose.to_line() for pose in poses]
        for line in lines:
            click.echo(line)
        if out:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.debug("Emitted pose grid", poses=len(lines), radius=poses[0].radius if poses else None)

    _run(ctx, "grid", body)


if __name__ == '__main__':
    main()
