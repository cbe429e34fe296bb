"""Command-line interface for crossdiff."""

import json
import logging
import sys
import traceback

import click

from . import __version__
from .ablation import run_ablation
from .checks import CHECKS, run_checks
from .config import RunConfig
from .errors import ConfigError, CrossDiffError
from .implicit import PatternLibrary, build_subset, create_backend, read_jsonl, records_from_corpus, write_jsonl
from .model import GroundingModel, ModelConfig
from .plda import plda_parameter_formula
from .reporter import RunReporter
from .scenes import SceneConfig, generate_corpus, load_corpus, save_corpus
from .tensor import set_default_dtype
from .trainer import RunDirectory, evaluate, evaluate_predictions, load_checkpoint, restore, train

logger = logging.getLogger(__name__)


def _fail(ctx, error: Exception):
    click.echo(f"Error: {error}", err=True)
    if ctx.obj.get('verbose'):
        traceback.print_exc()
    sys.exit(1)


def _corpus(config: RunConfig, corpus_path, split: str = "train"):
    if corpus_path:
        return load_corpus(corpus_path)
    return generate_corpus(config.get("seed"), config.get("train.n_scenes"), SceneConfig.from_config(config),
                           config.get("scenes.expressions_per_scene"), config.template_weights(), split=split)


def _show(ctx, result, export=None, summary=False):
    reporter = RunReporter(use_colors=not ctx.obj['no_colors'] and ctx.obj['format'] == 'human')
    click.echo(reporter.generate_report(result, ctx.obj['format']))
    if summary and ctx.obj['format'] == 'human':
        click.echo("\n" + "=" * 50)
        reporter.print_summary(result)
    if export:
        reporter.export_to_file(result, export, ctx.obj['format'])
        click.echo(f"Report exported to {export}")


@click.group()
@click.version_option(version=__version__, prog_name="crossdiff")
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose output')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='TOML config file')
@click.option('--seed', type=int, help='Override the run seed')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE', help='Override one config key')
@click.option('--out', default='runs', type=click.Path(file_okay=False), help='Base directory of run outputs')
@click.option('--force', is_flag=True, help='Overwrite a completed run directory')
@click.option('--format', 'output_format', type=click.Choice(['human', 'json']), default='human',
              help='Report format')
@click.option('--no-colors', is_flag=True, help='Disable colored output')
@click.pass_context
def cli(ctx, verbose, config_path, seed, overrides, out, force, output_format, no_colors):
    """crossdiff - differential cross-modal attention for toy 3D grounding."""
    ctx.ensure_object(dict)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.obj.update(verbose=verbose, out=out, force=force, format=output_format, no_colors=no_colors)
    try:
        ctx.obj['config'] = RunConfig.load(config_path, overrides, seed)
        set_default_dtype(ctx.obj['config'].get("model.dtype"))
    except ConfigError as e:
        _fail(ctx, e)


@cli.command()
@click.option('--only', multiple=True, type=click.Choice(sorted(CHECKS)), help='Run only the named check(s)')
@click.option('--export', type=click.Path(), help='Export report to file')
@click.pass_context
def gradcheck(ctx, only, export):
    """Compare analytic gradients with central differences."""
    config = ctx.obj['config']
    results = run_checks(config.get("gradcheck.seeds"), config.get("gradcheck.step"),
                         config.get("gradcheck.tol"), only)
    report = {"kind": "gradcheck", "step": config.get("gradcheck.step"), "tol": config.get("gradcheck.tol"),
              "checks": [r.to_dict() for r in results]}
    _show(ctx, report, export, summary=True)
    if not all(r.passed for r in results):
        sys.exit(1)


@cli.command(name='gen-scenes')
@click.option('--split', default='train', help='Split label stored on every expression')
@click.pass_context
def gen_scenes(ctx, split):
    """Generate a synthetic corpus of scenes and expressions."""
    config = ctx.obj['config']
    try:
        run = RunDirectory.create(ctx.obj['out'], "gen-scenes", config, ctx.obj['force'], inputs=[split])
        corpus = _corpus(config, None, split)
        save_corpus(run.path / "corpus.json", corpus)
        run.complete()
    except (CrossDiffError, OSError) as e:
        _fail(ctx, e)
    click.echo(f"Wrote {len(corpus.scenes)} scenes and {len(corpus.expressions)} expressions to {run.path}")


@cli.command(name='train')
@click.option('--corpus', 'corpus_path', type=click.Path(exists=True, dir_okay=False),
              help='Corpus JSON (generated from the config when omitted)')
@click.pass_context
def train_cmd(ctx, corpus_path):
    """Train the grounding model and write checkpoint, metrics and summary."""
    config = ctx.obj['config']
    try:
        run = RunDirectory.create(ctx.obj['out'], "train", config, ctx.obj['force'],
                                  inputs=[corpus_path] if corpus_path else ())
        samples = _corpus(config, corpus_path).samples()
        _, summary = train(config, samples, run)
    except (CrossDiffError, OSError, ValueError) as e:
        _fail(ctx, e)
    click.echo(f"Trained {summary['steps']} steps, final loss {summary['final_loss']:.6f}" if summary['steps']
               else "Trained 0 steps")
    click.echo(f"Run directory: {run.path}")
    _show(ctx, {"kind": "eval", **summary["eval"]})


@cli.command(name='eval')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), help='Checkpoint to evaluate')
@click.option('--predictions', type=click.Path(exists=True, dir_okay=False),
              help='JSON list of {"box": {"min", "max"}, "mask": [...]} records in corpus order')
@click.option('--corpus', 'corpus_path', type=click.Path(exists=True, dir_okay=False),
              help='Corpus JSON (generated from the config when omitted)')
@click.option('--export', type=click.Path(), help='Export report to file')
@click.pass_context
def eval_cmd(ctx, checkpoint, predictions, corpus_path, export):
    """Score a checkpoint or stored predictions overall and per subset."""
    config = ctx.obj['config']
    if bool(checkpoint) == bool(predictions):
        _fail(ctx, ConfigError("Pass exactly one of --checkpoint or --predictions"))
    try:
        inputs = [p for p in (checkpoint, predictions, corpus_path) if p]
        run = RunDirectory.create(ctx.obj['out'], "eval", config, ctx.obj['force'], inputs=inputs)
        corpus = _corpus(config, corpus_path)
        if predictions:
            with open(predictions, "r", encoding="utf-8") as f:
                report = evaluate_predictions(corpus.samples(), json.load(f))
        else:
            model = GroundingModel(ModelConfig.from_config(config))
            _, values = load_checkpoint(checkpoint)
            restore(model, values)
            report = evaluate(model, corpus.samples())
        run.write_json("eval.json", report)
        run.complete()
    except (CrossDiffError, OSError, ValueError, KeyError) as e:
        _fail(ctx, e)
    _show(ctx, {"kind": "eval", **report}, export, summary=True)


@cli.command(name='filter-implicit')
@click.option('--input', 'input_path', type=click.Path(exists=True, dir_okay=False),
              help='JSONL records with "text" (and optional "id", "split")')
@click.option('--corpus', 'corpus_path', type=click.Path(exists=True, dir_okay=False),
              help='Corpus JSON whose expressions are filtered')
@click.pass_context
def filter_implicit(ctx, input_path, corpus_path):
    """Build the implicit-relation subset of a set of expressions."""
    config = ctx.obj['config']
    try:
        inputs = [p for p in (input_path, corpus_path) if p]
        run = RunDirectory.create(ctx.obj['out'], "filter-implicit", config, ctx.obj['force'], inputs=inputs)
        records = read_jsonl(input_path) if input_path else records_from_corpus(_corpus(config, corpus_path))
        lib = PatternLibrary(config.get("implicit.patterns") or None)
        use_llm = config.get("implicit.use_llm")
        backend = create_backend(config) if use_llm else None
        result = build_subset(records, lib, backend, use_llm, config.get("implicit.max_concurrency"))
        write_jsonl(run.path / "subset.jsonl", result.subset)
        write_jsonl(run.path / "audit.jsonl", result.audit)
        run.write_json("summary.json", result.summary())
        run.complete()
    except (CrossDiffError, OSError, ValueError, KeyError) as e:
        _fail(ctx, e)
    _show(ctx, {"kind": "implicit", "summary": result.summary()})


@cli.command()
@click.option('--grid', type=click.Choice(['components', 'clusters', 'routing', 'attention']),
              help='Override ablate.grid')
@click.option('--export', type=click.Path(), help='Export report to file')
@click.pass_context
def ablate(ctx, grid, export):
    """Train and evaluate an ablation grid on held-out scenes."""
    config = ctx.obj['config']
    try:
        if grid:
            config = config.with_values({"ablate.grid": grid})
        run = RunDirectory.create(ctx.obj['out'], "ablate", config, ctx.obj['force'])
        report = run_ablation(config, run)
        run.write_json("ablation.json", report)
        run.complete()
    except (CrossDiffError, OSError, ValueError) as e:
        _fail(ctx, e)
    _show(ctx, report, export)


@cli.command()
@click.option('--show-config', is_flag=True, help='List every configuration key with its default')
@click.pass_context
def info(ctx, show_config):
    """Print parameter counts of the configured model."""
    config = ctx.obj['config']
    if show_config:
        for key, default, help_text in RunConfig.describe():
            click.echo(f"{key:<32} {config.get(key)!s:<14} {help_text} (default: {default})")
        return
    model = GroundingModel(ModelConfig.from_config(config))
    d_sem, heads = config.get("model.d_sem"), config.get("plda.n_heads")
    click.echo(f"Total parameters: {model.parameter_count()}")
    click.echo(f"PLDA parameters (both directions): {model.plda_parameter_count()}")
    if config.get("attention.kind") == "diff":
        click.echo(f"PLDA formula per direction: {plda_parameter_formula(d_sem, heads)}")
    else:
        click.echo(f"Standard attention per direction: {4 * d_sem * d_sem}")
    click.echo(f"Config hash: {config.hash()[:12]}")


if __name__ == '__main__':
    cli()
