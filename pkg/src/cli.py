from dataclasses import replace
from functools import wraps
from typing import Dict, Optional
import logging
import sys

import click
from tabulate import tabulate

from src.exceptions import ConfigError, StageFailure
from src.experiment_config import VARIANTS, ExperimentConfig
from src.metrics import EvalReport
from src.pipeline import Pipeline, format_compare_table, run_compare
from src.plotter import Plotter

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_STAGE = 3


def handle_errors(f):
    """Maps config errors to exit code 2 and stage failures to exit code 3, naming the stage on stderr."""
    @wraps(f)
    def wrap(*args, **kw):
        try:
            return f(*args, **kw)
        except ConfigError as e:
            click.echo(f'config error: {e}', err=True)
            sys.exit(EXIT_CONFIG)
        except StageFailure as e:
            click.echo(f'stage {e.stage} failed: {type(e.cause).__name__}: {e.cause}', err=True)
            sys.exit(EXIT_STAGE)
    return wrap


def build_config(options: dict) -> ExperimentConfig:
    """
    The config file (or the defaults) with the command-line overrides applied

    :param dict options: The group options stored on the click context
    :return ExperimentConfig: The validated config
    """
    config = ExperimentConfig.load(options['config']) if options['config'] else ExperimentConfig()
    overrides = {
        key: options[key]
        for key in ('seed', 'output_dir', 'variant', 'n_s', 'eval_episodes', 'n_jobs')
        if options[key] is not None
    }
    if options['full_scale']:
        overrides['full_scale'] = True
    config = replace(config, **overrides)
    config.validate()
    return config


def eval_table(reports: Dict[int, EvalReport]) -> str:
    rows = [[f'{r.n_way}-way {k}-shot', r.format(), r.episodes] for k, r in sorted(reports.items())]
    return tabulate(rows, headers=['task', 'accuracy (%)', 'episodes'], tablefmt='github')


def run_stage(ctx: click.Context, until: str) -> dict:
    config = build_config(ctx.obj)
    return Pipeline(config, verbose=ctx.obj['verbose']).run(until=until)


@click.group()
@click.option('--config', 'config', type=click.Path(dir_okay=False), default=None,
              help='ExperimentConfig JSON file.')
@click.option('--seed', type=int, default=None, help='Master seed, overrides the config.')
@click.option('--output-dir', type=str, default=None, help='Run directory, overrides the config.')
@click.option('--variant', type=click.Choice(VARIANTS), default=None, help='Pipeline variant.')
@click.option('--n-s', 'n_s', type=click.IntRange(min=1), default=None,
              help='Samples per pseudo-class; the validation split decides when omitted.')
@click.option('--eval-episodes', type=click.IntRange(min=1), default=None, help='Meta-test episodes per shot.')
@click.option('--n-jobs', type=int, default=None, help='Parallel workers.')
@click.option('--full-scale', is_flag=True, default=False, help='Full-scale BDE recipe.')
@click.option('--verbose', '-v', is_flag=True, default=False, help='Debug logging and progress bars.')
@click.pass_context
def main(ctx: click.Context, config: Optional[str], seed: Optional[int], output_dir: Optional[str],
         variant: Optional[str], n_s: Optional[int], eval_episodes: Optional[int], n_jobs: Optional[int],
         full_scale: bool, verbose: bool) -> None:
    """Coarse-to-fine pseudo-labeling guided meta-learning from coarse labels only."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    ctx.obj = {'config': config, 'seed': seed, 'output_dir': output_dir, 'variant': variant, 'n_s': n_s,
               'eval_episodes': eval_episodes, 'n_jobs': n_jobs, 'full_scale': full_scale,
               'verbose': verbose}


@main.command('gen-data')
@click.pass_context
@handle_errors
def gen_data(ctx: click.Context) -> None:
    """Generate (or load) the dataset and write the meta-train/val/test splits."""
    train, val, test = run_stage(ctx, 'gen-data')['data']
    click.echo(f'train: {len(train)} samples in {train.num_coarse_classes} coarse classes; '
               f'val: {len(val)} samples in {val.num_fine_classes} fine classes; '
               f'test: {len(test)} samples in {test.num_fine_classes} fine classes')


@main.command('train-bde')
@click.pass_context
@handle_errors
def train_bde(ctx: click.Context) -> None:
    """Learn the bi-level discriminative embedding on the coarse labels."""
    result = run_stage(ctx, 'train-bde')
    if result['bde'] is None:
        click.echo('this variant trains no BDE embedding')


@main.command('pseudo-label')
@click.pass_context
@handle_errors
def pseudo_label(ctx: click.Context) -> None:
    """Split every coarse class into pseudo-fine classes."""
    report = run_stage(ctx, 'pseudo-label')['ari']
    if report is None:
        click.echo('this variant does no pseudo-labeling')
        return
    click.echo(tabulate([[report['n_s'], report['num_pseudo_classes'], report['dropped_count'], report['ari']]],
                        headers=['N_s', 'pseudo-classes', 'dropped', 'ARI vs hidden fine'], tablefmt='github'))


@main.command('meta-train')
@click.pass_context
@handle_errors
def meta_train(ctx: click.Context) -> None:
    """Episodic training of the prototypical-network encoder."""
    run_stage(ctx, 'meta-train')


@main.command('evaluate')
@click.pass_context
@handle_errors
def evaluate(ctx: click.Context) -> None:
    """Meta-test evaluation with 95% confidence intervals."""
    click.echo(eval_table(run_stage(ctx, 'evaluate')['eval']))


@main.command('run-all')
@click.pass_context
@handle_errors
def run_all(ctx: click.Context) -> None:
    """All stages in order, resuming from whatever the run directory already holds."""
    result = run_stage(ctx, 'evaluate')
    if result['ari'] is not None:
        click.echo(f"pseudo-label ARI vs hidden fine labels: {result['ari']['ari']}")
    click.echo(eval_table(result['eval']))


@main.command('compare')
@click.option('--seeds', 'seeds', type=int, multiple=True, default=(0, 1, 2, 3, 4), show_default=True,
              help='Master seeds, repeatable.')
@click.option('--variants', 'variants', type=click.Choice(VARIANTS), multiple=True, default=VARIANTS,
              help='Variants to compare, repeatable.')
@click.pass_context
@handle_errors
def compare(ctx: click.Context, seeds, variants) -> None:
    """Run the variant matrix over several seeds and print the comparison table."""
    config = build_config(ctx.obj)
    comparison = run_compare(config, seeds=list(seeds), variants=list(variants), n_jobs=config.n_jobs)
    click.echo(format_compare_table(comparison))


@main.command('plot')
@click.pass_context
@handle_errors
def plot(ctx: click.Context) -> None:
    """Plot the training traces of the run to traces.pdf."""
    config = build_config(ctx.obj)
    try:
        path = Plotter(config.output_dir).plot_traces()
    except FileNotFoundError as e:
        raise click.ClickException(str(e))
    click.echo(path)


if __name__ == '__main__':
    main()
