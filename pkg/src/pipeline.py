from dataclasses import replace
from functools import wraps
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import math
import os

import numpy as np
from joblib import Parallel, delayed
from tabulate import tabulate

from src import PROJECT_PATH
from src.bde import BdeParams, train_bde
from src.c2f import PseudoDataset, pixels_embed, pseudo_label
from src.checkpoint import load_checkpoint, load_encoder, save_checkpoint
from src.dataloader import Dataloader
from src.dataset import CoarseDataset, FineDataset
from src.encoder import EncoderParams
from src.exceptions import EmptyInput, StageFailure
from src.experiment_config import VARIANTS, ExperimentConfig
from src.hierarchy_generator import generate_hierarchical, split_meta
from src.json_helper import JsonHelper
from src.measure_time import measure_time
from src.metrics import EvalReport, adjusted_rand_index
from src.numerics import SeededRng
from src.protonet import meta_eval, meta_train

logger = logging.getLogger(__name__)

BDE_VARIANTS = ('bde', 'visual-only', 'semantic-only')
STAGES = ('gen-data', 'train-bde', 'pseudo-label', 'meta-train', 'evaluate')


def stage(name: str):
    """Attributes any error raised inside the decorated stage to `name`."""
    def decorator(f):
        @wraps(f)
        def wrap(*args, **kw):
            try:
                return f(*args, **kw)
            except StageFailure:
                raise
            except Exception as e:
                raise StageFailure(name, e) from e
        return wrap
    return decorator


def compute_ns_from_validation(val: FineDataset) -> int:
    """
    Pseudo-class size from the meta-validation split: its mean fine-class size, rounded half up, at least 2

    :param FineDataset val: The fine-labeled validation split
    :return int: N_s
    """
    sizes = [s for s in val.class_sizes() if s > 0]
    if not sizes:
        raise EmptyInput('the validation split has no samples')
    mean = math.fsum(sizes) / len(sizes)
    return max(2, int(math.floor(mean + 0.5)))


def ari_report(train: CoarseDataset, pseudo: PseudoDataset) -> dict:
    """
    Agreement of the pseudo-fine partition with the hidden fine partition of the same samples.
    This is the only place the training split's fine labels are read.
    """
    ari = None
    if train.has_fine_labels() and len(pseudo) >= 2:
        ari = adjusted_rand_index(pseudo.pseudo_labels, train.reveal_fine_labels()[pseudo.source_indices])
    return {
        'ari': ari,
        'n_s': pseudo.n_s,
        'num_pseudo_classes': pseudo.num_pseudo_classes,
        'dropped_count': pseudo.dropped_count,
    }


class Pipeline:
    """This is the class responsible for one run of the three training procedures and the evaluation.

    Every stage persists its outputs under the run directory and is skipped when they already exist, so deleting a
    stage's folder and rerunning recomputes that stage (and only the later ones that are missing) from the persisted
    inputs.
    """
    def __init__(self, config: ExperimentConfig, verbose: bool = False) -> None:
        """
        Constructor for Pipeline class

        :param ExperimentConfig config: The experiment
        :param bool verbose: Show progress bars
        """
        config.validate()
        self.config = config
        self.verbose = verbose
        self.folder_name = os.path.join(PROJECT_PATH, config.output_dir)
        self.config_hash = config.config_hash()
        self.stamp = {'config_hash': self.config_hash, 'seed': config.seed, 'variant': config.variant}

    def path(self, *parts: str) -> str:
        return os.path.join(self.folder_name, *parts)

    def mkdirs(self) -> None:
        for folder in ('data', 'bde', 'c2f', 'meta', 'reports'):
            os.makedirs(self.path(folder), exist_ok=True)

    @measure_time
    def run(self, until: str = 'evaluate') -> Dict[str, object]:
        """
        Executes the steps of the run in order, up to and including `until`.
        Stages the variant does not use (BDE for pixels/coarse-direct, pseudo-labeling for coarse-direct) are skipped.

        :param str until: Last stage to run, one of STAGES
        :return Dict[str, object]: What the executed stages produced: 'data' (train, val, test), 'bde', 'pseudo',
                                   'ari', 'encoder' and 'eval' (EvalReport per shot); None where not reached
        """
        if until not in STAGES:
            raise ValueError(f'unknown stage {until!r}, expected one of {STAGES}')
        last = STAGES.index(until)
        result = dict.fromkeys(('data', 'bde', 'pseudo', 'ari', 'encoder', 'eval'))
        self.mkdirs()
        self.config.save(self.path('config.json'))

        train, val, test = result['data'] = self.generate_data()
        if last < STAGES.index('train-bde'):
            return result
        if self.config.variant in BDE_VARIANTS:
            result['bde'] = self.train_bde(train)
        if last < STAGES.index('pseudo-label'):
            return result
        if self.config.variant == 'coarse-direct':
            source = train
        else:
            source, result['ari'] = self.pseudo_label(train, val, result['bde'])
            result['pseudo'] = source
        if last < STAGES.index('meta-train'):
            return result
        result['encoder'] = self.meta_train(source, val, result['bde'])
        if last < STAGES.index('evaluate'):
            return result
        result['eval'] = self.evaluate(result['encoder'], test)
        return result

    @stage('gen-data')
    @measure_time
    def generate_data(self) -> Tuple[CoarseDataset, FineDataset, FineDataset]:
        """
        Draws (or loads) the full dataset and splits it into meta-train, meta-val and meta-test.
        The splits are saved to 'data/'.
        """
        paths = [self.path('data', f'{split}.csv') for split in ('train', 'val', 'test')]
        if all(os.path.exists(p) for p in paths):
            return (Dataloader.load_dataset(paths[0]), Dataloader.load_fine_dataset(paths[1]),
                    Dataloader.load_fine_dataset(paths[2]))

        if self.config.dataset_path is not None:
            full = Dataloader.load_dataset(os.path.join(PROJECT_PATH, self.config.dataset_path))
        else:
            full = generate_hierarchical(self.config.resolved_data())
        train, val, test = split_meta(full, self.config.train_coarse, self.config.val_coarse,
                                      self.config.test_coarse)
        Dataloader.save_dataset(train, paths[0], extra={'config_hash': self.config_hash})
        Dataloader.save_fine_dataset(val, paths[1], extra={'config_hash': self.config_hash})
        Dataloader.save_fine_dataset(test, paths[2], extra={'config_hash': self.config_hash})
        return train, val, test

    @stage('train-bde')
    @measure_time
    def train_bde(self, train: CoarseDataset) -> BdeParams:
        """
        Learns the bi-level discriminative embedding on the coarse labels.
        Saves 'bde/checkpoint' and 'bde/loss_trace.json'.
        """
        stem = self.path('bde', 'checkpoint')
        if os.path.exists(stem + '.json') and os.path.exists(self.path('bde', 'loss_trace.json')):
            return load_checkpoint(stem)

        cfg = self.config.resolved_bde()
        result = train_bde(train, cfg, self.config.augment, verbose=self.verbose)
        save_checkpoint(result.params, stem,
                        extra={**self.stamp, 'epoch': result.best_epoch, 'hyperparameters': cfg.to_dict()})
        JsonHelper.write(self.path('bde', 'loss_trace.json'), {
            **self.stamp,
            'best_epoch': result.best_epoch,
            'clamp_events': result.clamp_events,
            'holdout_knn_accuracy': result.holdout_accuracy,
            'trace': result.loss_trace,
        })
        return result.params

    @stage('pseudo-label')
    @measure_time
    def pseudo_label(self, train: CoarseDataset, val: FineDataset,
                     embedding: Optional[BdeParams]) -> Tuple[PseudoDataset, dict]:
        """
        Splits the coarse classes into pseudo-fine classes with the BDE embedding (or raw features).
        Saves 'c2f/pseudo.csv' with its manifest and 'c2f/ari_report.json'.
        """
        csv_path = self.path('c2f', 'pseudo.csv')
        report_path = self.path('c2f', 'ari_report.json')
        if os.path.exists(csv_path) and os.path.exists(report_path):
            return Dataloader.load_pseudo_dataset(csv_path), JsonHelper.read(report_path)

        n_s = self.config.n_s if self.config.n_s is not None else compute_ns_from_validation(val)
        if embedding is None:
            embed, embedding_id = pixels_embed, 'pixels'
        else:
            embed, embedding_id = embedding.encoder.encode, 'bde/checkpoint'
        seed = self.config.stage_seed('c2f')
        pseudo = pseudo_label(train, embed, n_s, SeededRng(seed), n_jobs=self.config.n_jobs)
        Dataloader.save_pseudo_dataset(pseudo, csv_path, embedding_checkpoint=embedding_id, seed=seed,
                                       extra={'config_hash': self.config_hash})

        report = {**ari_report(train, pseudo), **self.stamp, 'embedding': embedding_id}
        JsonHelper.write(report_path, report)
        logger.info('Pseudo-labels vs hidden fine labels: ARI=%s', report['ari'])
        return pseudo, report

    def _warm_start(self, embedding: Optional[BdeParams]) -> Optional[EncoderParams]:
        warm_start = self.config.meta.warm_start
        if warm_start is None:
            return None
        if warm_start == 'bde':
            if embedding is None:
                logger.info('warm_start=bde ignored: variant %s trains no BDE embedding', self.config.variant)
                return None
            return embedding.encoder
        return load_encoder(os.path.join(PROJECT_PATH, warm_start))

    @stage('meta-train')
    @measure_time
    def meta_train(self, source, val: FineDataset, embedding: Optional[BdeParams]) -> EncoderParams:
        """
        Episodic training of the prototypical-network encoder on the pseudo-fine (or coarse) classes.
        Saves 'meta/checkpoint' and 'meta/trace.json'.
        """
        stem = self.path('meta', 'checkpoint')
        if os.path.exists(stem + '.json') and os.path.exists(self.path('meta', 'trace.json')):
            return load_encoder(stem)

        cfg = self.config.resolved_meta()
        result = meta_train(source, cfg,
                            val=val if self.config.meta_val_selection else None,
                            init=self._warm_start(embedding), verbose=self.verbose)
        save_checkpoint(result.params, stem,
                        extra={**self.stamp, 'epoch': result.best_epoch, 'hyperparameters': cfg.to_dict()})
        JsonHelper.write(self.path('meta', 'trace.json'), {
            **self.stamp,
            'best_epoch': result.best_epoch,
            'val_accuracy': result.val_accuracy,
            'trace': result.trace,
        })
        return result.params

    @stage('evaluate')
    @measure_time
    def evaluate(self, encoder: EncoderParams, test: FineDataset) -> Dict[int, EvalReport]:
        """
        N-way K-shot meta-test evaluation for every K of the config.
        Saves 'reports/eval_<K>shot.json'.
        """
        reports = {}
        for k_shot in self.config.k_shots:
            report = meta_eval(encoder, test, self.config.n_way, k_shot, self.config.q_query,
                               self.config.eval_episodes, seed=self.config.stage_seed('eval'),
                               verbose=self.verbose)
            JsonHelper.write(self.path('reports', f'eval_{k_shot}shot.json'), {**report.to_dict(), **self.stamp})
            reports[k_shot] = report
        return reports


def run_pipeline(config: ExperimentConfig, verbose: bool = False) -> Dict[str, object]:
    return Pipeline(config, verbose=verbose).run()


def run_baseline_coarse_direct(config: ExperimentConfig, verbose: bool = False) -> EvalReport:
    """
    Meta-trains directly on the coarse classes (no pseudo-labeling) and evaluates on the fine-labeled test split

    :param ExperimentConfig config: The experiment; its variant is overridden
    :return EvalReport: The report of the first configured shot
    """
    config = replace(config, variant='coarse-direct')
    return run_pipeline(config, verbose=verbose)['eval'][config.k_shots[0]]


def _run_variant(config: ExperimentConfig, variant: str, seed: int) -> dict:
    run_config = replace(config.with_seed(seed), variant=variant, n_jobs=1,
                         output_dir=os.path.join(config.output_dir, variant, f'seed_{seed}'))
    result = run_pipeline(run_config)
    return {
        'variant': variant,
        'seed': seed,
        'eval': {str(k): report.to_dict() for k, report in result['eval'].items()},
        'ari': result['ari']['ari'] if result['ari'] is not None else None,
    }


def _spread(values: List[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@measure_time
def run_compare(config: ExperimentConfig, seeds: Sequence[int], variants: Sequence[str] = VARIANTS,
                n_jobs: int = 1) -> dict:
    """
    Runs every (variant, seed) pair in its own directory and aggregates the reports per variant

    :param ExperimentConfig config: The base experiment
    :param Sequence[int] seeds: Master seeds
    :param Sequence[str] variants: Variants to compare
    :param int n_jobs: Worker processes; the result does not depend on it
    :return dict: Per-variant mean and spread over seeds of the accuracy per shot and of the ARI, plus the runs
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f'unknown variants {unknown}')
    jobs = [(variant, seed) for variant in variants for seed in seeds]
    runs = Parallel(n_jobs=n_jobs)(delayed(_run_variant)(config, variant, seed) for variant, seed in jobs)

    summary = {}
    for variant in variants:
        own = [r for r in runs if r['variant'] == variant]
        entry = {'seeds': [r['seed'] for r in own]}
        for k_shot in config.k_shots:
            accuracies = [r['eval'][str(k_shot)]['mean_accuracy'] for r in own]
            entry[f'{k_shot}shot'] = {'mean': float(np.mean(accuracies)), 'spread': _spread(accuracies)}
        aris = [r['ari'] for r in own if r['ari'] is not None]
        entry['ari'] = {'mean': float(np.mean(aris)), 'spread': _spread(aris)} if aris else None
        summary[variant] = entry

    comparison = {'config_hash': config.config_hash(), 'n_way': config.n_way, 'k_shots': list(config.k_shots),
                  'summary': summary, 'runs': runs}
    os.makedirs(os.path.join(PROJECT_PATH, config.output_dir), exist_ok=True)
    JsonHelper.write(os.path.join(PROJECT_PATH, config.output_dir, 'compare.json'), comparison)
    return comparison


def format_compare_table(comparison: dict) -> str:
    """
    :param dict comparison: The output of `run_compare`
    :return str: One row per variant, accuracies in percent as 'mean ± spread'
    """
    shots = comparison['k_shots']
    headers = ['variant'] + [f"{comparison['n_way']}-way {k}-shot" for k in shots] + ['ARI']
    rows = []
    for variant, entry in comparison['summary'].items():
        row = [variant]
        for k in shots:
            cell = entry[f'{k}shot']
            row.append(f"{100.0 * cell['mean']:.2f} ± {100.0 * cell['spread']:.2f}")
        row.append('-' if entry['ari'] is None else f"{entry['ari']['mean']:.3f} ± {entry['ari']['spread']:.3f}")
        rows.append(row)
    return tabulate(rows, headers=headers, tablefmt='github')
