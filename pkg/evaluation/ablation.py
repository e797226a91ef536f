"""
Paired seeded runs: personalization benefit, and robustness of the server to offload depths that no client
uses as its split depth (stochastic exit depth vs. exit depth fixed during training).
"""

import copy
import pathlib
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
import train
from evaluation.accuracy import unseen_depths
from utils.stat import wilcoxon_test


def seeded_config(base: config.RunConfig, seed: int, output_dir, **mods) -> config.RunConfig:
    """ Copy of an (updated) base config, with another seed, output directory and attributes of the train
    section (e.g. fixed_exit_depth). """
    run_config = copy.deepcopy(base)
    run_config.train.seed = seed
    run_config.output_dir = str(output_dir)
    for k, v in mods.items():
        setattr(run_config.train, k, v)
    config.validate_config(run_config)
    return run_config


def _paired_p_value(x: pd.Series, y: pd.Series) -> float:
    """ One-sided Wilcoxon signed-rank test (H1: y > x). NaN if fewer than 2 pairs. """
    if len(x) < 2:
        return float('nan')
    p_values, _ = wilcoxon_test(pd.DataFrame({'acc': x.values}), pd.DataFrame({'acc': y.values}),
                                improved_if="y>x")
    return float(p_values['acc'])


def personalization_benefit(base: config.RunConfig, seeds: Sequence[int],
                            root_dir) -> Tuple[pd.DataFrame, float]:
    """ Mean held-out local accuracy before / after personalize(), one run per seed.

    :returns: (seed, acc_before, acc_after) DataFrame, and the p-value of the paired test """
    rows = list()
    for seed in seeds:
        result = train.run_experiment(seeded_config(base, seed, pathlib.Path(root_dir).joinpath('seed{}'.format(seed))))
        rows.append({'seed': seed, 'acc_before': result.summary['local_acc_before_mean'],
                     'acc_after': result.summary['local_acc_after_mean']})
    df = pd.DataFrame(rows, columns=['seed', 'acc_before', 'acc_after'])
    return df, _paired_p_value(df['acc_before'], df['acc_after'])


def _unseen_fallback_accuracy(summary, depths: Sequence[int]) -> float:
    values = [summary.get('fallback_acc_depth{}'.format(k), float('nan')) for k in depths]
    return float(np.mean(values))


def depth_robustness(base: config.RunConfig, seeds: Sequence[int], root_dir,
                     fixed_depth: Optional[int] = None) -> Tuple[pd.DataFrame, float]:
    """ Fallback accuracy at the unseen exit depths of runs trained with a sampled exit depth vs. runs trained
    with a fixed exit depth (default: the deepest exit, always capped at the client's split depth).

    :returns: (seed, stochastic, fixed) DataFrame, and the p-value of the paired test (H1: stochastic > fixed)"""
    depths = unseen_depths(base.model.exit_set, base.model.split_depths)
    if len(depths) == 0:
        raise ValueError("All exit depths {} are used as split depths: no unseen depth to evaluate"
                         .format(base.model.exit_set))
    fixed_depth = max(base.model.exit_set) if fixed_depth is None else fixed_depth
    root_dir = pathlib.Path(root_dir)
    rows = list()
    for seed in seeds:
        stochastic = train.run_experiment(seeded_config(base, seed, root_dir.joinpath('stochastic_seed{}'.format(seed)),
                                                        fixed_exit_depth=None))
        fixed = train.run_experiment(seeded_config(base, seed, root_dir.joinpath('fixed_seed{}'.format(seed)),
                                                   fixed_exit_depth=fixed_depth))
        rows.append({'seed': seed, 'stochastic': _unseen_fallback_accuracy(stochastic.summary, depths),
                     'fixed': _unseen_fallback_accuracy(fixed.summary, depths)})
    df = pd.DataFrame(rows, columns=['seed', 'stochastic', 'fixed'])
    return df, _paired_p_value(df['fixed'], df['stochastic'])
