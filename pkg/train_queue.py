"""
Script that can be edited to configure and run a queue of simulation runs.
Must be run as main

See the actual run function in train.py
"""

import copy
import gc
import pathlib
from typing import Dict, List, Optional

import config
import train
import utils.exception


""" Global config modifications (applied to all runs) """
base_config_file: Optional[str] = None  # e.g. 'configs/reference.cfg'
queue_root_dir = 'runs/queue'

"""
Please write a list of dicts, such that:
- each list index corresponds to a run
- each dict key is a flat config key (see config.CONFIG_KEYS). Empty dict to indicate
      that no config modification should be performed
The output directory of each run is <queue_root_dir>/<run name>, built from the modified keys if not given.
"""
config_mods: List[Dict] = list()

# E.g: paired seeds of the fixed exit depth ablation
for seed in [17, 18, 19, 20, 21]:
    config_mods.append({'seed': seed})
    config_mods.append({'seed': seed, 'fixed_exit_depth': 4})


def run_name(mods: Dict) -> str:
    return '_'.join('{}{}'.format(k, v) for k, v in sorted(mods.items())) if len(mods) > 0 else 'base'


def build_queue(mods_list: List[Dict], config_file=None, root_dir=queue_root_dir) -> List[config.RunConfig]:
    """ One updated and validated RunConfig per modifications dict. """
    run_configs = list()
    for mods in mods_list:
        mods = copy.deepcopy(mods)
        mods.setdefault('output_dir', str(pathlib.Path(root_dir).joinpath(run_name(mods))))
        run_configs.append(config.build_run_config(config_file, overrides=mods))
    return run_configs


def run_queue(run_configs: List[config.RunConfig], max_divergent_runs=0):
    """ Runs all configs sequentially. A diverging run (non-finite parameters) can be restarted with the same
    config at most max_divergent_runs times, then the queue stops. """
    results = list()
    for run_index, run_config in enumerate(run_configs):
        print("================================================================")
        print("=============== Enqueued Run {}/{} starts ===============".format(run_index + 1, len(run_configs)))
        divergent_runs = 0
        while True:
            try:
                results.append(train.run_experiment(run_config))
                break
            except utils.exception.ModelConvergenceError as e:
                divergent_runs += 1
                if divergent_runs > max_divergent_runs:
                    raise utils.exception.ModelConvergenceError(
                        "Run {}/{} does not converge ({} trials failed). The queue will now stop: {}"
                        .format(run_index + 1, len(run_configs), divergent_runs, e))
                print("[train_queue.py] Run did not converge: {}. Restarting run... (next trial: {}/{})"
                      .format(e, divergent_runs + 1, max_divergent_runs + 1))
                run_config.allow_erase_run = True  # We force the run to be erasable
        print("=============== Enqueued Run {}/{} has finished ===============".format(run_index + 1,
                                                                                    len(run_configs)))
        print("======================================================================")
        gc.collect()
    print("[train_queue.py] Finished all runs.")
    return results


if __name__ == "__main__":
    run_queue(build_queue(config_mods, base_config_file))
