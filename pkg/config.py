"""
Allows easy modification of all configuration parameters required to define and run a simulation.
This script is not intended to be run, it only describes parameters (see classes constructors).
After building the config instances, the update_dynamic_config_params(...) method
must be called to update some "dynamic" parameters which depend on some others, then
validate_config(...) checks all values (errors name the offending key).

Every parameter also has a flat key (see CONFIG_KEYS) which is used in config files
(one 'key = value' per line, '#' comments) and as a kebab-case command-line flag.
Precedence: defaults < config file < HSFL_SEED environment variable (seed only) < command-line flags.

When a run starts, the config is stored as config.json and config.pickle files. To ensure easy restoration of
parameters, please only use simple types such as string, ints, floats, tuples (no lists) and dicts.
"""

import math
import os
import pathlib
import warnings
from typing import Callable, Dict, NamedTuple, Optional, Any, Union, Mapping

from utils.exception import ConfigError


# ===================================================================================================================
# ================================================= Model configuration =============================================
# ===================================================================================================================
class ModelConfig:
    def __init__(self):
        # ----------------------------------------------- Data ---------------------------------------------------
        self.classes = 4  # C
        self.dim = 16  # d, input features
        self.samples = 4096  # n, size of the whole synthetic dataset
        self.spread = 1.0  # Isotropic std of each Gaussian class
        self.mean_scale = 2.0  # Norm of class means (orthonormal directions if dim >= classes)
        self.concentration = 0.5  # Dirichlet label-skew (small values: strongly non-IID clients)
        self.holdout = 0.2  # Proportion of each client's shard kept for evaluation

        # ---------------------------------------------- Backbone --------------------------------------------------
        self.depth = 6  # D, total number of blocks of the multi-exit template
        # Output dim of each block: a single int (same dim for all blocks) or a tuple of D ints
        self.dims = 32
        self.exit_set = (2, 3, 4)  # Valid exit (and split) depths, subset of 1..D-1
        # Per-client split depths n(phi). None: round-robin over exit_set. A single int applies to all clients.
        self.split_depths = None
        self.activation = 'relu'  # 'relu' or 'linear'
        self.entropy_threshold = 0.5  # e_n (nats), same initial value for all clients

        # Dynamic attributes, set by update_dynamic_config_params(...)
        self.hidden_dims = ()  # D output dims


# ===================================================================================================================
# ============================================= Training hyper-parameters ===========================================
# ===================================================================================================================
class HyperParams:
    def __init__(self):
        self.rounds = 50  # R
        self.clients = 8  # N
        self.participation = 1.0  # rho: ceil(rho*N) clients are sampled uniformly at each round
        self.local_steps = 5  # T_n: a single int, or a tuple of N ints
        self.gamma = 0.5  # Weight of the on-device exit loss l_C (1-gamma for the server task loss l_S)
        self.lambda_ = 0.0  # Personal share kept by each client at aggregation (0: plain depth-aware FedAvg)
        self.inner_lr = 0.05  # alpha
        self.outer_lr = 0.05  # beta
        self.inner_steps = 1  # S, adaptation SGD steps per branch
        self.batch_size = 32
        self.margin = 1.0  # m, contrastive margin
        self.csa_weight = 1.0  # Multiplier of the server contrastive alignment loss (0 disables CSA)
        self.csa_lr = 0.05  # Step size of the CSA trunk update
        self.bits = 8  # b, feature quantization bit width
        self.seed = 17
        self.personalize_steps = 20  # S_final, mini-batch adaptation steps of the final personalization
        # Ablation: if not None, branch-dagger features always use this exit depth (capped at the split depth)
        # instead of a uniformly sampled one
        self.fixed_exit_depth = None
        self.workers = 1  # Parallel client-pair tasks (results do not depend on this value)


class DiagnosticsConfig:
    def __init__(self):
        self.enabled = False  # Assumption probes (L, B, noise variances, G) after training
        self.estimate_smoothness = True  # Empirical L
        self.L_probe_pairs = 4  # Random parameter pairs around the final parameters
        self.B_probe = True  # Client dissimilarity ratio
        self.noise_probes = 8  # Mini-batch / quantization / CSA pair draws for the noise variances
        self.probe_radius = 1e-2  # Relative size of the random parameter perturbations


class RunConfig:
    def __init__(self):
        self.model = ModelConfig()
        self.train = HyperParams()
        self.diagnostics = DiagnosticsConfig()
        # -------------------------------------------- Outputs and logs --------------------------------------------
        self.output_dir = 'runs/dev'
        self.allow_erase_run = True  # If True, a previous run in the same output_dir will be erased
        self.record_transcript = False  # Write all encoded frames into transcript.bin
        self.record_wall_time = False  # If False, wall_ms is written as 0 (byte-identical metrics files)
        self.export_dataset = False  # Write the synthetic dataset and its partition into dataset.csv
        self.verbosity = 1  # 0: silent, 1: per-round, 2: per-client, 3: per-step

    def as_dict(self) -> Dict[str, Any]:
        """ Flat dict of all registered keys (written as config.json) """
        return {k: get_value(self, k) for k in CONFIG_KEYS}


# ===================================================================================================================
# ================================================ Keys registry ===================================================
# ===================================================================================================================
def _parse_bool(s: str) -> bool:
    if s.strip().lower() in ('1', 'true', 'yes', 'on'):
        return True
    if s.strip().lower() in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError("'{}' is not a boolean".format(s))


def _parse_int_tuple(s: str) -> tuple:
    items = [item for item in s.replace(' ', '').split(',') if item != '']
    if len(items) == 0:
        raise ValueError("empty list")
    return tuple(int(item) for item in items)


def _parse_int_or_tuple(s: str) -> Union[int, tuple]:
    t = _parse_int_tuple(s)
    return t[0] if len(t) == 1 and ',' not in s else t


def _optional(parser: Callable) -> Callable:
    def parse(s: str):
        return None if s.strip().lower() in ('none', '') else parser(s)
    return parse


class ConfigKey(NamedTuple):
    section: Optional[str]  # attribute of RunConfig holding the value (None: RunConfig itself)
    attribute: str
    parser: Callable[[str], Any]
    help: str


CONFIG_KEYS: Dict[str, ConfigKey] = {
    # Hyper-parameters
    'rounds': ConfigKey('train', 'rounds', int, "number of rounds R"),
    'clients': ConfigKey('train', 'clients', int, "number of clients N"),
    'participation': ConfigKey('train', 'participation', float, "participation ratio rho in (0, 1]"),
    'local_steps': ConfigKey('train', 'local_steps', _parse_int_or_tuple, "local steps T_n (int or list of N ints)"),
    'gamma': ConfigKey('train', 'gamma', float, "weight of the exit loss, in [0, 1]"),
    'lambda': ConfigKey('train', 'lambda_', float, "personal share kept at aggregation, in [0, 1]"),
    'inner_lr': ConfigKey('train', 'inner_lr', float, "adaptation step size alpha"),
    'outer_lr': ConfigKey('train', 'outer_lr', float, "outer (meta and server) step size beta"),
    'inner_steps': ConfigKey('train', 'inner_steps', int, "adaptation SGD steps S"),
    'batch_size': ConfigKey('train', 'batch_size', int, "mini-batch size"),
    'margin': ConfigKey('train', 'margin', float, "contrastive margin m > 0"),
    'csa_weight': ConfigKey('train', 'csa_weight', float, "contrastive alignment weight (0 disables CSA)"),
    'csa_lr': ConfigKey('train', 'csa_lr', float, "contrastive alignment step size"),
    'bits': ConfigKey('train', 'bits', int, "feature quantization bits b (1..32)"),
    'seed': ConfigKey('train', 'seed', int, "random seed (also set by the HSFL_SEED environment variable)"),
    'personalize_steps': ConfigKey('train', 'personalize_steps', int, "final personalization steps"),
    'fixed_exit_depth': ConfigKey('train', 'fixed_exit_depth', _optional(int),
                                  "ablation: fixed exit depth instead of sampled ones (none to disable)"),
    'workers': ConfigKey('train', 'workers', int, "parallel client tasks"),
    # Data
    'classes': ConfigKey('model', 'classes', int, "number of classes C"),
    'dim': ConfigKey('model', 'dim', int, "input dim d"),
    'samples': ConfigKey('model', 'samples', int, "dataset size n"),
    'spread': ConfigKey('model', 'spread', float, "Gaussian std of each class"),
    'mean_scale': ConfigKey('model', 'mean_scale', float, "norm of class means"),
    'concentration': ConfigKey('model', 'concentration', float, "Dirichlet concentration > 0"),
    'holdout': ConfigKey('model', 'holdout', float, "held-out proportion of each shard, in [0, 1)"),
    # Backbone
    'depth': ConfigKey('model', 'depth', int, "number of blocks D"),
    'dims': ConfigKey('model', 'dims', _parse_int_or_tuple, "block output dims (int or list of D ints)"),
    'exit_set': ConfigKey('model', 'exit_set', _parse_int_tuple, "exit depths (list, subset of 1..D-1)"),
    'split_depths': ConfigKey('model', 'split_depths', _optional(_parse_int_or_tuple),
                              "client split depths (none: round-robin over exit_set)"),
    'activation': ConfigKey('model', 'activation', str, "relu or linear"),
    'entropy_threshold': ConfigKey('model', 'entropy_threshold', float, "entropy gate e_n (nats) >= 0"),
    # Diagnostics
    'diagnostics': ConfigKey('diagnostics', 'enabled', _parse_bool, "run the assumption probes"),
    'estimate_smoothness': ConfigKey('diagnostics', 'estimate_smoothness', _parse_bool, "estimate L"),
    'l_probe_pairs': ConfigKey('diagnostics', 'L_probe_pairs', int, "parameter pairs for the L estimate"),
    'b_probe': ConfigKey('diagnostics', 'B_probe', _parse_bool, "estimate the dissimilarity B"),
    'noise_probes': ConfigKey('diagnostics', 'noise_probes', int, "draws for the noise variance estimates"),
    'probe_radius': ConfigKey('diagnostics', 'probe_radius', float, "relative radius of parameter probes"),
    # Outputs
    'output_dir': ConfigKey(None, 'output_dir', str, "output directory"),
    'allow_erase_run': ConfigKey(None, 'allow_erase_run', _parse_bool, "erase an existing output directory"),
    'record_transcript': ConfigKey(None, 'record_transcript', _parse_bool, "write transcript.bin"),
    'record_wall_time': ConfigKey(None, 'record_wall_time', _parse_bool, "write wall_ms (not reproducible)"),
    'export_dataset': ConfigKey(None, 'export_dataset', _parse_bool, "write dataset.csv"),
    'verbosity': ConfigKey(None, 'verbosity', int, "console verbosity 0..3"),
}


def _section(run_config: RunConfig, key: str):
    if key not in CONFIG_KEYS:
        raise ConfigError(key, "unknown config key")
    k = CONFIG_KEYS[key]
    return run_config if k.section is None else getattr(run_config, k.section), k


def get_value(run_config: RunConfig, key: str):
    section, k = _section(run_config, key)
    return getattr(section, k.attribute)


def set_value(run_config: RunConfig, key: str, value):
    """ Sets a value (a string is parsed with the key's parser). """
    section, k = _section(run_config, key)
    if isinstance(value, str) and k.parser is not str:
        try:
            value = k.parser(value)
        except ValueError as e:
            raise ConfigError(key, "cannot parse '{}' ({})".format(value, e))
    elif isinstance(value, list):
        value = tuple(value)
    setattr(section, k.attribute, value)


def read_config_file(path: Union[str, pathlib.Path]) -> Dict[str, str]:
    """ Flat 'key = value' file, '#' starts a comment. Returns raw string values. """
    values = dict()
    try:
        with open(path, 'r') as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError('config', "cannot read config file '{}': {}".format(path, e))
    for line_idx, line in enumerate(lines):
        line = line.split('#', 1)[0].strip()
        if line == '':
            continue
        if '=' not in line:
            raise ConfigError('config', "line {} of '{}' is not a 'key = value' line".format(line_idx + 1, path))
        key, value = [s.strip() for s in line.split('=', 1)]
        key = key.replace('-', '_')
        if key not in CONFIG_KEYS:
            raise ConfigError(key, "unknown config key (line {} of '{}')".format(line_idx + 1, path))
        values[key] = value
    return values


def build_run_config(config_file: Optional[Union[str, pathlib.Path]] = None,
                     overrides: Optional[Mapping[str, Any]] = None,
                     environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """ Defaults < config file < HSFL_SEED < overrides (e.g. command-line flags). Returns an updated and
    validated config. """
    run_config = RunConfig()
    if config_file is not None:
        for key, value in read_config_file(config_file).items():
            set_value(run_config, key, value)
    environ = os.environ if environ is None else environ
    if environ.get('HSFL_SEED', '') != '':
        set_value(run_config, 'seed', environ['HSFL_SEED'])
    for key, value in (overrides or dict()).items():
        set_value(run_config, key, value)
    update_dynamic_config_params(run_config)
    validate_config(run_config)
    return run_config


# ===================================================================================================================
# ========================================= Dynamic params and validation ===========================================
# ===================================================================================================================
def update_dynamic_config_params(run_config: RunConfig):
    """ This function must be called before using any config attribute """
    model_config, train_config = run_config.model, run_config.train
    if isinstance(model_config.dims, int):
        model_config.hidden_dims = tuple([model_config.dims] * model_config.depth)
    else:
        model_config.hidden_dims = tuple(model_config.dims)
    model_config.exit_set = tuple(sorted(set(model_config.exit_set)))
    # Split depths: round-robin over exit_set by default
    if model_config.split_depths is None:
        model_config.split_depths = tuple(model_config.exit_set[n % len(model_config.exit_set)]
                                          for n in range(train_config.clients))
    elif isinstance(model_config.split_depths, int):
        model_config.split_depths = tuple([model_config.split_depths] * train_config.clients)
    else:
        model_config.split_depths = tuple(model_config.split_depths)
    if isinstance(train_config.local_steps, int):
        train_config.local_steps = tuple([train_config.local_steps] * train_config.clients)
    else:
        train_config.local_steps = tuple(train_config.local_steps)


def _check(condition: bool, key: str, reason: str):
    if not condition:
        raise ConfigError(key, reason)


def validate_config(run_config: RunConfig):
    """ Raises a ConfigError naming the first invalid key. update_dynamic_config_params(...) must have been
    called before. """
    m, t, diag = run_config.model, run_config.train, run_config.diagnostics
    _check(t.rounds >= 1, 'rounds', "must be >= 1 (got {})".format(t.rounds))
    _check(t.clients >= 1, 'clients', "must be >= 1 (got {})".format(t.clients))
    _check(0.0 < t.participation <= 1.0, 'participation', "must be in (0, 1] (got {})".format(t.participation))
    _check(1 <= math.ceil(t.participation * t.clients) <= t.clients, 'participation', "no client would be selected")
    _check(len(t.local_steps) == t.clients, 'local_steps', "{} values for {} clients".format(len(t.local_steps),
                                                                                          t.clients))
    _check(all(s >= 1 for s in t.local_steps), 'local_steps', "all values must be >= 1")
    _check(0.0 <= t.gamma <= 1.0, 'gamma', "must be in [0, 1] (got {})".format(t.gamma))
    _check(0.0 <= t.lambda_ <= 1.0, 'lambda', "must be in [0, 1] (got {})".format(t.lambda_))
    _check(t.inner_lr >= 0.0, 'inner_lr', "must be >= 0")
    _check(t.outer_lr >= 0.0, 'outer_lr', "must be >= 0")
    _check(t.inner_steps >= 0, 'inner_steps', "must be >= 0")
    _check(t.batch_size >= 1, 'batch_size', "must be >= 1")
    _check(t.margin > 0.0, 'margin', "must be > 0")
    _check(t.csa_weight >= 0.0, 'csa_weight', "must be >= 0")
    _check(t.csa_lr >= 0.0, 'csa_lr', "must be >= 0")
    _check(1 <= t.bits <= 32, 'bits', "must be in 1..32 (got {})".format(t.bits))
    _check(t.seed >= 0, 'seed', "must be >= 0")
    _check(t.personalize_steps >= 0, 'personalize_steps', "must be >= 0")
    _check(t.workers >= 1, 'workers', "must be >= 1")
    _check(m.classes >= 2, 'classes', "must be >= 2")
    _check(m.dim >= 1, 'dim', "must be >= 1")
    _check(m.samples >= m.classes and m.samples >= t.clients, 'samples', "must be >= classes and >= clients")
    _check(m.spread >= 0.0, 'spread', "must be >= 0")
    _check(m.mean_scale >= 0.0, 'mean_scale', "must be >= 0")
    _check(m.concentration > 0.0, 'concentration', "must be > 0")
    _check(0.0 <= m.holdout < 1.0, 'holdout', "must be in [0, 1)")
    _check(m.depth >= 2, 'depth', "must be >= 2")
    _check(len(m.hidden_dims) == m.depth, 'dims', "{} dims given for {} blocks".format(len(m.hidden_dims), m.depth))
    _check(all(d >= 1 for d in m.hidden_dims), 'dims', "all dims must be >= 1")
    _check(len(m.exit_set) >= 1 and all(1 <= k <= m.depth - 1 for k in m.exit_set), 'exit_set',
           "must be a non-empty subset of 1..{}".format(m.depth - 1))
    _check(len(m.split_depths) == t.clients, 'split_depths', "{} values for {} clients".format(len(m.split_depths),
                                                                                            t.clients))
    _check(all(k in m.exit_set for k in m.split_depths), 'split_depths', "all values must be in exit_set")
    _check(m.activation in ('relu', 'linear'), 'activation', "must be 'relu' or 'linear'")
    _check(m.entropy_threshold >= 0.0, 'entropy_threshold', "must be >= 0")
    _check(t.fixed_exit_depth is None or t.fixed_exit_depth in m.exit_set, 'fixed_exit_depth',
           "must be none or an exit depth")
    _check(diag.L_probe_pairs >= 0, 'l_probe_pairs', "must be >= 0")
    _check(diag.noise_probes >= 0, 'noise_probes', "must be >= 0")
    _check(diag.probe_radius > 0.0, 'probe_radius', "must be > 0")
    _check(0 <= run_config.verbosity <= 3, 'verbosity', "must be in 0..3")
    _check(str(run_config.output_dir) != '', 'output_dir', "must not be empty")


def check_step_sizes(train_config: HyperParams, L: float, B: float = 0.0):
    """ Warns if alpha > 1/L or beta > 1/(L(B^2+1)), given smoothness and dissimilarity estimates. """
    if not (L > 0.0 and math.isfinite(L)):
        return
    if train_config.inner_lr > 1.0 / L:
        warnings.warn("inner_lr = {} is larger than 1/L = {:.4g} (empirical smoothness estimate)"
                      .format(train_config.inner_lr, 1.0 / L))
    beta_cap = 1.0 / (L * (B ** 2 + 1.0))
    if train_config.outer_lr > beta_cap:
        warnings.warn("outer_lr = {} is larger than 1/(L(B^2+1)) = {:.4g} (empirical estimates)"
                      .format(train_config.outer_lr, beta_cap))
