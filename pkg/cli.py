"""
Command-line interface:

    python cli.py run [--config FILE] [--<key> VALUE ...]
    python cli.py audit TRANSCRIPT
    python cli.py inspect CHECKPOINT

Exit codes: 0 success, 1 invalid config (run) or privacy violations (audit), 2 runtime failure or corrupt file.
"""

import argparse
import pathlib
import sys
from typing import Optional, Sequence

import config
import train
from model.checkpoint import load_checkpoint
from protocol import codec
from protocol.audit import audit_privacy
from utils.exception import CheckpointError, ConfigError, DecodeError

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


def flag_name(key: str) -> str:
    return '--' + key.replace('_', '-')


def keys_help() -> str:
    return "config keys (file keys or flags):\n" + "\n".join(
        "  {:<20s} {}".format(key, k.help) for key, k in config.CONFIG_KEYS.items())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hsfl', description="Hybrid split-federated learning simulator")
    subparsers = parser.add_subparsers(dest='command', required=True)
    run_parser = subparsers.add_parser('run', help="run a simulation", epilog=keys_help(),
                                       formatter_class=argparse.RawDescriptionHelpFormatter)
    run_parser.add_argument('--config', dest='config_file', default=None,
                            help="flat 'key = value' config file (flags override its values)")
    for key, k in config.CONFIG_KEYS.items():
        run_parser.add_argument(flag_name(key), dest=key, default=None, metavar='VALUE', help=k.help)
    audit_parser = subparsers.add_parser('audit', help="label-privacy audit of a recorded transcript")
    audit_parser.add_argument('transcript')
    inspect_parser = subparsers.add_parser('inspect', help="list the entities of a checkpoint")
    inspect_parser.add_argument('checkpoint')
    return parser


def cmd_run(args, stdout, stderr) -> int:
    overrides = {key: getattr(args, key) for key in config.CONFIG_KEYS if getattr(args, key) is not None}
    try:
        run_config = config.build_run_config(args.config_file, overrides)
    except ConfigError as e:
        print("[cli.py] {}".format(e), file=stderr)
        return EXIT_INVALID
    try:
        train.run_experiment(run_config)
        with open(pathlib.Path(run_config.output_dir).joinpath('summary.txt'), 'r') as f:
            stdout.write(f.read())
    except Exception as e:
        print("[cli.py] Run failed: {}: {}".format(type(e).__name__, e), file=stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_audit(args, stdout, stderr) -> int:
    try:
        report = audit_privacy(codec.read_transcript_bytes(args.transcript))
    except OSError as e:
        print("[cli.py] Cannot read '{}': {}".format(args.transcript, e), file=stderr)
        return EXIT_FAILURE
    except DecodeError as e:
        print("[cli.py] Corrupt transcript '{}': {}".format(args.transcript, e), file=stderr)
        return EXIT_FAILURE
    print(report, file=stdout)
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_inspect(args, stdout, stderr) -> int:
    try:
        entities = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        print("[cli.py] {}".format(e), file=stderr)
        return EXIT_FAILURE
    print("entities = {}".format(len(entities)), file=stdout)
    for e in entities:
        blocks = [layer.depth_index for layer in e.layers if layer.role == 'block']
        heads = [layer.depth_index for layer in e.layers if layer.role == 'head']
        print("{} {}: depths {} head@{} params={}".format(
            e.kind_name, e.entity_id, ','.join(str(d) for d in blocks) or '-',
            ','.join(str(d) for d in heads) or '-', e.num_params), file=stdout)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    args = build_parser().parse_args(argv)
    commands = {'run': cmd_run, 'audit': cmd_audit, 'inspect': cmd_inspect}
    return commands[args.command](args, stdout, stderr)


if __name__ == "__main__":
    sys.exit(main())
