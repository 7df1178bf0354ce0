"""
Shared plumbing of the management commands: run config loading, output directories, run manifests,
RunRecord bookkeeping and the translation of project errors into command exit codes.
"""
import json
import logging
import shutil
import time
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from core.checkpoints import read_checkpoint
from core.exceptions import NavigatorError
from core.hashing import file_hash, tree_hash

from .config import load_run_config
from .datasets import INDEX_NAME, read_index
from .exceptions import ConfigHashMismatchError, OutputExistsError
from .models import RunRecord

logger = logging.getLogger(__name__)

DEFAULT_DIRECTORIES = {
    'dataset': 'dataset',
    'checkpoint': 'cmt/cmt.ckpt',
    'traces': 'traces',
}


def default_path(config, name):
    return Path(config.output) / DEFAULT_DIRECTORIES[name]


def input_hash(path):
    path = Path(path)
    if path.is_dir():
        return tree_hash(path, exclude=(settings.NAVIGATOR_RUN_MANIFEST,))
    return file_hash(path)


def artifact_config_hash(path):
    """
    The config hash a dataset, checkpoint or trace directory was produced with (None when it carries none)
    """
    path = Path(path)
    if not path.exists():
        return None
    if path.is_dir() and (path / INDEX_NAME).exists():
        return read_index(path).get('config_hash')
    if path.is_dir():
        manifest = path / settings.NAVIGATOR_RUN_MANIFEST
        if manifest.exists():
            with open(manifest) as f:
                return json.load(f).get('config_hash')
        return None
    metadata, _ = read_checkpoint(path)
    return metadata.get('config_hash')


def check_config_hashes(config, artifacts, allow_mixed=False):
    """
    Refuses inputs produced under another config unless allow_mixed; returns the mismatches found
    """
    expected = config.config_hash()
    mismatches = {}
    for name, path in artifacts.items():
        found = artifact_config_hash(path)
        if found is not None and found != expected:
            mismatches[name] = found
    for name, found in mismatches.items():
        message = f'{name} was produced with config {found[:12]}, this run uses {expected[:12]}'
        if not allow_mixed:
            raise ConfigHashMismatchError(f'{message} (pass --allow-mixed to proceed)')
        logger.warning(message)
    return mismatches


class NavigatorCommand(BaseCommand):
    """
    Subclasses set output_name (the default output directory under config.output) and implement run(),
    which returns the extra manifest entries
    """
    output_name = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON run config file')
        parser.add_argument('--seed', type=int, help='Overrides the config seed')
        parser.add_argument('--set', action='append', default=[], dest='overrides', metavar='SECTION.KEY=VALUE',
                            help='Overrides one config value (repeatable); values are read as JSON')
        parser.add_argument('--output', help='Output directory (default: <config output>/%s)' % self.output_name)
        parser.add_argument('--force', action='store_true', help='Replace a non-empty output directory')
        parser.add_argument('--jobs', type=int, help='Maximum number of parallel workers')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def prepare_output(self, config, output, force):
        path = Path(output) if output else Path(config.output) / self.output_name
        if path.exists() and any(path.iterdir()):
            if not force:
                raise OutputExistsError(f'{path} is not empty (pass --force to replace it)')
            logger.warning('Replacing the contents of %s', path)
            shutil.rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def handle(self, *args, **options):
        started = time.monotonic()
        record = None
        try:
            config = load_run_config(options['config'], seed=options['seed'], overrides=options['overrides'],
                                     jobs=options['jobs'])
            output = self.prepare_output(config, options['output'], options['force'])
            record = RunRecord.objects.create(command=self.command_name, config_hash=config.config_hash(),
                                              output_dir=str(output))
            run_options = {k: v for k, v in options.items() if k not in ('config', 'output')}
            inputs, outputs, extra = self.run(config, output, **run_options)
            wall_time = time.monotonic() - started
            self.write_manifest(config, output, inputs, outputs, wall_time, extra)
        except NavigatorError as e:
            if record is not None:
                self.finish(record, RunRecord.STATUS_FAILED, time.monotonic() - started, str(e))
            raise CommandError(str(e), returncode=e.exit_code)
        except Exception as e:
            if record is not None:
                self.finish(record, RunRecord.STATUS_FAILED, time.monotonic() - started, repr(e))
            raise
        self.finish(record, RunRecord.STATUS_SUCCEEDED, wall_time)
        self.stdout.write(self.style.SUCCESS(f'{self.command_name}: wrote {output} in {wall_time:.1f}s'))

    def finish(self, record, status, wall_time, message=''):
        record.status = status
        record.wall_time = wall_time
        record.message = message
        record.finished = timezone.now()
        record.save()

    def write_manifest(self, config, output, inputs, outputs, wall_time, extra=None):
        manifest = {
            'command': self.command_name,
            'config_hash': config.config_hash(),
            'config': config.to_dict(),
            'inputs': {name: {'path': str(path), 'sha256': input_hash(path)} for name, path in inputs.items()},
            'outputs': sorted(str(Path(p).relative_to(output)) for p in outputs),
            'wall_time': wall_time,
            **(extra or {}),
        }
        with open(Path(output) / settings.NAVIGATOR_RUN_MANIFEST, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    def run(self, config, output, **options):
        """
        Returns (inputs {name: path}, output paths, extra manifest entries)
        """
        raise NotImplementedError
