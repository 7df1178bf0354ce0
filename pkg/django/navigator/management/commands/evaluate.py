import logging
from pathlib import Path

from metrics.report import build_report, evaluate_slide
from navigator.config import SPLITS
from navigator.datasets import load_dataset
from navigator.pipeline import load_network, oracle_heatmaps, slide_heatmaps
from navigator.runs import NavigatorCommand, check_config_hashes, default_path

logger = logging.getLogger(__name__)


class Command(NavigatorCommand):
    help = 'Scores per-level heatmaps against the navigation annotations and tumour masks of a dataset'
    output_name = 'evaluate'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory (default: <config output>/dataset)')
        parser.add_argument('--checkpoint', help='Fusion network checkpoint (default: <config output>/cmt/cmt.ckpt)')
        parser.add_argument('--split', choices=SPLITS, help='Slides to score (default: evaluation.split)')
        parser.add_argument('--oracle', action='store_true',
                            help='Score the navigation annotations themselves instead of network heatmaps')
        parser.add_argument('--allow-mixed', action='store_true',
                            help='Accept inputs produced under a different config hash')

    def run(self, config, output, **options):
        dataset = Path(options['dataset'] or default_path(config, 'dataset'))
        _, pyramids = load_dataset(dataset, options['split'] or config.evaluation.split)
        inputs = {'dataset': dataset}
        params = None
        if not options['oracle']:
            inputs['checkpoint'] = Path(options['checkpoint'] or default_path(config, 'checkpoint'))
            params = load_network(config, inputs['checkpoint'])
        mixed = check_config_hashes(config, inputs, allow_mixed=options['allow_mixed'])

        reports = []
        for pyramid in pyramids:
            if params is None:
                heatmaps = oracle_heatmaps(pyramid, config.encoder.input_size)
            else:
                _, heatmaps = slide_heatmaps(pyramid, params, config)
            reports.extend(evaluate_slide(pyramid, heatmaps, q=config.evaluation.q))

        table = build_report(reports)
        metrics_path = output / 'metrics.csv'
        table.to_csv(metrics_path, index=False)
        logger.info('Scored %d slides', len(pyramids))
        return inputs, [metrics_path], {'oracle': options['oracle'], 'mixed_inputs': sorted(mixed)}
