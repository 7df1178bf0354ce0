import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from encoder.encoders import get_encoder
from mst.agent import agent_run
from mst.backends import build_backend
from navigator.datasets import load_dataset
from navigator.pipeline import load_network, trace_path
from navigator.runs import NavigatorCommand, check_config_hashes, default_path

logger = logging.getLogger(__name__)


class Command(NavigatorCommand):
    help = 'Runs the navigation agent on every slide and writes one JSONL trace per slide'
    output_name = 'traces'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory (default: <config output>/dataset)')
        parser.add_argument('--checkpoint', help='Fusion network checkpoint (default: <config output>/cmt/cmt.ckpt)')
        parser.add_argument('--split', default='all', choices=['train', 'test', 'all'])

    def run(self, config, output, **options):
        dataset = Path(options['dataset'] or default_path(config, 'dataset'))
        checkpoint = Path(options['checkpoint'] or default_path(config, 'checkpoint'))
        _, pyramids = load_dataset(dataset, options['split'])
        params = load_network(config, checkpoint)
        check_config_hashes(config, {'dataset': dataset, 'checkpoint': checkpoint}, allow_mixed=True)
        backend = build_backend(config.backend)
        encoder = get_encoder(config.encoder)
        config_hash = config.config_hash()

        def navigate(pyramid):
            return agent_run(pyramid, params, config.encoder, backend, limits=config.agent,
                             trace_path=trace_path(output, pyramid.slide_id), config_hash=config_hash,
                             encoder=encoder)

        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(navigate, pyramids))

        stop_reasons = {p.slide_id: r.stop_reason.value for p, r in zip(pyramids, results)}
        repaired = {p.slide_id: r.repaired_steps for p, r in zip(pyramids, results) if r.repaired_steps}
        for slide_id, reason in stop_reasons.items():
            logger.info('%s stopped: %s', slide_id, reason)
        outputs = [trace_path(output, p.slide_id) for p in pyramids]
        return ({'dataset': dataset, 'checkpoint': checkpoint}, outputs,
                {'stop_reasons': stop_reasons, 'repaired_steps': repaired, 'backend': config.backend.to_dict()})
