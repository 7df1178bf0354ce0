from pathlib import Path

from mst.memory import MemoryBank
from navigator.datasets import load_dataset
from navigator.exceptions import RunConfigError, TracesMissingError
from navigator.overlays import render_overlays
from navigator.pipeline import load_network, oracle_heatmaps, slide_heatmaps, trace_path
from navigator.runs import NavigatorCommand, default_path

HEATMAP_SOURCES = ('model', 'oracle', 'none')


class Command(NavigatorCommand):
    help = 'Writes one overlay PNG per level: the raster blended with its heatmap and the trace regions outlined'
    output_name = 'overlays'

    def add_command_arguments(self, parser):
        parser.add_argument('slide_id', help='Slide to render')
        parser.add_argument('--dataset', help='Dataset directory (default: <config output>/dataset)')
        parser.add_argument('--checkpoint', help='Fusion network checkpoint (default: <config output>/cmt/cmt.ckpt)')
        parser.add_argument('--heatmaps', choices=HEATMAP_SOURCES, default='model')
        parser.add_argument('--trace', help='Trace file (default: the slide trace in <config output>/traces, if any)')

    def run(self, config, output, **options):
        dataset = Path(options['dataset'] or default_path(config, 'dataset'))
        _, pyramids = load_dataset(dataset, 'all')
        matches = [p for p in pyramids if p.slide_id == options['slide_id']]
        if not matches:
            raise RunConfigError('slide_id', f'{options["slide_id"]} is not in {dataset}')
        pyramid = matches[0]
        inputs = {'dataset': dataset}

        heatmaps = None
        if options['heatmaps'] == 'model':
            inputs['checkpoint'] = Path(options['checkpoint'] or default_path(config, 'checkpoint'))
            _, heatmaps = slide_heatmaps(pyramid, load_network(config, inputs['checkpoint']), config)
        elif options['heatmaps'] == 'oracle':
            heatmaps = oracle_heatmaps(pyramid, config.encoder.input_size)

        regions = ()
        if options['trace']:
            path = Path(options['trace'])
            if not path.exists():
                raise TracesMissingError(f'No trace file at {path}')
        else:
            path = trace_path(default_path(config, 'traces'), pyramid.slide_id)
        if path.exists():
            inputs['trace'] = path
            regions = MemoryBank.load(path).regions

        if heatmaps is None and not regions:
            raise RunConfigError('--heatmaps', 'nothing to render: no heatmaps and no trace regions')
        render_overlays(pyramid, heatmaps, regions, path=output)
        outputs = [output / f'overlay_{level.index}.png' for level in pyramid.levels]
        return inputs, outputs, {'slide_id': pyramid.slide_id, 'regions': len(regions)}
