import logging
from pathlib import Path

from encoder.encoders import get_encoder
from mcfn.network import FusionNetwork
from navigator.datasets import load_dataset
from navigator.pipeline import save_network
from navigator.runs import NavigatorCommand, check_config_hashes, default_path
from ndsl.training import held_out_loss, prepare_dataset, train_cmt

logger = logging.getLogger(__name__)


class Command(NavigatorCommand):
    help = 'Trains the cross-magnification fusion network on the training slides of a dataset'
    output_name = 'cmt'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory (default: <config output>/dataset)')

    def run(self, config, output, **options):
        dataset = Path(options['dataset'] or default_path(config, 'dataset'))
        _, train = load_dataset(dataset, 'train')
        _, test = load_dataset(dataset, 'test')
        check_config_hashes(config, {'dataset': dataset}, allow_mixed=True)

        encoder = get_encoder(config.encoder)
        params = FusionNetwork(config.mcfn)
        params, curve = train_cmt(train, params, config.loss, config.optimizer, config.encoder, encoder=encoder)

        checkpoint = output / 'cmt.ckpt'
        save_network(checkpoint, params, config)
        curve_path = output / 'loss_curve.csv'
        curve.to_csv(curve_path, index=False)

        extra = {'train_slides': len(train), 'final_loss': float(curve['total'].iloc[-1])}
        if test:
            extra['held_out_loss'] = held_out_loss(prepare_dataset(test, config.encoder, encoder=encoder), params,
                                                   config.loss)
            logger.info('Held-out loss on %d slides: %.5f', len(test), extra['held_out_loss'])
        return {'dataset': dataset}, [checkpoint, curve_path], extra
