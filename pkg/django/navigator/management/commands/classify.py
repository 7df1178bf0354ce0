import logging
from pathlib import Path

import pandas as pd

from classify.abmil import AttentionMIL
from classify.bags import build_bag, tissue_cells
from classify.budgets import SlideFeatures, evaluate_budgets
from classify.training import cross_validate, train_classifier
from core.checkpoints import save_checkpoint
from mst.regions import select_top_regions
from navigator.datasets import load_dataset
from navigator.exceptions import TracesMissingError
from navigator.pipeline import load_network, load_trace, slide_heatmaps
from navigator.runs import NavigatorCommand, check_config_hashes, default_path

logger = logging.getLogger(__name__)

CLASSIFICATION_COLUMNS = ['method', 'fold', 'auc', 'bacc']
AGENT_METHOD = 'agent'
FIXED_METHOD = 'fixed_top_level'


class Command(NavigatorCommand):
    help = ('Cross-validates the slide classifier on bags from the navigation traces and on a fixed '
            'highest-magnification baseline, then sweeps the patch budgets')
    output_name = 'classify'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory (default: <config output>/dataset)')
        parser.add_argument('--checkpoint', help='Fusion network checkpoint (default: <config output>/cmt/cmt.ckpt)')
        parser.add_argument('--traces', help='Trace directory (default: <config output>/traces)')

    def run(self, config, output, **options):
        dataset = Path(options['dataset'] or default_path(config, 'dataset'))
        checkpoint = Path(options['checkpoint'] or default_path(config, 'checkpoint'))
        traces = Path(options['traces'] or default_path(config, 'traces'))
        _, pyramids = load_dataset(dataset, 'all')
        if not traces.is_dir():
            raise TracesMissingError(f'No trace directory at {traces}')
        params = load_network(config, checkpoint)
        check_config_hashes(config, {'dataset': dataset, 'checkpoint': checkpoint, 'traces': traces},
                            allow_mixed=True)

        agent_bags, fixed_bags, features = [], [], []
        for pyramid in pyramids:
            trace = load_trace(traces, pyramid.slide_id)
            token_grids, heatmaps = slide_heatmaps(pyramid, params, config)
            top = pyramid.top_level
            features.append(SlideFeatures(
                slide_id=pyramid.slide_id,
                label=pyramid.label,
                token_grid=token_grids[top.index],
                heatmap=heatmaps[top.index],
                tissue=tissue_cells(pyramid, top.index, token_grids[top.index].grid_shape,
                                    config.budgets.tissue_threshold),
            ))
            regions = trace.regions
            if not regions:
                logger.warning('%s: the trace selected no regions, left out of the classification bags',
                               pyramid.slide_id)
                continue
            agent_bags.append(build_bag(token_grids, regions, pyramid.label, pyramid.slide_id))
            # same instance count as the agent, all from the highest level
            fixed = select_top_regions(heatmaps[top.index], len(regions), (), config.agent.region_cells, top)
            fixed_bags.append(build_bag(token_grids, fixed, pyramid.label, pyramid.slide_id))

        tables = []
        for method, bags in ((AGENT_METHOD, agent_bags), (FIXED_METHOD, fixed_bags)):
            folds = cross_validate(bags, config.classifier, config.classifier_optimizer, jobs=config.jobs)
            folds.insert(0, 'method', method)
            tables.append(folds)
            logger.info('%s: auc %.4f bacc %.4f', method, folds['auc'].mean(), folds['bacc'].mean())
        classification = pd.concat(tables, ignore_index=True)[CLASSIFICATION_COLUMNS]
        classification_path = output / 'classification.csv'
        classification.to_csv(classification_path, index=False)

        budgets = evaluate_budgets(features, config.classifier, config.classifier_optimizer, config.budgets.fractions,
                                   modes=config.budgets.modes, components=config.components, seed=config.seed,
                                   jobs=config.jobs)
        budgets_path = output / 'budgets.csv'
        budgets.to_csv(budgets_path, index=False)

        classifier = AttentionMIL(config.classifier)
        train_classifier(agent_bags, classifier, config.classifier_optimizer)
        classifier_path = output / 'classifier.ckpt'
        save_checkpoint(classifier_path, classifier, metadata={'config_hash': config.config_hash(),
                                                               'seed': config.classifier.seed,
                                                               'classifier': config.classifier.to_dict()})

        summary = classification.groupby('method')[['auc', 'bacc']].mean().to_dict(orient='index')
        return ({'dataset': dataset, 'checkpoint': checkpoint, 'traces': traces},
                [classification_path, budgets_path, classifier_path],
                {'bags': len(agent_bags), 'summary': summary})
