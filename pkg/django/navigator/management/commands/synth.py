from navigator.datasets import INDEX_NAME, write_dataset
from navigator.runs import NavigatorCommand


class Command(NavigatorCommand):
    help = 'Writes a synthetic slide dataset: one pyramid directory per slide plus index.json'
    output_name = 'dataset'

    def run(self, config, output, **options):
        entries = write_dataset(config, output)
        outputs = [output / INDEX_NAME] + [output / entry.path for entry in entries]
        splits = {split: sum(entry.split == split for entry in entries) for split in ('train', 'test')}
        return {}, outputs, {'slide_count': len(entries), 'splits': splits}
