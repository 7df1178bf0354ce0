"""
Central finite-difference checks of autograd gradients, coordinate by coordinate.
"""
import logging
from dataclasses import dataclass

import torch

logger = logging.getLogger(__name__)


@dataclass
class GradientComparison:
    group: str
    tensor_index: int
    flat_index: int
    analytic: float
    numeric: float

    @property
    def relative_error(self):
        scale = max(abs(self.analytic), abs(self.numeric))
        if scale < 1e-10:
            return abs(self.analytic - self.numeric)
        return abs(self.analytic - self.numeric) / scale


def sample_coordinates(groups, count_per_group, generator):
    """
    Picks count_per_group random (group, tensor index, flat index) coordinates from every group
    of trainable tensors
    """
    coordinates = []
    for name, tensors in groups.items():
        sizes = [(i, t.numel()) for i, t in enumerate(tensors) if t.requires_grad]
        if not sizes:
            continue
        total = sum(size for _, size in sizes)
        for _ in range(count_per_group):
            flat = int(torch.randint(total, (1,), generator=generator))
            for tensor_index, size in sizes:
                if flat < size:
                    coordinates.append((name, tensor_index, flat))
                    break
                flat -= size
    return coordinates


def check_gradients(loss_fn, groups, coordinates, step=1e-5):
    """
    Compares d loss_fn() / d coordinate from autograd against (f(x + h) - f(x - h)) / 2h
    """
    for tensors in groups.values():
        for tensor in tensors:
            tensor.grad = None
    loss_fn().backward()

    comparisons = []
    for name, tensor_index, flat_index in coordinates:
        tensor = groups[name][tensor_index]
        analytic = float(tensor.grad.reshape(-1)[flat_index])
        with torch.no_grad():
            view = tensor.data.reshape(-1)
            original = float(view[flat_index])
            view[flat_index] = original + step
            plus = float(loss_fn())
            view[flat_index] = original - step
            minus = float(loss_fn())
            view[flat_index] = original
        comparisons.append(GradientComparison(name, tensor_index, flat_index, analytic, (plus - minus) / (2 * step)))
    worst = max((c.relative_error for c in comparisons), default=0.0)
    logger.debug('Checked %d gradient coordinates, worst relative error %.2e', len(comparisons), worst)
    return comparisons
