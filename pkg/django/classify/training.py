"""
Classifier training and the cross-validation protocol: stratified outer folds, and inside each fold
a stratified train/validation split whose validation loss picks the epoch that is kept.
"""
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from sklearn.metrics import balanced_accuracy_score, roc_auc_score
from sklearn.model_selection import StratifiedKFold, train_test_split

from .abmil import AttentionMIL, abmil_forward, abmil_logits
from .exceptions import ClassifierConfigError, SingleClassError

logger = logging.getLogger(__name__)


@dataclass
class ClassifierOptimizerConfig:
    learning_rate: float = 5e-3
    epochs: int = 40
    folds: int = 5
    validation_fraction: float = 0.25
    seed: int = 0

    def validate(self):
        if self.learning_rate < 0:
            raise ClassifierConfigError('classifier_optimizer.learning_rate: must be >= 0')
        if self.epochs < 1:
            raise ClassifierConfigError('classifier_optimizer.epochs: must be >= 1')
        if self.folds < 2:
            raise ClassifierConfigError('classifier_optimizer.folds: at least two folds are required')
        if not 0 <= self.validation_fraction < 1:
            raise ClassifierConfigError('classifier_optimizer.validation_fraction: must be in [0, 1)')

    def to_dict(self):
        return asdict(self)


def labels_of(bags):
    return np.array([bag.label.index for bag in bags])


def bag_loss(bags, params):
    targets = torch.tensor([bag.label.index for bag in bags])
    logits = torch.stack([abmil_logits(bag, params)[0] for bag in bags])
    return F.cross_entropy(logits, targets)


def train_classifier(bags, params, opt_cfg, validation=None):
    """
    Cross-entropy training with Adam, one update per bag in a seeded order each epoch.
    With validation bags, the parameters of the epoch with the lowest validation loss are kept.
    Returns (params, history DataFrame).
    """
    opt_cfg.validate()
    if len(set(labels_of(bags))) < 2:
        raise SingleClassError('Classifier training needs at least two classes')

    generator = torch.Generator().manual_seed(opt_cfg.seed)
    optimizer = torch.optim.Adam(params.parameters(), lr=opt_cfg.learning_rate)
    best_loss, best_state = np.inf, None
    history = []
    for epoch in range(opt_cfg.epochs):
        total = 0.0
        for index in torch.randperm(len(bags), generator=generator).tolist():
            optimizer.zero_grad()
            loss = bag_loss([bags[index]], params)
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
        row = {'epoch': epoch, 'train_loss': total / len(bags), 'val_loss': np.nan}
        if validation:
            with torch.no_grad():
                row['val_loss'] = float(bag_loss(validation, params))
            if row['val_loss'] < best_loss:
                best_loss, best_state = row['val_loss'], copy.deepcopy(params.state_dict())
        history.append(row)

    if best_state is not None:
        params.load_state_dict(best_state)
    return params, pd.DataFrame(history, columns=['epoch', 'train_loss', 'val_loss'])


def predict_proba(bags, params):
    with torch.no_grad():
        return np.stack([abmil_forward(bag, params).numpy() for bag in bags])


def macro_ovr_auc(labels, probabilities):
    """
    Mean one-vs-rest ROC AUC over the classes that occur (and do not make up every label) in labels
    """
    labels = np.asarray(labels)
    aucs = []
    for c in range(probabilities.shape[1]):
        positives = labels == c
        if positives.any() and not positives.all():
            aucs.append(roc_auc_score(positives, probabilities[:, c]))
    return float(np.mean(aucs)) if aucs else float('nan')


def balanced_accuracy(labels, probabilities):
    return float(balanced_accuracy_score(labels, probabilities.argmax(axis=1)))


def _split_validation(bags, opt_cfg, seed):
    if not opt_cfg.validation_fraction:
        return bags, []
    labels = labels_of(bags)
    counts = np.bincount(labels)
    stratify = labels if counts[counts > 0].min() >= 2 else None
    indices = list(range(len(bags)))
    try:
        train, validation = train_test_split(indices, test_size=opt_cfg.validation_fraction,
                                             random_state=seed, stratify=stratify)
    except ValueError:
        # too few bags per class for a stratified split
        train, validation = train_test_split(indices, test_size=opt_cfg.validation_fraction, random_state=seed)
    train_bags = [bags[i] for i in sorted(train)]
    if len(set(labels_of(train_bags))) < 2:
        return bags, []
    return train_bags, [bags[i] for i in sorted(validation)]


def _run_fold(fold, bags, train_index, test_index, config, opt_cfg):
    fold_bags = [bags[i] for i in train_index]
    train_bags, validation = _split_validation(fold_bags, opt_cfg, opt_cfg.seed + fold)
    params = AttentionMIL(config)
    train_classifier(train_bags, params, opt_cfg, validation=validation)
    test_bags = [bags[i] for i in test_index]
    probabilities = predict_proba(test_bags, params)
    labels = labels_of(test_bags)
    row = {'fold': fold, 'auc': macro_ovr_auc(labels, probabilities), 'bacc': balanced_accuracy(labels, probabilities)}
    logger.info('Fold %d: auc %.4f bacc %.4f', fold, row['auc'], row['bacc'])
    return row


def cross_validate(bags, config, opt_cfg, jobs=1):
    """
    Stratified k-fold evaluation; returns a DataFrame with one row per fold (fold, auc, bacc)
    """
    opt_cfg.validate()
    labels = labels_of(bags)
    counts = np.bincount(labels)
    present = counts[counts > 0]
    if len(present) < 2:
        raise SingleClassError('Cross-validation needs at least two classes')
    folds = min(opt_cfg.folds, int(present.min()))
    if folds < 2:
        raise SingleClassError('Every class needs at least two slides for cross-validation')
    if folds < opt_cfg.folds:
        logger.warning('Only %d folds possible with the smallest class of %d slides', folds, present.min())

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=opt_cfg.seed)
    splits = list(splitter.split(np.zeros(len(labels)), labels))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda item: _run_fold(item[0], bags, *item[1], config, opt_cfg),
                                 enumerate(splits)))
    else:
        rows = [_run_fold(fold, bags, train, test, config, opt_cfg) for fold, (train, test) in enumerate(splits)]
    return pd.DataFrame(rows, columns=['fold', 'auc', 'bacc'])
