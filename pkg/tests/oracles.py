"""Independent reference implementations shared by the unit and acceptance tests.

Everything here is written from the definitions with plain loops, without
calling into the package's own metric code.
"""
import numpy as np

from seid.tensor import Tensor
from seid.training import ClassCenters, center_loss, update_centers


def _accept_fraction(scores, thresholds):
    """Fraction of ``scores`` >= each threshold, by comparing every pair."""
    scores = np.asarray(scores, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    return (scores[None, :] >= thresholds[:, None]).mean(axis=1)


def brute_tar_at_far(genuine, impostor, target):
    """Smallest impostor-score threshold whose FAR is within the target.

    Falls back to the next float above the largest impostor score.
    Returns ``(threshold, far, tar)``.
    """
    cands = np.array(sorted(set(float(v) for v in impostor)))
    fars = _accept_fraction(impostor, cands)
    for t, far in zip(cands, fars):
        if far <= target:
            return float(t), float(far), float(_accept_fraction(genuine, [t])[0])
    t = float(np.nextafter(cands[-1], np.inf))
    return t, float(_accept_fraction(impostor, [t])[0]), float(_accept_fraction(genuine, [t])[0])


def brute_roc(genuine, impostor):
    values = sorted(set(float(v) for v in genuine) | set(float(v) for v in impostor))
    thresholds = values + [float(np.nextafter(values[-1], np.inf))]
    fars = _accept_fraction(impostor, thresholds)
    tars = _accept_fraction(genuine, thresholds)
    return sorted(set(zip(fars.tolist(), tars.tolist())))


def brute_best_threshold(scores, labels):
    """Exhaustive search over score values plus one above the max; ties to the smaller."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    cands = np.array(sorted(set(scores.tolist())))
    cands = np.append(cands, np.nextafter(cands[-1], np.inf))
    accept = scores[None, :] >= cands[:, None]
    correct = (accept == labels[None, :]).sum(axis=1)
    best = correct.max()
    return float(cands[np.nonzero(correct == best)[0][0]])


def brute_kfold_accuracy(genuine, impostor, folds, seed):
    values = np.concatenate([np.asarray(genuine, float), np.asarray(impostor, float)])
    labels = np.array([1] * len(genuine) + [0] * len(impostor), dtype=bool)
    order = np.random.default_rng(seed).permutation(len(values))
    parts = np.array_split(order, folds)
    accs = []
    for i, test in enumerate(parts):
        train = np.concatenate([part for p, part in enumerate(parts) if p != i])
        t = brute_best_threshold(values[train], labels[train])
        accs.append(float(((values[test] >= t) == labels[test]).mean()))
    return float(np.mean(accs))


def mann_whitney_auc(genuine, impostor):
    wins = 0.0
    for g in genuine:
        for i in impostor:
            wins += 1.0 if g > i else 0.5 if g == i else 0.0
    return wins / (len(genuine) * len(impostor))


def center_dynamics(x, y, num_classes, alpha, iterations=400):
    """Iterate center updates; return (max distance to class means, monotone flag).

    The loss gap above its minimum shrinks with the square of the center
    distance, so once the centers are within 1e-6 of the means the true
    decrease drops below one ulp of the loss. The loss must strictly decrease
    before that point and may only wobble by a few ulps after it.
    """
    means = np.stack([x[y == j].mean(axis=0) for j in range(num_classes)])
    c = ClassCenters.zeros(num_classes, x.shape[1])
    prev = float(center_loss(Tensor(x), y, c).data)
    monotone = True
    for _ in range(iterations):
        converged = np.abs(c.centers - means).max() <= 1e-6
        c = update_centers(x, y, c, alpha)
        loss = float(center_loss(Tensor(x), y, c).data)
        if not converged and not loss < prev:
            monotone = False
        if converged and loss > prev + 8 * np.finfo(float).eps * prev:
            monotone = False
        prev = loss
    return float(np.abs(c.centers - means).max()), monotone
