"""Verification metrics: cosine scores, ROC, TAR@FAR and k-fold accuracy.

A pair is accepted when its score is ``>=`` the threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError

FAR_TARGETS = (0.01, 0.001, 0.0001)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=float).reshape(-1)
        self.impostor = np.asarray(self.impostor, dtype=float).reshape(-1)
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ContractError("scores must be finite")

    def require_both(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ContractError(
                f"need genuine and impostor scores, got {self.genuine.size} and {self.impostor.size}"
            )

    def map(self, fn) -> "ScoreSet":
        return ScoreSet(fn(self.genuine), fn(self.impostor))


@dataclass
class TarResult:
    tar: float
    threshold: float
    far: float
    small_sample: bool


@dataclass
class AccuracyResult:
    accuracy: float
    threshold: float
    fold_accuracies: list = field(default_factory=list)
    fold_thresholds: list = field(default_factory=list)


@dataclass
class VerificationReport:
    tar_at_far: dict
    accuracy: float
    threshold: float
    roc: list
    details: dict = field(default_factory=dict)
    auc: float = float("nan")

    def to_text(self) -> str:
        """Flat ``key=value`` lines, stable order, for machine diffing."""
        lines = [f"num_genuine={self.details.get('num_genuine', '')}",
                 f"num_impostor={self.details.get('num_impostor', '')}"]
        for far in FAR_TARGETS:
            r = self.details["tar"][far]
            lines += [
                f"tar@far={far:g}={r.tar!r}",
                f"threshold@far={far:g}={r.threshold!r}",
                f"achieved_far@far={far:g}={r.far!r}",
                f"small_sample@far={far:g}={'true' if r.small_sample else 'false'}",
            ]
        lines += [f"accuracy={self.accuracy!r}", f"threshold={self.threshold!r}", f"auc={self.auc!r}"]
        return "\n".join(lines) + "\n"


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _accept_rate(sorted_scores: np.ndarray, thresholds) -> np.ndarray:
    # fraction of scores >= each threshold
    n = sorted_scores.size
    return (n - np.searchsorted(sorted_scores, thresholds, side="left")) / n


def tar_at_far(scores: ScoreSet, far_target: float) -> TarResult:
    """TAR at the smallest impostor score whose FAR stays within the target.

    When no impostor score qualifies, the threshold is placed just above the
    largest impostor score (FAR 0). ``small_sample`` is set whenever there
    are fewer than ``1 / far_target`` impostors or that fallback was needed.
    """
    if not 0 < far_target <= 1:
        raise ContractError("far_target must lie in (0, 1]")
    scores.require_both()
    imp = np.sort(scores.impostor)
    gen = np.sort(scores.genuine)
    cand = np.unique(imp)
    fars = _accept_rate(imp, cand)
    ok = np.nonzero(fars <= far_target)[0]
    small = imp.size < math.ceil(1.0 / far_target - 1e-9)
    if ok.size:
        t = float(cand[ok[0]])
        far = float(fars[ok[0]])
    else:
        t = float(np.nextafter(imp[-1], np.inf))
        far = 0.0
        small = True
    tar = float(_accept_rate(gen, [t])[0])
    return TarResult(tar, t, far, small)


def roc_curve(scores: ScoreSet) -> list:
    """(far, tar) at every distinct score threshold plus one above all scores."""
    scores.require_both()
    imp, gen = np.sort(scores.impostor), np.sort(scores.genuine)
    allv = np.unique(np.concatenate([imp, gen]))
    thresholds = np.append(allv, np.nextafter(allv[-1], np.inf))
    fars = _accept_rate(imp, thresholds)
    tars = _accept_rate(gen, thresholds)
    pts = sorted(set(zip(fars.tolist(), tars.tolist())))
    return pts


def roc_auc(points: Sequence) -> float:
    pts = sorted(points)
    area = 0.0
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        area += (f1 - f0) * (t0 + t1) / 2
    return area


def _fold_split(n: int, folds: int, seed: int) -> list:
    order = np.random.default_rng(seed).permutation(n)
    return np.array_split(order, folds)


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple:
    """Threshold among the scores (or just above the max) maximizing accuracy.

    Ties go to the smaller threshold.
    """
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order].astype(bool)
    uniq = np.unique(s)
    cand = np.append(uniq, np.nextafter(uniq[-1], np.inf))
    first = np.searchsorted(s, cand, side="left")
    pos_total = y.sum()
    pos_below = np.concatenate([[0], np.cumsum(y)])[first]
    neg_below = first - pos_below
    correct = (pos_total - pos_below) + neg_below
    best = int(np.argmax(correct))
    return float(cand[best]), correct[best] / s.size


def verification_accuracy(scores: ScoreSet, folds: int = 10, seed: int = 0) -> AccuracyResult:
    """Mean held-out accuracy with thresholds chosen on the other folds."""
    if folds < 2:
        raise ContractError("need at least 2 folds")
    scores.require_both()
    values = np.concatenate([scores.genuine, scores.impostor])
    labels = np.concatenate([np.ones(scores.genuine.size, bool), np.zeros(scores.impostor.size, bool)])
    if values.size < 2 * folds:
        raise ContractError(f"{values.size} pairs are too few for {folds} folds")
    parts = _fold_split(values.size, folds, seed)
    accs, ths = [], []
    for i, test in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != i])
        t, _ = best_threshold(values[train], labels[train])
        pred = values[test] >= t
        accs.append(float((pred == labels[test]).mean()))
        ths.append(t)
    return AccuracyResult(float(np.mean(accs)), float(np.mean(ths)), accs, ths)


def evaluate(scores: ScoreSet, folds: int = 10, seed: int = 0, far_targets: Iterable[float] = FAR_TARGETS) -> VerificationReport:
    tars = {far: tar_at_far(scores, far) for far in far_targets}
    acc = verification_accuracy(scores, folds, seed)
    roc = roc_curve(scores)
    return VerificationReport(
        {far: r.tar for far, r in tars.items()},
        acc.accuracy,
        acc.threshold,
        roc,
        {"tar": tars, "num_genuine": scores.genuine.size, "num_impostor": scores.impostor.size},
        roc_auc(roc),
    )


# --------------------------------------------------------------------------
# pairs and file formats


def build_pairs(labels: Sequence[int], seed: int = 0, max_impostor: Optional[int] = None) -> list:
    """All same-label index pairs and a seeded sample of different-label pairs.

    The impostor sample defaults to as many pairs as there are genuine ones.
    """
    labels = np.asarray(labels)
    n = labels.size
    genuine, impostor = [], []
    for i in range(n):
        for j in range(i + 1, n):
            (genuine if labels[i] == labels[j] else impostor).append((i, j))
    want = len(genuine) if max_impostor is None else max_impostor
    if len(impostor) > want:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(impostor), size=want, replace=False))
        impostor = [impostor[k] for k in keep]
    return [(i, j, 1) for i, j in genuine] + [(i, j, 0) for i, j in impostor]


def score_pairs(features: dict, pairs: Sequence) -> ScoreSet:
    """Cosine scores for ``(id_a, id_b, same)`` pairs over a feature table."""
    gen, imp = [], []
    for a, b, same in pairs:
        for key in (a, b):
            if key not in features:
                raise ContractError(f"no feature for id {key!r}")
        s = cosine_similarity(features[a], features[b])
        (gen if int(same) else imp).append(s)
    return ScoreSet(gen, imp)


def write_pairs(path, pairs: Sequence) -> None:
    with open(path, "w") as fh:
        for a, b, same in pairs:
            fh.write(f"{a}\t{b}\t{int(same)}\n")


def read_pairs(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ContractError(f"{path}:{lineno}: expected 'id_a id_b same(0/1)'")
            out.append((parts[0], parts[1], int(parts[2])))
    return out


def write_features(path, ids: Sequence[str], features: np.ndarray) -> None:
    with open(path, "w") as fh:
        for key, row in zip(ids, features):
            fh.write(key + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_features(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out
