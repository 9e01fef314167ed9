"""Cross-validation protocols and ranking metrics.

Two protocols are supported:

``type``
    Folds over distinct (miRNA, disease) pairs. Every triplet of a test pair
    is hidden from training and the model's top-ranked type for each test
    pair is scored (top-1 precision, recall, F1).
``triplet``
    Folds over known triplets. Each test fold is paired with an equal number
    of unknown triplets as negatives and scored by AUC, AUPR and best F1.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

__all__ = [
    "FoldPlan",
    "substream",
    "split_cv_type",
    "split_cv_triplet",
    "training_tensor",
    "top1_metrics",
    "auc",
    "aupr",
    "best_f1",
    "rank_for_disease",
    "run_cv",
    "CvReport",
]

# integer tags for the named random substreams derived from one seed
STREAMS = {"init": 0, "folds": 1, "negatives": 2}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose, derived from ``seed``."""
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


@dataclass
class FoldPlan:
    """Assignment of items (pairs or triplets) to ``k`` folds."""

    k: int
    items: np.ndarray
    assignments: np.ndarray
    seed: int
    negatives: list = field(default_factory=list)

    def test_items(self, fold: int) -> np.ndarray:
        return self.items[self.assignments == fold]

    def train_items(self, fold: int) -> np.ndarray:
        return self.items[self.assignments != fold]

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _assign(n_items: int, k: int, rng: np.random.Generator) -> np.ndarray:
    folds = np.arange(n_items) % k
    return folds[rng.permutation(n_items)]


def _check_k(k: int, n_items: int, what: str):
    if int(k) != k or k < 2:
        raise ValueError(f"fold count must be an integer >= 2, got {k}")
    if k > n_items:
        raise ValueError(f"cannot split {n_items} {what} into {k} folds")


def split_cv_type(dataset, k: int = 10, seed: int = 0) -> FoldPlan:
    """Random k-fold partition of the distinct associated pairs."""
    pairs = dataset.pairs()
    _check_k(k, len(pairs), "pairs")
    return FoldPlan(k, pairs, _assign(len(pairs), k, substream(seed, "folds")), seed)


def split_cv_triplet(dataset, k: int = 10, seed: int = 0) -> FoldPlan:
    """Random k-fold partition of known triplets with per-fold negatives.

    Each fold's negatives are drawn uniformly without replacement from the
    cells not holding a known triplet, as many as the fold has positives.
    """
    trip = dataset.triplets
    _check_k(k, len(trip), "triplets")
    plan = FoldPlan(k, trip, _assign(len(trip), k, substream(seed, "folds")), seed)
    shape = dataset.shape
    known = np.zeros(int(np.prod(shape)), dtype=bool)
    known[np.ravel_multi_index(trip.T, shape)] = True
    candidates = np.flatnonzero(~known)
    for fold, size in enumerate(plan.fold_sizes()):
        if size > len(candidates):
            raise ValueError(
                f"fold {fold} needs {size} negatives but only {len(candidates)} unknown triplets exist"
            )
        rng = substream(seed, "negatives", fold)
        picked = np.sort(rng.choice(candidates, size=int(size), replace=False))
        plan.negatives.append(np.column_stack(np.unravel_index(picked, shape)))
    return plan


def training_tensor(dataset, plan: FoldPlan, fold: int) -> np.ndarray:
    """Binary tensor of the training triplets for ``fold``.

    Under the pair protocol every type of a held-out pair is removed.
    """
    x = dataset.to_tensor()
    test = plan.test_items(fold)
    if test.shape[1] == 2:
        x[test[:, 0], test[:, 1], :] = 0.0
    else:
        x[test[:, 0], test[:, 1], test[:, 2]] = 0.0
    return x


# --------------------------------------------------------------------------
# metrics


def top1_metrics(scores: np.ndarray, test_pairs, truth) -> tuple[float, float, float]:
    """Top-1 precision, recall and F1 over held-out pairs.

    For each pair the highest-scoring type (lowest index on ties) is a hit
    when it is one of the pair's true types. Precision divides hits by the
    number of pairs, recall by the number of true triplets of those pairs.
    """
    test_pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if not len(test_pairs):
        raise ValueError("empty test set")
    true_types: dict[tuple[int, int], set[int]] = {}
    for i, j, k in np.asarray(list(truth), dtype=np.int64).reshape(-1, 3).tolist():
        true_types.setdefault((i, j), set()).add(k)
    hits = 0
    n_triplets = 0
    for i, j in test_pairs.tolist():
        types = true_types.get((i, j))
        if not types:
            raise ValueError(f"test pair {(i, j)} has no true type")
        n_triplets += len(types)
        if int(np.argmax(scores[i, j, :])) in types:
            hits += 1
    precision = hits / len(test_pairs)
    recall = hits / n_triplets
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _check_sides(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if not len(pos) or not len(neg):
        raise ValueError("both positive and negative scores are required")
    return pos, neg


def auc(pos_scores, neg_scores) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    pos, neg = _check_sides(pos_scores, neg_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(pos, neg):
    """True/false positive counts when predicting positive at each distinct score."""
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    return tp, fp


def aupr(pos_scores, neg_scores) -> float:
    """Average precision, stepping once per block of tied scores.

    Each block contributes its recall gain times the precision at the end of
    the block, so tied items share one operating point.
    """
    pos, neg = _check_sides(pos_scores, neg_scores)
    tp, fp = _threshold_counts(pos, neg)
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0.0, tp]) / len(pos)
    return float(np.sum(recall_gain * precision))


def best_f1(pos_scores, neg_scores) -> float:
    """Maximum F1 over all thresholds, predicting positive at ``score >= threshold``."""
    pos, neg = _check_sides(pos_scores, neg_scores)
    tp, fp = _threshold_counts(pos, neg)
    f1 = 2 * tp / (tp + fp + len(pos))
    return float(f1.max())


def rank_for_disease(scores: np.ndarray, disease: int, known=(), top_n: int = 20):
    """Unknown (miRNA, type) cells for one disease, best first.

    Ties are broken by miRNA index, then type index. Returns a list of
    ``(mirna_index, type_index, score)``.
    """
    m, n, t = scores.shape
    if not 0 <= disease < n:
        raise IndexError(f"disease index {disease} out of range")
    block = scores[:, disease, :]
    mask = np.ones((m, t), dtype=bool)
    for i, j, k in np.asarray(list(known), dtype=np.int64).reshape(-1, 3).tolist():
        if j == disease:
            mask[i, k] = False
    ii, kk = np.nonzero(mask)
    vals = block[ii, kk]
    order = np.lexsort((kk, ii, -vals))[:top_n]
    return [(int(ii[o]), int(kk[o]), float(vals[o])) for o in order]


# --------------------------------------------------------------------------
# driver


TYPE_METRICS = ("precision", "recall", "f1")
TRIPLET_METRICS = ("aupr", "auc", "f1")


@dataclass
class CvReport:
    protocol: str
    metric_names: tuple
    per_fold: list
    mean: dict
    pooled: dict | None = None


def _fit_fold(args):
    fit, x_train, fold_seed = args
    return fit(x_train, fold_seed)


def run_cv(dataset, fit, protocol: str = "type", k: int = 10, seed: int = 0, jobs: int = 1,
           pooled: bool = False) -> CvReport:
    """Run one cross-validation protocol.

    ``fit(x_train, fold_seed)`` must return a full score tensor. It is called
    once per fold, in worker processes when ``jobs > 1`` (so it must be
    picklable). Results are assembled in fold order.
    """
    if protocol == "type":
        plan = split_cv_type(dataset, k, seed)
        names = TYPE_METRICS
    elif protocol == "triplet":
        plan = split_cv_triplet(dataset, k, seed)
        names = TRIPLET_METRICS
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    tasks = ((fit, training_tensor(dataset, plan, f), _fold_seed(seed, f)) for f in range(k))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fold_scores = list(pool.map(_fit_fold, tasks))
    else:
        fold_scores = [_fit_fold(task) for task in tasks]

    per_fold = []
    all_pairs, all_pos, all_neg = [], [], []
    truth = dataset.triplets
    for f, scores in enumerate(fold_scores):
        test = plan.test_items(f)
        if protocol == "type":
            values = top1_metrics(scores, test, truth)
            all_pairs.append((scores, test))
        else:
            neg = plan.negatives[f]
            pos_s = scores[test[:, 0], test[:, 1], test[:, 2]]
            neg_s = scores[neg[:, 0], neg[:, 1], neg[:, 2]]
            values = (aupr(pos_s, neg_s), auc(pos_s, neg_s), best_f1(pos_s, neg_s))
            all_pos.append(pos_s)
            all_neg.append(neg_s)
        per_fold.append(dict(zip(names, values)))
        logger.info("fold %d: %s", f, ", ".join(f"{n}={v:.4f}" for n, v in zip(names, values)))

    mean = {name: float(np.mean([row[name] for row in per_fold])) for name in names}
    pooled_values = None
    if pooled:
        if protocol == "type":
            pooled_values = _pooled_top1(all_pairs, truth)
        else:
            pos_s, neg_s = np.concatenate(all_pos), np.concatenate(all_neg)
            pooled_values = (aupr(pos_s, neg_s), auc(pos_s, neg_s), best_f1(pos_s, neg_s))
        pooled_values = dict(zip(names, pooled_values))
    return CvReport(protocol, names, per_fold, mean, pooled_values)


def _fold_seed(seed: int, fold: int) -> int:
    return int(substream(seed, "init", fold).integers(2**63 - 1))


def _pooled_top1(fold_results, truth):
    true_types: dict[tuple[int, int], set[int]] = {}
    for i, j, k in np.asarray(truth).tolist():
        true_types.setdefault((i, j), set()).add(k)
    hits = n_pairs = n_triplets = 0
    for scores, pairs in fold_results:
        for i, j in pairs.tolist():
            types = true_types[(i, j)]
            n_pairs += 1
            n_triplets += len(types)
            hits += int(np.argmax(scores[i, j, :])) in types
    p = hits / n_pairs
    r = hits / n_triplets
    return p, r, (2 * p * r / (p + r) if p + r > 0 else 0.0)
