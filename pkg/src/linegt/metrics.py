"""Evaluation metrics: AUROC (rank-based), RMSE, Davies-Bouldin index."""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateClusters, UndefinedMetric


def _tied_ranks(values):
    """1-based ranks with ties assigned the group average."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels, mask=None):
    """Mann-Whitney AUROC: P(random positive ranks above random negative),
    ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        scores, labels = scores[keep], labels[keep]
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _tied_ranks(scores)
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def rmse(preds, labels, mask=None):
    """Root mean squared error over non-missing entries."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        preds, labels = preds[keep], labels[keep]
    if preds.size == 0:
        raise UndefinedMetric("no observed entries")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def davies_bouldin(embeddings, cluster_labels):
    """Mean over clusters of the worst (S_i + S_j) / M_ij ratio; lower is
    better separation. S is the mean Euclidean distance to the centroid and
    M the distance between centroids."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(cluster_labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise UndefinedMetric("need at least two clusters")
    centroids = np.stack([emb[labels == c].mean(axis=0) for c in uniq])
    spreads = np.array(
        [np.linalg.norm(emb[labels == c] - centroids[k], axis=1).mean() for k, c in enumerate(uniq)]
    )
    k = len(uniq)
    worst = np.zeros(k)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            m_ij = np.linalg.norm(centroids[i] - centroids[j])
            if m_ij < 1e-12:
                raise DegenerateClusters(f"clusters {uniq[i]} and {uniq[j]} share a centroid")
            worst[i] = max(worst[i], (spreads[i] + spreads[j]) / m_ij)
    return float(worst.mean())


@dataclass
class MetricReport:
    per_task: list      # float or None for skipped tasks
    aggregate: float
    skipped: int
    kind: str

    def to_dict(self):
        return {
            "per_task": self.per_task,
            "aggregate": self.aggregate,
            "skipped": self.skipped,
            "kind": self.kind,
        }


def score_tasks(scores, labels, kind):
    """Per-task metric over a [n, tasks] matrix with None/NaN missing labels.

    Classification tasks lacking a positive or a negative among observed
    entries are skipped and counted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lab = np.array(
        [[np.nan if v is None else float(v) for v in row] for row in labels], dtype=np.float64
    )
    if scores.shape != lab.shape:
        raise UndefinedMetric(f"scores {scores.shape} vs labels {lab.shape}")
    per_task = []
    values = []
    skipped = 0
    for t in range(scores.shape[1]):
        observed = np.isfinite(lab[:, t])
        try:
            if kind == "classification":
                v = auroc(scores[observed, t], lab[observed, t])
            else:
                v = rmse(scores[observed, t], lab[observed, t])
        except UndefinedMetric:
            per_task.append(None)
            skipped += 1
            continue
        per_task.append(v)
        values.append(v)
    if not values:
        raise UndefinedMetric("every task was skipped")
    return MetricReport(per_task, float(np.mean(values)), skipped, kind)
