"""Losses, class weighting, and the domain adversary with unsupervised labels.

Task losses are class-weighted label-smoothing cross-entropy; the total is
a weighted sum over the four tasks plus the adversarial term. Domain labels
come from K-means over frozen-encoder features, with K picked by the
silhouette score before training starts.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NUM_CLASSES, TASKS
from .errors import ConfigError, ContractError
from .nn import linear
from .rng import RandomStream

LOG_FLOOR = 1e-12


def smoothed_target(target, n_classes, eps):
    """(1-eps) one-hot plus eps/C spread over all classes (target included)."""
    q = np.full(n_classes, eps / n_classes)
    q[target] += 1.0 - eps
    return q


def ls_ce(probs, target, w, eps):
    """Class-weighted label-smoothing cross-entropy for one sample.

    probs: (C,) probability Tensor; target: class id; w: (C,) class weight
    array. Logarithms are clamped at 1e-12.
    """
    c = probs.data.shape[-1]
    if not 0 <= target < c:
        raise ContractError(f"class id {target} outside [0, {c})")
    if not 0.0 <= eps < 1.0:
        raise ContractError(f"smoothing eps must be in [0,1), got {eps}")
    q = smoothed_target(target, c, eps) * float(w[target])
    lp = T.log(T.clamp_min(probs, LOG_FLOOR))
    return T.smul(T.tsum(T.mul(T.constant(q), lp)), -1.0)


def smoothed_weighted_rows(targets, n_classes, w, eps):
    """Per-sample target rows w[y_i] * smoothed(y_i), shape (N, C)."""
    targets = np.asarray(targets)
    rows = np.full((targets.shape[0], n_classes), eps / n_classes)
    rows[np.arange(targets.shape[0]), targets] += 1.0 - eps
    return rows * np.asarray(w)[targets][:, None]


def ls_ce_batch(probs, target_rows):
    """Mean over the batch of -sum(target_row * log probs).

    target_rows is a plain array; with mixup it is the per-sample convex
    combination of the two partners' smoothed weighted rows, which makes
    the batch loss equal the mixed per-sample losses exactly.
    """
    lp = T.log(T.clamp_min(probs, LOG_FLOOR))
    per_sample = T.smul(T.tsum(T.mul(T.constant(target_rows), lp), axis=-1), -1.0)
    return T.mean(per_sample)


def ce_from_logits(logits, target):
    """Plain unweighted, unsmoothed cross-entropy from logits."""
    p = T.softmax(logits, axis=-1)
    picked = T.slice_last(p, target, target + 1)
    return T.smul(T.tsum(T.log(T.clamp_min(picked, LOG_FLOOR))), -1.0)


def ce_from_logits_batch(logits, targets):
    targets = np.asarray(targets)
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(targets.shape[0]), targets] = 1.0
    p = T.softmax(logits, axis=-1)
    lp = T.log(T.clamp_min(p, LOG_FLOOR))
    per_sample = T.smul(T.tsum(T.mul(T.constant(onehot), lp), axis=-1), -1.0)
    return T.mean(per_sample)


def compute_class_weights(labels):
    """Inverse-frequency weights normalized to mean 1 over present classes.

    labels: dict task -> (N,) int array of training labels. Classes absent
    from the split fall back to weight 1.
    """
    out = {}
    for task in TASKS:
        y = np.asarray(labels[task])
        if y.size == 0:
            raise ContractError(f"no {task} labels to weight")
        c = NUM_CLASSES[task]
        counts = np.bincount(y, minlength=c).astype(np.float64)
        present = counts > 0
        inv = np.zeros(c)
        inv[present] = 1.0 / counts[present]
        w = np.ones(c)
        w[present] = inv[present] / inv[present].mean()
        out[task] = w
    return out


def total_loss(chain_out, labels, domain_logits, domain_label, loss_cfg,
               class_weights):
    """Single-sample total: weighted task losses plus the adversarial term."""
    total = None
    for task, lam in zip(TASKS, loss_cfg.lambdas):
        term = T.smul(ls_ce(chain_out.yhat[task], labels[task],
                            class_weights[task], loss_cfg.label_smoothing), lam)
        total = term if total is None else T.add(total, term)
    if domain_logits is not None and loss_cfg.gamma_adv != 0.0:
        adv = ce_from_logits(domain_logits, domain_label)
        total = T.add(total, T.smul(adv, loss_cfg.gamma_adv))
    return total


def domain_adversary(z, lambda_grl, store):
    """Two-layer classifier on the gradient-reversed shared representation."""
    x = T.grl(z, lambda_grl)
    h = T.relu(linear(x, store["adv.fc1.weight"], store["adv.fc1.bias"]))
    return linear(h, store["adv.fc2.weight"], store["adv.fc2.bias"])


# --- unsupervised domain labels ---

@dataclass
class DomainLabeler:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    silhouettes: dict   # k -> score over the searched range
    objective: list     # within-cluster sum of squares per iteration (best k)

    def assign(self, features):
        d = _sq_dists(np.asarray(features, dtype=np.float64), self.centroids)
        return d.argmin(axis=1)


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans(features, k, seed, iters=50, tol=1e-6):
    """Standard K-means with k-means++ seeding.

    Returns (centroids, labels, objective_history). The objective (within-
    cluster sum of squares) is recorded after every update and is
    non-increasing by construction.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ConfigError(f"k={k} exceeds {n} points")
    rs = RandomStream(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rs.randbelow(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rs.randbelow(n)]
            continue
        u = rs.uniform() * total
        idx = int(np.searchsorted(np.cumsum(d2), u))
        idx = min(idx, n - 1)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    history = []
    labels = _sq_dists(x, centroids).argmin(axis=1)
    prev = np.inf
    for _ in range(iters):
        for j in range(k):
            mask = labels == j
            if mask.any():
                centroids[j] = x[mask].mean(axis=0)
            else:
                far = _sq_dists(x, centroids).min(axis=1).argmax()
                centroids[j] = x[far]
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        obj = float(d[np.arange(n), labels].sum())
        history.append(obj)
        if prev - obj <= tol:
            break
        prev = obj
    return centroids, labels, history


def silhouette_score(features, labels, pairwise=None):
    """Mean silhouette over all points, Euclidean, full pairwise distances."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if pairwise is None:
        sq = (x * x).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        pairwise = np.sqrt(np.maximum(d2, 0.0))
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ConfigError("silhouette needs at least two clusters")
    s = np.zeros(n)
    masks = {c: labels == c for c in uniq}
    sizes = {c: int(m.sum()) for c, m in masks.items()}
    for i in range(n):
        own = labels[i]
        if sizes[own] == 1:
            s[i] = 0.0
            continue
        a = pairwise[i][masks[own]].sum() / (sizes[own] - 1)
        b = min(pairwise[i][masks[c]].mean() for c in uniq if c != own)
        s[i] = (b - a) / max(a, b)
    return float(s.mean())


def fit_domain_labels(features, seed, k_min=2, k_max=8):
    """Cluster model-independent features; pick K by max silhouette."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < k_max + 1:
        raise ConfigError(
            f"need at least {k_max + 1} samples to search K up to {k_max}")
    if np.allclose(x, x[0]):
        raise ConfigError("degenerate features: all points identical, "
                          "cannot derive domain labels")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    pairwise = np.sqrt(np.maximum(d2, 0.0))

    best = None
    silhouettes = {}
    for k in range(k_min, k_max + 1):
        centroids, labels, history = kmeans(x, k, seed=seed + k)
        if np.unique(labels).size < 2:
            continue
        score = silhouette_score(x, labels, pairwise=pairwise)
        silhouettes[k] = score
        if best is None or score > best[0]:
            best = (score, k, centroids, labels, history)
    if best is None:
        raise ConfigError("no valid clustering found in the K range")
    _, k, centroids, labels, history = best
    return DomainLabeler(k=k, centroids=centroids, labels=labels,
                         silhouettes=silhouettes, objective=history)
