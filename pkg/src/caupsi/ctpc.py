"""Psychological state signal estimated from face and body features.

Two structurally separated two-layer MLPs produce affect components from
the face stream and action components from the body stream; their
concatenation is fused by an affine map, layer-normalized, and squashed by
tanh so every component of the signal stays inside [-1, 1]. No
psychological labels exist anywhere; the signal is shaped only by the task
losses it feeds.
"""

import numpy as np

from . import tensor as T
from .config import NUM_CLASSES, TASKS
from .nn import linear, mlp_params


def _two_layer(store, path, x):
    p = mlp_params(store, path)
    return linear(T.relu(linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def compute_psi(f_face, f_body, store):
    """(N, d_f) x (N, d_f) -> (N, d_psi) signal in [-1, 1]."""
    a_affect = _two_layer(store, "ctpc.affect", f_face)
    a_action = _two_layer(store, "ctpc.action", f_body)
    fused = linear(T.concat([a_affect, a_action], axis=-1),
                   store["ctpc.fuse.weight"], store["ctpc.fuse.bias"])
    normed = T.layer_norm(fused, store["ctpc.ln.gamma"], store["ctpc.ln.beta"])
    return T.tanh(normed)


def psi_class_means(psi_batch, labels):
    """Mean signal per class for every task.

    psi_batch: (N, d_psi) array; labels: dict task -> (N,) int array.
    Returns dict task -> (class_means (C, d_psi), present (C,) bool);
    rows for classes without samples are zero and flagged absent.
    """
    psi_batch = np.asarray(psi_batch)
    out = {}
    for task in TASKS:
        y = np.asarray(labels[task])
        c = NUM_CLASSES[task]
        means = np.zeros((c, psi_batch.shape[1]), dtype=np.float64)
        present = np.zeros(c, dtype=bool)
        for k in range(c):
            mask = y == k
            if mask.any():
                means[k] = psi_batch[mask].mean(axis=0)
                present[k] = True
        out[task] = (means, present)
    return out
