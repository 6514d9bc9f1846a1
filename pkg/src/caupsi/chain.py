"""Task-shared/task-specific projections, prototype soft labels, task heads.

The four heads run in a fixed upstream-to-downstream order. Each upstream
head's softmax output is turned into a prototype embedding (the
confidence-weighted average of that task's class prototypes) and
concatenated into the downstream head inputs, so downstream losses
backpropagate through upstream predictions. forward_model orchestrates the
whole pass from pooled encoder features.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NUM_CLASSES, SCENE_VIEWS, TASKS
from .ctpc import compute_psi
from .errors import ContractError
from .fusion import cross_view, fuse_scenes
from .nn import MlpSpec, linear, mlp_forward, mlp_params
from .views import gap_project, project_face_body, project_in_scene


@dataclass
class ChainOutput:
    yhat: dict          # task -> (N, C_r) probabilities
    embed: dict         # task (tcr/vcr/der) -> (N, d_e) soft-label embedding
    psi: "T.Tensor"     # (N, d_psi)
    z: "T.Tensor"       # (N, d_z)
    z_task: dict        # task -> (N, d_t)
    scene_alpha: np.ndarray  # (N, n_scene) scene attention weights (data only)


def shared_projection(f_in_t, f_scene_t, store):
    """z from the fused views, plus the four task-specific projections."""
    z = linear(T.concat([f_in_t, f_scene_t], axis=-1),
               store["chain.shared.weight"], store["chain.shared.bias"])
    z_task = {}
    for i, task in enumerate(TASKS, start=1):
        z_task[task] = linear(z, store[f"chain.task{i}.proj.weight"],
                              store[f"chain.task{i}.proj.bias"])
    return z, z_task


def soft_label_embed(yhat, prototypes):
    """Confidence-weighted prototype average: (N, C) @ (C, d_e).

    yhat rows must be probability vectors; this op is what makes the chain
    differentiable end to end instead of an argmax lookup.
    """
    probs = yhat.data
    sums = probs.sum(axis=-1)
    if np.any(probs < -1e-7) or np.any(np.abs(sums - 1.0) > 1e-5):
        raise ContractError("soft_label_embed expects normalized probabilities")
    return T.matmul(yhat, prototypes)


def _head(store, cfg, index, task, parts, train, rng, chain_ablated):
    x = T.concat(parts, axis=-1)
    spec = MlpSpec(cfg.head_input_dim(task, chain_ablated), cfg.head_hidden,
                   NUM_CLASSES[task], cfg.dropout_p)
    logits = mlp_forward(spec, mlp_params(store, f"chain.head{index}"), x,
                         train, rng)
    return T.softmax(logits, axis=-1)


def forward_chain(features, store, cfg, ablation, train=False, rng=None):
    """Hierarchical predictions from prepared features.

    features holds f_in_t, f_scene_t, f_face, f_body, psi, z, z_task
    (tensors as produced by the upstream modules). Heads run in chain
    order; prototype embeddings are computed from each softmax output as
    soon as it exists and fed downstream unless the chain is ablated.
    """
    f_in_t = features["f_in_t"]
    f_scene_t = features["f_scene_t"]
    f_face = features["f_face"]
    f_body = features["f_body"]
    psi = features["psi"]
    z_task = features["z_task"]
    cut = ablation.chain

    yhat = {}
    embed = {}
    yhat["tcr"] = _head(store, cfg, 1, "tcr",
                        [z_task["tcr"], f_scene_t, psi], train, rng, cut)
    if not cut:
        embed["tcr"] = soft_label_embed(yhat["tcr"], store["chain.task1.prototypes"])

    yhat["vcr"] = _head(store, cfg, 2, "vcr",
                        [z_task["vcr"], f_in_t, f_scene_t, psi], train, rng, cut)
    if not cut:
        embed["vcr"] = soft_label_embed(yhat["vcr"], store["chain.task2.prototypes"])

    der_parts = [z_task["der"]]
    if not cut:
        der_parts += [embed["tcr"], embed["vcr"]]
    der_parts += [f_face, psi]
    yhat["der"] = _head(store, cfg, 3, "der", der_parts, train, rng, cut)
    if not cut:
        embed["der"] = soft_label_embed(yhat["der"], store["chain.task3.prototypes"])

    dbr_parts = [z_task["dbr"]]
    if not cut:
        dbr_parts += [embed["der"], embed["tcr"], embed["vcr"]]
    dbr_parts += [f_scene_t, f_in_t, f_body, psi]
    yhat["dbr"] = _head(store, cfg, 4, "dbr", dbr_parts, train, rng, cut)

    return yhat, embed


def forward_model(store, cfg, pooled, ablation, train=False, rng=None):
    """Full forward pass from pooled frozen-encoder features.

    pooled: dict view -> (N, enc_dim) numpy array (front, left, right,
    inside, face, body). Returns a ChainOutput.
    """
    n = pooled["inside"].shape[0]

    h_scene_views = [gap_project(store, "scene", pooled[v]) for v in SCENE_VIEWS]
    h_inside = gap_project(store, "inside", pooled["inside"])
    h_scene, alpha = fuse_scenes(h_scene_views, store)
    f_in, f_scene = project_in_scene(h_inside, h_scene, store)

    if ablation.facebody:
        f_face = T.constant(np.zeros((n, cfg.d_f), dtype=f_in.data.dtype))
        f_body = T.constant(np.zeros((n, cfg.d_f), dtype=f_in.data.dtype))
    else:
        h_face = gap_project(store, "face", pooled["face"])
        h_body = gap_project(store, "body", pooled["body"])
        f_face, f_body = project_face_body(h_face, h_body, store)

    if ablation.crossview:
        f_in_t, f_scene_t = f_in, f_scene
    else:
        f_in_t, f_scene_t = cross_view(
            f_in, f_scene, store, cfg,
            scene_tokens=h_scene_views if cfg.multi_token_crossview else None)

    if ablation.ctpc or ablation.facebody:
        psi = T.constant(np.zeros((n, cfg.d_psi), dtype=f_in.data.dtype))
    else:
        psi = compute_psi(f_face, f_body, store)

    z, z_task = shared_projection(f_in_t, f_scene_t, store)

    features = {"f_in_t": f_in_t, "f_scene_t": f_scene_t, "f_face": f_face,
                "f_body": f_body, "psi": psi, "z": z, "z_task": z_task}
    yhat, embed = forward_chain(features, store, cfg, ablation, train, rng)
    return ChainOutput(yhat=yhat, embed=embed, psi=psi, z=z, z_task=z_task,
                       scene_alpha=alpha.data)
