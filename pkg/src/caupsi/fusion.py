"""Scene aggregation and gated bidirectional cross-view attention.

Scene fusion: attention weights over the scene views come from a small
two-layer net on the concatenated view features; the fused feature is the
weighted sum. Cross-view attention treats the fused scene feature and the
inside feature as single tokens by default (so the attention weight over
the lone key is exactly 1); an optional mode exposes the individual scene
view features as key/value tokens instead.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import linear, mha, mha_params, single_token_attention


def fuse_scenes(views, store):
    """Attention-weighted sum of scene view features.

    views: list of (N, d_c) tensors (or (d_c,) vectors for a single sample).
    Returns the fused feature with the same shape as one view.
    """
    if not views:
        raise ShapeError("fuse_scenes needs at least one view")
    w1 = store["fusion.scene_attn.w1"]
    w2 = store["fusion.scene_attn.w2"]
    stacked = T.concat(views, axis=-1)
    logits = T.matmul(T.relu(T.matmul(stacked, w1)), w2)
    alpha = T.softmax(logits, axis=-1)
    n_s = len(views)
    fused = None
    for i, v in enumerate(views):
        a_i = T.slice_last(alpha, i, i + 1)  # (N, 1) broadcasts over d_c
        term = T.mul(a_i, v)
        fused = term if fused is None else T.add(fused, term)
    assert n_s == alpha.data.shape[-1]
    return fused, alpha


def scene_attention_weights(views, store):
    return fuse_scenes(views, store)[1]


def _gate(store, direction, src, ctx):
    w = store[f"fusion.cross.{direction}.gate.weight"]
    b = store[f"fusion.cross.{direction}.gate.bias"]
    return T.sigmoid(linear(T.concat([src, ctx], axis=-1), w, b))


def _query_norm(store, direction, x):
    gamma = store[f"fusion.cross.{direction}.ln.gamma"]
    beta = store[f"fusion.cross.{direction}.ln.beta"]
    return T.layer_norm(x, gamma, beta)


def _attend_multi_token(q_row, kv_rows, heads, params):
    """Per-sample attention with the scene views as separate tokens."""
    return mha(q_row, kv_rows, heads, params)


def cross_view(f_in, f_scene, store, cfg, scene_tokens=None):
    """Gated bidirectional cross-view attention.

    f_in, f_scene: (N, d_f) tensors. Returns (f_in_tilde, f_scene_tilde).
    In the default single-token mode the attention output over a lone
    key/value token reduces to the value and output projections of that
    token; the layer-normalized query receives exactly zero gradient, so it
    is not materialized. With multi_token_crossview the inside query
    attends over the per-view scene features (scene_tokens, a list of
    (N, d_c) tensors) sample by sample.
    """
    p_in = mha_params(store, "fusion.cross.q_in.mha")
    p_scene = mha_params(store, "fusion.cross.q_scene.mha")

    if cfg.multi_token_crossview:
        if scene_tokens is None:
            raise ShapeError("multi-token cross-view needs the per-view scene features")
        n = f_in.data.shape[0]
        rows = []
        for i in range(n):
            q = _query_norm(store, "q_in", T.slice_rows(f_in, i, i + 1))
            kv = T.concat([T.slice_rows(tok, i, i + 1) for tok in scene_tokens],
                          axis=0)
            rows.append(_attend_multi_token(q, kv, cfg.attn_heads, p_in))
        c_in = T.concat(rows, axis=0)
    else:
        c_in = single_token_attention(f_scene, p_in)
    c_scene = single_token_attention(f_in, p_scene)

    g_in = _gate(store, "q_in", f_in, c_in)
    g_scene = _gate(store, "q_scene", f_scene, c_scene)
    f_in_t = T.add(f_in, T.mul(g_in, c_in))
    f_scene_t = T.add(f_scene, T.mul(g_scene, c_scene))
    return f_in_t, f_scene_t


def cross_view_reference(f_in_vec, f_scene_vec, store, cfg):
    """Single-sample reference path through the generic mha op.

    Used by tests to confirm the batched fast path matches the literal
    formulation (query layer-norm included). Inputs are (d_f,) vectors.
    """
    q_in = _query_norm(store, "q_in", f_in_vec)
    q_scene = _query_norm(store, "q_scene", f_scene_vec)
    q_in2 = _row(q_in)
    q_scene2 = _row(q_scene)
    kv_scene = _row(f_scene_vec)
    kv_in = _row(f_in_vec)
    c_in = mha(q_in2, kv_scene, cfg.attn_heads, mha_params(store, "fusion.cross.q_in.mha"))
    c_scene = mha(q_scene2, kv_in, cfg.attn_heads,
                  mha_params(store, "fusion.cross.q_scene.mha"))
    c_in = T.slice_rows(c_in, 0, 1)
    c_scene = T.slice_rows(c_scene, 0, 1)
    g_in = _gate(store, "q_in", _row(f_in_vec), c_in)
    g_scene = _gate(store, "q_scene", _row(f_scene_vec), c_scene)
    f_in_t = T.add(_row(f_in_vec), T.mul(g_in, c_in))
    f_scene_t = T.add(_row(f_scene_vec), T.mul(g_scene, c_scene))
    return f_in_t, f_scene_t


def _row(vec):
    """Lift a (d,) vector to a (1, d) token matrix inside the graph."""
    if vec.ndim == 2:
        return vec
    return T.stack_rows([vec])
