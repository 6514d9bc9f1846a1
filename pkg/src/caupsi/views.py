"""Per-view feature extraction: frozen encoders, temporal mean, projections.

The frozen encoders are two stride-2 3x3 convolutions with fixed
seed-derived weights, flattened to a 64-wide feature vector for 8x8 frames.
They are never trained, so clips are encoded outside the autodiff graph as
plain numpy; the trainable per-view affine (the gap projection) and the
two-layer view MLPs run inside the graph. The temporal mean commutes with
the affine, so applying the projection to the time-averaged encoder output
matches projecting each frame and averaging.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import linear, mlp_params
from .config import SCENE_VIEWS


def conv_stride2(x, w):
    """3x3 convolution, stride 2, padding 1. x: (N,C,H,W), w: (O,C,3,3)."""
    n, c, h, wdt = x.shape
    if w.shape[1] != c:
        raise ShapeError(f"conv input channels {c} != kernel channels {w.shape[1]}")
    ph, pw = h // 2, wdt // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], ph, pw), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + 2 * ph:2, dj:dj + 2 * pw:2]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, di, dj],
                             optimize=True)
    return out


class FrozenEncoder:
    """Fixed frame -> feature map; weights live in the ParamStore (frozen)."""

    def __init__(self, w1, w2):
        self.w1 = np.asarray(w1)
        self.w2 = np.asarray(w2)

    def encode_frames(self, frames):
        """(N, C, H, W) -> (N, enc_dim); the 2x2 map is flattened, not pooled."""
        h = conv_stride2(frames, self.w1)
        h = conv_stride2(h, self.w2)
        return h.reshape(h.shape[0], -1)

    def encode_clip(self, clip):
        """(C, T, H, W) -> (enc_dim,): per-frame features averaged over time."""
        c, t, hh, ww = clip.shape
        frames = np.moveaxis(clip, 1, 0).reshape(t, c, hh, ww)
        return self.encode_frames(frames).mean(axis=0)


def build_encoders(store):
    """Instantiate the four frozen encoders from their stored kernels."""
    return {name: FrozenEncoder(store[f"encoder.{name}.conv1"].data,
                                store[f"encoder.{name}.conv2"].data)
            for name in ("scene", "inside", "face", "body")}


def encoder_for_view(view):
    return "scene" if view in SCENE_VIEWS else view


def pooled_features(encoders, clips):
    """Encode a batch of clips for every view.

    clips: dict view -> (N, C, T, H, W) array.
    Returns dict view -> (N, enc_dim) float32.
    """
    out = {}
    for view, arr in clips.items():
        enc = encoders[encoder_for_view(view)]
        n, c, t, h, w = arr.shape
        frames = np.moveaxis(arr, 2, 1).reshape(n * t, c, h, w)
        feats = enc.encode_frames(frames)
        out[view] = feats.reshape(n, t, -1).mean(axis=1)
    return out


def encode_view(clip, enc, proj_w, proj_b):
    """Frozen encode + temporal mean + trainable affine, as one graph node.

    clip: (C, T, H, W) numpy array; proj_w/proj_b: Tensors (enc_dim, d_c)
    and (d_c,). Returns a (d_c,) Tensor. Gradient reaches the projection
    only; the encoder runs outside the graph and its kernels keep no grad.
    """
    pooled = T.constant(enc.encode_clip(np.asarray(clip)))
    return linear(pooled, proj_w, proj_b)


def gap_project(store, view_group, pooled_batch):
    """Trainable per-view affine on pooled encoder features: (N, enc) -> (N, d_c)."""
    w = store[f"view.gap.{view_group}.weight"]
    b = store[f"view.gap.{view_group}.bias"]
    return linear(T.constant(pooled_batch), w, b)


def view_mlp(store, view_group, x):
    """Two-layer projection (d_c -> d_f -> d_f) with ReLU, no dropout."""
    p = mlp_params(store, f"view.proj.{view_group}")
    return linear(T.relu(linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def project_face_body(h_face, h_body, store):
    """Independent nonlinear projections for the face and body streams."""
    return view_mlp(store, "face", h_face), view_mlp(store, "body", h_body)


def project_in_scene(h_in, h_scene, store):
    return view_mlp(store, "inside", h_in), view_mlp(store, "scene", h_scene)
