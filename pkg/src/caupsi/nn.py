"""Parameterized building blocks: parameter store, init, MLPs, attention.

Weight layout convention: linear weights are stored (in_dim, out_dim) so a
forward pass is plain ``x @ w + b``. Frozen encoder conv kernels are stored
(out_ch, in_ch, 3, 3). Each parameter is initialized from its own RNG
stream derived from (seed, path), so adding or removing parameters never
shifts the values of the others.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NUM_CLASSES, TASKS
from .errors import ConfigError, DataError, ShapeError
from .rng import RandomStream, path_seed

CHECKPOINT_MAGIC = b"CAUPSI1\n"
FROZEN_PREFIX = "encoder."


class ParamStore:
    """Map from hierarchical path to Tensor with a trainable flag each."""

    def __init__(self):
        self._params = {}
        self._trainable = {}

    def add(self, path, array, trainable=True):
        if path in self._params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        t = T.Tensor._wrap(np.asarray(array), bool(trainable))
        self._params[path] = t
        self._trainable[path] = bool(trainable)
        return t

    def __contains__(self, path):
        return path in self._params

    def __getitem__(self, path):
        return self._params[path]

    def paths(self):
        return sorted(self._params)

    def items(self):
        for p in self.paths():
            yield p, self._params[p], self._trainable[p]

    def is_trainable(self, path):
        return self._trainable[path]

    def trainable_paths(self):
        return [p for p in self.paths() if self._trainable[p]]

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def count(self, trainable):
        return sum(t.data.size for p, t, tr in self.items() if tr == trainable)

    def count_by_prefix(self, trainable):
        """Parameter counts grouped by top-level path component."""
        out = {}
        for p, t, tr in self.items():
            if tr != trainable:
                continue
            top = p.split(".", 1)[0]
            out[top] = out.get(top, 0) + t.data.size
        return out


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden_dim: int
    out_dim: int
    dropout_p: float = 0.1

    def validate(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) <= 0:
            raise ConfigError(f"MlpSpec dims must be positive: {self}")


def xavier_uniform(rs, in_dim, out_dim, shape=None):
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    shape = (in_dim, out_dim) if shape is None else shape
    u = rs.uniform(shape)
    return (u * 2.0 - 1.0) * bound


def _add_linear(store, seed, path, in_dim, out_dim, trainable=True, dtype=np.float32):
    rs = RandomStream(path_seed(seed, path + ".weight"))
    store.add(path + ".weight",
              xavier_uniform(rs, in_dim, out_dim).astype(dtype), trainable)
    store.add(path + ".bias", np.zeros(out_dim, dtype=dtype), trainable)


def _add_mlp(store, seed, path, in_dim, hidden, out_dim, dtype=np.float32):
    _add_linear(store, seed, path + ".fc1", in_dim, hidden, dtype=dtype)
    _add_linear(store, seed, path + ".fc2", hidden, out_dim, dtype=dtype)


def _add_layer_norm(store, path, dim, dtype=np.float32):
    store.add(path + ".gamma", np.ones(dim, dtype=dtype))
    store.add(path + ".beta", np.zeros(dim, dtype=dtype))


def _add_mha(store, seed, path, dim, dtype=np.float32):
    for name in ("wq", "wk", "wv", "wo"):
        rs = RandomStream(path_seed(seed, f"{path}.{name}"))
        store.add(f"{path}.{name}", xavier_uniform(rs, dim, dim).astype(dtype))
        store.add(f"{path}.{name}_bias", np.zeros(dim, dtype=dtype))


def _add_conv(store, seed, path, in_ch, out_ch, dtype=np.float32):
    rs = RandomStream(path_seed(seed, path))
    fan_in = in_ch * 9
    fan_out = out_ch * 9
    w = xavier_uniform(rs, fan_in, fan_out, shape=(out_ch, in_ch, 3, 3))
    store.add(path, w.astype(dtype), trainable=False)


def init_params(cfg, seed, ablation=None, n_domains=None, dtype=np.float32):
    """Create every parameter of the architecture, deterministically per seed.

    Head input widths depend on the chain ablation (embedding terms are
    removed from the concatenation, not zeroed). The domain-adversary head
    is only created once the number of domains is known; use
    add_adversary_params for that.
    """
    cfg.validate()
    from .config import Ablation
    ablation = ablation or Ablation()
    store = ParamStore()

    for enc in ("scene", "inside", "face", "body"):
        _add_conv(store, seed, f"encoder.{enc}.conv1", cfg.frame_c, cfg.enc_c1, dtype)
        _add_conv(store, seed, f"encoder.{enc}.conv2", cfg.enc_c1, cfg.enc_c2, dtype)

    for view in ("scene", "inside", "face", "body"):
        _add_linear(store, seed, f"view.gap.{view}", cfg.enc_dim, cfg.d_c, dtype=dtype)
    for view in ("scene", "inside", "face", "body"):
        _add_mlp(store, seed, f"view.proj.{view}", cfg.d_c, cfg.d_f, cfg.d_f, dtype)

    rs = RandomStream(path_seed(seed, "fusion.scene_attn.w1"))
    store.add("fusion.scene_attn.w1",
              xavier_uniform(rs, cfg.n_scene * cfg.d_c, cfg.scene_hidden).astype(dtype))
    rs = RandomStream(path_seed(seed, "fusion.scene_attn.w2"))
    store.add("fusion.scene_attn.w2",
              xavier_uniform(rs, cfg.scene_hidden, cfg.n_scene).astype(dtype))

    for direction in ("q_in", "q_scene"):
        base = f"fusion.cross.{direction}"
        _add_layer_norm(store, f"{base}.ln", cfg.d_f, dtype)
        _add_mha(store, seed, f"{base}.mha", cfg.d_f, dtype)
        _add_linear(store, seed, f"{base}.gate", 2 * cfg.d_f, cfg.d_f, dtype=dtype)

    _add_mlp(store, seed, "ctpc.affect", cfg.d_f, cfg.psi_hidden, cfg.d_psi, dtype)
    _add_mlp(store, seed, "ctpc.action", cfg.d_f, cfg.psi_hidden, cfg.d_psi, dtype)
    _add_linear(store, seed, "ctpc.fuse", 2 * cfg.d_psi, cfg.d_psi, dtype=dtype)
    _add_layer_norm(store, "ctpc.ln", cfg.d_psi, dtype)

    _add_linear(store, seed, "chain.shared", 2 * cfg.d_f, cfg.d_z, dtype=dtype)
    for i, task in enumerate(TASKS, start=1):
        _add_linear(store, seed, f"chain.task{i}.proj", cfg.d_z, cfg.d_t, dtype=dtype)
        in_dim = cfg.head_input_dim(task, chain_ablated=ablation.chain)
        _add_mlp(store, seed, f"chain.head{i}", in_dim, cfg.head_hidden,
                 NUM_CLASSES[task], dtype)
    for i in (1, 2, 3):
        rs = RandomStream(path_seed(seed, f"chain.task{i}.prototypes"))
        proto = rs.normal((NUM_CLASSES[TASKS[i - 1]], cfg.d_e)) * 0.02
        store.add(f"chain.task{i}.prototypes", proto.astype(dtype))

    if n_domains is not None:
        add_adversary_params(store, cfg, seed, n_domains, dtype)
    return store


def add_adversary_params(store, cfg, seed, n_domains, dtype=np.float32):
    if n_domains < 2:
        raise ConfigError(f"need at least 2 domains, got {n_domains}")
    _add_linear(store, seed, "adv.fc1", cfg.d_z, cfg.adv_hidden, dtype=dtype)
    _add_linear(store, seed, "adv.fc2", cfg.adv_hidden, n_domains, dtype=dtype)


def optimized_paths(store, ablation):
    """Trainable paths minus the parameter groups an ablation switches off."""
    excluded_prefixes = []
    if ablation.ctpc or ablation.facebody:
        excluded_prefixes.append("ctpc.")
    if ablation.crossview:
        excluded_prefixes.append("fusion.cross.")
    if ablation.chain:
        excluded_prefixes.extend(
            f"chain.task{i}.prototypes" for i in (1, 2, 3))
    if ablation.facebody:
        excluded_prefixes.extend(
            ["view.gap.face", "view.gap.body", "view.proj.face", "view.proj.body"])
    out = []
    for p in store.trainable_paths():
        if any(p.startswith(pre) for pre in excluded_prefixes):
            continue
        out.append(p)
    return out


# --- forward primitives ---

def linear(x, w, b=None):
    y = T.matmul(x, w)
    if b is not None:
        y = T.add(y, b)
    return y


def mlp_forward(spec, params, x, train, rng=None):
    """Linear -> ReLU -> Dropout(train only) -> Linear.

    params is a dict with keys w1, b1, w2, b2.
    """
    if x.data.shape[-1] != spec.in_dim:
        raise ShapeError(
            f"mlp input width {x.data.shape[-1]} != spec.in_dim {spec.in_dim}")
    h = T.relu(linear(x, params["w1"], params["b1"]))
    if train and spec.dropout_p > 0.0:
        h = T.dropout(h, spec.dropout_p, rng, train=True)
    return linear(h, params["w2"], params["b2"])


def mlp_params(store, path):
    return {"w1": store[path + ".fc1.weight"], "b1": store[path + ".fc1.bias"],
            "w2": store[path + ".fc2.weight"], "b2": store[path + ".fc2.bias"]}


def mha_params(store, path):
    return {name: store[f"{path}.{name}"] for name in
            ("wq", "wk", "wv", "wo", "wq_bias", "wk_bias", "wv_bias", "wo_bias")}


def mha(q_tokens, kv_tokens, heads, params):
    """Scaled dot-product attention over 2D token matrices (T, d)."""
    d = q_tokens.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by heads={heads}")
    dh = d // heads
    q = linear(q_tokens, params["wq"], params["wq_bias"])
    k = linear(kv_tokens, params["wk"], params["wk_bias"])
    v = linear(kv_tokens, params["wv"], params["wv_bias"])
    scale = 1.0 / np.sqrt(dh)
    head_outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.slice_last(q, lo, hi)
        kh = T.slice_last(k, lo, hi)
        vh = T.slice_last(v, lo, hi)
        scores = T.smul(T.matmul(qh, T.transpose(kh)), scale)
        attn = T.softmax(scores, axis=-1)
        head_outs.append(T.matmul(attn, vh))
    merged = T.concat(head_outs, axis=-1)
    return linear(merged, params["wo"], params["wo_bias"])


def single_token_attention(kv_batch, params):
    """MHA output when K/V hold exactly one token per sample.

    With a single key the softmax weight is identically 1, so the attention
    output reduces to the value projection followed by the output
    projection; the query path receives exactly zero gradient either way.
    kv_batch is (N, d).
    """
    v = linear(kv_batch, params["wv"], params["wv_bias"])
    return linear(v, params["wo"], params["wo_bias"])


# --- checkpoint io ---

def save_checkpoint(store, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for p in store.paths():
            t = store[p]
            enc = p.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a ParamStore.

    Trainable flags are not stored; they are recovered from the frozen-path
    convention (everything under ``encoder.`` is frozen).
    """
    store = ParamStore()
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        while True:
            head = fh.read(4)
            if not head:
                break
            (plen,) = struct.unpack("<I", head)
            name = fh.read(plen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise DataError(f"{path}: truncated entry {name!r}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            store.add(name, arr, trainable=not name.startswith(FROZEN_PREFIX))
    return store
