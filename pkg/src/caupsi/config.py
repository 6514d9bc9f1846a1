"""Configuration dataclasses, task constants, and the flat run-config format.

Run configs are plain ``key = value`` text files. Every field of the model,
training, loss, and generator configs has a unique flat key; unknown keys
are rejected so typos fail loudly. CLI flags override file values.
"""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

# The four recognition tasks, in chain order.
TASKS = ("tcr", "vcr", "der", "dbr")

TASK_CLASSES = {
    "tcr": ("TrafficJam", "Waiting", "Smooth"),
    "vcr": ("Parking", "Turning", "Backward", "LaneChange", "Forward"),
    "der": ("Anxiety", "Peace", "Weariness", "Happiness", "Anger"),
    "dbr": ("Smoking", "Phone", "LookAround", "DozingOff", "NormalDrive",
            "Talking", "BodyMove"),
}

NUM_CLASSES = {t: len(TASK_CLASSES[t]) for t in TASKS}

# Reference class supports used as marginal targets by the synthetic
# generator (kept proportional so the class-imbalance regime carries over).
TASK_SUPPORTS = {
    "tcr": (77, 133, 399),
    "vcr": (154, 56, 39, 32, 328),
    "der": (84, 363, 67, 50, 45),
    "dbr": (28, 94, 129, 12, 248, 30, 68),
}

SCENE_VIEWS = ("front", "left", "right")
VIEWS = ("front", "left", "right", "inside", "face", "body")


@dataclass(frozen=True)
class ModelConfig:
    d_c: int = 128          # per-view feature width after the gap projection
    d_f: int = 128          # projected view feature width
    d_z: int = 256          # task-shared representation
    d_t: int = 64           # task-specific projection
    d_e: int = 32           # prototype embedding width
    d_psi: int = 16         # psychological state signal width
    attn_heads: int = 4
    n_scene: int = 3
    head_hidden: int = 128
    scene_hidden: int = 64
    adv_hidden: int = 64
    psi_hidden: int = 32    # hidden width of the two CTPC MLPs
    dropout_p: float = 0.1
    multi_token_crossview: bool = False
    enc_c1: int = 8         # frozen encoder stage channels
    enc_c2: int = 16
    frame_c: int = 3
    frame_hw: int = 8

    @property
    def enc_dim(self):
        return self.enc_c2 * (self.frame_hw // 4) ** 2

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and v <= 0:
                raise ConfigError(f"model dim {f.name} must be positive, got {v}")
        if self.d_f % self.attn_heads != 0:
            raise ConfigError(
                f"d_f={self.d_f} not divisible by attn_heads={self.attn_heads}")
        if self.frame_hw % 4 != 0:
            raise ConfigError("frame_hw must be divisible by 4 (two stride-2 stages)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")

    def head_input_dim(self, task, chain_ablated=False):
        base = {
            "tcr": self.d_t + self.d_f + self.d_psi,
            "vcr": self.d_t + 2 * self.d_f + self.d_psi,
            "der": self.d_t + self.d_f + self.d_psi,
            "dbr": self.d_t + 3 * self.d_f + self.d_psi,
        }[task]
        if not chain_ablated:
            base += {"tcr": 0, "vcr": 0, "der": 2 * self.d_e, "dbr": 3 * self.d_e}[task]
        return base


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    max_epochs: int = 100
    batch_size: int = 16
    accum_steps: int = 4
    ema_beta: float = 0.999
    mixup_alpha: float = 0.2
    clip_norm: float = 5.0
    patience: int = 20
    flip_prob: float = 0.5

    def validate(self):
        if self.warmup_epochs >= self.max_epochs:
            raise ConfigError("warmup_epochs must be < max_epochs")
        for name in ("lr_max", "lr_min", "weight_decay", "batch_size",
                     "accum_steps", "ema_beta", "clip_norm", "patience",
                     "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class LossConfig:
    lambda_tcr: float = 1.0
    lambda_vcr: float = 1.0
    lambda_der: float = 1.5
    lambda_dbr: float = 2.0
    label_smoothing: float = 0.1
    gamma_adv: float = 0.5
    lambda_grl: float = 1.0
    kmeans_k_min: int = 2
    kmeans_k_max: int = 8

    @property
    def lambdas(self):
        return (self.lambda_tcr, self.lambda_vcr, self.lambda_der, self.lambda_dbr)

    def validate(self):
        if not (self.lambda_der > self.lambda_tcr and self.lambda_dbr > self.lambda_vcr):
            raise ConfigError(
                "psychological-task weights must exceed the scene-task weights")
        if any(w <= 0 for w in self.lambdas):
            raise ConfigError("task loss weights must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0,1)")
        if not 2 <= self.kmeans_k_min <= self.kmeans_k_max:
            raise ConfigError("invalid k-means search range")


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int = 2898
    frame_c: int = 3
    frames_t: int = 16
    frame_hw: int = 8
    causal_strength: float = 1.0
    noise_sigma: float = 3.0
    proto_separation: float = 1.0
    difficulty: float = 1.0  # extra multiplier on noise_sigma

    def validate(self):
        if self.n_samples < 10:
            raise ConfigError("n_samples must be at least 10")
        if not 0.0 <= self.causal_strength <= 1.0:
            raise ConfigError("causal_strength must lie in [0,1]")
        if self.noise_sigma <= 0 or self.difficulty <= 0:
            raise ConfigError("noise levels must be positive")


@dataclass(frozen=True)
class Ablation:
    """Flags are independent; True removes the mechanism."""
    ctpc: bool = False
    crossview: bool = False
    chain: bool = False
    facebody: bool = False

    def names(self):
        return tuple(n for n in ("ctpc", "crossview", "chain", "facebody")
                     if getattr(self, n))


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "gen": GeneratorConfig,
}


def _field_registry():
    reg = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            key = f.name
            if key in reg:
                # frame dims appear in both model and generator configs;
                # a single flat key feeds both.
                reg[key].append((section, f))
            else:
                reg[key] = [(section, f)]
    return reg


_REGISTRY = _field_registry()


def _coerce(raw, f):
    t = f.type
    try:
        if t is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {f.name} = {raw!r} as {t.__name__}")
    raise ConfigError(f"unsupported config field type {t} for {f.name}")


def parse_config_text(text):
    """Parse ``key = value`` lines into a raw string dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = stripped.partition("=")
        key = key.strip()
        val = val.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


# Run-metadata keys that may appear in a config snapshot alongside the
# config fields proper (written by cmd_train, read back by cmd_eval).
RUN_KEYS = ("seed", "ablate", "data_dir", "n_domains", "best_epoch")


def build_configs(overrides):
    """Build all config dataclasses from a flat key->string dict.

    Returns (model, train, loss, gen, run_meta); run_meta holds any
    RUN_KEYS entries untouched.
    """
    values = {section: {} for section in _SECTIONS}
    run_meta = {}
    for key, raw in overrides.items():
        if key in RUN_KEYS:
            run_meta[key] = raw
            continue
        if key not in _REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
        for section, f in _REGISTRY[key]:
            values[section][f.name] = _coerce(raw, f) if isinstance(raw, str) else raw
    model = ModelConfig(**values["model"])
    train = TrainConfig(**values["train"])
    loss = LossConfig(**values["loss"])
    gen = GeneratorConfig(**values["gen"])
    model.validate()
    train.validate()
    loss.validate()
    gen.validate()
    return model, train, loss, gen, run_meta


def load_config_file(path, cli_overrides=None):
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_config_text(fh.read())
    if cli_overrides:
        raw.update({k: v for k, v in cli_overrides.items() if v is not None})
    return build_configs(raw)


def snapshot_text(model, train, loss, gen, extra=None):
    """Serialize configs (plus run metadata) back to the flat format."""
    lines = []
    seen = set()
    for section_name, cfg in (("model", model), ("train", train),
                              ("loss", loss), ("gen", gen)):
        lines.append(f"# {section_name}")
        for f in fields(cfg):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    if extra:
        lines.append("# run")
        for k, v in extra.items():
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_replace(cfg, **kw):
    out = replace(cfg, **kw)
    out.validate()
    return out
