"""Configuration dataclasses and flat-key (dotted) config file support."""

from dataclasses import dataclass, field, fields, replace


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by both modality encoders."""

    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 4
    K: int = 8           # eigenvector PE width
    M: int = 16          # Gaussian kernel count
    L_max: int = 20      # path position clamp
    p: int = 8           # path-length embedding width
    theta_e_hat: int = 0  # line-edge feature width; 0 -> hidden // 2
    proj_dim: int = 128
    dropout: float = 0.1
    kernel_sign: str = "negative"  # sign convention of the Gaussian kernel output

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.theta_e_hat == 0:
            self.theta_e_hat = self.hidden // 2
        if min(self.layers, self.hidden, self.heads, self.K, self.M, self.p) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.kernel_sign not in ("negative", "positive"):
            raise ValueError("kernel_sign must be 'negative' or 'positive'")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @classmethod
    def full_scale(cls):
        """Large preset for real pre-training runs (not exercised by tests)."""
        return cls(layers=12, hidden=768, heads=12, K=8, M=16)


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.4
    tau: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the contrastive term")


@dataclass
class FinetuneConfig:
    lr_grid: list = field(default_factory=lambda: [3e-5, 1e-5, 3e-6])
    weight_decay_grid: list = field(default_factory=lambda: [0.0, 1e-6])
    epochs: int = 50
    batch_size: int = 32
    split_ratios: tuple = (0.8, 0.1, 0.1)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    freeze_encoder: bool = False

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if not self.lr_grid or not self.weight_decay_grid:
            raise ValueError("hyperparameter grids must be nonempty")


_GROUPS = {"model": ModelConfig, "pretrain": PretrainConfig, "finetune": FinetuneConfig}


def configs_from_flat(flat, optimizer_cls=None):
    """Build config dataclasses from a {'group.key': value} mapping.

    Unknown keys raise; `optim.*` keys are returned as a plain dict for the
    caller to merge into an OptimizerConfig.
    """
    groups = {name: {} for name in _GROUPS}
    optim_kwargs = {}
    for key, value in flat.items():
        if "." not in key:
            raise KeyError(f"config key {key!r} must be dotted (group.field)")
        group, name = key.split(".", 1)
        if group == "optim":
            optim_kwargs[name] = value
            continue
        if group not in _GROUPS:
            raise KeyError(f"unknown config group {group!r}")
        valid = {f.name for f in fields(_GROUPS[group])}
        if name not in valid:
            raise KeyError(f"unknown config key {key!r}")
        groups[group][name] = value
    built = {name: cls(**groups[name]) for name, cls in _GROUPS.items()}
    built["optim"] = optim_kwargs
    return built


def config_to_flat(cfg, prefix):
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = list(v)
        out[f"{prefix}.{f.name}"] = v
    return out


def with_overrides(cfg, **kwargs):
    return replace(cfg, **kwargs)
