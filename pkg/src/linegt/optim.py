"""Named parameter store, seeded initialization, and the Adam optimizer."""

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor


@dataclass
class OptimizerConfig:
    peak_lr: float = 2e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.05
    total_steps: int = 1
    poly_power: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(cfg, step):
    """Linear warmup to peak_lr, then polynomial decay to 0 at total_steps."""
    warmup_steps = int(round(cfg.warmup_frac * cfg.total_steps))
    if warmup_steps > 0 and step <= warmup_steps:
        return cfg.peak_lr * step / warmup_steps
    denom = max(1, cfg.total_steps - warmup_steps)
    frac = min(max((step - warmup_steps) / denom, 0.0), 1.0)
    return cfg.peak_lr * (1.0 - frac) ** cfg.poly_power


def _rng_for(seed, name):
    key = hashlib.sha256(f"{seed}|{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(key[:8], "little"))


def seeded_init(name, shape, scheme="xavier", seed=0, dtype=DEFAULT_DTYPE):
    """Deterministic init keyed by (seed, name): independent of creation order.

    scheme: "xavier" | ("normal", sigma) | "zeros" | ("uniform", a, b)
    """
    rng = _rng_for(seed, name)
    shape = tuple(shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "xavier":
        fan_in = shape[0] if len(shape) >= 1 else 1
        fan_out = shape[1] if len(shape) >= 2 else shape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-bound, bound, size=shape)
    elif isinstance(scheme, tuple) and scheme[0] == "normal":
        data = rng.normal(0.0, scheme[1], size=shape)
    elif isinstance(scheme, tuple) and scheme[0] == "uniform":
        data = rng.uniform(scheme[1], scheme[2], size=shape)
    else:
        raise ValueError(f"unknown init scheme: {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=True)


class ParamStore:
    """Ordered map of named learnable tensors plus per-parameter Adam state.

    Iteration is always in sorted-name order so updates and checkpoint
    layout are deterministic.
    """

    def __init__(self, seed=0, dtype=DEFAULT_DTYPE):
        self.seed = seed
        self.dtype = dtype
        self._params = {}
        self._moments = {}
        self.step_count = 0

    def create(self, name, shape, scheme="xavier"):
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = seeded_init(name, shape, scheme=scheme, seed=self.seed, dtype=self.dtype)
        self._params[name] = t
        return t

    def register(self, name, tensor):
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self):
        return [self._params[n] for n in self.names()]

    def trainable_count(self):
        return sum(p.data.size for p in self._params.values() if p.requires_grad)

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def moments(self, name):
        if name not in self._moments:
            p = self._params[name]
            self._moments[name] = (
                np.zeros_like(p.data),
                np.zeros_like(p.data),
            )
        return self._moments[name]

    def set_moments(self, name, m, v):
        self._moments[name] = (m, v)

    def moment_items(self):
        for name in sorted(self._moments):
            yield name, self._moments[name]

    def has_moments(self, name):
        return name in self._moments


def adam_step(store, cfg, step):
    """One decoupled-weight-decay Adam update; zeroes grads afterwards."""
    lr = lr_at(cfg, step)
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, p in store.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = store.moments(name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    store.step_count = step
    store.zero_grads()
    return lr
