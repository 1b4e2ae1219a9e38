"""Finite-difference verification of the full training-loss gradient.

Builds a micro model in float64, computes the combined pre-training loss on
a tiny molecule batch, and compares every parameter's reverse-mode gradient
against central differences. Exposed to the CLI as `gradcheck`.
"""

import random

import numpy as np

from . import autodiff as ad
from .config import ModelConfig, PretrainConfig
from .data import generate_toy_corpus
from .pretrain import combined_loss, init_pretrain_store, prepare_molecule


def micro_setup(dtype=np.float64, n_molecules=2, seed=123):
    """Tiny corpus + micro config sized so exhaustive FD stays fast."""
    cfg = ModelConfig(
        layers=1, hidden=8, heads=2, ffn_mult=2, K=2, M=4, L_max=4, p=2,
        theta_e_hat=4, proj_dim=4, dropout=0.0,
    )
    pcfg = PretrainConfig(batch_size=n_molecules, epochs=1, seed=seed, mask_ratio=0.4)
    records, meta = generate_toy_corpus(
        n_molecules, seed=seed, kind="mixed", theta_v=6, theta_e=3, theta_t=4
    )
    # keep every line graph at <= 6 line nodes so forwards stay cheap
    records = [(m2, m3) for m2, m3 in records if len(m2.bonds) <= 6]
    store = init_pretrain_store(cfg, meta, seed=seed, dtype=dtype)
    prepared = [prepare_molecule(m2, m3, cfg, meta) for m2, m3 in records]
    return store, prepared, cfg, pcfg, meta


def loss_fn(store, prepared, cfg, pcfg, meta, seed):
    rng = random.Random(seed)
    loss, _ = combined_loss(prepared, store, cfg, pcfg, meta, rng, training=False)
    return loss


def run_gradcheck(dtype=np.float64, h=1e-5, seed=123, max_entries=None):
    """Compare analytic grads of the combined loss to central differences.

    Returns (max relative error, per-parameter report). `max_entries` limits
    the FD probes per tensor (None = every scalar).
    """
    store, prepared, cfg, pcfg, meta = micro_setup(dtype=dtype, seed=seed)
    loss = loss_fn(store, prepared, cfg, pcfg, meta, seed)
    ad.backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in store.items()}
    store.zero_grads()

    report = {}
    worst = 0.0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        g_flat = grads[name].reshape(-1)
        idx_all = range(flat.size) if max_entries is None else range(min(max_entries, flat.size))
        max_err = 0.0
        for i in idx_all:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn(store, prepared, cfg, pcfg, meta, seed).data)
            flat[i] = orig - h
            f_minus = float(loss_fn(store, prepared, cfg, pcfg, meta, seed).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            denom = max(abs(fd), abs(g_flat[i]), 1e-8)
            err = abs(fd - g_flat[i]) / denom
            max_err = max(max_err, err)
        report[name] = max_err
        worst = max(worst, max_err)
    return worst, report


def check_function(inputs, fn, h=1e-6):
    """Max relative error of analytic vs central-difference grads of fn(inputs)."""
    loss = fn(*inputs)
    ad.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in inputs]
    for p in inputs:
        p.grad = None
    max_err = 0.0
    for leaf, grad in zip(inputs, grads):
        flat = leaf.data.reshape(-1)
        g_flat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - h
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            denom = max(abs(fd), abs(g_flat[i]), 1e-8)
            max_err = max(max_err, abs(fd - g_flat[i]) / denom)
    return max_err


def run_op_gradcheck(dtype=np.float64, h=1e-6, seed=0):
    """Per-operation finite-difference checks on random small tensors."""
    rng = np.random.default_rng(seed)

    def t(shape, positive=False):
        data = rng.normal(size=shape)
        if positive:
            data = np.abs(data) + 0.5
        return ad.Tensor(data.astype(dtype), requires_grad=True)

    def weight(shape):
        return ad.Tensor(rng.normal(size=shape).astype(dtype))

    w35, w37, w37b = weight((3, 5)), weight((3, 7)), weight((3, 7))
    w5, w32, w43, w26 = weight((5,)), weight((3, 2)), weight((4, 3)), weight((2, 6))
    bce_y = np.array([[1.0, 0.0], [0.0, 1.0]])
    bce_m = np.array([[1.0, 1.0], [1.0, 0.0]])

    cases = {
        "add": ([t((3, 4)), t((3, 4))], lambda a, b: ad.sum_(a + b)),
        "add_broadcast": ([t((3, 4)), t((4,))], lambda a, b: ad.sum_((a + b) * (a + b))),
        "sub": ([t((3, 4)), t((3, 4))], lambda a, b: ad.sum_((a - b) * (a - b))),
        "mul": ([t((2, 5)), t((2, 5))], lambda a, b: ad.sum_(a * b * a)),
        "div": ([t((4,)), t((4,), positive=True)], lambda a, b: ad.sum_(a / b)),
        "matmul": ([t((3, 4)), t((4, 2))], lambda a, b: ad.sum_(ad.matmul(a, b) * ad.constant_like(np.arange(6).reshape(3, 2), a))),
        "matmul_1d": ([t((4,)), t((4, 3))], lambda a, b: ad.sum_(ad.matmul(a, b))),
        "matmul_2d1d": ([t((3, 4)), t((4,))], lambda a, b: ad.sum_(ad.matmul(a, b))),
        "dot": ([t((6,)), t((6,))], lambda a, b: ad.dot(a, b)),
        "softmax": ([t((3, 5))], lambda a: ad.sum_(ad.softmax(a) * w35)),
        "layer_norm": ([t((3, 7))], lambda a: ad.sum_(ad.layer_norm(a) * w37)),
        "relu": ([t((4, 4))], lambda a: ad.sum_(ad.relu(a))),
        "gelu": ([t((4, 4))], lambda a: ad.sum_(ad.gelu(a))),
        "exp": ([t((3, 3))], lambda a: ad.sum_(ad.exp(a))),
        "log": ([t((5,), positive=True)], lambda a: ad.sum_(ad.log(a))),
        "sqrt": ([t((5,), positive=True)], lambda a: ad.sum_(ad.sqrt(a))),
        "abs": ([t((6,), positive=True)], lambda a: ad.sum_(ad.abs_(a))),
        "mean": ([t((4, 5))], lambda a: ad.mean(a)),
        "mean_axis": ([t((4, 5))], lambda a: ad.sum_(ad.mean(a, axis=0) * w5)),
        "sum_axis": ([t((4, 5))], lambda a: ad.sum_(ad.sum_(a, axis=0) * w5)),
        "concat": ([t((3, 4)), t((3, 3))], lambda a, b: ad.sum_(ad.concat([a, b], axis=1) * w37b)),
        "slice": ([t((4, 4))], lambda a: ad.sum_(ad.slice_(a, (slice(1, 3), slice(0, 2))))),
        "take_rows": ([t((3, 4))], lambda a: ad.sum_(ad.take_rows(a, [0, 2, 2, 1]))),
        "segment_sum": ([t((4, 2))], lambda a: ad.sum_(ad.segment_sum(a, [0, 1, 0, 2], 3) * w32)),
        "transpose": ([t((3, 4))], lambda a: ad.sum_(ad.transpose(a) * w43)),
        "reshape": ([t((3, 4))], lambda a: ad.sum_(ad.reshape(a, (2, 6)) * w26)),
        "maximum_const": ([t((6,), positive=True)], lambda a: ad.sum_(ad.maximum_const(a, 0.3))),
        "cross_entropy": ([t((3, 4))], lambda a: ad.cross_entropy(a, [1, 0, 2])),
        "bce_with_logits": ([t((2, 2))], lambda a: ad.bce_with_logits(a, bce_y, bce_m)),
    }

    worst = 0.0
    report = {}
    for name, (inputs, fn) in cases.items():
        err = check_function(inputs, fn, h=h)
        report[name] = err
        worst = max(worst, err)
    return worst, report
