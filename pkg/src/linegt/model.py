"""Dual-modality line-graph transformer encoder and heads.

Blocks are pre-norm: x += Attn(LN(x)); x += FFN(LN(x)). The per-head
structural bias matrices are added to the attention logits and are shared
by every layer. The virtual node's final state is the graph-level
embedding.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ShapeMismatch
from .linegraph import pair_class_count


@dataclass
class EncoderOutput:
    node_states: object        # Tensor [n+1, hidden]
    graph_embedding: object    # Tensor [hidden] (virtual node state)
    mean_node_embedding: object  # Tensor [hidden] (mean over real nodes)


def init_model_params(store, cfg, meta):
    """Register transformer blocks, mask heads, and projection heads."""
    hidden = cfg.hidden
    ffn = cfg.ffn_mult * hidden
    for mod in ("2d", "3d"):
        for layer in range(cfg.layers):
            pre = f"tf{mod}.l{layer}"
            store.create(f"{pre}.ln1.g", (hidden,), scheme=("uniform", 1.0, 1.0))
            store.create(f"{pre}.ln1.b", (hidden,), scheme="zeros")
            store.create(f"{pre}.ln2.g", (hidden,), scheme=("uniform", 1.0, 1.0))
            store.create(f"{pre}.ln2.b", (hidden,), scheme="zeros")
            for w in ("Wq", "Wk", "Wv", "Wo"):
                store.create(f"{pre}.{w}", (hidden, hidden))
            store.create(f"{pre}.ffn.W1", (hidden, ffn))
            store.create(f"{pre}.ffn.b1", (ffn,), scheme="zeros")
            store.create(f"{pre}.ffn.W2", (ffn, hidden))
            store.create(f"{pre}.ffn.b2", (hidden,), scheme="zeros")
        store.create(f"proj{mod}.W1", (hidden, hidden))
        store.create(f"proj{mod}.b1", (hidden,), scheme="zeros")
        # small output init keeps initial dot similarities near zero so the
        # contrastive logits start unsaturated at any temperature
        store.create(f"proj{mod}.W2", (hidden, cfg.proj_dim), scheme=("normal", 0.005))
        store.create(f"proj{mod}.b2", (cfg.proj_dim,), scheme="zeros")

    n_pair = pair_class_count(meta.theta_t)
    n_bond = meta.n_bond_types
    for mod, heads in (("2d", {"pair": n_pair, "bond": n_bond}), ("3d", {"pair": n_pair})):
        store.create(f"mask{mod}.W1", (hidden, hidden))
        store.create(f"mask{mod}.b1", (hidden,), scheme="zeros")
        for name, classes in heads.items():
            # near-uniform initial class logits: cross-entropy starts at ln(k)
            store.create(f"mask{mod}.{name}", (hidden, classes), scheme=("normal", 0.01))


def init_prediction_head(store, cfg, tasks, head_hidden=256):
    store.create("pred.W1", (2 * cfg.hidden, head_hidden))
    store.create("pred.b1", (head_hidden,), scheme="zeros")
    store.create("pred.W2", (head_hidden, tasks))
    store.create("pred.b2", (tasks,), scheme="zeros")


def biased_attention(x, bias_heads, store, prefix, cfg, training=False, rng=None):
    """Multi-head self-attention with additive per-head logit biases."""
    n = x.shape[0]
    if len(bias_heads) != cfg.heads or bias_heads[0].shape != (n, n):
        raise ShapeMismatch("biased_attention", (len(bias_heads),) + tuple(bias_heads[0].shape), (cfg.heads, n, n))
    dk = cfg.head_dim
    scale = 1.0 / math.sqrt(dk)
    q = ad.matmul(x, store[f"{prefix}.Wq"])
    k = ad.matmul(x, store[f"{prefix}.Wk"])
    v = ad.matmul(x, store[f"{prefix}.Wv"])
    outs = []
    for h in range(cfg.heads):
        cols = (slice(None), slice(h * dk, (h + 1) * dk))
        qh = ad.slice_(q, cols)
        kh = ad.slice_(k, cols)
        vh = ad.slice_(v, cols)
        logits = ad.matmul(qh, ad.transpose(kh)) * scale + bias_heads[h]
        att = ad.softmax(logits, axis=-1)
        if training and cfg.dropout > 0:
            att = ad.dropout(att, cfg.dropout, rng)
        outs.append(ad.matmul(att, vh))
    return ad.matmul(ad.concat(outs, axis=1), store[f"{prefix}.Wo"])


def _affine_ln(x, store, name):
    return ad.layer_norm(x) * store[f"{name}.g"] + store[f"{name}.b"]


def encoder_forward(enc, store, cfg, training=False, rng=None):
    """Run all transformer blocks over an encoded graph."""
    mod = enc.lg.modality
    bias_heads = [enc.attention_bias(h) for h in range(cfg.heads)]
    x = enc.x
    for layer in range(cfg.layers):
        pre = f"tf{mod}.l{layer}"
        h = _affine_ln(x, store, f"{pre}.ln1")
        x = x + biased_attention(h, bias_heads, store, pre, cfg, training, rng)
        h = _affine_ln(x, store, f"{pre}.ln2")
        f = ad.gelu(ad.matmul(h, store[f"{pre}.ffn.W1"]) + store[f"{pre}.ffn.b1"])
        f = ad.matmul(f, store[f"{pre}.ffn.W2"]) + store[f"{pre}.ffn.b2"]
        if training and cfg.dropout > 0:
            f = ad.dropout(f, cfg.dropout, rng)
        x = x + f
    n_real = enc.lg.n_real
    graph_emb = ad.slice_(x, (n_real,))
    mean_emb = ad.mean(ad.slice_(x, (slice(0, n_real),)), axis=0)
    return EncoderOutput(x, graph_emb, mean_emb)


def projection_head(z, store, modality):
    """Map a graph embedding into the shared contrastive space."""
    h = ad.relu(ad.matmul(z, store[f"proj{modality}.W1"]) + store[f"proj{modality}.b1"])
    return ad.matmul(h, store[f"proj{modality}.W2"]) + store[f"proj{modality}.b2"]


def downstream_representation(out):
    """Concat of graph-level and mean real-node embeddings -> [2*hidden]."""
    return ad.concat([out.graph_embedding, out.mean_node_embedding], axis=0)


def prediction_head(rep, store):
    """Two-layer ReLU MLP producing raw per-task outputs."""
    h = ad.relu(ad.matmul(rep, store["pred.W1"]) + store["pred.b1"])
    return ad.matmul(h, store["pred.W2"]) + store["pred.b2"]
