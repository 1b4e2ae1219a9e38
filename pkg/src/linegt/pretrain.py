"""Self-supervised objectives and the pre-training loop.

Two tasks drive pre-training: masked line-node prediction within each
modality (BERT-style 80/10/10 corruption, cross-entropy on the original
node types) and a dual-view InfoNCE loss that aligns projected 2D and 3D
graph-level embeddings of the same molecule within a batch.
"""

import hashlib
import json
import math
import os
import random
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ModelConfig, PretrainConfig
from .encodings import EncodingCache, compute_structure, encode_graph, init_encoding_params, structure_cache_key
from .exceptions import IndexOutOfRange, NonFiniteLoss
from .linegraph import build_2d_features, build_3d_features, init_feature_params, to_line_graph
from .model import encoder_forward, init_model_params, projection_head
from .optim import OptimizerConfig, ParamStore, adam_step
from .data import record_to_dict

MASK = "mask"
RANDOM = "random"
KEEP = "keep"


@dataclass
class MaskPlan:
    selected: list        # line-node indices (virtual never included)
    actions: list         # per selected node: (MASK,) | (RANDOM, j) | (KEEP,)
    modality: str


def stable_seed(*parts):
    """Order-stable 64-bit seed from arbitrary key parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_mask_plan(n_real, cfg, rng, modality="2d"):
    """Select round(mask_ratio * n) nodes (>= 1) and assign 80/10/10 actions."""
    if n_real < 1:
        raise ValueError("cannot mask an empty line graph")
    count = max(1, int(math.floor(cfg.mask_ratio * n_real + 0.5)))
    selected = sorted(rng.sample(range(n_real), count))
    actions = []
    for idx in selected:
        r = rng.random()
        if r < 0.8:
            actions.append((MASK,))
        elif r < 0.9:
            others = [j for j in range(n_real) if j != idx]
            if others:
                actions.append((RANDOM, rng.choice(others)))
            else:
                actions.append((MASK,))  # single-node graph has no replacement pool
        else:
            actions.append((KEEP,))
    return MaskPlan(selected, actions, modality)


def apply_mask(enc, plan, store):
    """Corrupt node inputs per plan; structural biases stay as computed pre-mask."""
    n_total = enc.x.shape[0]
    n_real = enc.lg.n_real
    select = np.eye(n_total, dtype=store.dtype)
    mask_rows = np.zeros((n_total, 1), dtype=store.dtype)
    for idx, action in zip(plan.selected, plan.actions):
        if not 0 <= idx < n_real:
            raise IndexOutOfRange(f"mask index {idx} outside {n_real} real nodes")
        if action[0] == MASK:
            select[idx, :] = 0.0
            mask_rows[idx, 0] = 1.0
        elif action[0] == RANDOM:
            j = action[1]
            if not 0 <= j < n_real:
                raise IndexOutOfRange(f"replacement index {j} outside {n_real} real nodes")
            select[idx, :] = 0.0
            select[idx, j] = 1.0
    mask_emb = store[f"feat{plan.modality}.mask"]
    x = ad.matmul(ad.Tensor(select), enc.x) + ad.matmul(
        ad.Tensor(mask_rows), ad.reshape(mask_emb, (1, mask_emb.shape[0]))
    )
    from .encodings import EncodedGraph

    return EncodedGraph(
        lg=enc.lg,
        x=x,
        bias_b=enc.bias_b,
        bias_c=enc.bias_c,
        bias_g=enc.bias_g,
        structure=enc.structure,
    )


def mask_loss(out, plan, targets, store, modality):
    """Cross-entropy over the selected positions' predicted original types.

    2D sums an atom-pair-class head and a bond-type head; 3D predicts the
    atom-pair class only. Returns (loss tensor, telemetry dict).
    """
    states = ad.take_rows(out.node_states, plan.selected)
    trunk = ad.relu(ad.matmul(states, store[f"mask{modality}.W1"]) + store[f"mask{modality}.b1"])
    if modality == "2d":
        pair_targets = [targets[i][0] for i in plan.selected]
        bond_targets = [targets[i][1] for i in plan.selected]
    else:
        pair_targets = [targets[i] for i in plan.selected]
        bond_targets = None
    pair_logits = ad.matmul(trunk, store[f"mask{modality}.pair"])
    loss = ad.cross_entropy(pair_logits, pair_targets)
    acc = float(np.mean(pair_logits.data.argmax(axis=1) == np.asarray(pair_targets)))
    if bond_targets is not None:
        bond_logits = ad.matmul(trunk, store[f"mask{modality}.bond"])
        loss = loss + ad.cross_entropy(bond_logits, bond_targets)
    return loss, {"pair_acc": acc, "n_masked": len(plan.selected)}


def infonce_loss(z2d, z3d, tau):
    """Symmetric in-batch InfoNCE over dot similarities, mean-reduced."""
    m = z2d.shape[0]
    sims = ad.matmul(z2d, ad.transpose(z3d)) * (1.0 / tau)
    diag = np.arange(m)
    return ad.cross_entropy(sims, diag) + ad.cross_entropy(ad.transpose(sims), diag)


def retrieval_top1(z2d, z3d):
    """Fraction of 2D rows whose most similar 3D row is their own molecule."""
    sims = z2d @ z3d.T
    return float(np.mean(sims.argmax(axis=1) == np.arange(sims.shape[0])))


@dataclass
class PreparedMolecule:
    """Structure-only state reused across steps; features rebuilt per step."""

    mol2d: object
    mol3d: object
    lg2d: object
    lg3d: object
    structure: object


def prepare_molecule(mol2d, mol3d, cfg, meta=None, cache=None):
    theta_t = meta.theta_t if meta is not None else None
    lg2d = to_line_graph(mol2d, theta_t)
    lg3d = to_line_graph(mol3d, theta_t)
    structure = None
    if cache is not None:
        key = structure_cache_key(record_to_dict(mol2d, mol3d), cfg.K, cfg.L_max)
        structure = cache.get(key)
        if structure is None:
            structure = compute_structure(lg2d, cfg)
            cache.put(key, structure)
    else:
        structure = compute_structure(lg2d, cfg)
    return PreparedMolecule(mol2d, mol3d, lg2d, lg3d, structure)


def combined_loss(batch, store, cfg, pcfg, meta, rng, nprng=None, training=True):
    """Weighted sum of both mask losses and the contrastive loss for a batch."""
    m2_losses, m3_losses = [], []
    z2_rows, z3_rows = [], []
    acc2, acc3, n2, n3 = 0.0, 0.0, 0, 0
    for prep in batch:
        build_2d_features(prep.mol2d, prep.lg2d, store, cfg, meta)
        build_3d_features(prep.mol3d, prep.lg3d, store, cfg, meta)
        enc2 = encode_graph(prep.lg2d, store, cfg, prep.structure)
        enc3 = encode_graph(prep.lg3d, store, cfg, prep.structure)
        plan2 = sample_mask_plan(prep.lg2d.n_real, pcfg, rng, "2d")
        plan3 = sample_mask_plan(prep.lg3d.n_real, pcfg, rng, "3d")
        out2 = encoder_forward(apply_mask(enc2, plan2, store), store, cfg, training, nprng)
        out3 = encoder_forward(apply_mask(enc3, plan3, store), store, cfg, training, nprng)
        l2, t2 = mask_loss(out2, plan2, prep.lg2d.node_target, store, "2d")
        l3, t3 = mask_loss(out3, plan3, prep.lg3d.node_target, store, "3d")
        m2_losses.append(l2)
        m3_losses.append(l3)
        acc2 += t2["pair_acc"] * t2["n_masked"]
        n2 += t2["n_masked"]
        acc3 += t3["pair_acc"] * t3["n_masked"]
        n3 += t3["n_masked"]
        z2_rows.append(ad.reshape(projection_head(out2.graph_embedding, store, "2d"), (1, cfg.proj_dim)))
        z3_rows.append(ad.reshape(projection_head(out3.graph_embedding, store, "3d"), (1, cfg.proj_dim)))

    def scalar_mean(losses):
        return ad.mean(ad.concat([ad.reshape(s, (1,)) for s in losses], axis=0))

    l2d_mask = scalar_mean(m2_losses)
    l3d_mask = scalar_mean(m3_losses)
    z2 = ad.concat(z2_rows, axis=0)
    z3 = ad.concat(z3_rows, axis=0)
    l_cl = infonce_loss(z2, z3, pcfg.tau)
    loss = l2d_mask * pcfg.lambda1 + l3d_mask * pcfg.lambda2 + l_cl * pcfg.lambda3
    telemetry = {
        "l2d_mask": float(l2d_mask.data),
        "l3d_mask": float(l3d_mask.data),
        "l_cl": float(l_cl.data),
        "mask_acc_2d": acc2 / max(n2, 1),
        "mask_acc_3d": acc3 / max(n3, 1),
        "retrieval_top1": retrieval_top1(z2.data, z3.data),
    }
    return loss, telemetry


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_MAGIC = b"GALCKPT1"
_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(path, store, config_snapshot):
    """Atomic write: magic, u32 header length, JSON header, raw LE payload."""
    tensors = {}
    blobs = []
    offset = 0

    def record(name, arr):
        nonlocal offset
        tag = "f64" if arr.dtype == np.float64 else "f32"
        raw = arr.astype(_DTYPE_TAGS[tag]).tobytes()
        tensors[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)

    for name, p in store.items():
        record(name, p.data)
        if store.has_moments(name):
            m, v = store.moments(name)
            record(f"opt.m.{name}", m)
            record(f"opt.v.{name}", v)

    header = dict(config_snapshot)
    header["version"] = 1
    header["step"] = store.step_count
    header["tensors"] = tensors
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (header dict, {tensor name -> numpy array})."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    arrays = {}
    for name, info in header["tensors"].items():
        np_dtype = np.dtype(_DTYPE_TAGS[info["dtype"]])
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        start = info["offset"]
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=start)
        arrays[name] = arr.reshape(info["shape"]).copy()
    return header, arrays


def init_pretrain_store(model_cfg, meta, seed, dtype=np.float32):
    store = ParamStore(seed=seed, dtype=dtype)
    init_feature_params(store, model_cfg, meta)
    init_encoding_params(store, model_cfg)
    init_model_params(store, model_cfg, meta)
    return store


def restore_store(store, arrays):
    """Overwrite parameter values (and Adam moments) from checkpoint arrays."""
    for name, p in store.items():
        if name in arrays:
            p.data = arrays[name].astype(store.dtype)
        m_key, v_key = f"opt.m.{name}", f"opt.v.{name}"
        if m_key in arrays:
            store.set_moments(name, arrays[m_key].astype(store.dtype), arrays[v_key].astype(store.dtype))


# ---------------------------------------------------------------------------
# training loop


def pretrain_loop(
    records,
    meta,
    model_cfg=None,
    pretrain_cfg=None,
    optim_kwargs=None,
    out_dir=None,
    threads=1,
    resume=None,
    cache_dir=None,
    dtype=np.float32,
):
    """Run the full self-supervised loop; returns (store, history, ckpt path).

    Deterministic for a fixed seed: epoch shuffles, mask plans, and dropout
    streams are pure functions of (seed, step), so a resumed run replays the
    exact step sequence of an uninterrupted one.
    """
    model_cfg = model_cfg or ModelConfig()
    pcfg = pretrain_cfg or PretrainConfig()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    batch_size = min(pcfg.batch_size, len(records))
    steps_per_epoch = max(1, len(records) // batch_size)
    total_steps = pcfg.epochs * steps_per_epoch
    okw = dict(optim_kwargs or {})
    okw.setdefault("total_steps", total_steps)
    opt_cfg = OptimizerConfig(**okw)

    store = init_pretrain_store(model_cfg, meta, pcfg.seed, dtype)
    start_step = 0
    if resume is not None:
        header, arrays = load_checkpoint(resume)
        restore_store(store, arrays)
        store.step_count = header["step"]
        start_step = header["step"]

    cache = EncodingCache(cache_dir) if cache_dir else None
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            prepared = list(pool.map(lambda rm: prepare_molecule(*rm, model_cfg, meta, cache), records))
    else:
        prepared = [prepare_molecule(m2, m3, model_cfg, meta, cache) for m2, m3 in records]

    config_snapshot = {
        "model": model_cfg.__dict__,
        "pretrain": pcfg.__dict__,
        "optim": opt_cfg.__dict__,
        "meta": meta.to_dict(),
    }

    metrics_fh = open(out_dir / "metrics.jsonl", "a") if out_dir else None
    history = []
    last_ckpt = None
    step = 0
    try:
        for epoch in range(pcfg.epochs):
            order = list(range(len(prepared)))
            random.Random(stable_seed(pcfg.seed, "shuffle", epoch)).shuffle(order)
            for b in range(steps_per_epoch):
                step += 1
                if step <= start_step:
                    continue
                batch = [prepared[i] for i in order[b * batch_size : (b + 1) * batch_size]]
                rng = random.Random(stable_seed(pcfg.seed, "step", step))
                nprng = np.random.default_rng(stable_seed(pcfg.seed, "dropout", step))
                loss, telemetry = combined_loss(batch, store, model_cfg, pcfg, meta, rng, nprng)
                if not np.isfinite(loss.data):
                    raise NonFiniteLoss([p.mol2d.id for p in batch])
                ad.backward(loss)
                lr = adam_step(store, opt_cfg, step)
                entry = {"step": step, "lr": lr, "loss": float(loss.data), **telemetry}
                history.append(entry)
                if metrics_fh and step % pcfg.log_every == 0:
                    metrics_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                    metrics_fh.flush()
                if out_dir and (step % pcfg.checkpoint_every == 0 or step == total_steps):
                    last_ckpt = out_dir / f"checkpoint_{step:06d}.ckpt"
                    save_checkpoint(last_ckpt, store, config_snapshot)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir and last_ckpt is None:
        last_ckpt = out_dir / f"checkpoint_{step:06d}.ckpt"
        save_checkpoint(last_ckpt, store, config_snapshot)
    return store, history, last_ckpt
