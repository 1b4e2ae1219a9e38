"""Downstream adaptation of the pre-trained 2D encoder.

Only the 2D pathway exists here: 3D inputs and 3D parameters are never
loaded, so fine-tuning cannot touch them. A seeded random split stands in
for chemistry-aware scaffold splitting; the splitter is pluggable via the
`splitter` argument of `finetune_run`.
"""

import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import FinetuneConfig, ModelConfig
from .data import DatasetMeta
from .encodings import compute_structure, encode_graph, init_encoding_params
from .exceptions import AllLabelsMissing, DatasetTooSmall
from .linegraph import build_2d_features, init_feature_params, to_line_graph
from .model import downstream_representation, encoder_forward, init_model_params, init_prediction_head, prediction_head
from .metrics import score_tasks
from .optim import OptimizerConfig, ParamStore, adam_step
from .pretrain import load_checkpoint, restore_store, stable_seed

_2D_PREFIXES = ("feat2d.", "enc2d.", "tf2d.")


def _split_sizes(n, ratios):
    """Largest-remainder apportionment of n items into len(ratios) buckets."""
    exact = [n * r for r in ratios]
    sizes = [int(x) for x in exact]
    remainders = [x - s for x, s in zip(exact, sizes)]
    short = n - sum(sizes)
    for idx in sorted(range(len(ratios)), key=lambda i: -remainders[i])[:short]:
        sizes[idx] += 1
    return sizes


def split_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Deterministic shuffled partition into train/valid/test by molecule id."""
    if len(records) < 10:
        raise DatasetTooSmall(f"need >= 10 molecules, got {len(records)}")
    ids = [rec[0].id if isinstance(rec, tuple) else rec.id for rec in records]
    order = list(range(len(ids)))
    random.Random(seed).shuffle(order)
    n_train, n_valid, _ = _split_sizes(len(ids), ratios)
    assignment = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            assignment[ids[idx]] = "train"
        elif pos < n_train + n_valid:
            assignment[ids[idx]] = "valid"
        else:
            assignment[ids[idx]] = "test"
    return assignment


def labels_matrix(mols):
    """[n, tasks] float array with NaN for missing, plus the 0/1 mask."""
    tasks = len(mols[0].labels)
    y = np.full((len(mols), tasks), np.nan)
    for i, mol in enumerate(mols):
        for t, v in enumerate(mol.labels):
            if v is not None:
                y[i, t] = v
    return y, np.isfinite(y)


def finetune_loss(logits, labels, mask, kind):
    """BCE (classification) or RMSE (regression) over observed entries."""
    if not mask.any():
        raise AllLabelsMissing("batch has no observed labels")
    if kind == "classification":
        y = np.where(mask, labels, 0.0)
        return ad.bce_with_logits(logits, y, mask.astype(float))
    y = ad.constant_like(np.where(mask, labels, 0.0), logits)
    m = ad.constant_like(mask.astype(float), logits)
    diff = (logits - y) * m
    count = float(mask.sum())
    return ad.sqrt(ad.sum_(diff * diff) * (1.0 / count))


@dataclass
class FinetunePrepared:
    mol: object
    lg: object
    structure: object


def prepare_2d(mol, cfg, meta=None):
    lg = to_line_graph(mol, meta.theta_t if meta is not None else None)
    return FinetunePrepared(mol, lg, compute_structure(lg, cfg))


def build_finetune_store(checkpoint, model_cfg, meta, tasks, seed=0, freeze_encoder=False, dtype=np.float32):
    """Fresh store holding the 2D encoder (optionally restored) plus a new head."""
    store = ParamStore(seed=seed, dtype=dtype)
    init_feature_params(store, model_cfg, meta)
    init_encoding_params(store, model_cfg)
    init_model_params(store, model_cfg, meta)
    init_prediction_head(store, model_cfg, tasks)
    if checkpoint is not None:
        _, arrays = load_checkpoint(checkpoint)
        restore_store(store, {k: v for k, v in arrays.items() if k.startswith(_2D_PREFIXES)})
    if freeze_encoder:
        for name, p in store.items():
            if not name.startswith("pred."):
                p.requires_grad = False
    return store


def predict_logits(prepared, store, cfg, meta):
    reps = []
    for prep in prepared:
        build_2d_features(prep.mol, prep.lg, store, cfg, meta)
        enc = encode_graph(prep.lg, store, cfg, prep.structure)
        out = encoder_forward(enc, store, cfg)
        reps.append(ad.reshape(downstream_representation(out), (1, 2 * cfg.hidden)))
    return prediction_head(ad.concat(reps, axis=0), store)


def _epoch_metric(prepared, mols, store, cfg, meta, kind):
    logits = predict_logits(prepared, store, cfg, meta).data
    scores = 1.0 / (1.0 + np.exp(-logits)) if kind == "classification" else logits
    return score_tasks(scores, [m.labels for m in mols], kind).aggregate


def finetune_single(
    train,
    valid,
    test,
    store,
    model_cfg,
    meta,
    lr,
    weight_decay,
    epochs,
    batch_size,
    seed=0,
):
    """Train one grid point; returns validation curve, best epoch, test curve.

    The optimizer runs at constant lr (no warmup, no decay); validation ties
    break toward the earliest epoch.
    """
    kind = meta.task_kind
    steps_per_epoch = max(1, (len(train) + batch_size - 1) // batch_size)
    opt_cfg = OptimizerConfig(
        peak_lr=lr,
        weight_decay=weight_decay,
        warmup_frac=0.0,
        total_steps=epochs * steps_per_epoch,
        poly_power=0.0,
    )
    train_mols = [p.mol for p in train]
    y_all, mask_all = labels_matrix(train_mols)
    val_curve, test_curve = [], []
    step = 0
    for epoch in range(epochs):
        order = list(range(len(train)))
        random.Random(stable_seed(seed, "ft-epoch", epoch)).shuffle(order)
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            if not idx:
                continue
            step += 1
            logits = predict_logits([train[i] for i in idx], store, model_cfg, meta)
            loss = finetune_loss(logits, y_all[idx], mask_all[idx], kind)
            ad.backward(loss)
            adam_step(store, opt_cfg, step)
        val_curve.append(_epoch_metric(valid, [p.mol for p in valid], store, model_cfg, meta, kind))
        test_curve.append(_epoch_metric(test, [p.mol for p in test], store, model_cfg, meta, kind))
    curve = np.asarray(val_curve)
    best_epoch = int(np.argmax(curve)) if kind == "classification" else int(np.argmin(curve))
    return {
        "lr": lr,
        "weight_decay": weight_decay,
        "val_curve": val_curve,
        "test_curve": test_curve,
        "best_epoch": best_epoch,
        "best_val": val_curve[best_epoch],
        "test_metric": test_curve[best_epoch],
    }


def finetune_run(
    checkpoint,
    records,
    meta,
    ft_cfg=None,
    model_cfg=None,
    out_dir=None,
    splitter=split_dataset,
    dtype=np.float32,
):
    """Full protocol: per seed, grid-search lr x weight decay, select the grid
    point with the best validation score, and report its test metric; then
    aggregate mean/std across seeds."""
    ft_cfg = ft_cfg or FinetuneConfig()
    if model_cfg is None:
        if checkpoint is not None:
            header, _ = load_checkpoint(checkpoint)
            model_cfg = ModelConfig(**header["model"])
            meta = meta or DatasetMeta.from_dict(header["meta"])
        else:
            model_cfg = ModelConfig()
    kind = meta.task_kind
    tasks = meta.task_count
    prepared = {rec.id: prepare_2d(rec, model_cfg, meta) for rec in records}

    runs = []
    per_seed_best = []
    for seed in ft_cfg.seeds:
        assignment = splitter(records, ft_cfg.split_ratios, seed)
        groups = {"train": [], "valid": [], "test": []}
        for rec in records:
            groups[assignment[rec.id]].append(prepared[rec.id])
        seed_runs = []
        for lr in ft_cfg.lr_grid:
            for wd in ft_cfg.weight_decay_grid:
                store = build_finetune_store(
                    checkpoint, model_cfg, meta, tasks, seed=seed,
                    freeze_encoder=ft_cfg.freeze_encoder, dtype=dtype,
                )
                result = finetune_single(
                    groups["train"], groups["valid"], groups["test"],
                    store, model_cfg, meta,
                    lr, wd, ft_cfg.epochs, ft_cfg.batch_size, seed=seed,
                )
                result["seed"] = seed
                seed_runs.append(result)
        best = (max if kind == "classification" else min)(seed_runs, key=lambda r: r["best_val"])
        per_seed_best.append(best)
        runs.extend(seed_runs)

    tests = [r["test_metric"] for r in per_seed_best]
    results = {
        "task_kind": kind,
        "runs": runs,
        "per_seed_best": per_seed_best,
        "aggregate": {"mean": float(np.mean(tests)), "std": float(np.std(tests))},
    }
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.json").write_text(json.dumps(results, indent=2))
    return results
