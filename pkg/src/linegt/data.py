"""Molecular graph records: JSONL parsing, validation, geometry, toy corpora.

The on-disk dataset format is one JSON object per line:

    {"id": "...",
     "atoms": [{"t": int, "f": [float x theta_v]}, ...],
     "bonds": [{"u": int, "v": int, "t": int, "f": [float x theta_e]}, ...],
     "coords": [[x, y, z], ...],        # optional 3D conformer
     "labels": [float | null, ...]}     # optional downstream tasks

with a sidecar `<name>.meta.json` describing feature widths and vocabularies.
"""

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    DegenerateGeometry,
    IndexOutOfRange,
    MalformedRecord,
    MissingConformer,
)

MIN_ARM_LENGTH = 1e-9


@dataclass(eq=False)
class Bond:
    u: int
    v: int
    bond_type: int
    feats: np.ndarray

    def __eq__(self, other):
        return (
            self.u == other.u
            and self.v == other.v
            and self.bond_type == other.bond_type
            and np.array_equal(self.feats, other.feats)
        )


@dataclass(eq=False)
class MolGraph2D:
    """Topological graph: per-atom attribute rows plus typed, featured bonds."""

    id: str
    atom_feats: np.ndarray  # [n_atoms, theta_v]
    atom_types: list
    bonds: list  # of Bond
    labels: list | None = None

    @property
    def n_atoms(self):
        return len(self.atom_types)

    def __eq__(self, other):
        return (
            self.id == other.id
            and np.array_equal(self.atom_feats, other.atom_feats)
            and self.atom_types == other.atom_types
            and self.bonds == other.bonds
            and self.labels == other.labels
        )


@dataclass(eq=False)
class MolGraph3D:
    """Geometric graph: one conformer's coordinates over the same connectivity."""

    id: str
    atom_types: list
    coords: np.ndarray  # [n_atoms, 3]
    bonds: list  # of (u, v)

    def __eq__(self, other):
        return (
            self.id == other.id
            and self.atom_types == other.atom_types
            and np.array_equal(self.coords, other.coords)
            and self.bonds == other.bonds
        )


@dataclass
class DatasetMeta:
    theta_v: int
    theta_e: int
    theta_t: int
    atom_vocab: list = field(default_factory=list)
    bond_vocab: list = field(default_factory=list)
    task_count: int = 0
    task_kind: str = "classification"

    def __post_init__(self):
        if not self.atom_vocab:
            self.atom_vocab = [f"a{i}" for i in range(self.theta_t)]
        if not self.bond_vocab:
            self.bond_vocab = [f"b{i}" for i in range(self.theta_e)]

    @property
    def n_bond_types(self):
        return len(self.bond_vocab)

    def to_dict(self):
        return {
            "theta_v": self.theta_v,
            "theta_e": self.theta_e,
            "theta_t": self.theta_t,
            "atom_vocab": self.atom_vocab,
            "bond_vocab": self.bond_vocab,
            "tasks": self.task_count,
            "task_kind": self.task_kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            theta_v=d["theta_v"],
            theta_e=d["theta_e"],
            theta_t=d["theta_t"],
            atom_vocab=d.get("atom_vocab", []),
            bond_vocab=d.get("bond_vocab", []),
            task_count=d.get("tasks", 0),
            task_kind=d.get("task_kind", "classification"),
        )


def meta_path(dataset_path):
    p = Path(dataset_path)
    return p.with_name(p.stem + ".meta.json")


# ---------------------------------------------------------------------------
# geometry


def pair_distance(coords, u, v):
    """Euclidean distance between atoms u and v, in the coords' units."""
    if u == v:
        raise IndexOutOfRange(f"pair_distance needs distinct atoms, got u=v={u}")
    d = float(np.linalg.norm(np.asarray(coords[u], dtype=np.float64) - coords[v]))
    if d < MIN_ARM_LENGTH:
        raise DegenerateGeometry(f"atoms {u},{v} coincide (distance {d:g})")
    return d


def bond_angle(coords, u, v, w):
    """Angle at atom v between arms (u-v) and (w-v), in [0, pi].

    Uses atan2 of |cross| / dot so values stay stable near 0 and pi.
    """
    c = np.asarray(coords, dtype=np.float64)
    a = c[u] - c[v]
    b = c[w] - c[v]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < MIN_ARM_LENGTH or nb < MIN_ARM_LENGTH:
        raise DegenerateGeometry(f"zero-length arm at angle ({u},{v},{w})")
    cross = np.linalg.norm(np.cross(a, b))
    return math.atan2(cross, float(np.dot(a, b)))


# ---------------------------------------------------------------------------
# parsing


def _check(cond, line_no, reason):
    if not cond:
        raise MalformedRecord(line_no, reason)


def _parse_record(obj, line_no, meta, expect_3d):
    _check(isinstance(obj, dict), line_no, "record is not a JSON object")
    _check(isinstance(obj.get("id"), str) and obj["id"], line_no, "missing id")
    atoms = obj.get("atoms")
    _check(isinstance(atoms, list) and len(atoms) >= 1, line_no, "missing atoms")
    n = len(atoms)

    atom_types = []
    feats = []
    for a in atoms:
        _check(isinstance(a, dict) and "t" in a and "f" in a, line_no, "bad atom entry")
        t = a["t"]
        _check(isinstance(t, int) and 0 <= t < meta.theta_t, line_no, f"atom type {t} outside vocabulary")
        f = a["f"]
        _check(isinstance(f, list) and len(f) == meta.theta_v, line_no, f"atom feature width != {meta.theta_v}")
        atom_types.append(t)
        feats.append(f)
    atom_feats = np.asarray(feats, dtype=np.float32)
    _check(bool(np.isfinite(atom_feats).all()), line_no, "non-finite atom features")

    bonds_raw = obj.get("bonds")
    _check(isinstance(bonds_raw, list), line_no, "missing bonds")
    bonds = []
    seen_pairs = set()
    for b in bonds_raw:
        _check(isinstance(b, dict) and {"u", "v", "t", "f"} <= set(b), line_no, "bad bond entry")
        u, v, bt = b["u"], b["v"], b["t"]
        if not (isinstance(u, int) and isinstance(v, int) and 0 <= u < n and 0 <= v < n and u != v):
            raise IndexOutOfRange(f"line {line_no}: bond endpoints ({u},{v}) invalid for {n} atoms")
        key = (min(u, v), max(u, v))
        _check(key not in seen_pairs, line_no, f"duplicate bond {key}")
        seen_pairs.add(key)
        _check(isinstance(bt, int) and 0 <= bt < meta.n_bond_types, line_no, f"bond type {bt} outside vocabulary")
        f = b["f"]
        _check(isinstance(f, list) and len(f) == meta.theta_e, line_no, f"bond feature width != {meta.theta_e}")
        bonds.append(Bond(u, v, bt, np.asarray(f, dtype=np.float32)))

    labels = obj.get("labels")
    if labels is not None:
        _check(isinstance(labels, list), line_no, "labels must be a list")
        if meta.task_count:
            _check(len(labels) == meta.task_count, line_no, f"label count != {meta.task_count}")
        labels = [None if x is None else float(x) for x in labels]

    mol2d = MolGraph2D(obj["id"], atom_feats, atom_types, bonds, labels)

    coords_raw = obj.get("coords")
    if coords_raw is None:
        if expect_3d:
            raise MissingConformer(f"line {line_no}: record {obj['id']} has no coords")
        return mol2d, None
    _check(isinstance(coords_raw, list) and len(coords_raw) == n, line_no, "coords length != atom count")
    coords = np.asarray(coords_raw, dtype=np.float32)
    _check(coords.shape == (n, 3), line_no, "coords rows must be [x, y, z]")
    _check(bool(np.isfinite(coords).all()), line_no, "non-finite coordinates")
    mol3d = MolGraph3D(obj["id"], list(atom_types), coords, [(b.u, b.v) for b in bonds])
    return mol2d, mol3d


def _infer_meta(path):
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}")
            atoms = obj.get("atoms") or []
            bonds = obj.get("bonds") or []
            theta_v = len(atoms[0]["f"]) if atoms else 0
            theta_e = len(bonds[0]["f"]) if bonds else 0
            theta_t = max((a["t"] for a in atoms), default=0) + 1
            labels = obj.get("labels")
            return DatasetMeta(
                theta_v=theta_v,
                theta_e=theta_e,
                theta_t=max(theta_t, 1),
                task_count=len(labels) if labels else 0,
            )
    raise MalformedRecord(0, "empty dataset file")


def parse_dataset(path, expect_3d=False, meta=None):
    """Read and validate a JSONL dataset.

    Returns (records, meta) with records = list of (MolGraph2D, MolGraph3D | None).
    The sidecar meta file is used when present, otherwise widths and vocab
    sizes are inferred from the first record and validated against the rest.
    """
    path = Path(path)
    if meta is None:
        mp = meta_path(path)
        if mp.exists():
            meta = DatasetMeta.from_dict(json.loads(mp.read_text()))
        else:
            meta = _infer_meta(path)

    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}")
            records.append(_parse_record(obj, line_no, meta, expect_3d))
    return records, meta


def record_to_dict(mol2d, mol3d=None):
    obj = {
        "id": mol2d.id,
        "atoms": [
            {"t": int(t), "f": [float(x) for x in row]}
            for t, row in zip(mol2d.atom_types, mol2d.atom_feats)
        ],
        "bonds": [
            {"u": b.u, "v": b.v, "t": b.bond_type, "f": [float(x) for x in b.feats]}
            for b in mol2d.bonds
        ],
    }
    if mol3d is not None:
        obj["coords"] = [[float(x) for x in row] for row in mol3d.coords]
    if mol2d.labels is not None:
        obj["labels"] = mol2d.labels
    return obj


def serialize_dataset(records, meta, path):
    """Write records as JSONL plus the sidecar meta file."""
    path = Path(path)
    with open(path, "w") as fh:
        for mol2d, mol3d in records:
            fh.write(json.dumps(record_to_dict(mol2d, mol3d), separators=(",", ":")))
            fh.write("\n")
    meta_path(path).write_text(json.dumps(meta.to_dict(), separators=(",", ":")))


# ---------------------------------------------------------------------------
# toy corpus


def _random_unit(rng):
    while True:
        v = np.array([rng.gauss(0, 1) for _ in range(3)])
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def _has_cycle(n_atoms, bonds):
    return len(bonds) >= n_atoms


def _toy_labels(n_atoms, bonds, tasks, task_kind):
    if tasks <= 0:
        return None
    n_bonds = len(bonds)
    labels = []
    for j in range(tasks):
        if task_kind == "classification":
            if j == 0:
                y = 1.0 if _has_cycle(n_atoms, bonds) else 0.0
            elif j == 1:
                y = 1.0 if n_atoms >= 8 else 0.0
            else:
                y = float((n_atoms + j * n_bonds) % 2)
        else:
            if j == 0:
                y = n_atoms / 12.0
            elif j == 1:
                y = n_bonds / n_atoms
            else:
                y = ((n_atoms * (j + 2)) % 7) / 7.0
        labels.append(float(np.float32(y)))
    return labels


def generate_toy_corpus(
    n,
    seed,
    kind="mixed",
    tasks=0,
    task_kind="classification",
    theta_v=16,
    theta_e=4,
    theta_t=8,
):
    """Generate `n` connected synthetic molecules with 3D conformers.

    kind: "trees" (acyclic), "rings" (always contains a cycle), or "mixed".
    Coordinates come from a deterministic embedding with bond lengths in
    [1.0, 1.8]; everything is reproducible from `seed` alone.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("trees", "rings", "mixed"):
        raise ValueError(f"unknown kind: {kind}")
    rng = random.Random(seed)
    meta = DatasetMeta(
        theta_v=theta_v,
        theta_e=theta_e,
        theta_t=theta_t,
        task_count=tasks,
        task_kind=task_kind,
    )
    records = []
    for i in range(n):
        this_kind = kind if kind != "mixed" else ("trees" if rng.random() < 0.5 else "rings")
        n_atoms = rng.randint(3, 12)
        coords = np.zeros((n_atoms, 3))
        bonds = []

        if this_kind == "trees":
            for a in range(1, n_atoms):
                parent = rng.randrange(a)
                bonds.append((parent, a))
                coords[a] = coords[parent] + _random_unit(rng) * rng.uniform(1.0, 1.8)
        else:
            k = rng.randint(3, n_atoms)
            side = rng.uniform(1.0, 1.8)
            radius = side / (2.0 * math.sin(math.pi / k))
            phase = rng.uniform(0.0, 2.0 * math.pi)
            for a in range(k):
                ang = phase + 2.0 * math.pi * a / k
                coords[a] = (radius * math.cos(ang), radius * math.sin(ang), 0.0)
                bonds.append((a, (a + 1) % k))
            for a in range(k, n_atoms):
                parent = rng.randrange(a)
                bonds.append((parent, a))
                coords[a] = coords[parent] + _random_unit(rng) * rng.uniform(1.0, 1.8)

        atom_types = [rng.randrange(theta_t) for _ in range(n_atoms)]
        atom_feats = np.zeros((n_atoms, theta_v), dtype=np.float32)
        for a, t in enumerate(atom_types):
            atom_feats[a, t % theta_v] = 1.0
            for col in range(theta_t, theta_v):
                atom_feats[a, col] = np.float32(rng.uniform(-1.0, 1.0))

        bond_objs = []
        for u, v in bonds:
            bt = rng.randrange(meta.n_bond_types)
            bf = np.zeros(theta_e, dtype=np.float32)
            bf[bt % theta_e] = 1.0
            bond_objs.append(Bond(u, v, bt, bf))

        mol_id = f"toy{seed}-{i:04d}"
        labels = _toy_labels(n_atoms, bonds, tasks, task_kind)
        mol2d = MolGraph2D(mol_id, atom_feats, atom_types, bond_objs, labels)
        mol3d = MolGraph3D(mol_id, list(atom_types), coords.astype(np.float32), bonds)
        records.append((mol2d, mol3d))
    return records, meta
