"""Structural encodings: eigenvector PE, shortest paths, attention biases.

All quantities here are computed once per molecule from the line-graph
structure. The eigenvector PE and the three bias terms (path length, path
node, geometric angle) feed the transformer as position information and
additive attention-logit biases.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import EigenNoConvergence

UNREACHABLE = -1


# ---------------------------------------------------------------------------
# eigen decomposition (cyclic Jacobi, dense symmetric)


def _off_norm(a):
    lower = np.tril(a, -1)
    return np.sqrt(2.0 * (lower * lower).sum())


def jacobi_eigh(matrix, tol=1e-13, max_sweeps=100):
    """Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.

    Cyclic-by-row Jacobi rotations; adequate for the dense, few-hundred-node
    matrices this package produces.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy(), np.ones((1, 1))
    v = np.eye(n)
    scale = max(1.0, np.abs(a).max())
    for _ in range(max_sweeps):
        if _off_norm(a) <= tol * scale * n:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                col_p = v[:, p].copy()
                col_q = v[:, q].copy()
                v[:, p] = c * col_p - s * col_q
                v[:, q] = s * col_p + c * col_q
    else:
        raise EigenNoConvergence(f"Jacobi sweeps exhausted (n={n})")
    order = np.argsort(a.diagonal(), kind="stable")
    return a.diagonal()[order].copy(), v[:, order]


def normalized_laplacian(lg):
    """I - D^{-1/2} A D^{-1/2} over real line nodes (zero rows for isolated)."""
    n = lg.n_real
    adj = np.zeros((n, n))
    for i, j, _ in lg.adjacency:
        adj[i, j] = adj[j, i] = 1.0
    deg = adj.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    lap = -adj * np.outer(inv_sqrt, inv_sqrt)
    lap[np.arange(n), np.arange(n)] = (deg > 0).astype(float)
    return lap


def normalized_laplacian_eigenvectors(lg, k):
    """[n_real, k] matrix of the k smallest non-trivial eigenvectors.

    Trivial (zero) eigenvalues are skipped; each kept eigenvector has its
    largest-magnitude component made positive; missing columns are zero.
    """
    n = lg.n_real
    out = np.zeros((n, k))
    if n == 0:
        return out
    vals, vecs = jacobi_eigh(normalized_laplacian(lg))
    nontrivial = [i for i, lam in enumerate(vals) if lam > 1e-8]
    for col, src in enumerate(nontrivial[:k]):
        q = vecs[:, src].copy()
        peak = int(np.argmax(np.abs(q)))
        if q[peak] < 0:
            q = -q
        out[:, col] = q
    return out


# ---------------------------------------------------------------------------
# all-pairs shortest paths


@dataclass
class ShortestPathTable:
    """Lengths plus one canonical shortest path (nodes and edges) per pair.

    Index n_real is the virtual node: distance 1 to every real node, and it
    never appears as an intermediate on a real-pair path. Edge ids < n_edges
    are real line edges; id n_edges + r is the virtual edge to real node r.
    """

    length: np.ndarray   # [(n+1), (n+1)] int32, UNREACHABLE = -1
    node_seq: list       # node_seq[i][j] = ordered nodes i..j (empty if unreachable)
    edge_seq: list
    n_real: int
    n_edges: int

    @property
    def n_total(self):
        return self.n_real + 1


def all_pairs_shortest_paths(lg):
    """Unweighted BFS table with deterministic lexicographic tie-breaking.

    Among equal-length paths the node-index sequence that is lexicographically
    smallest is kept, obtained by greedily walking to the smallest-index
    neighbor that stays on a shortest path.
    """
    n = lg.n_real
    vn = n
    adj = lg.neighbors()
    edge_id = {}
    for eid, (i, j, _) in enumerate(lg.adjacency):
        edge_id[(i, j)] = edge_id[(j, i)] = eid

    dist = np.full((n, n), UNREACHABLE, dtype=np.int32)
    for src in range(n):
        dist[src, src] = 0
        frontier = [src]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for node in frontier:
                for nb in adj[node]:
                    if dist[src, nb] == UNREACHABLE and nb != src:
                        dist[src, nb] = d
                        nxt.append(nb)
            frontier = nxt

    total = n + 1
    length = np.full((total, total), UNREACHABLE, dtype=np.int32)
    length[:n, :n] = dist
    length[vn, vn] = 0
    for r in range(n):
        length[r, vn] = length[vn, r] = 1

    node_seq = [[[] for _ in range(total)] for _ in range(total)]
    edge_seq = [[[] for _ in range(total)] for _ in range(total)]
    for i in range(n):
        node_seq[i][i] = [i]
        for j in range(n):
            if i == j or dist[i, j] == UNREACHABLE:
                continue
            seq = [i]
            cur = i
            while cur != j:
                cur = min(nb for nb in adj[cur] if dist[nb, j] == dist[cur, j] - 1)
                seq.append(cur)
            node_seq[i][j] = seq
            edge_seq[i][j] = [edge_id[(seq[t], seq[t + 1])] for t in range(len(seq) - 1)]

    node_seq[vn][vn] = [vn]
    n_edges = len(lg.adjacency)
    for r in range(n):
        node_seq[r][vn] = [r, vn]
        node_seq[vn][r] = [vn, r]
        edge_seq[r][vn] = [n_edges + r]
        edge_seq[vn][r] = [n_edges + r]
    return ShortestPathTable(length, node_seq, edge_seq, n, n_edges)


# ---------------------------------------------------------------------------
# gather plans: flatten per-pair path walks into vectorized index arrays


def _length_index_plan(spt, l_max):
    idx = np.minimum(np.maximum(spt.length, 0), l_max)
    idx[spt.length == UNREACHABLE] = l_max + 1
    return idx.reshape(-1).astype(np.int64)


def _path_node_plan(spt, l_max):
    src, seg, weight = [], [], []
    total = spt.n_total
    for i in range(total):
        row = spt.node_seq[i]
        for j in range(total):
            seq = row[j]
            if not seq:
                continue
            n_ij = len(seq)
            for pos, node in enumerate(seq, start=1):
                src.append(node * l_max + min(pos, l_max) - 1)
                seg.append(i * total + j)
                weight.append(1.0 / n_ij)
    return (
        np.asarray(src, dtype=np.int64),
        np.asarray(seg, dtype=np.int64),
        np.asarray(weight),
    )


def _path_edge_plan(spt, l_max):
    src, seg, weight = [], [], []
    total = spt.n_total
    for i in range(total):
        row = spt.edge_seq[i]
        for j in range(total):
            edges = row[j]
            if i == j or not edges:
                continue
            n_edges_on_path = len(edges)
            for pos, eid in enumerate(edges, start=1):
                row_id = min(eid, spt.n_edges)  # all virtual edges share one feature row
                src.append(row_id * l_max + min(pos, l_max) - 1)
                seg.append(i * total + j)
                weight.append(1.0 / n_edges_on_path)
    return (
        np.asarray(src, dtype=np.int64),
        np.asarray(seg, dtype=np.int64),
        np.asarray(weight),
    )


# ---------------------------------------------------------------------------
# learnable encoding parameters and the three biases


def init_encoding_params(store, cfg):
    store.create("enc2d.W_v", (cfg.hidden, cfg.K))
    path_len = store.create("enc2d.path_len", (cfg.heads, cfg.L_max + 2, cfg.p), scheme=("normal", 0.02))
    w_p = store.create("enc2d.w_p", (cfg.heads, cfg.p), scheme=("normal", 0.02))
    # locality prior: start with b_ij ~= -slope_h * distance (per-head slopes,
    # unreachable treated as beyond L_max) so attention is structure-aware
    # from the first step; everything stays fully learnable
    ramp = np.arange(cfg.L_max + 2, dtype=store.dtype)
    path_len.data[:, :, 0] = ramp
    w_p.data[:, 0] = [-0.5 * 2.0**-h for h in range(cfg.heads)]
    store.create("enc2d.w_n", (cfg.heads, cfg.L_max, cfg.hidden), scheme=("normal", 0.02))
    store.create("enc3d.w_m", (cfg.heads, cfg.L_max, cfg.theta_e_hat), scheme=("normal", 0.02))


def path_length_bias(spt, store, cfg, head, plan=None):
    """b[i][j] = <embedding(path length), w_p> per head."""
    idx = plan if plan is not None else _length_index_plan(spt, cfg.L_max)
    total = spt.n_total
    table = ad.slice_(store["enc2d.path_len"], (head,))
    w_p = ad.slice_(store["enc2d.w_p"], (head,))
    flat = ad.matmul(ad.take_rows(table, idx), w_p)
    return ad.reshape(flat, (total, total))


def path_node_bias(spt, x, store, cfg, head, plan=None):
    """c[i][j] = mean over path nodes of <x_node, w_position> per head."""
    src, seg, weight = plan if plan is not None else _path_node_plan(spt, cfg.L_max)
    total = spt.n_total
    w_n = ad.slice_(store["enc2d.w_n"], (head,))        # [L_max, hidden]
    dots = ad.matmul(x, ad.transpose(w_n))              # [n+1, L_max]
    flat = ad.reshape(dots, (spt.n_total * cfg.L_max,))
    vals = ad.take_rows(flat, src) * ad.constant_like(weight, x)
    return ad.reshape(ad.segment_sum(vals, seg, total * total), (total, total))


def angle_bias(spt, edge_feats, virtual_edge, store, cfg, head, plan=None):
    """g[i][j] = mean over path edges of <edge feature, w_position> per head."""
    src, seg, weight = plan if plan is not None else _path_edge_plan(spt, cfg.L_max)
    total = spt.n_total
    all_edges = ad.concat(
        [edge_feats, ad.reshape(virtual_edge, (1, cfg.theta_e_hat))], axis=0
    )
    w_m = ad.slice_(store["enc3d.w_m"], (head,))        # [L_max, theta_e_hat]
    dots = ad.matmul(all_edges, ad.transpose(w_m))      # [n_edges+1, L_max]
    flat = ad.reshape(dots, ((spt.n_edges + 1) * cfg.L_max,))
    vals = ad.take_rows(flat, src) * ad.constant_like(weight, edge_feats)
    return ad.reshape(ad.segment_sum(vals, seg, total * total), (total, total))


@dataclass
class GraphStructure:
    """Cacheable, parameter-independent structural data for one molecule."""

    spt: ShortestPathTable
    eigvecs: np.ndarray
    plans: dict = field(default_factory=dict)

    def plan(self, name, l_max, builder, spt=None):
        key = (name, l_max)
        if key not in self.plans:
            self.plans[key] = builder(self.spt, l_max)
        return self.plans[key]


def compute_structure(lg, cfg):
    return GraphStructure(
        spt=all_pairs_shortest_paths(lg),
        eigvecs=normalized_laplacian_eigenvectors(lg, cfg.K),
    )


@dataclass
class EncodedGraph:
    """Position-aware node inputs plus per-head attention bias matrices."""

    lg: object
    x: object                    # Tensor [n+1, hidden]
    bias_b: list | None = None   # per-head Tensors [n+1, n+1] (2D)
    bias_c: list | None = None   # (2D)
    bias_g: list | None = None   # (3D)
    structure: GraphStructure | None = None

    def attention_bias(self, head):
        if self.lg.modality == "2d":
            return self.bias_b[head] + self.bias_c[head]
        return self.bias_g[head]


def encode_graph(lg, store, cfg, structure=None):
    """Build the EncodedGraph for a feature-filled line graph.

    2D: x = node features + projected eigenvector PE (virtual node gets zero
    PE); biases b (path length) and c (path nodes). 3D: x = node features
    unchanged; bias g (path angles).
    """
    if structure is None:
        structure = compute_structure(lg, cfg)
    spt = structure.spt

    if lg.modality == "2d":
        vecs = ad.Tensor(structure.eigvecs.astype(store.dtype))
        pe_real = ad.matmul(vecs, ad.transpose(store["enc2d.W_v"]))
        zero_row = ad.Tensor(np.zeros((1, cfg.hidden), dtype=store.dtype))
        x = lg.node_input + ad.concat([pe_real, zero_row], axis=0)
        b_plan = structure.plan("b", cfg.L_max, _length_index_plan)
        c_plan = structure.plan("c", cfg.L_max, _path_node_plan)
        bias_b = [path_length_bias(spt, store, cfg, h, b_plan) for h in range(cfg.heads)]
        bias_c = [path_node_bias(spt, x, store, cfg, h, c_plan) for h in range(cfg.heads)]
        return EncodedGraph(lg, x, bias_b=bias_b, bias_c=bias_c, structure=structure)

    x = lg.node_input
    g_plan = structure.plan("g", cfg.L_max, _path_edge_plan)
    bias_g = [
        angle_bias(spt, lg.edge_angle_feat, store["feat3d.virtual_edge"], store, cfg, h, g_plan)
        for h in range(cfg.heads)
    ]
    return EncodedGraph(lg, x, bias_g=bias_g, structure=structure)


# ---------------------------------------------------------------------------
# optional on-disk structure cache

_CACHE_MAGIC = b"LGSC0001"


def structure_cache_key(record_dict, k, l_max):
    payload = json.dumps(
        {"record": record_dict, "K": k, "L_max": l_max},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _write_ragged(fh, table):
    for row in table:
        for seq in row:
            fh.write(struct.pack("<I", len(seq)))
            fh.write(np.asarray(seq, dtype="<i4").tobytes())


def _read_ragged(fh, total):
    table = []
    for _ in range(total):
        row = []
        for _ in range(total):
            (count,) = struct.unpack("<I", fh.read(4))
            seq = np.frombuffer(fh.read(4 * count), dtype="<i4").tolist()
            row.append(seq)
        table.append(row)
    return table


def save_structure_blob(path, structure):
    spt = structure.spt
    total = spt.n_total
    k = structure.eigvecs.shape[1]
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", total, k, spt.n_edges))
        fh.write(spt.length.astype("<i4").tobytes())
        fh.write(structure.eigvecs.astype("<f4").tobytes())
        _write_ragged(fh, spt.node_seq)
        _write_ragged(fh, spt.edge_seq)


def load_structure_blob(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a structure cache blob")
        total, k, n_edges = struct.unpack("<III", fh.read(12))
        n_real = total - 1
        length = np.frombuffer(fh.read(4 * total * total), dtype="<i4").reshape(total, total)
        eig = np.frombuffer(fh.read(4 * n_real * k), dtype="<f4").reshape(n_real, k)
        node_seq = _read_ragged(fh, total)
        edge_seq = _read_ragged(fh, total)
    spt = ShortestPathTable(length.astype(np.int32), node_seq, edge_seq, n_real, n_edges)
    return GraphStructure(spt=spt, eigvecs=eig.astype(np.float64))


class EncodingCache:
    """Content-addressed directory of per-molecule structure blobs."""

    def __init__(self, directory):
        from pathlib import Path

        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, key):
        return self.dir / f"{key}.lgsc"

    def get(self, key):
        p = self.path_for(key)
        return load_structure_blob(p) if p.exists() else None

    def put(self, key, structure):
        save_structure_blob(self.path_for(key), structure)
