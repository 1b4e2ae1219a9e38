"""Line-graph transformation and initial line-node / line-edge features.

A line graph has one node per source bond; two line nodes are adjacent iff
their bonds share exactly one atom, and that shared atom determines the
geometric angle attached to the line edge. A virtual node (index n_real) is
connected to every real line node and carries the graph-level state.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import MolGraph2D, bond_angle, pair_distance
from .exceptions import DimensionMismatch, EmptyLineGraph

_SQRT_2PI = math.sqrt(2.0 * math.pi)
SIGMA_FLOOR = 1e-3


def pair_class_count(theta_t):
    return theta_t * (theta_t + 1) // 2


def triple_class_count(theta_t):
    return theta_t * pair_class_count(theta_t)


def pair_type_index(ta, tb, theta_t):
    """Canonical unordered atom-type pair index; out-of-vocab -> last bucket."""
    if not (0 <= ta < theta_t and 0 <= tb < theta_t):
        return pair_class_count(theta_t)
    a, b = (ta, tb) if ta <= tb else (tb, ta)
    return a * theta_t - a * (a - 1) // 2 + (b - a)


def triple_type_index(tu, tv, tw, theta_t):
    """Canonical (min-end, center, max-end) triple index; OOV -> last bucket."""
    if not (0 <= tu < theta_t and 0 <= tv < theta_t and 0 <= tw < theta_t):
        return triple_class_count(theta_t)
    return tv * pair_class_count(theta_t) + pair_type_index(tu, tw, theta_t)


@dataclass
class LineGraph:
    modality: str                 # "2d" | "3d"
    node_origin: list             # (u, v) with u < v, one per source bond
    adjacency: list               # (i, j, shared_atom) with i < j
    n_real: int
    node_target: list = field(default_factory=list)
    node_input: object = None     # Tensor [n_real + 1, hidden], virtual last
    edge_angle_feat: object = None  # Tensor [n_edges, theta_e_hat], 3D only

    @property
    def virtual_index(self):
        return self.n_real

    @property
    def n_edges(self):
        return len(self.adjacency)

    def neighbors(self):
        """Adjacency lists over real nodes only (virtual excluded)."""
        adj = [[] for _ in range(self.n_real)]
        for i, j, _ in self.adjacency:
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]


def to_line_graph(mol, theta_t=None):
    """Structure-only transformation of a 2D or 3D molecular graph.

    theta_t is the dataset-wide atom-type vocabulary size; it fixes the
    atom-pair class labels used as masking targets. Defaults to the types
    present in this molecule, which is only safe for single-molecule use.
    """
    is_2d = isinstance(mol, MolGraph2D)
    raw_bonds = [(b.u, b.v) for b in mol.bonds] if is_2d else list(mol.bonds)
    if not raw_bonds:
        raise EmptyLineGraph(f"molecule {mol.id} has no bonds")

    origins = [(min(u, v), max(u, v)) for u, v in raw_bonds]
    adjacency = []
    for i in range(len(origins)):
        si = set(origins[i])
        for j in range(i + 1, len(origins)):
            shared = si & set(origins[j])
            if len(shared) == 1:
                adjacency.append((i, j, shared.pop()))

    if theta_t is None:
        theta_t = max(mol.atom_types) + 1 if mol.atom_types else 1
    targets = []
    for idx, (u, v) in enumerate(origins):
        pair = pair_type_index(mol.atom_types[u], mol.atom_types[v], theta_t)
        if is_2d:
            targets.append((pair, mol.bonds[idx].bond_type))
        else:
            targets.append(pair)

    return LineGraph(
        modality="2d" if is_2d else "3d",
        node_origin=origins,
        adjacency=adjacency,
        n_real=len(origins),
        node_target=targets,
    )


# ---------------------------------------------------------------------------
# learnable feature parameters


def _boost_identity(tensor):
    """Add an identity block to a projection so raw input channels survive
    the init; keeps one-hot type information linearly readable at step 0."""
    k = min(tensor.shape)
    tensor.data[:k, :k] += np.eye(k, dtype=tensor.data.dtype)


def init_feature_params(store, cfg, meta):
    """Register feature-construction parameters for both modalities."""
    half = cfg.hidden // 2
    _boost_identity(store.create("feat2d.W_g", (half, meta.theta_v)))
    _boost_identity(store.create("feat2d.W_e", (half, meta.theta_e)))
    store.create("feat2d.virtual", (cfg.hidden,), scheme=("normal", 0.02))
    store.create("feat2d.mask", (cfg.hidden,), scheme=("normal", 0.02))

    _boost_identity(store.create("feat3d.W_l", (half, meta.theta_t)))
    store.create("feat3d.W_d", (half, cfg.M))
    store.create("feat3d.W_p", (cfg.theta_e_hat, cfg.M))
    store.create("feat3d.virtual", (cfg.hidden,), scheme=("normal", 0.02))
    store.create("feat3d.mask", (cfg.hidden,), scheme=("normal", 0.02))
    store.create("feat3d.virtual_edge", (cfg.theta_e_hat,), scheme=("normal", 0.02))

    n_pairs = pair_class_count(meta.theta_t) + 1    # + out-of-vocab bucket
    n_triples = triple_class_count(meta.theta_t) + 1
    dt = store.dtype
    store.register("feat3d.mu_d", ad.Tensor(np.linspace(0.0, 4.0, cfg.M).astype(dt), requires_grad=True))
    store.register("feat3d.sigma_d", ad.Tensor(np.full(cfg.M, 0.5, dtype=dt), requires_grad=True))
    store.register("feat3d.alpha_d", ad.Tensor(np.ones(n_pairs, dtype=dt), requires_grad=True))
    store.register("feat3d.beta_d", ad.Tensor(np.zeros(n_pairs, dtype=dt), requires_grad=True))
    store.register("feat3d.mu_t", ad.Tensor(np.linspace(0.0, math.pi, cfg.M).astype(dt), requires_grad=True))
    store.register("feat3d.sigma_t", ad.Tensor(np.full(cfg.M, 0.5, dtype=dt), requires_grad=True))
    store.register("feat3d.alpha_t", ad.Tensor(np.ones(n_triples, dtype=dt), requires_grad=True))
    store.register("feat3d.beta_t", ad.Tensor(np.zeros(n_triples, dtype=dt), requires_grad=True))


def gaussian_kernel_vector(x, alpha, beta, mu, sigma, sign=-1.0):
    """Reference kernel map of a scalar onto M Gaussian basis responses.

    Component m = sign * (1 / (sqrt(2*pi) * s_m)) * exp(-((a*x+b-mu_m)/s_m)^2 / 2)
    with s_m = max(|sigma_m|, SIGMA_FLOOR).
    """
    mu = np.asarray(mu, dtype=np.float64)
    s = np.maximum(np.abs(np.asarray(sigma, dtype=np.float64)), SIGMA_FLOOR)
    z = (alpha * x + beta - mu) / s
    return sign * np.exp(-0.5 * z * z) / (_SQRT_2PI * s)


def _kernel_matrix(values, alpha_vec, beta_vec, mu, sigma, sign):
    """Differentiable kernel responses for a vector of scalars -> [k, M]."""
    k = values.shape[0]
    m = mu.shape[0]
    ax = alpha_vec * ad.constant_like(values, alpha_vec) + beta_vec
    z = ad.reshape(ax, (k, 1)) - ad.reshape(mu, (1, m))
    s = ad.reshape(ad.maximum_const(ad.abs_(sigma), SIGMA_FLOOR), (1, m))
    zs = z / s
    dens = ad.exp(zs * zs * -0.5) / s
    return dens * (sign / _SQRT_2PI)


def _gathered_scalars(store, table_name, indices):
    return ad.take_rows(store[table_name], np.asarray(indices, dtype=np.int64))


def build_2d_features(mol, lg, store, cfg, meta):
    """Fill lg.node_input from atom and bond attributes (virtual row last)."""
    w_g, w_e = store["feat2d.W_g"], store["feat2d.W_e"]
    if w_g.shape[1] != mol.atom_feats.shape[1]:
        raise DimensionMismatch(f"W_g expects width {w_g.shape[1]}, atoms have {mol.atom_feats.shape[1]}")
    bond_feats = np.stack([b.feats for b in mol.bonds]).astype(store.dtype)
    if w_e.shape[1] != bond_feats.shape[1]:
        raise DimensionMismatch(f"W_e expects width {w_e.shape[1]}, bonds have {bond_feats.shape[1]}")

    gh = ad.matmul(ad.Tensor(mol.atom_feats.astype(store.dtype)), ad.transpose(w_g))
    us = [u for u, _ in lg.node_origin]
    vs = [v for _, v in lg.node_origin]
    node_half = ad.take_rows(gh, us) + ad.take_rows(gh, vs)
    edge_half = ad.matmul(ad.Tensor(bond_feats), ad.transpose(w_e))
    real = ad.concat([node_half, edge_half], axis=1)
    virtual = ad.reshape(store["feat2d.virtual"], (1, cfg.hidden))
    lg.node_input = ad.concat([real, virtual], axis=0)
    return lg.node_input


def build_3d_features(mol, lg, store, cfg, meta):
    """Fill lg.node_input (distance channel) and lg.edge_angle_feat (angles)."""
    theta_t = meta.theta_t
    one_hot = np.zeros((len(mol.atom_types), theta_t), dtype=store.dtype)
    for a, t in enumerate(mol.atom_types):
        one_hot[a, t] = 1.0
    w_l = store["feat3d.W_l"]
    if w_l.shape[1] != theta_t:
        raise DimensionMismatch(f"W_l expects {w_l.shape[1]} atom types, meta has {theta_t}")
    lh = ad.matmul(ad.Tensor(one_hot), ad.transpose(w_l))
    us = [u for u, _ in lg.node_origin]
    vs = [v for _, v in lg.node_origin]
    node_half = ad.take_rows(lh, us) + ad.take_rows(lh, vs)

    sign = -1.0 if cfg.kernel_sign == "negative" else 1.0
    dists = np.array(
        [pair_distance(mol.coords, u, v) for u, v in lg.node_origin], dtype=store.dtype
    )
    pair_idx = [
        pair_type_index(mol.atom_types[u], mol.atom_types[v], theta_t)
        for u, v in lg.node_origin
    ]
    kd = _kernel_matrix(
        dists,
        _gathered_scalars(store, "feat3d.alpha_d", pair_idx),
        _gathered_scalars(store, "feat3d.beta_d", pair_idx),
        store["feat3d.mu_d"],
        store["feat3d.sigma_d"],
        sign,
    )
    dist_half = ad.matmul(kd, ad.transpose(store["feat3d.W_d"]))
    real = ad.concat([node_half, dist_half], axis=1)
    virtual = ad.reshape(store["feat3d.virtual"], (1, cfg.hidden))
    lg.node_input = ad.concat([real, virtual], axis=0)

    if lg.adjacency:
        angles = []
        triple_idx = []
        for i, j, shared in lg.adjacency:
            u = lg.node_origin[i][0] if lg.node_origin[i][1] == shared else lg.node_origin[i][1]
            w = lg.node_origin[j][0] if lg.node_origin[j][1] == shared else lg.node_origin[j][1]
            angles.append(bond_angle(mol.coords, u, shared, w))
            triple_idx.append(
                triple_type_index(
                    mol.atom_types[u], mol.atom_types[shared], mol.atom_types[w], theta_t
                )
            )
        kt = _kernel_matrix(
            np.array(angles, dtype=store.dtype),
            _gathered_scalars(store, "feat3d.alpha_t", triple_idx),
            _gathered_scalars(store, "feat3d.beta_t", triple_idx),
            store["feat3d.mu_t"],
            store["feat3d.sigma_t"],
            sign,
        )
        lg.edge_angle_feat = ad.matmul(kt, ad.transpose(store["feat3d.W_p"]))
    else:
        lg.edge_angle_feat = ad.Tensor(np.zeros((0, cfg.theta_e_hat), dtype=store.dtype))
    return lg.node_input, lg.edge_angle_feat


def line_graph_summary(lg):
    """JSON-friendly structure dump for the `inspect` command."""
    return {
        "modality": lg.modality,
        "n_line_nodes": lg.n_real,
        "virtual_index": lg.virtual_index,
        "node_origin": [list(o) for o in lg.node_origin],
        "adjacency": [{"i": i, "j": j, "shared_atom": s} for i, j, s in lg.adjacency],
    }
