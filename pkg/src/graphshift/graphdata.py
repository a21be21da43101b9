"""Attributed graphs, synthetic covariate-shift benchmarks, and batching.

Two generator families produce graph-classification tasks whose label depends
only on a small motif, while some nuisance factor (the base graph the motif is
attached to, its size, or a spurious color channel) shifts between training
domains and held-out OOD domains:

* motif datasets: a base graph (ladder, degree-capped random tree, or wheel)
  with one of three motifs (house, six-cycle, 3x3 grid) attached by a single
  bridge edge. The bridge is a cut edge and the motifs are two-edge-connected,
  so no motif instance can span base and motif; the label stays a pure
  function of the attached motif.
* feature-shift datasets: same structural task with every base kind present in
  every domain, plus a per-graph color channel that correlates with the label
  during training and is drawn from a disjoint color set OOD.

Bundles carry five splits (train, id_val, id_test, ood_val, ood_test) with
domain ids disjoint between the ID and OOD sides and class counts balanced
within one sample per split.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import RngHub

SPLIT_NAMES = ("train", "id_val", "id_test", "ood_val", "ood_test")
MOTIF_NAMES = ("house", "cycle", "grid")
BASE_NAMES = ("ladder", "tree", "wheel")

# Minimum base size. Keeps the wheel rim at length >= 7 so the rim never
# forms a six-cycle, which would collide with the cycle motif.
MIN_BASE_SIZE = 8


@dataclass
class Graph:
    """One undirected attributed graph with a class label and a domain tag."""

    num_nodes: int
    edges: np.ndarray          # [m, 2] with u < v, lexicographically sorted
    node_features: np.ndarray  # [num_nodes, d]
    label: int
    domain_id: int
    meta: dict = field(default_factory=dict)

    def validate(self, num_classes=None):
        if self.num_nodes < 1:
            raise ContractError("graph must have at least one node")
        e = self.edges
        if e.size:
            if e.ndim != 2 or e.shape[1] != 2:
                raise ContractError(f"edge array has shape {e.shape}, want [m, 2]")
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise ContractError("edge endpoint outside [0, num_nodes)")
            if (e[:, 0] == e[:, 1]).any():
                raise ContractError("self-loop in stored edges")
            if len(np.unique(e[:, 0] * self.num_nodes + e[:, 1])) != len(e):
                raise ContractError("duplicate edge")
        if self.node_features.shape[0] != self.num_nodes:
            raise ShapeError(
                f"feature rows {self.node_features.shape[0]} != nodes {self.num_nodes}"
            )
        if self.label < 0 or (num_classes is not None and self.label >= num_classes):
            raise ContractError(f"label {self.label} out of range")
        return self

    def adjacency(self):
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.edges.size:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self):
        return self.adjacency().sum(axis=1)


@dataclass
class SplitBundle:
    """Five graph lists plus bookkeeping shared by generators and the harness."""

    train: list
    id_val: list
    id_test: list
    ood_val: list
    ood_test: list
    domain_catalog: dict
    num_classes: int
    feature_dim: int

    def split(self, name):
        if name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {name!r}", path="split")
        return getattr(self, name)

    def items(self):
        return [(name, getattr(self, name)) for name in SPLIT_NAMES]


def _normalize_edges(edges):
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return e
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    return e[order]


# ------------------------------------------------------------ building blocks


def make_ladder(n):
    """Ladder on 2*(n//2) nodes: two rails of k nodes joined by k rungs."""
    k = max(2, n // 2)
    edges = []
    for i in range(k - 1):
        edges.append((i, i + 1))
        edges.append((k + i, k + i + 1))
    for i in range(k):
        edges.append((i, k + i))
    return 2 * k, _normalize_edges(edges)


def make_tree(n, rng):
    """Random tree grown by preferential attachment (new node joins ~degree).

    Preferential growth yields occasional mid-degree hubs, so training covers
    a spread of node degrees while the wheel's full-rim hub stays an
    out-of-distribution extreme.
    """
    if n < 2:
        raise ConfigError(f"tree needs >= 2 nodes, got {n}", path="base_size")
    edges = [(0, 1)]
    endpoints = [0, 1]  # each node appears once per incident edge
    for v in range(2, n):
        u = endpoints[int(rng.integers(0, len(endpoints)))]
        edges.append((u, v))
        endpoints.extend((u, v))
    return n, _normalize_edges(edges)


def make_wheel(n):
    """Hub node 0 joined to every node of a rim cycle on nodes 1..n-1."""
    if n < MIN_BASE_SIZE:
        raise ConfigError(f"wheel needs >= {MIN_BASE_SIZE} nodes, got {n}",
                          path="base_size")
    rim = n - 1
    edges = [(0, 1 + i) for i in range(rim)]
    for i in range(rim):
        edges.append((1 + i, 1 + (i + 1) % rim))
    return n, _normalize_edges(edges)


def make_house():
    """Square 0-1-2-3 with an apex node 4 over the 0-1 edge (5 nodes)."""
    return 5, _normalize_edges([(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)])


def make_cycle6():
    return 6, _normalize_edges([(i, (i + 1) % 6) for i in range(6)])


def make_grid3x3():
    edges = []
    for r in range(3):
        for c in range(3):
            v = 3 * r + c
            if c < 2:
                edges.append((v, v + 1))
            if r < 2:
                edges.append((v, v + 3))
    return 9, _normalize_edges(edges)


MOTIF_BUILDERS = {"house": make_house, "cycle": make_cycle6, "grid": make_grid3x3}


def _build_base(kind, size, rng):
    if kind == "ladder":
        return make_ladder(size)
    if kind == "tree":
        return make_tree(size, rng)
    if kind == "wheel":
        return make_wheel(size)
    raise ConfigError(f"unknown base kind {kind!r}", path="base")


def _assemble(base_kind, base_size, motif_label, rng):
    """Base graph + motif + one bridge edge from motif node 0 to a random base node."""
    nb, base_edges = _build_base(base_kind, base_size, rng)
    nm, motif_edges = MOTIF_BUILDERS[MOTIF_NAMES[motif_label]]()
    bridge_target = int(rng.integers(0, nb))
    edges = np.concatenate(
        [base_edges, motif_edges + nb, [[bridge_target, nb]]], axis=0
    )
    n = nb + nm
    return n, _normalize_edges(edges), bridge_target


def _permute_graph(n, edges, features, rng):
    perm = rng.permutation(n)
    new_edges = _normalize_edges(perm[edges])
    new_features = np.empty_like(features)
    new_features[perm] = features
    return new_edges, new_features


# ---------------------------------------------------------------- allocation


def _class_quotas(n, num_classes):
    base, rem = divmod(n, num_classes)
    return [base + (1 if c < rem else 0) for c in range(num_classes)]


def _make_slots(n, num_classes, domain_ids, rng):
    """(label, domain) assignments: classes balanced within 1, domains near-even."""
    slots = []
    for c, quota in enumerate(_class_quotas(n, num_classes)):
        for j in range(quota):
            slots.append((c, domain_ids[(j + c) % len(domain_ids)]))
    order = rng.permutation(len(slots))
    return [slots[i] for i in order]


def _split_sizes(cfg):
    n = cfg.get("n_per_split")
    if n is not None:
        n = int(n)
        return {name: n for name in SPLIT_NAMES}
    sizes = {name: int(cfg.get("n_eval", 200)) for name in SPLIT_NAMES}
    sizes["train"] = int(cfg.get("n_train", 1000))
    return sizes


def _check_counts(sizes, num_classes):
    for name, n in sizes.items():
        if n < num_classes:
            raise ConfigError(
                f"split {name!r} has {n} graphs but needs >= {num_classes}",
                path="n_per_split",
            )


# ----------------------------------------------------------------- generators


def generate_motif_dataset(cfg):
    """Structure-only motif classification under basis or size shift.

    cfg keys: shift ("basis" or "size"), seed, and either n_per_split or
    n_train/n_eval. Node features are constant 1-vectors; the label is the
    attached motif; the domain is the base kind (basis shift) or a base-size
    bucket (size shift).
    """
    cfg = dict(cfg)
    shift = cfg.get("shift", "basis")
    if shift not in ("basis", "size"):
        raise ConfigError(f"unknown shift kind {shift!r}", path="shift")
    num_classes = int(cfg.get("num_classes", 3))
    if num_classes != len(MOTIF_NAMES):
        raise ConfigError(
            f"motif vocabulary has {len(MOTIF_NAMES)} classes, got {num_classes}",
            path="num_classes",
        )
    seed = int(cfg.get("seed", 0))
    sizes = _split_sizes(cfg)
    _check_counts(sizes, num_classes)
    hub = RngHub(seed)

    if shift == "basis":
        size_lo, size_hi = 8, 16
        # domain -> (base kind, size range)
        domains = {
            0: ("ladder", (size_lo, size_hi)),
            1: ("tree", (size_lo, size_hi)),
            2: ("wheel", (size_lo, size_hi)),
        }
        catalog = {0: "base=ladder", 1: "base=tree", 2: "base=wheel"}
        train_domains, ood_domains = [0, 1], [2]
    else:
        domains = {0: (None, (8, 12)), 1: (None, (13, 16)), 2: (None, (24, 40))}
        catalog = {
            0: "base_size=8..12",
            1: "base_size=13..16",
            2: "base_size=24..40",
        }
        train_domains, ood_domains = [0, 1], [2]

    splits = {}
    for name in SPLIT_NAMES:
        dom_ids = train_domains if name in ("train", "id_val", "id_test") else ood_domains
        slot_rng = hub.stream(f"slots/{name}")
        g_rng = hub.stream(f"graphs/{name}")
        graphs = []
        for label, dom in _make_slots(sizes[name], num_classes, dom_ids, slot_rng):
            base_kind, (lo, hi) = domains[dom]
            if base_kind is None:
                base_kind = BASE_NAMES[g_rng.integers(0, len(BASE_NAMES))]
            base_size = int(g_rng.integers(lo, hi + 1))
            n, edges, bridge = _assemble(base_kind, base_size, label, g_rng)
            feats = np.ones((n, 1))
            edges, feats = _permute_graph(n, edges, feats, g_rng)
            graphs.append(
                Graph(n, edges, feats, label, dom,
                      meta={"base": base_kind, "base_size": base_size,
                            "bridge": bridge}).validate(num_classes)
            )
        splits[name] = graphs

    return SplitBundle(domain_catalog=catalog, num_classes=num_classes,
                       feature_dim=1, **splits)


def generate_feature_shift_dataset(cfg):
    """Motif classification with a spurious per-graph color channel.

    The same two low-degree base families appear on both sides, so the color
    channel is the only thing that shifts. In training domains the color
    equals the label's palette entry with probability spurious_strength,
    otherwise a uniformly random palette entry. OOD colors come from a
    disjoint palette (the uniform mixture vector), so the channel carries no
    label information there.
    """
    cfg = dict(cfg)
    num_classes = int(cfg.get("num_classes", 3))
    if num_classes != len(MOTIF_NAMES):
        raise ConfigError(
            f"structural labels come from {len(MOTIF_NAMES)} motifs, "
            f"got num_classes={num_classes}",
            path="num_classes",
        )
    strength = float(cfg.get("spurious_strength", 0.9))
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(
            f"spurious_strength must be in [0, 1], got {strength}",
            path="spurious_strength",
        )
    seed = int(cfg.get("seed", 0))
    sizes = _split_sizes(cfg)
    _check_counts(sizes, num_classes)
    hub = RngHub(seed)

    # Domains: one per base kind on each side of the shift; low ids carry the
    # training palette, the rest the shifted one. Two train domains keep the
    # multi-domain objectives applicable.
    base_kinds = ("ladder", "tree")
    catalog = {}
    for i, b in enumerate(base_kinds):
        catalog[i] = f"base={b},colors=train"
        catalog[len(base_kinds) + i] = f"base={b},colors=shifted"
    train_domains, ood_domains = [0, 1], [2, 3]

    train_palette = np.eye(num_classes)
    ood_color = np.full(num_classes, 1.0 / num_classes)
    size_lo, size_hi = 8, 16

    splits = {}
    for name in SPLIT_NAMES:
        is_id = name in ("train", "id_val", "id_test")
        dom_ids = train_domains if is_id else ood_domains
        slot_rng = hub.stream(f"slots/{name}")
        g_rng = hub.stream(f"graphs/{name}")
        c_rng = hub.stream(f"colors/{name}")
        graphs = []
        for label, dom in _make_slots(sizes[name], num_classes, dom_ids, slot_rng):
            base_kind = base_kinds[dom % len(base_kinds)]
            base_size = int(g_rng.integers(size_lo, size_hi + 1))
            n, edges, bridge = _assemble(base_kind, base_size, label, g_rng)
            if is_id:
                if c_rng.random() < strength:
                    color_idx = label
                else:
                    color_idx = int(c_rng.integers(0, num_classes))
                color = train_palette[color_idx]
            else:
                color = ood_color
            feats = np.concatenate(
                [np.ones((n, 1)), np.tile(color, (n, 1))], axis=1
            )
            edges, feats = _permute_graph(n, edges, feats, g_rng)
            graphs.append(
                Graph(n, edges, feats, label, dom,
                      meta={"base": base_kind, "base_size": base_size,
                            "bridge": bridge}).validate(num_classes)
            )
        splits[name] = graphs

    return SplitBundle(domain_catalog=catalog, num_classes=num_classes,
                       feature_dim=1 + num_classes, **splits)


def generate_dataset(cfg):
    """Dispatch on cfg['kind'] ('motif' or 'feature')."""
    kind = dict(cfg).get("kind", "motif")
    if kind == "motif":
        return generate_motif_dataset(cfg)
    if kind == "feature":
        return generate_feature_shift_dataset(cfg)
    raise ConfigError(f"unknown dataset kind {kind!r}", path="dataset.kind")


# -------------------------------------------------------------------- batching


@dataclass
class GraphBatch:
    """Concatenated node arrays for a list of graphs, block structure preserved."""

    features: np.ndarray        # [N, d]
    adjacency: np.ndarray       # [N, N] block-diagonal, symmetric 0/1
    graph_index: np.ndarray     # [N] owner graph position, nondecreasing
    offsets: np.ndarray         # [G+1] node prefix sums
    labels: np.ndarray          # [G]
    domain_ids: np.ndarray      # [G]
    pool_mean: np.ndarray       # [G, N], rows sum to 1
    pool_sum: np.ndarray        # [G, N], 0/1 membership
    attention_bias: np.ndarray  # [N, N], 0 within graph, -1e30 across
    num_edges: int

    @property
    def num_graphs(self):
        return len(self.labels)

    @property
    def num_nodes(self):
        return len(self.graph_index)


def batch_graphs(graphs):
    """Stack graphs into one block-diagonal batch; node order is preserved."""
    if not graphs:
        raise ContractError("batch_graphs: empty graph list")
    d = graphs[0].node_features.shape[1]
    for g in graphs:
        if g.node_features.shape[1] != d:
            raise ShapeError(
                f"feature width mismatch in batch: {g.node_features.shape[1]} vs {d}"
            )
    counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    features = np.vstack([g.node_features for g in graphs])
    adjacency = np.zeros((total, total))
    num_edges = 0
    for g, off in zip(graphs, offsets[:-1]):
        if g.edges.size:
            u = g.edges[:, 0] + off
            v = g.edges[:, 1] + off
            adjacency[u, v] = 1.0
            adjacency[v, u] = 1.0
            num_edges += len(g.edges)
    graph_index = np.repeat(np.arange(len(graphs)), counts)
    pool_sum = np.zeros((len(graphs), total))
    pool_sum[graph_index, np.arange(total)] = 1.0
    pool_mean = pool_sum / counts[:, None]
    same = graph_index[:, None] == graph_index[None, :]
    attention_bias = np.where(same, 0.0, -1e30)
    return GraphBatch(
        features=features,
        adjacency=adjacency,
        graph_index=graph_index,
        offsets=offsets,
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        domain_ids=np.array([g.domain_id for g in graphs], dtype=np.int64),
        pool_mean=pool_mean,
        pool_sum=pool_sum,
        attention_bias=attention_bias,
        num_edges=num_edges,
    )


# --------------------------------------------------------------- serialization


def _meta_path(path):
    base = path[:-6] if path.endswith(".jsonl") else path
    return base + ".meta.json"


def save_bundle(bundle, path):
    """Write one graph per line: num_nodes, edges, features, label, domain_id, split.

    A sidecar .meta.json keeps the domain catalog and class count, which the
    line format has no room for.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for split_name, graphs in bundle.items():
            for g in graphs:
                row = {
                    "num_nodes": int(g.num_nodes),
                    "edges": [[int(u), int(v)] for u, v in g.edges],
                    "features": [[float(x) for x in r] for r in g.node_features],
                    "label": int(g.label),
                    "domain_id": int(g.domain_id),
                    "split": split_name,
                }
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    meta = {
        "domain_catalog": {str(k): v for k, v in sorted(bundle.domain_catalog.items())},
        "num_classes": bundle.num_classes,
        "feature_dim": bundle.feature_dim,
    }
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(path):
    """Read a bundle back; every graph is validated against the stored invariants."""
    splits = {name: [] for name in SPLIT_NAMES}
    num_classes = None
    catalog = None
    mp = _meta_path(path)
    if os.path.exists(mp):
        with open(mp) as fh:
            meta = json.load(fh)
        num_classes = meta.get("num_classes")
        catalog = {int(k): v for k, v in meta.get("domain_catalog", {}).items()}
    feature_dim = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{line_no}: bad JSON: {exc}") from None
            split = row.get("split")
            if split not in SPLIT_NAMES:
                raise ContractError(f"{path}:{line_no}: unknown split {split!r}")
            g = Graph(
                num_nodes=int(row["num_nodes"]),
                edges=_normalize_edges(np.array(row["edges"], dtype=np.int64)
                                       .reshape(-1, 2)),
                node_features=np.asarray(row["features"], dtype=np.float64)
                .reshape(int(row["num_nodes"]), -1),
                label=int(row["label"]),
                domain_id=int(row["domain_id"]),
            )
            g.validate(num_classes)
            if feature_dim is None:
                feature_dim = g.node_features.shape[1]
            elif g.node_features.shape[1] != feature_dim:
                raise ContractError(f"{path}:{line_no}: feature width changed")
            splits[split].append(g)
    if feature_dim is None:
        raise ContractError(f"{path}: empty dataset file")
    if num_classes is None:
        num_classes = max(g.label for gs in splits.values() for g in gs) + 1
    if catalog is None:
        ids = sorted({g.domain_id for gs in splits.values() for g in gs})
        catalog = {i: f"domain-{i}" for i in ids}
    return SplitBundle(domain_catalog=catalog, num_classes=num_classes,
                       feature_dim=feature_dim, **splits)
