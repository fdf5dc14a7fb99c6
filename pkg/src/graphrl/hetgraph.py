"""Heterogeneous graph data model and the matrix-state -> graph transforms.

Vertices of one type occupy a contiguous index block, in schema declaration
order. The adjacency matrix is symmetric with integer entries: 0 for no edge
and a distinct positive code per edge type. Graphs are immutable after
construction and safe to share across threads.
"""

import io

import numpy as np

# Canonical type/edge names used by the two built-in problem graphs.
PRA_USER = "user"
PRA_DU = "du"
PRA_LINK = "link"
D2D_TX = "tx"
D2D_RX = "rx"
D2D_COM = "com"
D2D_INF = "inf"


class GraphSchemaError(ValueError):
    pass


class GraphSchema:
    """Vertex types (name, count), edge types (name -> code >= 1), and the
    allowed (type_a, type_b, edge_type) relations.

    Relations are undirected; both aggregation directions are derived.
    """

    def __init__(self, vertex_types, edge_codes, relations):
        self.vertex_types = tuple((str(n), int(c)) for n, c in vertex_types)
        self.edge_codes = {str(k): int(v) for k, v in edge_codes.items()}
        self.relations = tuple((a, b, e) for a, b, e in relations)

        names = [n for n, _ in self.vertex_types]
        if len(set(names)) != len(names):
            raise GraphSchemaError("duplicate vertex type names")
        if any(c < 1 for _, c in self.vertex_types):
            raise GraphSchemaError("vertex counts must be >= 1")
        codes = list(self.edge_codes.values())
        if len(set(codes)) != len(codes):
            raise GraphSchemaError("edge type codes must be distinct")
        if any(c < 1 for c in codes):
            raise GraphSchemaError("edge type codes must be >= 1")
        for a, b, e in self.relations:
            if a not in names or b not in names or e not in self.edge_codes:
                raise GraphSchemaError(f"relation {(a, b, e)} references unknown names")

        self._offsets = {}
        off = 0
        for name, count in self.vertex_types:
            self._offsets[name] = off
            off += count
        self.n_vertices = off
        self._code_to_edge = {v: k for k, v in self.edge_codes.items()}

    def count(self, vertex_type):
        for name, count in self.vertex_types:
            if name == vertex_type:
                return count
        raise GraphSchemaError(f"unknown vertex type {vertex_type!r}")

    def block(self, vertex_type):
        """Global index slice of a vertex type's contiguous block."""
        off = self._offsets[vertex_type]
        return slice(off, off + self.count(vertex_type))

    def type_of(self, v):
        for name, count in self.vertex_types:
            off = self._offsets[name]
            if off <= v < off + count:
                return name
        raise IndexError(f"vertex {v} out of range")

    def edge_name(self, code):
        return self._code_to_edge[code]

    def ordered_relations(self):
        """All (aggregator_type, neighbor_type, edge_type) directions."""
        seen = []
        for a, b, e in self.relations:
            for pair in ((a, b, e), (b, a, e)):
                if pair not in seen:
                    seen.append(pair)
        return tuple(seen)

    def key(self):
        """Canonical structural tuple, used for hashing and checkpoints."""
        return (
            self.vertex_types,
            tuple(sorted(self.edge_codes.items())),
            tuple(sorted(self.relations)),
        )

    def __eq__(self, other):
        return isinstance(other, GraphSchema) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


class HeteroGraph:
    """Typed vertices/edges with per-type vertex features and per-edge features.

    vertex_features: {type: (count, dim) float array}, dim may be 0.
    edge_features: {(i, j): 1-D float array}; both orientations are stored and
    share the same array. Feature dimension is uniform per edge type.
    """

    def __init__(self, schema, adjacency, vertex_features, edge_features):
        self.schema = schema
        adj = np.asarray(adjacency, dtype=np.int64)
        n = schema.n_vertices
        if adj.shape != (n, n):
            raise GraphSchemaError(f"adjacency shape {adj.shape}, expected {(n, n)}")
        if not np.array_equal(adj, adj.T):
            raise GraphSchemaError("adjacency must be symmetric")
        valid = set(schema.edge_codes.values()) | {0}
        if not set(np.unique(adj)).issubset(valid):
            raise GraphSchemaError("adjacency entries must be 0 or a known edge code")

        self.adjacency = adj
        self.vertex_features = {}
        for name, count in schema.vertex_types:
            feats = np.asarray(
                vertex_features.get(name, np.zeros((count, 0))), dtype=np.float64
            )
            if feats.shape[0] != count:
                raise GraphSchemaError(
                    f"{name}: {feats.shape[0]} feature rows for {count} vertices"
                )
            if feats.size and not np.all(np.isfinite(feats)):
                raise GraphSchemaError(f"{name}: non-finite vertex features")
            self.vertex_features[name] = feats

        self.edge_features = {}
        edge_dims = {}
        for (i, j), feat in edge_features.items():
            feat = np.asarray(feat, dtype=np.float64)
            code = adj[i, j]
            if code == 0:
                raise GraphSchemaError(f"feature for non-edge ({i}, {j})")
            ename = schema.edge_name(code)
            dim = edge_dims.setdefault(ename, feat.shape[0])
            if feat.shape != (dim,):
                raise GraphSchemaError(
                    f"edge ({i}, {j}): feature dim {feat.shape} != ({dim},)"
                )
            self.edge_features[(i, j)] = feat
            self.edge_features[(j, i)] = feat
        ii, jj = np.nonzero(adj)
        for i, j in zip(ii.tolist(), jj.tolist()):
            if (i, j) not in self.edge_features:
                raise GraphSchemaError(f"edge ({i}, {j}) has no feature")
        self._edge_dims = edge_dims

        for arr in self.vertex_features.values():
            arr.flags.writeable = False
        self.adjacency.flags.writeable = False
        self._groups = None

    def edge_dim(self, edge_type):
        return self._edge_dims.get(edge_type, 0)

    def feature_dim(self, vertex_type):
        return self.vertex_features[vertex_type].shape[1]

    def neighbors(self, v):
        """Neighbors of vertex v in ascending index order.

        Returns [(neighbor, edge_type_name, edge_feature), ...].
        """
        n = self.schema.n_vertices
        if not 0 <= v < n:
            raise IndexError(f"vertex {v} out of range 0..{n - 1}")
        out = []
        row = self.adjacency[v]
        for j in np.nonzero(row)[0].tolist():
            out.append((j, self.schema.edge_name(row[j]), self.edge_features[(v, j)]))
        return out

    def edge_groups(self):
        """Edges grouped by (aggregator_type, neighbor_type, edge_type).

        For each group: (agg_local, nbr_local, feats) with local indices into
        the respective type blocks and feats stacked (n_edges, edge_dim).
        Edge order is deterministic: ascending (aggregator, neighbor).
        Cached; the graph is immutable.
        """
        if self._groups is not None:
            return self._groups
        groups = {}
        for ta, tn, te in self.schema.ordered_relations():
            ba, bn = self.schema.block(ta), self.schema.block(tn)
            code = self.schema.edge_codes[te]
            sub = self.adjacency[ba, bn]
            agg_local, nbr_local = np.nonzero(sub == code)
            dim = self.edge_dim(te)
            feats = np.zeros((agg_local.size, dim))
            for idx, (a, b) in enumerate(zip(agg_local.tolist(), nbr_local.tolist())):
                feats[idx] = self.edge_features[(ba.start + a, bn.start + b)]
            groups[(ta, tn, te)] = (agg_local, nbr_local, feats)
        self._groups = groups
        return groups

    def degrees(self, vertex_type):
        """Neighbor count per vertex of a type (all edge types pooled)."""
        block = self.schema.block(vertex_type)
        return (self.adjacency[block] != 0).sum(axis=1).astype(np.float64)

    def same_topology(self, other):
        return self.schema == other.schema and np.array_equal(
            self.adjacency, other.adjacency
        )

    def equals(self, other):
        """Deep equality: schema, adjacency, all features."""
        if not self.same_topology(other):
            return False
        for name, _ in self.schema.vertex_types:
            if not np.array_equal(self.vertex_features[name], other.vertex_features[name]):
                return False
        if set(self.edge_features) != set(other.edge_features):
            return False
        return all(
            np.array_equal(f, other.edge_features[k])
            for k, f in self.edge_features.items()
        )


def neighbors(graph, v):
    """Neighbors of vertex v: [(vertex, edge_type, edge_feature), ...] in
    ascending vertex order, derived from the adjacency matrix."""
    return graph.neighbors(v)


class VertexPermutation:
    """Permutation of one vertex type's local indices.

    order[i] is the old local index of the vertex placed at local position i,
    i.e. new_features = old_features[order].
    """

    def __init__(self, vertex_type, order):
        self.vertex_type = vertex_type
        self.order = np.asarray(order, dtype=np.int64)
        n = self.order.shape[0]
        if sorted(self.order.tolist()) != list(range(n)):
            raise ValueError("order must be a permutation of 0..n-1")

    def inverse(self):
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return VertexPermutation(self.vertex_type, inv)


def permute(graph, p):
    """Reorder one vertex type's block; features and adjacency move together."""
    schema = graph.schema
    block = schema.block(p.vertex_type)
    if p.order.size != block.stop - block.start:
        raise ValueError(
            f"permutation of size {p.order.size} for type with "
            f"{block.stop - block.start} vertices"
        )
    gmap = np.arange(schema.n_vertices)
    gmap[block] = block.start + p.order

    adj = graph.adjacency[np.ix_(gmap, gmap)]
    vfeats = dict(graph.vertex_features)
    vfeats[p.vertex_type] = graph.vertex_features[p.vertex_type][p.order]
    # old global index -> new global index
    inv = np.empty_like(gmap)
    inv[gmap] = np.arange(gmap.size)
    efeats = {}
    for (i, j), feat in graph.edge_features.items():
        if i < j:
            efeats[(int(inv[i]), int(inv[j]))] = feat
    return HeteroGraph(schema, adj, vfeats, efeats)


def build_pra_state_graph(user_features, edge_features, k, m):
    """Bipartite state graph for the streaming problem.

    user_features: (K, 3) rows [buffer, playback_index, delivered_ratio];
    edge_features: (K, M, T+1) association-masked channel history per
    user/transmitter pair. Transmitter vertices carry no features.
    """
    user_features = np.asarray(user_features, dtype=np.float64)
    edge_features = np.asarray(edge_features, dtype=np.float64)
    if user_features.shape != (k, 3):
        raise GraphSchemaError(f"user features {user_features.shape}, expected {(k, 3)}")
    return _pra_graph(user_features, edge_features, k, m)


def build_pra_state_action_graph(user_features, edge_features, action, k, m):
    """State-action graph: identical topology, user features extended by the
    per-user action as a fourth column."""
    user_features = np.asarray(user_features, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if user_features.shape != (k, 3):
        raise GraphSchemaError(f"user features {user_features.shape}, expected {(k, 3)}")
    if action.shape != (k,):
        raise GraphSchemaError(f"action shape {action.shape}, expected {(k,)}")
    feats = np.concatenate([user_features, action[:, None]], axis=1)
    return _pra_graph(feats, edge_features, k, m)


def _pra_graph(user_features, edge_features, k, m):
    if edge_features.ndim != 3 or edge_features.shape[:2] != (k, m):
        raise GraphSchemaError(
            f"edge features {edge_features.shape}, expected ({k}, {m}, T+1)"
        )
    schema = GraphSchema(
        vertex_types=[(PRA_USER, k), (PRA_DU, m)],
        edge_codes={PRA_LINK: 1},
        relations=[(PRA_USER, PRA_DU, PRA_LINK)],
    )
    n = k + m
    adj = np.zeros((n, n), dtype=np.int64)
    efeats = {}
    for u in range(k):
        for d in range(m):
            adj[u, k + d] = 1
            adj[k + d, u] = 1
            efeats[(u, k + d)] = edge_features[u, d]
    return HeteroGraph(schema, adj, {PRA_USER: user_features}, efeats)


def build_d2d_state_graph(h):
    """State graph for link scheduling from the K x K gain matrix.

    h[k, m] is the squared channel magnitude from transmitter m to receiver k.
    Transmitter block first (indices 0..K-1), then receivers. The edge between
    transmitter m and receiver k is a com edge (code 1) iff m == k, otherwise
    an inf edge (code 2); its feature is [h[k, m]]. Vertices are feature-less.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise GraphSchemaError(f"gain matrix must be square, got {h.shape}")
    if not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise GraphSchemaError("gain matrix entries must be positive and finite")
    k = h.shape[0]
    schema = GraphSchema(
        vertex_types=[(D2D_TX, k), (D2D_RX, k)],
        edge_codes={D2D_COM: 1, D2D_INF: 2},
        relations=[(D2D_TX, D2D_RX, D2D_COM), (D2D_TX, D2D_RX, D2D_INF)],
    )
    adj = np.zeros((2 * k, 2 * k), dtype=np.int64)
    efeats = {}
    for m in range(k):
        for r in range(k):
            code = 1 if m == r else 2
            adj[m, k + r] = code
            adj[k + r, m] = code
            efeats[(m, k + r)] = np.array([h[r, m]])
    return HeteroGraph(schema, adj, {}, efeats)


# Line-oriented text serialization, for debugging and test fixtures. Format:
#   hetgraph v1
#   vertex_type <name> <count> <feature_dim>
#   edge_type <name> <code> <feature_dim>
#   relation <type_a> <type_b> <edge_type>
#   vfeat <type> <local_index> <values...>
#   adj <i> <j> <code>            (i < j only; symmetric half)
#   efeat <i> <j> <values...>
#   end
# Floats use repr() and round-trip exactly.


def graph_to_text(graph):
    buf = io.StringIO()
    buf.write("hetgraph v1\n")
    for name, count in graph.schema.vertex_types:
        buf.write(f"vertex_type {name} {count} {graph.feature_dim(name)}\n")
    for name, code in sorted(graph.schema.edge_codes.items()):
        buf.write(f"edge_type {name} {code} {graph.edge_dim(name)}\n")
    for a, b, e in graph.schema.relations:
        buf.write(f"relation {a} {b} {e}\n")
    for name, _ in graph.schema.vertex_types:
        feats = graph.vertex_features[name]
        for i in range(feats.shape[0]):
            vals = " ".join(repr(v) for v in feats[i].tolist())
            buf.write(f"vfeat {name} {i} {vals}\n".rstrip() + "\n")
    ii, jj = np.nonzero(graph.adjacency)
    for i, j in zip(ii.tolist(), jj.tolist()):
        if i < j:
            buf.write(f"adj {i} {j} {graph.adjacency[i, j]}\n")
    for (i, j), feat in sorted(graph.edge_features.items()):
        if i < j:
            vals = " ".join(repr(v) for v in feat.tolist())
            buf.write(f"efeat {i} {j} {vals}\n".rstrip() + "\n")
    buf.write("end\n")
    return buf.getvalue()


def graph_from_text(text):
    vertex_types, edge_codes, relations = [], {}, []
    vfeat_rows, adj_entries, efeat_rows = [], [], []
    vdims, edims = {}, {}
    lines = text.strip().splitlines()
    if not lines or lines[0] != "hetgraph v1":
        raise GraphSchemaError("not a hetgraph v1 blob")
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "vertex_type":
            vertex_types.append((parts[1], int(parts[2])))
            vdims[parts[1]] = int(parts[3])
        elif tag == "edge_type":
            edge_codes[parts[1]] = int(parts[2])
            edims[parts[1]] = int(parts[3])
        elif tag == "relation":
            relations.append((parts[1], parts[2], parts[3]))
        elif tag == "vfeat":
            vfeat_rows.append((parts[1], int(parts[2]), [float(v) for v in parts[3:]]))
        elif tag == "adj":
            adj_entries.append((int(parts[1]), int(parts[2]), int(parts[3])))
        elif tag == "efeat":
            efeat_rows.append((int(parts[1]), int(parts[2]), [float(v) for v in parts[3:]]))
        elif tag == "end":
            break
        else:
            raise GraphSchemaError(f"unknown line tag {tag!r}")
    schema = GraphSchema(vertex_types, edge_codes, relations)
    adj = np.zeros((schema.n_vertices, schema.n_vertices), dtype=np.int64)
    for i, j, code in adj_entries:
        adj[i, j] = code
        adj[j, i] = code
    vfeats = {
        name: np.zeros((count, vdims[name])) for name, count in vertex_types
    }
    for name, i, vals in vfeat_rows:
        vfeats[name][i] = vals
    efeats = {(i, j): np.asarray(vals) for i, j, vals in efeat_rows}
    return HeteroGraph(schema, adj, vfeats, efeats)
