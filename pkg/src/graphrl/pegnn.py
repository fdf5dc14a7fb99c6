"""Message-passing networks over heterogeneous graphs with per-type function
sharing, so that same-type vertex permutations permute the learned
representations accordingly.

Each layer aggregates processed neighbor/edge information with a commutative
pooling function and combines it with the vertex's previous representation:

    pooled_v = POOL_{n in N(v)} processor[type(v), type(n), type(vn)](rep_n, e_vn)
    rep_v    = act(W_{type(v)} @ rep_v_prev + pooled_v)

Sharing the processors per (aggregator-type, neighbor-type, edge-type) triple
and the pooling/combiner per vertex type is what yields the permutation
property; ``validate_sharing`` checks exactly those three conditions.

Feature-less vertex types start from a zero-dimensional representation, so
the first combiner contributes nothing for them (their layer-0 term vanishes).
"""

import hashlib
import json

import numpy as np

from .numcore import (
    ShapeError,
    activate,
    activate_grad,
    fnn_apply,
    fnn_backward_from_cache,
    init_fnn,
)

COMMUTATIVE_POOLINGS = ("mean", "sum", "max")


class GnnSpec:
    """Structure of a graph network: layer dims, processor table, pooling.

    processors maps (aggregator_type, neighbor_type, edge_type) -> processor
    id; ids shared across triples mean shared parameters. pooling maps vertex
    type -> one of COMMUTATIVE_POOLINGS. input_dims / edge_dims give the
    layer-0 representation dim per vertex type and the feature dim per edge
    type (0 for feature-less vertices).

    The vertex_* override maps exist to express sharing violations (for the
    validator and ablation tests); a spec with any conflicting override fails
    validation and is rejected by the forward pass.
    """

    def __init__(
        self,
        schema,
        input_dims,
        edge_dims,
        layer_dims,
        processors,
        pooling,
        proc_hidden=(16,),
        proc_activation="relu",
        hidden_activation="relu",
        output_activation="identity",
        use_batch_norm=False,
        bn_eps=1e-12,
        bn_momentum=0.9,
        vertex_processors=None,
        vertex_pooling=None,
        vertex_combiners=None,
    ):
        self.schema = schema
        self.input_dims = dict(input_dims)
        self.edge_dims = dict(edge_dims)
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.processors = dict(processors)
        self.pooling = dict(pooling)
        self.proc_hidden = tuple(int(h) for h in proc_hidden)
        self.proc_activation = proc_activation
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.use_batch_norm = use_batch_norm
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.vertex_processors = dict(vertex_processors or {})
        self.vertex_pooling = dict(vertex_pooling or {})
        self.vertex_combiners = dict(vertex_combiners or {})
        self._sharing = None

    @property
    def n_layers(self):
        return len(self.layer_dims)

    def rep_dim(self, vertex_type, layer):
        """Representation dim of a type entering layer `layer` (1-based)."""
        if layer == 1:
            return self.input_dims[vertex_type]
        return self.layer_dims[layer - 2]

    def proc_in_dim(self, neighbor_type, edge_type, layer):
        return self.rep_dim(neighbor_type, layer) + self.edge_dims[edge_type]

    def structure_key(self):
        return {
            "schema": self.schema.key(),
            "input_dims": sorted(self.input_dims.items()),
            "edge_dims": sorted(self.edge_dims.items()),
            "layer_dims": self.layer_dims,
            "processors": sorted(self.processors.items()),
            "pooling": sorted(self.pooling.items()),
            "proc_hidden": self.proc_hidden,
            "acts": (self.proc_activation, self.hidden_activation, self.output_activation),
            "batch_norm": self.use_batch_norm,
        }

    def structure_hash(self):
        blob = json.dumps(self.structure_key(), default=str, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


class SharingReport:
    def __init__(self, ok, condition=None, detail=""):
        self.ok = ok
        self.condition = condition
        self.detail = detail

    def __bool__(self):
        return self.ok

    def __repr__(self):
        if self.ok:
            return "SharingReport(ok)"
        return f"SharingReport(condition={self.condition}, detail={self.detail!r})"


def validate_sharing(spec, schema=None):
    """Check the three sharing conditions that give the permutation property.

    (1) one processor per (aggregator-type, neighbor-type, edge-type) triple,
    (2) one pooling function and one combiner per vertex type,
    (3) every pooling function is commutative (mean, sum or max).
    Returns a SharingReport describing the first violated condition.
    """
    schema = schema or spec.schema
    # condition 1: processor table covers every direction, one id per triple
    by_triple = {}
    for triple in schema.ordered_relations():
        pid = spec.processors.get(triple)
        if pid is None:
            return SharingReport(False, 1, f"no processor for triple {triple}")
        by_triple[triple] = {pid}
    for (v, n, e), pid in spec.vertex_processors.items():
        try:
            tv, tn = schema.type_of(v), schema.type_of(n)
        except IndexError:
            return SharingReport(False, 1, f"override for out-of-range pair {(v, n)}")
        triple = (tv, tn, e)
        if triple not in by_triple:
            return SharingReport(False, 1, f"override for unknown triple {triple}")
        by_triple[triple].add(pid)
    for triple, pids in by_triple.items():
        if len(pids) > 1:
            return SharingReport(
                False, 1, f"triple {triple} uses multiple processors {sorted(pids)}"
            )
    # condition 2: pooling and combiner uniform within each vertex type
    for name, _ in schema.vertex_types:
        if name not in spec.pooling:
            return SharingReport(False, 2, f"no pooling for vertex type {name!r}")
        block = schema.block(name)
        pools = {spec.pooling[name]}
        combs = {name}
        for v in range(block.start, block.stop):
            pools.add(spec.vertex_pooling.get(v, spec.pooling[name]))
            combs.add(spec.vertex_combiners.get(v, name))
        if len(pools) > 1:
            return SharingReport(
                False, 2, f"type {name!r} mixes pooling functions {sorted(pools)}"
            )
        if len(combs) > 1:
            return SharingReport(
                False, 2, f"type {name!r} mixes combiners {sorted(combs)}"
            )
    # condition 3: pooling must satisfy the commutative law
    for name, kind in spec.pooling.items():
        if kind not in COMMUTATIVE_POOLINGS:
            return SharingReport(
                False, 3, f"pooling {kind!r} for type {name!r} is not commutative"
            )
    return SharingReport(True)


def _checked_sharing(spec):
    if spec._sharing is None:
        spec._sharing = validate_sharing(spec)
    if not spec._sharing:
        raise ValueError(f"spec fails sharing validation: {spec._sharing}")


class GnnLayerParams:
    def __init__(self, processors, combiners, bn_scale=None, bn_shift=None):
        self.processors = processors  # {pid: FnnParams}
        self.combiners = combiners    # {vertex_type: (d_out, d_prev) weight}
        self.bn_scale = bn_scale      # {vertex_type: (d_out,)} or None
        self.bn_shift = bn_shift
        self.bn_running = None        # {vertex_type: [mean, var]} when BN on


class GnnParams:
    """Trainable parameters; count is independent of vertex counts."""

    def __init__(self, layers):
        self.layers = layers

    def named(self):
        out = {}
        for l, layer in enumerate(self.layers, start=1):
            for pid in sorted(layer.processors):
                out.update(layer.processors[pid].named(f"L{l}.proc.{pid}."))
            for t in sorted(layer.combiners):
                out[f"L{l}.comb.{t}"] = layer.combiners[t]
            if layer.bn_scale is not None:
                for t in sorted(layer.bn_scale):
                    out[f"L{l}.bn.{t}.scale"] = layer.bn_scale[t]
                    out[f"L{l}.bn.{t}.shift"] = layer.bn_shift[t]
        return out

    def n_params(self):
        return sum(int(a.size) for a in self.named().values())

    def copy(self):
        layers = []
        for layer in self.layers:
            lp = GnnLayerParams(
                {pid: p.copy() for pid, p in layer.processors.items()},
                {t: w.copy() for t, w in layer.combiners.items()},
                None if layer.bn_scale is None
                else {t: v.copy() for t, v in layer.bn_scale.items()},
                None if layer.bn_shift is None
                else {t: v.copy() for t, v in layer.bn_shift.items()},
            )
            if layer.bn_running is not None:
                lp.bn_running = {
                    t: [m.copy(), v.copy()] for t, (m, v) in layer.bn_running.items()
                }
            layers.append(lp)
        return GnnParams(layers)


def init_gnn_params(spec, rng):
    _checked_sharing(spec)
    layers = []
    for l in range(1, spec.n_layers + 1):
        d_out = spec.layer_dims[l - 1]
        processors = {}
        for (ta, tn, te), pid in sorted(spec.processors.items()):
            if pid in processors:
                continue
            in_dim = spec.proc_in_dim(tn, te, l)
            dims = [in_dim, *spec.proc_hidden, d_out]
            acts = [spec.proc_activation] * len(spec.proc_hidden) + ["identity"]
            processors[pid] = init_fnn(dims, acts, rng)
        combiners = {}
        for name, _ in spec.schema.vertex_types:
            d_prev = spec.rep_dim(name, l)
            bound = 1.0 / np.sqrt(max(d_prev, 1))
            combiners[name] = rng.uniform(-bound, bound, size=(d_out, d_prev))
        lp = GnnLayerParams(processors, combiners)
        if spec.use_batch_norm and l < spec.n_layers:
            lp.bn_scale = {name: np.ones(d_out) for name, _ in spec.schema.vertex_types}
            lp.bn_shift = {name: np.zeros(d_out) for name, _ in spec.schema.vertex_types}
            lp.bn_running = {
                name: [np.zeros(d_out), np.ones(d_out)]
                for name, _ in spec.schema.vertex_types
            }
        layers.append(lp)
    return GnnParams(layers)


def _check_graph(spec, graph):
    if graph.schema != spec.schema:
        raise ShapeError("graph schema does not match spec schema")
    for name, _ in spec.schema.vertex_types:
        if graph.feature_dim(name) != spec.input_dims[name]:
            raise ShapeError(
                f"{name}: feature dim {graph.feature_dim(name)} != "
                f"spec input dim {spec.input_dims[name]}"
            )
    for ename, dim in spec.edge_dims.items():
        gdim = graph.edge_dim(ename)
        if gdim != dim:
            raise ShapeError(f"edge {ename!r}: feature dim {gdim} != spec {dim}")


def type_batch_norm(stacked, scale=None, shift=None, eps=1e-12):
    """Normalize one vertex type's representations across a batch of graphs.

    stacked: (batch, count, dim); mean/variance are taken per feature over
    every vertex of the type in every graph, then the affine (scale, shift)
    is applied. Zero variance is handled by the eps floor.
    """
    stacked = np.asarray(stacked, dtype=np.float64)
    mu = stacked.mean(axis=(0, 1))
    var = stacked.var(axis=(0, 1))
    core = (stacked - mu) / np.sqrt(var + eps)
    if scale is None:
        return core
    return scale * core + shift


def _bn_forward(h, scale, shift, eps, train, running, momentum):
    if train:
        mu = h.mean(axis=(0, 1))
        var = h.var(axis=(0, 1))
        running[0][...] = momentum * running[0] + (1 - momentum) * mu
        running[1][...] = momentum * running[1] + (1 - momentum) * var
    else:
        mu, var = running[0], running[1]
    inv_std = 1.0 / np.sqrt(var + eps)
    core = (h - mu) * inv_std
    out = scale * core + shift
    return out, (core, inv_std, scale, train, h.shape[0] * h.shape[1])


def _bn_backward(cache, dout):
    core, inv_std, scale, train, n = cache
    dscale = (dout * core).sum(axis=(0, 1))
    dshift = dout.sum(axis=(0, 1))
    dcore = dout * scale
    if not train:
        return dcore * inv_std, dscale, dshift
    # batch statistics were part of the forward pass
    dh = (
        dcore
        - dcore.mean(axis=(0, 1))
        - core * (dcore * core).mean(axis=(0, 1))
    ) * inv_std
    return dh, dscale, dshift


def gnn_forward_batch(spec, params, graphs, train=False):
    """Forward pass over a batch of same-topology graphs.

    Returns ({type: (batch, count, d_last)}, cache). The cache retains every
    intermediate needed by gnn_backward.
    """
    if not graphs:
        raise ShapeError("empty graph batch")
    g0 = graphs[0]
    _check_graph(spec, g0)
    for g in graphs[1:]:
        if not g.same_topology(g0):
            raise ShapeError("graphs in a batch must share topology")
    vfeats = {
        name: np.stack([g.vertex_features[name] for g in graphs])
        for name, _ in spec.schema.vertex_types
    }
    group_feats = {
        key: np.stack([g.edge_groups()[key][2] for g in graphs])
        for key in spec.schema.ordered_relations()
    }
    return gnn_forward_stacked(spec, params, g0, vfeats, group_feats, train)


def _topology_plan(graph, schema):
    """Per-aggregating-type edge bookkeeping, cached on the (immutable) graph.

    For each vertex type: the ordered relation keys feeding it, the slice of
    each relation inside the type's concatenated edge axis, a vertex<-edge
    assignment matrix (for BLAS-backed sum/mean pooling), and a neighbor
    assignment matrix per relation (for the backward scatter).
    """
    plan = getattr(graph, "_pegnn_plan", None)
    if plan is not None:
        return plan
    plan = {}
    for name, count in schema.vertex_types:
        keys, spans, agg_all = [], {}, []
        nbr_mats = {}
        offset = 0
        for key in schema.ordered_relations():
            if key[0] != name:
                continue
            agg_local, nbr_local, _ = graph.edge_groups()[key]
            n_e = agg_local.size
            if n_e == 0:
                continue
            keys.append(key)
            spans[key] = (offset, n_e)
            offset += n_e
            agg_all.append(agg_local)
            n_count = schema.count(key[1])
            nmat = np.zeros((n_count, n_e))
            nmat[nbr_local, np.arange(n_e)] = 1.0
            nbr_mats[key] = nmat
        agg_all = np.concatenate(agg_all) if agg_all else np.zeros(0, dtype=np.int64)
        amat = np.zeros((count, offset))
        if offset:
            amat[agg_all, np.arange(offset)] = 1.0
        plan[name] = {
            "keys": keys, "spans": spans, "agg": agg_all,
            "assign": amat, "nbr": nbr_mats,
        }
    graph._pegnn_plan = plan
    return plan


def gnn_forward_stacked(spec, params, template, vfeats, group_feats, train=False):
    """Forward pass from pre-stacked feature arrays.

    template: any graph with the batch's (shared) topology; vfeats:
    {type: (batch, count, dim)}; group_feats: {(agg, nbr, edge):
    (batch, n_edges, edge_dim)} in the template's edge-group order. This is
    the fast path for training loops that hold features as arrays.
    """
    _checked_sharing(spec)
    g0 = template
    batch = next(iter(vfeats.values())).shape[0]
    reps = {
        name: np.asarray(vfeats[name], dtype=np.float64)
        for name, _ in spec.schema.vertex_types
    }
    plan = _topology_plan(g0, spec.schema)

    cache = {"template": g0, "batch": batch, "layers": [], "rep0": dict(reps)}
    for l in range(1, spec.n_layers + 1):
        d_out = spec.layer_dims[l - 1]
        act_kind = spec.output_activation if l == spec.n_layers else spec.hidden_activation
        lp = params.layers[l - 1]
        lcache = {"groups": {}, "types": {}, "act": act_kind}

        new_reps = {}
        for name, count in spec.schema.vertex_types:
            tplan = plan[name]
            pool_kind = spec.pooling[name]
            deg = g0.degrees(name)
            tcache = {"plan": tplan, "deg": deg, "pool": pool_kind}
            pooled = np.zeros((batch, count, d_out))
            if tplan["keys"]:
                ys = []
                for key in tplan["keys"]:
                    _, tn, te = key
                    agg_local, nbr_local, _ = g0.edge_groups()[key]
                    n_e = agg_local.size
                    x = np.concatenate(
                        [reps[tn][:, nbr_local, :], group_feats[key]], axis=2
                    ).reshape(batch * n_e, -1)
                    proc = lp.processors[spec.processors[key]]
                    y, pc = fnn_apply(proc, x)
                    ys.append(y.reshape(batch, n_e, d_out))
                    lcache["groups"][key] = (pc, nbr_local, n_e)
                all_y = ys[0] if len(ys) == 1 else np.concatenate(ys, axis=1)
                tcache["all_y_edges"] = all_y.shape[1]
                if pool_kind in ("mean", "sum"):
                    pooled = np.tensordot(tplan["assign"], all_y, axes=(1, 1))
                    pooled = pooled.transpose(1, 0, 2)
                    if pool_kind == "mean":
                        pooled = pooled / np.maximum(deg, 1.0)[None, :, None]
                else:  # max
                    agg_all = tplan["agg"]
                    argmax = np.zeros((batch, count, d_out), dtype=np.int64)
                    for v in range(count):
                        idx = np.nonzero(agg_all == v)[0]
                        if idx.size == 0:
                            continue
                        sub = all_y[:, idx, :]
                        am = sub.argmax(axis=1)
                        pooled[:, v, :] = np.take_along_axis(sub, am[:, None, :], 1)[:, 0, :]
                        argmax[:, v, :] = idx[am]
                    tcache["max_argmax"] = argmax

            w = lp.combiners[name]
            z = reps[name] @ w.T + pooled
            h = activate(act_kind, z)
            tcache["prev"] = reps[name]
            tcache["z"] = z
            tcache["h"] = h
            if lp.bn_scale is not None:
                out, bc = _bn_forward(
                    h, lp.bn_scale[name], lp.bn_shift[name], spec.bn_eps,
                    train, lp.bn_running[name], spec.bn_momentum,
                )
                tcache["bn"] = bc
                new_reps[name] = out
            else:
                new_reps[name] = h
            lcache["types"][name] = tcache
        cache["layers"].append(lcache)
        reps = new_reps
    cache["out"] = reps
    return reps, cache


def gnn_forward(spec, params, graph):
    """Single-graph forward; returns {type: (count, d_last)}."""
    reps, _ = gnn_forward_batch(spec, params, [graph])
    return {name: r[0] for name, r in reps.items()}


def gnn_backward(spec, params, cache, upstream):
    """Gradients of sum(upstream * output) for all trainable parameters.

    upstream: {type: (batch, count, d_last)} (missing types treated as zero).
    Returns (grads, feature_grads) where grads matches params.named() and
    feature_grads gives d/d(vertex features) per type.
    """
    if not cache.get("layers"):
        raise ValueError("forward cache missing")
    batch = cache["batch"]
    grads = {}

    def add(name, value):
        if name in grads:
            grads[name] += value
        else:
            grads[name] = value

    d_reps = {}
    for name, _ in spec.schema.vertex_types:
        count = spec.schema.count(name)
        d_last = spec.layer_dims[-1]
        d_reps[name] = np.asarray(
            upstream.get(name, np.zeros((batch, count, d_last))), dtype=np.float64
        )

    plan = _topology_plan(cache["template"], spec.schema)
    for l in range(spec.n_layers, 0, -1):
        lp = params.layers[l - 1]
        lcache = cache["layers"][l - 1]
        act_kind = lcache["act"]
        d_prev = {}
        d_group_y = {}
        for name, _ in spec.schema.vertex_types:
            tcache = lcache["types"][name]
            tplan = tcache["plan"]
            dout = d_reps[name]
            if "bn" in tcache:
                dout, dscale, dshift = _bn_backward(tcache["bn"], dout)
                add(f"L{l}.bn.{name}.scale", dscale)
                add(f"L{l}.bn.{name}.shift", dshift)
            dz = dout * activate_grad(act_kind, tcache["z"], tcache["h"])
            prev = tcache["prev"]
            w = lp.combiners[name]
            add(f"L{l}.comb.{name}",
                np.tensordot(dz, prev, axes=([0, 1], [0, 1])))
            d_prev[name] = dz @ w

            if not tplan["keys"]:
                continue
            # pooling backward: route dz to each contributing edge
            pool_kind = tcache["pool"]
            if pool_kind == "max":
                argmax = tcache["max_argmax"]
                d_all = np.zeros((batch, tcache["all_y_edges"], dz.shape[2]))
                b_idx = np.arange(batch)[:, None, None]
                f_idx = np.arange(dz.shape[2])[None, None, :]
                np.add.at(d_all, (b_idx, argmax, f_idx), dz)
            else:
                d_pool = dz
                if pool_kind == "mean":
                    d_pool = dz / np.maximum(tcache["deg"], 1.0)[None, :, None]
                d_all = d_pool[:, tplan["agg"], :]
            for key in tplan["keys"]:
                start, n_e = tplan["spans"][key]
                d_group_y[key] = d_all[:, start : start + n_e, :]

        for key, (pc, nbr_local, n_e) in lcache["groups"].items():
            ta, tn, te = key
            dy = d_group_y[key].reshape(batch * n_e, -1)
            proc = lp.processors[spec.processors[key]]
            w_g, b_g, dx = fnn_backward_from_cache(proc, pc, dy)
            pid = spec.processors[key]
            for i in range(proc.n_layers):
                add(f"L{l}.proc.{pid}.W{i}", w_g[i])
                add(f"L{l}.proc.{pid}.b{i}", b_g[i])
            d_nbr_dim = spec.rep_dim(tn, l)
            if d_nbr_dim:
                dn = dx[:, :d_nbr_dim].reshape(batch, n_e, d_nbr_dim)
                nmat = plan[ta]["nbr"][key]
                d_prev[tn] += np.tensordot(nmat, dn, axes=(1, 1)).transpose(1, 0, 2)
        d_reps = d_prev

    # zero-fill gradients for any parameter untouched this pass
    for name, arr in params.named().items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return grads, d_reps


class ReadoutSpec:
    """Map from per-type final representations to action vector or scalar q.

    kinds: "take" (actor: the named type's dim-1 representations, in vertex
    order), "take_sigmoid" (same through a sigmoid), "weighted_sum"
    (critic: lambda1 * sum of first type + lambda2 * sum of second type).
    """

    def __init__(self, kind, vertex_type=None, lambda1=1.0, lambda2=0.0,
                 sum_types=None):
        if kind not in ("take", "take_sigmoid", "weighted_sum"):
            raise ValueError(f"unknown readout kind {kind!r}")
        self.kind = kind
        self.vertex_type = vertex_type
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.sum_types = sum_types


def _final_dim_check(arr):
    if arr.shape[-1] != 1:
        raise ShapeError(
            f"readout requires final per-vertex dimension 1, got {arr.shape[-1]}"
        )


def readout(rspec, reps):
    """Apply a readout to batched reps {type: (batch, count, 1)}.

    Actor kinds return (batch, count); the critic kind returns (batch,).
    """
    if rspec.kind in ("take", "take_sigmoid"):
        arr = reps[rspec.vertex_type]
        _final_dim_check(arr)
        out = arr[..., 0]
        if rspec.kind == "take_sigmoid":
            out = 1.0 / (1.0 + np.exp(-out))
        return out
    t1, t2 = rspec.sum_types
    _final_dim_check(reps[t1])
    _final_dim_check(reps[t2])
    return rspec.lambda1 * reps[t1][..., 0].sum(axis=1) + rspec.lambda2 * reps[
        t2
    ][..., 0].sum(axis=1)


def readout_backward(rspec, reps, d_out):
    """Upstream gradients for gnn_backward given d(loss)/d(readout)."""
    upstream = {}
    if rspec.kind in ("take", "take_sigmoid"):
        arr = reps[rspec.vertex_type]
        g = np.asarray(d_out, dtype=np.float64)
        if rspec.kind == "take_sigmoid":
            s = 1.0 / (1.0 + np.exp(-arr[..., 0]))
            g = g * s * (1.0 - s)
        upstream[rspec.vertex_type] = g[..., None]
        return upstream
    t1, t2 = rspec.sum_types
    g = np.asarray(d_out, dtype=np.float64)
    b1 = np.broadcast_to(
        (rspec.lambda1 * g)[:, None, None], reps[t1].shape
    ).copy()
    b2 = np.broadcast_to(
        (rspec.lambda2 * g)[:, None, None], reps[t2].shape
    ).copy()
    upstream[t1] = b1
    upstream[t2] = b2
    return upstream


class FnnReadout:
    """Dense readout over concatenated vertex representations.

    This deliberately breaks the permutation property (ablation / negative
    control): the output depends on vertex ordering.
    """

    def __init__(self, params):
        self.params = params

    @classmethod
    def build(cls, schema, d_last, out_dim, hidden, rng, activation="relu",
              output_activation="identity"):
        in_dim = sum(count * d_last for _, count in schema.vertex_types)
        dims = [in_dim, *hidden, out_dim]
        acts = [activation] * len(hidden) + [output_activation]
        return cls(init_fnn(dims, acts, rng))

    def forward(self, schema, reps):
        flat = np.concatenate(
            [reps[name].reshape(reps[name].shape[0], -1) for name, _ in schema.vertex_types],
            axis=1,
        )
        y, cache = fnn_apply(self.params, flat)
        return y, (cache, {n: reps[n].shape for n, _ in schema.vertex_types})

    def backward(self, schema, cache, d_out):
        fc, shapes = cache
        w_g, b_g, dflat = fnn_backward_from_cache(self.params, fc, d_out)
        grads = {}
        for i in range(self.params.n_layers):
            grads[f"readout.W{i}"] = w_g[i]
            grads[f"readout.b{i}"] = b_g[i]
        upstream = {}
        off = 0
        for name, _ in schema.vertex_types:
            shape = shapes[name]
            size = shape[1] * shape[2]
            upstream[name] = dflat[:, off : off + size].reshape(shape)
            off += size
        return grads, upstream

    def named(self):
        return self.params.named("readout.")


def save_checkpoint(path, spec, params):
    """Write parameters with the spec's structural hash; bit-exact round trip."""
    arrays = {k: v for k, v in params.named().items()}
    running = {}
    for l, layer in enumerate(params.layers, start=1):
        if layer.bn_running:
            for t, (m, v) in layer.bn_running.items():
                running[f"L{l}.bnrun.{t}.mean"] = m
                running[f"L{l}.bnrun.{t}.var"] = v
    meta = json.dumps({"format": "gnn-ckpt-v1", "spec": spec.structure_hash()})
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8),
             **arrays, **running)


def load_checkpoint(path, spec):
    """Load a checkpoint into freshly shaped parameters for this spec."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("spec") != spec.structure_hash():
            raise ValueError("checkpoint spec hash does not match this spec")
        params = init_gnn_params(spec, np.random.default_rng(0))
        for name, arr in params.named().items():
            if name not in data:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if data[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {data[name].shape} != {arr.shape}")
            arr[...] = data[name]
        for l, layer in enumerate(params.layers, start=1):
            if layer.bn_running:
                for t in layer.bn_running:
                    layer.bn_running[t][0][...] = data[f"L{l}.bnrun.{t}.mean"]
                    layer.bn_running[t][1][...] = data[f"L{l}.bnrun.{t}.var"]
    return params


# Concrete architectures -----------------------------------------------------

from .hetgraph import (  # noqa: E402  (names used by the builders below)
    D2D_COM,
    D2D_INF,
    D2D_RX,
    D2D_TX,
    PRA_DU,
    PRA_LINK,
    PRA_USER,
    GraphSchema,
)


def pra_schema(k, m):
    return GraphSchema(
        vertex_types=[(PRA_USER, k), (PRA_DU, m)],
        edge_codes={PRA_LINK: 1},
        relations=[(PRA_USER, PRA_DU, PRA_LINK)],
    )


def _pra_spec(k, m, history_len, user_dim, dims, proc_hidden, use_batch_norm):
    return GnnSpec(
        schema=pra_schema(k, m),
        input_dims={PRA_USER: user_dim, PRA_DU: 0},
        edge_dims={PRA_LINK: history_len + 1},
        layer_dims=dims,
        processors={
            (PRA_DU, PRA_USER, PRA_LINK): "du_from_user",
            (PRA_USER, PRA_DU, PRA_LINK): "user_from_du",
        },
        pooling={PRA_USER: "mean", PRA_DU: "mean"},
        proc_hidden=proc_hidden,
        output_activation="identity",
        use_batch_norm=use_batch_norm,
    )


def pra_actor_spec(k, m, history_len=2, dims=(128, 128, 1), proc_hidden=(128,),
                   use_batch_norm=False):
    """Streaming actor: state graph in, one rate per user out."""
    return _pra_spec(k, m, history_len, 3, dims, proc_hidden, use_batch_norm)


def pra_critic_spec(k, m, history_len=2, dims=(128, 128, 1), proc_hidden=(128,),
                    use_batch_norm=False):
    """Streaming critic: state-action graph in (user features carry the action)."""
    return _pra_spec(k, m, history_len, 4, dims, proc_hidden, use_batch_norm)


def pra_actor_readout():
    return ReadoutSpec("take", vertex_type=PRA_USER)


def pra_critic_readout(lambda1=1.0, lambda2=0.0):
    return ReadoutSpec(
        "weighted_sum", lambda1=lambda1, lambda2=lambda2,
        sum_types=(PRA_USER, PRA_DU),
    )


def d2d_schema(k):
    return GraphSchema(
        vertex_types=[(D2D_TX, k), (D2D_RX, k)],
        edge_codes={D2D_COM: 1, D2D_INF: 2},
        relations=[(D2D_TX, D2D_RX, D2D_COM), (D2D_TX, D2D_RX, D2D_INF)],
    )


def d2d_actor_spec(k, dims=(8, 8, 8, 8, 8, 1), proc_hidden=(16,),
                   use_batch_norm=False):
    """Link-scheduling actor: four processors, one per direction/edge type."""
    return GnnSpec(
        schema=d2d_schema(k),
        input_dims={D2D_TX: 0, D2D_RX: 0},
        edge_dims={D2D_COM: 1, D2D_INF: 1},
        layer_dims=dims,
        processors={
            (D2D_TX, D2D_RX, D2D_COM): "tx_from_rx_com",
            (D2D_TX, D2D_RX, D2D_INF): "tx_from_rx_inf",
            (D2D_RX, D2D_TX, D2D_COM): "rx_from_tx_com",
            (D2D_RX, D2D_TX, D2D_INF): "rx_from_tx_inf",
        },
        pooling={D2D_TX: "mean", D2D_RX: "mean"},
        proc_hidden=proc_hidden,
        output_activation="identity",
        use_batch_norm=use_batch_norm,
    )


def d2d_actor_readout():
    """Relaxed schedule from transmitter representations through a sigmoid."""
    return ReadoutSpec("take_sigmoid", vertex_type=D2D_TX)
