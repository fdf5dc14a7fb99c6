import numpy as np
import pytest

from graphrl.hetgraph import (
    VertexPermutation,
    build_d2d_state_graph,
    build_pra_state_action_graph,
    build_pra_state_graph,
    permute,
)
from graphrl.numcore import finite_diff_grad, rel_error
from graphrl.pegnn import (
    FnnReadout,
    GnnSpec,
    d2d_actor_readout,
    d2d_actor_spec,
    gnn_backward,
    gnn_forward,
    gnn_forward_batch,
    init_gnn_params,
    load_checkpoint,
    pra_actor_readout,
    pra_actor_spec,
    pra_critic_readout,
    pra_critic_spec,
    readout,
    readout_backward,
    save_checkpoint,
    type_batch_norm,
    validate_sharing,
)


def random_pra_state(k, m, t=2, rng=None, action=None):
    rng = rng or np.random.default_rng(0)
    users = rng.standard_normal((k, 3))
    edges = rng.standard_normal((k, m, t + 1))
    if action is None:
        return build_pra_state_graph(users, edges, k, m)
    return build_pra_state_action_graph(users, edges, action, k, m)


def small_pra_spec(k, m, **kw):
    return pra_actor_spec(k, m, dims=(6, 5, 1), proc_hidden=(4,), **kw)


def small_d2d_spec(k, **kw):
    return d2d_actor_spec(k, dims=(5, 4, 1), proc_hidden=(4,), **kw)


# -- sharing validator --------------------------------------------------------


def test_pra_spec_validates():
    assert validate_sharing(small_pra_spec(3, 2)).ok


def test_d2d_spec_validates_with_four_processors():
    spec = small_d2d_spec(3)
    assert len(set(spec.processors.values())) == 4
    assert validate_sharing(spec).ok


def test_per_vertex_combiner_override_violates_condition_2():
    spec = small_pra_spec(3, 2)
    spec.vertex_combiners = {0: "special"}
    report = validate_sharing(spec)
    assert not report.ok and report.condition == 2


def test_per_pair_processor_override_violates_condition_1():
    spec = small_pra_spec(3, 2)
    spec.vertex_processors = {(0, 3, "link"): "other"}
    report = validate_sharing(spec)
    assert not report.ok and report.condition == 1


def test_non_commutative_pooling_violates_condition_3():
    spec = small_pra_spec(2, 2)
    spec.pooling["user"] = "first"
    report = validate_sharing(spec)
    assert not report.ok and report.condition == 3


def test_forward_refuses_invalid_spec():
    spec = small_pra_spec(2, 2)
    spec.vertex_combiners = {0: "special"}
    params = None
    with pytest.raises(ValueError):
        init_gnn_params(spec, np.random.default_rng(0))


# -- forward -------------------------------------------------------------------


def test_zero_weights_give_activation_of_zero():
    spec = small_pra_spec(1, 1)
    params = init_gnn_params(spec, np.random.default_rng(0))
    for arr in params.named().values():
        arr[...] = 0.0
    g = random_pra_state(1, 1)
    reps = gnn_forward(spec, params, g)
    # relu(0) = 0 in hidden layers, identity(0) = 0 at the output
    assert np.all(reps["user"] == 0.0)
    assert np.all(reps["du"] == 0.0)


def test_mean_pooling_of_identical_neighbors_equals_single():
    # all edges to a du share one feature and all users share one feature,
    # so the du aggregation equals any single processed message
    rng = np.random.default_rng(1)
    spec = small_pra_spec(3, 1)
    params = init_gnn_params(spec, rng)
    users = np.tile(rng.standard_normal(3), (3, 1))
    edges = np.tile(rng.standard_normal(3), (3, 1, 1))
    g3 = build_pra_state_graph(users, edges, 3, 1)
    g1 = build_pra_state_graph(users[:1], edges[:1], 1, 1)
    spec1 = small_pra_spec(1, 1)
    reps3 = gnn_forward(spec, params, g3)
    reps1 = gnn_forward(spec1, params, g1)
    assert np.allclose(reps3["du"], reps1["du"], atol=1e-12)


def permuted_forward_diff(spec, params, graph, vtype, order, rspec=None):
    """Max |forward(permute(g)) - permute(forward(g))| over all types."""
    p = VertexPermutation(vtype, order)
    base = gnn_forward(spec, params, graph)
    permd = gnn_forward(spec, params, permute(graph, p))
    diff = 0.0
    for name in base:
        expected = base[name][p.order] if name == vtype else base[name]
        diff = max(diff, np.abs(permd[name] - expected).max())
    return diff


def test_forward_is_equivariant_under_user_swap():
    rng = np.random.default_rng(2)
    spec = small_pra_spec(2, 3)
    params = init_gnn_params(spec, rng)
    g = random_pra_state(2, 3, rng=rng)
    assert permuted_forward_diff(spec, params, g, "user", [1, 0]) <= 1e-10


def test_forward_equivariance_random_types_and_sizes():
    rng = np.random.default_rng(3)
    for _ in range(20):
        k = int(rng.integers(2, 6))
        m = int(rng.integers(1, 5))
        spec = small_pra_spec(k, m)
        params = init_gnn_params(spec, rng)
        g = random_pra_state(k, m, rng=rng)
        vtype = "user" if rng.random() < 0.5 else "du"
        n = k if vtype == "user" else m
        order = rng.permutation(n)
        assert permuted_forward_diff(spec, params, g, vtype, order) <= 1e-10


def test_d2d_forward_equivariance_joint_pair_permutation():
    rng = np.random.default_rng(4)
    for _ in range(10):
        k = int(rng.integers(2, 7))
        spec = small_d2d_spec(k)
        params = init_gnn_params(spec, rng)
        h = rng.uniform(0.1, 3.0, size=(k, k))
        g = build_d2d_state_graph(h)
        order = rng.permutation(k)
        # permuting pairs permutes tx and rx blocks identically
        g2 = permute(permute(g, VertexPermutation("tx", order)),
                     VertexPermutation("rx", order))
        a = gnn_forward(spec, params, g)
        b = gnn_forward(spec, params, g2)
        assert np.abs(b["tx"] - a["tx"][order]).max() <= 1e-10
        assert np.abs(b["rx"] - a["rx"][order]).max() <= 1e-10


def test_max_pooling_forward_backward():
    spec = small_pra_spec(3, 2)
    spec.pooling = {"user": "max", "du": "max"}
    rng = np.random.default_rng(5)
    params = init_gnn_params(spec, rng)
    g = random_pra_state(3, 2, rng=rng)
    reps, cache = gnn_forward_batch(spec, params, [g])
    up = {"user": rng.standard_normal(reps["user"].shape)}
    grads, _ = gnn_backward(spec, params, cache, up)
    named = params.named()
    w = named["L2.comb.user"]

    def loss_at(vals):
        old = w.copy()
        w[...] = vals
        out = gnn_forward(spec, params, g)
        w[...] = old
        return float((up["user"][0] * out["user"]).sum())

    fd = finite_diff_grad(loss_at, w.copy())
    assert rel_error(grads["L2.comb.user"], fd).max() < 1e-4


def test_batched_forward_matches_single():
    rng = np.random.default_rng(6)
    spec = small_pra_spec(2, 2)
    params = init_gnn_params(spec, rng)
    graphs = [random_pra_state(2, 2, rng=rng) for _ in range(4)]
    batched, _ = gnn_forward_batch(spec, params, graphs)
    for i, g in enumerate(graphs):
        single = gnn_forward(spec, params, g)
        for name in single:
            assert np.allclose(batched[name][i], single[name], atol=1e-14)


# -- backward ------------------------------------------------------------------


def grad_check_architecture(spec, graph, seed, atol=1e-4):
    rng = np.random.default_rng(seed)
    params = init_gnn_params(spec, rng)
    reps, cache = gnn_forward_batch(spec, params, [graph])
    up = {name: rng.standard_normal(r.shape) for name, r in reps.items()}
    grads, _ = gnn_backward(spec, params, cache, up)
    named = params.named()

    def loss():
        out, _ = gnn_forward_batch(spec, params, [graph])
        return float(sum((up[n] * out[n]).sum() for n in out))

    worst = 0.0
    for name, arr in named.items():
        if arr.size == 0:
            continue

        def loss_at(vals, arr=arr):
            old = arr.copy()
            arr[...] = vals
            v = loss()
            arr[...] = old
            return v

        fd = finite_diff_grad(loss_at, arr.copy())
        worst = max(worst, rel_error(grads[name], fd).max())
    assert worst < atol, worst


def test_backward_zero_upstream_is_zero():
    rng = np.random.default_rng(7)
    spec = small_pra_spec(2, 2)
    params = init_gnn_params(spec, rng)
    g = random_pra_state(2, 2, rng=rng)
    reps, cache = gnn_forward_batch(spec, params, [g])
    grads, feats = gnn_backward(spec, params, cache, {})
    assert all(np.all(v == 0) for v in grads.values())
    assert all(np.all(v == 0) for v in feats.values())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_fd_pra(seed):
    rng = np.random.default_rng(100 + seed)
    spec = pra_actor_spec(3, 2, dims=(4, 1), proc_hidden=(3,))
    g = random_pra_state(3, 2, rng=rng)
    grad_check_architecture(spec, g, seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_fd_d2d(seed):
    rng = np.random.default_rng(200 + seed)
    spec = d2d_actor_spec(3, dims=(4, 1), proc_hidden=(3,))
    g = build_d2d_state_graph(rng.uniform(0.1, 2.0, size=(3, 3)))
    grad_check_architecture(spec, g, seed)


def test_backward_matches_fd_with_batch_norm():
    rng = np.random.default_rng(300)
    spec = pra_actor_spec(2, 2, dims=(4, 1), proc_hidden=(3,), use_batch_norm=True)
    params = init_gnn_params(spec, rng)
    graphs = [random_pra_state(2, 2, rng=rng) for _ in range(3)]
    reps, cache = gnn_forward_batch(spec, params, graphs, train=True)
    up = {name: rng.standard_normal(r.shape) for name, r in reps.items()}
    grads, _ = gnn_backward(spec, params, cache, up)
    named = params.named()
    running_backup = [
        {t: [m.copy(), v.copy()] for t, (m, v) in layer.bn_running.items()}
        for layer in params.layers if layer.bn_running
    ]

    def loss():
        # restore running stats so repeated forwards do not drift them
        i = 0
        for layer in params.layers:
            if layer.bn_running:
                for t in layer.bn_running:
                    layer.bn_running[t][0][...] = running_backup[i][t][0]
                    layer.bn_running[t][1][...] = running_backup[i][t][1]
                i += 1
        out, _ = gnn_forward_batch(spec, params, graphs, train=True)
        return float(sum((up[n] * out[n]).sum() for n in out))

    worst = 0.0
    for name in ["L1.bn.user.scale", "L1.bn.user.shift", "L1.comb.user",
                 "L1.proc.du_from_user.W0"]:
        arr = named[name]

        def loss_at(vals, arr=arr):
            old = arr.copy()
            arr[...] = vals
            v = loss()
            arr[...] = old
            return v

        fd = finite_diff_grad(loss_at, arr.copy())
        worst = max(worst, rel_error(grads[name], fd).max())
    assert worst < 1e-4, worst


def test_shared_processor_grad_sums_contributions():
    # tie the two directions to one processor id: its gradient must equal the
    # sum of the per-direction gradients of an untied spec with equal weights
    rng = np.random.default_rng(8)
    k, m = 2, 2
    tied = small_pra_spec(k, m)
    tied.processors = {k_: "shared" for k_ in tied.processors}
    # input dims must agree for sharing both directions: make user dim 0 too
    tied.input_dims = {"user": 0, "du": 0}
    params = init_gnn_params(tied, rng)
    users = np.zeros((k, 0))
    edges = rng.standard_normal((k, m, 3))
    from graphrl.hetgraph import HeteroGraph  # build featureless variant
    base = build_pra_state_graph(np.zeros((k, 3)), edges, k, m)
    g = HeteroGraph(base.schema, base.adjacency, {"user": users}, {
        key: feat for key, feat in base.edge_features.items() if key[0] < key[1]
    })
    reps, cache = gnn_forward_batch(tied, params, [g])
    up = {name: rng.standard_normal(r.shape) for name, r in reps.items()}
    grads, _ = gnn_backward(tied, params, cache, up)

    def loss():
        out, _ = gnn_forward_batch(tied, params, [g])
        return float(sum((up[n] * out[n]).sum() for n in out))

    arr = params.named()["L1.proc.shared.W0"]

    def loss_at(vals):
        old = arr.copy()
        arr[...] = vals
        v = loss()
        arr[...] = old
        return v

    fd = finite_diff_grad(loss_at, arr.copy())
    assert rel_error(grads["L1.proc.shared.W0"], fd).max() < 1e-4


# -- readout -------------------------------------------------------------------


def test_critic_readout_sums_with_weights():
    rspec = pra_critic_readout(lambda1=1.0, lambda2=0.0)
    reps = {"user": np.array([[[0.5], [1.5]]]), "du": np.array([[[9.0]]])}
    assert readout(rspec, reps)[0] == 2.0


def test_actor_readout_is_equivariant():
    rspec = pra_actor_readout()
    reps = {"user": np.array([[[1.0], [2.0], [3.0]]]), "du": np.zeros((1, 1, 1))}
    out = readout(rspec, reps)
    perm = [2, 0, 1]
    out_p = readout(rspec, {"user": reps["user"][:, perm], "du": reps["du"]})
    assert np.array_equal(out_p, out[:, perm])


def test_critic_readout_is_invariant():
    rspec = pra_critic_readout(lambda1=0.7, lambda2=0.3)
    rng = np.random.default_rng(9)
    reps = {"user": rng.standard_normal((2, 4, 1)), "du": rng.standard_normal((2, 3, 1))}
    q = readout(rspec, reps)
    qp = readout(rspec, {
        "user": reps["user"][:, rng.permutation(4)],
        "du": reps["du"][:, rng.permutation(3)],
    })
    assert np.allclose(q, qp, atol=1e-12)


def test_readout_rejects_wide_final_dim():
    rspec = pra_actor_readout()
    with pytest.raises(Exception):
        readout(rspec, {"user": np.zeros((1, 2, 3)), "du": np.zeros((1, 1, 3))})


def test_sigmoid_readout_range_and_backward():
    rspec = d2d_actor_readout()
    rng = np.random.default_rng(10)
    reps = {"tx": rng.standard_normal((2, 3, 1)), "rx": rng.standard_normal((2, 3, 1))}
    out = readout(rspec, reps)
    assert np.all((out > 0) & (out < 1))
    up = readout_backward(rspec, reps, np.ones_like(out))
    s = out
    assert np.allclose(up["tx"][..., 0], s * (1 - s))


# -- batch norm ----------------------------------------------------------------


def test_batch_norm_constant_input_gives_shift():
    x = np.full((3, 4, 2), 5.0)
    out = type_batch_norm(x, scale=np.ones(2), shift=np.array([0.3, -0.2]))
    assert np.allclose(out[..., 0], 0.3) and np.allclose(out[..., 1], -0.2)


def test_batch_norm_standardizes():
    rng = np.random.default_rng(11)
    x = 3.0 + 2.0 * rng.standard_normal((8, 5, 4))
    core = type_batch_norm(x)
    assert np.abs(core.mean(axis=(0, 1))).max() <= 1e-8
    assert np.abs(core.var(axis=(0, 1)) - 1.0).max() <= 1e-6


def test_batch_norm_two_point_example():
    x = np.array([[[1.0]], [[3.0]]])  # two graphs, one vertex, one feature
    core = type_batch_norm(x)
    assert np.allclose(core[:, 0, 0], [-1.0, 1.0])


# -- parameter counting and checkpoints ----------------------------------------


def test_param_count_independent_of_graph_size():
    small = pra_actor_spec(2, 2, dims=(8, 8, 1), proc_hidden=(8,))
    large = pra_actor_spec(8, 5, dims=(8, 8, 1), proc_hidden=(8,))
    p_small = init_gnn_params(small, np.random.default_rng(0))
    p_large = init_gnn_params(large, np.random.default_rng(0))
    assert p_small.n_params() == p_large.n_params()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    spec = small_d2d_spec(3)
    params = init_gnn_params(spec, rng)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, spec, params)
    loaded = load_checkpoint(path, spec)
    for name, arr in params.named().items():
        assert np.array_equal(loaded.named()[name], arr)


def test_checkpoint_rejects_mismatched_spec(tmp_path):
    rng = np.random.default_rng(13)
    spec = small_d2d_spec(3)
    params = init_gnn_params(spec, rng)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, spec, params)
    other = small_d2d_spec(4)
    with pytest.raises(ValueError):
        load_checkpoint(path, other)


# -- negative control ------------------------------------------------------------


def test_fnn_readout_breaks_equivariance():
    rng = np.random.default_rng(14)
    broken = 0
    trials = 50
    for _ in range(trials):
        k, m = 3, 2
        spec = small_pra_spec(k, m)
        params = init_gnn_params(spec, rng)
        head = FnnReadout.build(spec.schema, 1, k, (16,), rng)
        g = random_pra_state(k, m, rng=rng)
        order = np.array([1, 2, 0])
        reps, _ = gnn_forward_batch(spec, params, [g])
        out, _ = head.forward(spec.schema, reps)
        reps_p, _ = gnn_forward_batch(
            spec, params, [permute(g, VertexPermutation("user", order))]
        )
        out_p, _ = head.forward(spec.schema, reps_p)
        if np.abs(out_p[0] - out[0][order]).max() > 1e-3:
            broken += 1
    assert broken >= int(0.9 * trials)


def test_linear_processor_mode():
    # empty processor hidden widths: each processor is a single linear map
    spec = pra_actor_spec(2, 2, dims=(6, 1), proc_hidden=())
    params = init_gnn_params(spec, np.random.default_rng(15))
    for layer in params.layers:
        for proc in layer.processors.values():
            assert proc.n_layers == 1
            assert proc.activations == ["identity"]
    g = random_pra_state(2, 2, rng=np.random.default_rng(16))
    reps, cache = gnn_forward_batch(spec, params, [g])
    up = {"user": np.ones_like(reps["user"])}
    grads, _ = gnn_backward(spec, params, cache, up)
    arr = params.named()["L1.proc.du_from_user.W0"]

    def loss_at(vals):
        old = arr.copy()
        arr[...] = vals
        out, _ = gnn_forward_batch(spec, params, [g])
        arr[...] = old
        return float(out["user"].sum())

    fd = finite_diff_grad(loss_at, arr.copy())
    assert rel_error(grads["L1.proc.du_from_user.W0"], fd).max() < 1e-4


def test_full_actor_permutation_property():
    # forward + identity readout: actions permute with users while a
    # simultaneous transmitter permutation leaves them untouched
    rng = np.random.default_rng(17)
    for _ in range(10):
        k = int(rng.integers(2, 6))
        m = int(rng.integers(2, 5))
        spec = small_pra_spec(k, m)
        params = init_gnn_params(spec, rng)
        rspec = pra_actor_readout()
        g = random_pra_state(k, m, rng=rng)
        reps, _ = gnn_forward_batch(spec, params, [g])
        action = readout(rspec, reps)[0]
        pu = rng.permutation(k)
        pd = rng.permutation(m)
        g2 = permute(g, VertexPermutation("user", pu))
        g2 = permute(g2, VertexPermutation("du", pd))
        reps2, _ = gnn_forward_batch(spec, params, [g2])
        action2 = readout(rspec, reps2)[0]
        assert np.abs(action2 - action[pu]).max() <= 1e-10
