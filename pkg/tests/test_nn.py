import numpy as np
import pytest

from flowdistill import nn
from flowdistill.errors import ConfigError, ConsistencyError
from flowdistill.schedule import T_HI, T_LO


# ---------------------------------------------------------------------------
# tape primitives


def test_quadratic_loss_gradient_is_exact():
    p = nn.Node(np.array([1.0, -2.0, 3.5]))
    loss = nn.mul(0.5, nn.sqsum(p))
    (g,) = nn.gradients(loss, [p])
    np.testing.assert_array_equal(g, p.value)


def test_disconnected_node_gets_zero_gradient():
    p = nn.Node(np.array([1.0, 2.0]))
    q = nn.Node(np.array([[3.0, 4.0]]))
    loss = nn.sqsum(p)
    gq = nn.gradients(loss, [q])[0]
    np.testing.assert_array_equal(gq, np.zeros((1, 2)))


def test_non_scalar_loss_rejected():
    p = nn.Node(np.array([1.0, 2.0]))
    with pytest.raises(ConsistencyError):
        nn.gradients(nn.mul(p, 2.0), [p])


def test_repeated_use_accumulates():
    x = nn.Node(np.array([1.0, -1.0]))
    y = nn.add(x, x)
    loss = nn.sqsum(y)
    (g,) = nn.gradients(loss, [x])
    np.testing.assert_allclose(g, 8.0 * x.value)


@pytest.mark.parametrize(
    "name,build",
    [
        ("add_broadcast", lambda a, b: nn.sum_all(nn.silu(nn.add(a, b)))),
        ("sub", lambda a, b: nn.sqsum(nn.sub(a, b))),
        ("mul_broadcast", lambda a, b: nn.sum_all(nn.mul(a, b))),
        ("softplus", lambda a, b: nn.mean_all(nn.softplus(nn.mul(a, b)))),
        ("concat", lambda a, b: nn.sqsum(nn.concat([nn.silu(a), nn.mul(b, b)], axis=1))),
    ],
)
def test_elementwise_primitives_match_finite_differences(name, build):
    rng = np.random.default_rng(len(name))
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(1, 3)) if "broadcast" in name else rng.normal(size=(4, 3))
    err = nn.finite_difference_check(build, [a, b], coordinates=15, rng=1)
    assert err < 1e-6


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    build = lambda a_, w_: nn.sqsum(nn.silu(nn.matmul(a_, w_)))
    assert nn.finite_difference_check(build, [a, w], coordinates=35, rng=2) < 1e-6


def test_gather_rows_accumulates_repeated_indices():
    table = nn.Node(np.arange(12.0).reshape(4, 3))
    idx = np.array([1, 1, 3])
    out = nn.gather_rows(table, idx)
    np.testing.assert_array_equal(out.value, table.value[idx])
    loss = nn.sum_all(out)
    (g,) = nn.gradients(loss, [table])
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(g, expected)


def test_custom_op_value_and_vjp():
    x = np.array([[0.3, -0.7]])
    xn = nn.Node(x)
    loss = nn.sqsum(nn.custom_op(xn, np.sin(x), lambda g: g * np.cos(x)))
    (g,) = nn.gradients(loss, [xn])
    np.testing.assert_allclose(g, 2.0 * np.sin(x) * np.cos(x), rtol=1e-12)


def test_stop_gradient_value_and_zero_grad():
    x = nn.Node(np.array([1.0, 2.0]))
    sg = nn.stop_gradient(x)
    np.testing.assert_array_equal(sg.value, x.value)
    loss = nn.sqsum(sg)
    (g,) = nn.gradients(loss, [x])
    np.testing.assert_array_equal(g, np.zeros(2))


def test_stop_gradient_blocks_selected_paths_only():
    # two-step chain y2 = f(sg(y1)) + y1 contributes through the direct y1 term
    # only; removing the sg must change the gradient
    x = nn.Node(np.array([0.7]))
    y1 = nn.mul(x, x)
    y2_sg = nn.add(nn.mul(nn.stop_gradient(y1), 3.0), y1)
    y2_full = nn.add(nn.mul(y1, 3.0), y1)
    g_sg = nn.gradients(nn.sum_all(y2_sg), [x])[0]
    g_full = nn.gradients(nn.sum_all(y2_full), [x])[0]
    np.testing.assert_allclose(g_sg, 2.0 * 0.7)
    np.testing.assert_allclose(g_full, 8.0 * 0.7)
    assert not np.allclose(g_sg, g_full)


# ---------------------------------------------------------------------------
# network spec / parameters


def test_layout_and_param_count_hand_check():
    spec = nn.NetSpec(
        input_dim=2, hidden=(3,), time_features=1, class_count=2, class_embed_dim=4
    )
    # features: 2 + 2*1 + 4 = 8; embed (3,4)=12, w0 (8,3)=24, b0 3, w_out (3,2)=6, b_out 2
    assert spec.feature_dim == 8
    assert nn.param_count(spec) == 12 + 24 + 3 + 6 + 2
    names = [name for name, _, _ in nn.layout(spec)]
    assert names == ["class_embed", "w0", "b0", "w_out", "b_out"]


def test_param_views_share_memory():
    spec = nn.NetSpec(input_dim=2, hidden=(3,), time_features=0)
    flat = np.zeros(nn.param_count(spec))
    views = nn.param_views(spec, flat)
    views["b0"][...] = 7.0
    assert np.all(flat[nn.layout(spec)[1][2] : nn.layout(spec)[1][2] + 3] == 7.0)


def test_netspec_validation():
    with pytest.raises(ConfigError):
        nn.NetSpec(input_dim=0)
    with pytest.raises(ConfigError):
        nn.NetSpec(input_dim=2, hidden=(0,))
    with pytest.raises(ConfigError):
        nn.NetSpec(input_dim=2, activation="relu")
    with pytest.raises(ConfigError):
        nn.NetSpec(input_dim=2, time_features=-1)
    spec = nn.NetSpec(input_dim=3)
    assert spec.output_dim == 3


def test_zero_init_head_gives_zero_output():
    spec = nn.NetSpec(input_dim=2, hidden=(16, 16), time_features=4, class_count=2)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(1).normal(size=(5, 2))
    out = nn.forward(spec, params, x, 0.5, class_idx=np.zeros(5, dtype=int))
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_forward_determinism():
    spec = nn.NetSpec(input_dim=2, hidden=(8,), time_features=2)
    params = nn.init_params(spec, 3)
    nn.param_views(spec, params)["w_out"][...] = 0.5
    x = np.random.default_rng(2).normal(size=(4, 2))
    a = nn.forward(spec, params, x, 0.3)
    b = nn.forward(spec, params, x, 0.3)
    np.testing.assert_array_equal(a, b)


def test_class_embedding_changes_output():
    spec = nn.NetSpec(input_dim=2, hidden=(8,), time_features=2, class_count=3)
    params = nn.init_params(spec, 5)
    nn.param_views(spec, params)["w_out"][...] = np.random.default_rng(6).normal(size=(8, 2))
    x = np.zeros((1, 2))
    out0 = nn.forward(spec, params, x, 0.5, class_idx=0)
    out1 = nn.forward(spec, params, x, 0.5, class_idx=1)
    out_null = nn.forward(spec, params, x, 0.5)
    assert not np.allclose(out0, out1)
    assert not np.allclose(out0, out_null)


def test_class_index_validation():
    spec = nn.NetSpec(input_dim=2, hidden=(4,), class_count=2)
    params = nn.init_params(spec, 0)
    with pytest.raises(ConsistencyError):
        nn.forward(spec, params, np.zeros((1, 2)), 0.5, class_idx=5)
    uncond = nn.NetSpec(input_dim=2, hidden=(4,))
    with pytest.raises(ConsistencyError):
        nn.forward(uncond, nn.init_params(uncond, 0), np.zeros((1, 2)), 0.5, class_idx=0)
    with pytest.raises(ConsistencyError):
        nn.forward(spec, params, np.zeros((1, 3)), 0.5)


def test_empty_hidden_is_a_linear_map():
    spec = nn.NetSpec(input_dim=2, hidden=(), time_features=0)
    params = np.zeros(nn.param_count(spec))
    views = nn.param_views(spec, params)
    views["w_out"][...] = np.array([[1.0, 0.0], [0.0, 2.0]])
    views["b_out"][...] = np.array([0.5, -0.5])
    out = nn.forward(spec, params, np.array([[3.0, 4.0]]), 0.5)
    np.testing.assert_allclose(out, [[3.5, 7.5]])


def test_time_features_log_snr_alignment():
    feats = nn.time_features(3, [0.5, 0.2])
    assert feats.shape == (2, 6)
    u = np.log(np.array([0.5, 0.2]) / (1 - np.array([0.5, 0.2])))
    freqs = 0.25 * 2.0 ** np.arange(3)
    np.testing.assert_allclose(feats[:, :3], np.sin(u[:, None] * freqs[None, :]))
    np.testing.assert_allclose(feats[:, 3:], np.cos(u[:, None] * freqs[None, :]))
    # outside the clamp the features saturate at the boundary value
    np.testing.assert_array_equal(nn.time_features(3, 0.0), nn.time_features(3, T_LO))
    np.testing.assert_array_equal(nn.time_features(3, 1.0), nn.time_features(3, T_HI))
    assert nn.time_features(0, [0.3]).shape == (1, 0)


# ---------------------------------------------------------------------------
# full-network gradients


def small_spec():
    return nn.NetSpec(input_dim=2, hidden=(8, 6), time_features=2, class_count=2, class_embed_dim=3)


def randomized_params(spec, seed):
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, seed)
    views = nn.param_views(spec, params)
    views["w_out"][...] = rng.normal(size=views["w_out"].shape) * 0.3
    views["b_out"][...] = rng.normal(size=views["b_out"].shape) * 0.1
    return params


def test_param_gradients_match_finite_differences():
    spec = small_spec()
    params = randomized_params(spec, 11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 2))
    target = rng.normal(size=(6, 2))
    cls = rng.integers(0, 2, size=6)

    def closure(pnodes):
        out = nn.tape_forward(spec, pnodes, x, 0.4, class_idx=cls)
        return nn.mean_all(nn.mul(nn.sub(out, target), nn.sub(out, target)))

    loss, analytic = nn.grad(spec, params, closure)
    assert loss > 0.0

    h = 1e-5
    picks = rng.choice(params.size, size=100, replace=False)
    for pick in picks:
        pp = params.copy()
        pm = params.copy()
        pp[pick] += h
        pm[pick] -= h
        lp, _ = nn.grad(spec, pp, closure)
        lm, _ = nn.grad(spec, pm, closure)
        fd = (lp - lm) / (2 * h)
        assert abs(fd - analytic[pick]) / max(abs(fd), abs(analytic[pick]), 1e-10) < 1e-4


def test_input_gradients_match_finite_differences():
    spec = small_spec()
    params = randomized_params(spec, 13)
    pnodes = nn.param_nodes(spec, params)

    def build(x_node):
        out = nn.tape_forward(spec, pnodes, x_node, 0.6, class_idx=1)
        return nn.sqsum(out)

    x = np.random.default_rng(14).normal(size=(4, 2))
    assert nn.finite_difference_check(build, [x], coordinates=8, rng=3) < 1e-6


def test_unused_parameter_block_gets_zero_gradient():
    spec = small_spec()
    params = randomized_params(spec, 15)
    x = np.random.default_rng(16).normal(size=(5, 2))

    def closure(pnodes):
        out = nn.tape_forward(spec, pnodes, x, 0.5, class_idx=np.zeros(5, dtype=int))
        return nn.sqsum(out)

    _, g = nn.grad(spec, params, closure)
    emb_grad = nn.param_views(spec, g)["class_embed"]
    assert np.any(emb_grad[0] != 0.0)
    np.testing.assert_array_equal(emb_grad[1], np.zeros(3))  # class 1 unused
    np.testing.assert_array_equal(emb_grad[2], np.zeros(3))  # null row unused


def test_loss_closure_must_return_node():
    spec = nn.NetSpec(input_dim=1, hidden=(2,), time_features=0)
    with pytest.raises(ConsistencyError):
        nn.grad(spec, nn.init_params(spec, 0), lambda pnodes: 1.0)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_grad_keeps_params():
    state = nn.adam_init(3)
    params = np.array([1.0, -2.0, 0.5])
    nn.adam_step(state, params, np.zeros(3))
    np.testing.assert_array_equal(params, [1.0, -2.0, 0.5])
    assert state.step == 1


def test_adam_first_step_closed_form():
    # beta1 = 0: after one step from fresh state the update is
    # lr * g / (|g| + eps) elementwise
    lr = 1e-3
    state = nn.adam_init(3, lr=lr)
    g = np.array([0.2, -4.0, 1e-12])
    params = np.zeros(3)
    nn.adam_step(state, params, g)
    expected = -lr * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(params, expected, rtol=1e-12)


def test_adam_defaults_and_determinism():
    state = nn.adam_init(4)
    assert state.beta1 == 0.0 and state.beta2 == 0.999 and state.eps == 1e-8

    def run():
        st = nn.adam_init(4, lr=0.01)
        p = np.ones(4)
        rng = np.random.default_rng(77)
        for _ in range(50):
            g = rng.normal(size=4)
            nn.adam_step(st, p, g)
        return p

    np.testing.assert_array_equal(run(), run())


def test_adam_shape_mismatch():
    state = nn.adam_init(3)
    with pytest.raises(ConsistencyError):
        nn.adam_step(state, np.zeros(4), np.zeros(4))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    spec = small_spec()
    params = randomized_params(spec, 21)
    path = tmp_path / "net.bin"
    nn.save_checkpoint(path, spec, params)
    loaded = nn.load_checkpoint(path, spec)
    np.testing.assert_array_equal(loaded, params)
    sidecar = (tmp_path / "net.bin.spec.txt").read_text()
    assert "hidden: 8,6" in sidecar
    assert f"parameters: {params.size}" in sidecar
    assert "w_out" in sidecar


def test_checkpoint_rejects_wrong_spec(tmp_path):
    spec = small_spec()
    params = randomized_params(spec, 22)
    path = tmp_path / "net.bin"
    nn.save_checkpoint(path, spec, params)
    other = nn.NetSpec(input_dim=2, hidden=(8, 7), time_features=2, class_count=2, class_embed_dim=3)
    with pytest.raises(ConsistencyError):
        nn.load_checkpoint(path, other)


def test_checkpoint_rejects_truncation_and_nonfinite(tmp_path):
    spec = nn.NetSpec(input_dim=1, hidden=(2,), time_features=0)
    params = nn.init_params(spec, 0)
    path = tmp_path / "net.bin"
    nn.save_checkpoint(path, spec, params)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ConsistencyError):
        nn.load_checkpoint(path, spec)
    bad = params.copy()
    bad[0] = np.nan
    with pytest.raises(ConsistencyError):
        nn.save_checkpoint(tmp_path / "bad.bin", spec, bad)
