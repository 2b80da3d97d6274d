import math
from dataclasses import replace

import numpy as np
import pytest

from multigraph_pf import autodiff as ad
from multigraph_pf.autodiff import Parameter, Tape, backward, finite_diff_check
from multigraph_pf.grid import ControlState, build_multigraph, make_batch
from multigraph_pf.model import (
    EPS_MSG,
    MLP,
    ModelConfig,
    PowerFlowMultiNet,
    edge_inputs,
    message_construct,
    message_normalize_update,
    power_mean_aggregate,
)
from multigraph_pf.training import Uniform, mutate_loads


def make_model(g, **cfg) -> PowerFlowMultiNet:
    model = PowerFlowMultiNet(ModelConfig(**cfg), len(g.control.vector()))
    model.fit_normalization(g.features[0])
    return model


def perturb(model, scale=0.05, seed=1):
    """Move every parameter off the zero-bias init so no ReLU sits on its kink."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value = np.asarray(p.value + scale * rng.normal(size=p.shape))


def mutants(spec, n, seed=0):
    rng = np.random.default_rng(seed)
    return [build_multigraph(mutate_loads(spec, Uniform(0.1), rng)) for _ in range(n)]


# -- message construction and aggregation -----------------------------------------------

def test_message_construct_example():
    out = message_construct(ad.Tensor([[1.0, -2.0]]), ad.Tensor([[0.5, 0.5]]))
    assert np.array_equal(out.value, [[1.5 + 1e-7, 1e-7]])


def test_message_construct_all_negative_gives_eps():
    out = message_construct(ad.Tensor(-np.ones((3, 4))), ad.Tensor(-np.ones((3, 4))))
    assert np.all(out.value == EPS_MSG)


def test_power_mean_p1_is_arithmetic_mean():
    rng = np.random.default_rng(0)
    msgs = rng.uniform(1e-7, 5.0, size=(40, 8))
    dst = rng.integers(0, 10, size=40)
    dst[:10] = np.arange(10)
    out = power_mean_aggregate(ad.Tensor(msgs), dst, 10, ad.Tensor(1.0))
    ref = ad.segment_mean(msgs, dst, 10).value
    assert np.max(np.abs(out.value - ref)) < 1e-12


def test_power_mean_large_p_approaches_max():
    out = power_mean_aggregate(ad.Tensor([[2.0], [4.0]]), np.array([0, 0]), 1, ad.Tensor(64.0))
    assert abs(out.value[0, 0] - 4.0) / 4.0 < 0.03
    assert power_mean_aggregate(ad.Tensor([[2.0], [4.0]]), np.array([0, 0]), 1, 1.0).value[0, 0] == 3.0


@pytest.mark.parametrize("p", [0.3, 1.0, 2.5, 64.0, -2.0])
def test_single_neighbor_returns_message(p):
    m = np.array([[0.7, 2.0, 1e-7]])
    out = power_mean_aggregate(ad.Tensor(m), np.array([1]), 3, ad.Tensor(p))
    assert np.allclose(out.value[1], m[0], rtol=1e-12)
    assert np.all(out.value[[0, 2]] == 0)  # isolated nodes


# -- update ---------------------------------------------------------------------------

def _mlp2():
    return MLP(np.random.default_rng(0), 2, 4, 2, 2, "t")


def test_update_example():
    mlp = _mlp2()
    h = ad.Tensor([[3.0, 4.0]])
    out = message_normalize_update(h, ad.Tensor([[0.0, 2.0]]), ad.Tensor(1.0), mlp)
    assert np.allclose(out.value, mlp(ad.Tensor([[3.0, 9.0]])).value + [[3.0, 4.0]], atol=1e-14)


def test_update_zero_message_and_zero_scale():
    mlp = _mlp2()
    h = ad.Tensor([[3.0, 4.0]])
    ref = mlp(h).value + h.value
    zero_m = message_normalize_update(h, ad.Tensor([[0.0, 0.0]]), ad.Tensor(1.0), mlp)
    zero_s = message_normalize_update(h, ad.Tensor([[1.0, 2.0]]), ad.Tensor(0.0), mlp)
    assert np.array_equal(zero_m.value, ref)
    assert np.array_equal(zero_s.value, ref)


def test_layer_gradients_wrt_p_and_s():
    rng = np.random.default_rng(2)
    mlp = MLP(rng, 3, 5, 3, 2, "u")
    for layer in mlp.layers:
        layer.bias.value = 0.1 * rng.normal(size=layer.bias.shape)
    h = rng.normal(size=(4, 3))
    msgs = rng.uniform(0.1, 2.0, size=(7, 3))
    dst = np.array([0, 0, 1, 1, 2, 3, 3])
    p, s = Parameter(1.0, "p"), Parameter(1.0, "s")
    w = rng.normal(size=(4, 3))

    def f():
        m = power_mean_aggregate(ad.Tensor(msgs), dst, 4, p)
        return ad.sum_all(ad.mul(message_normalize_update(ad.Tensor(h), m, s, mlp), w))

    assert finite_diff_check(f, [p]) < 1e-4
    assert finite_diff_check(f, [s]) < 1e-4


# -- encoders -------------------------------------------------------------------------

def test_edge_input_encoding():
    x = edge_inputs(np.array([[0, 0, 0], [1, 1.00625, 2]], dtype=float))
    assert np.array_equal(x[0], [1, 0, 1, 0, 0, 0])
    assert np.array_equal(x[1], [0, 1, 0, 0, 1, 1.00625])
    with pytest.raises(ValueError, match="phase"):
        edge_inputs(np.array([[0, 0, 3]], dtype=float))


def test_node_encoder_normalization(g4):
    model = PowerFlowMultiNet(ModelConfig(), len(g4.control.vector()))
    with pytest.raises(ValueError, match="normalization"):
        model.encode_nodes(g4.features[0])
    x = g4.features[0]
    model.fit_normalization(x)
    assert np.array_equal(model.encode_nodes(x.mean(axis=0, keepdims=True)).value,
                          model.node_encoder(ad.Tensor(np.zeros((1, x.shape[1])))).value)
    xc = x.copy()
    xc[:, 0] = 0.25
    model.fit_normalization(xc)
    z = (xc - model.node_mean) / np.maximum(model.node_std, 1e-8)
    assert np.all(z[:, 0] == 0)  # std floor leaves a constant column at 0
    assert np.array_equal(model.encode_nodes(xc).value, model.node_encoder(ad.Tensor(z)).value)


def test_state_encoder(g13):
    model = make_model(g13)
    n = len(g13.control.vector())
    a = model.encode_state(np.zeros(n)).value
    b_state = np.zeros(n)
    b_state[0] = 1.0
    assert a.shape == (1, model.config.state_dim)
    assert not np.allclose(a, model.encode_state(b_state).value)
    with pytest.raises(ValueError, match="length"):
        model.encode_state(np.zeros(n + 1))


# -- forward laws ---------------------------------------------------------------------

def test_output_shapes(g13):
    out = make_model(g13)(g13.as_batch())
    assert out.y_g.shape == (1, 6)
    assert out.y_b.shape == (len(g13.nodes) - 1, 6)


def test_batching_equivariance(spec4, spec13):
    g1 = mutants(spec13, 2)
    model = make_model(g1[0])
    perturb(model)
    whole = model(make_batch(g1))
    parts = [model(g.as_batch()) for g in g1]
    assert np.max(np.abs(whole.y_g.value - np.concatenate([p.y_g.value for p in parts]))) < 1e-10
    assert np.max(np.abs(whole.y_b.value - np.concatenate([p.y_b.value for p in parts]))) < 1e-10


def test_permutation_equivariance(g13):
    model = make_model(g13)
    perturb(model)
    b = g13.as_batch()
    n = b.num_nodes
    rng = np.random.default_rng(3)
    perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])  # new row k holds old node perm[k]
    inv = np.argsort(perm)
    moved = replace(b, x_n=b.x_n[perm], edge_index=inv[b.edge_index], node_kind=b.node_kind[perm],
                    node_phases=b.node_phases[perm])
    out, out_p = model(b), model(moved)
    assert np.allclose(out_p.y_g.value, out.y_g.value, atol=1e-10)
    assert np.allclose(out_p.y_b.value, out.y_b.value[perm[1:] - 1], atol=1e-10)


def test_parallel_edge_feature_swap(g13):
    model = make_model(g13)
    perturb(model)
    b = g13.as_batch()
    ei = b.edge_index
    i, j = next((i, j) for i in range(ei.shape[1]) for j in range(i + 1, ei.shape[1])
                if ei[0, i] == ei[0, j] and ei[1, i] == ei[1, j] and b.x_e[i, 2] != b.x_e[j, 2])
    x_e = b.x_e.copy()
    x_e[[i, j]] = x_e[[j, i]]
    out, out_s = model(b), model(replace(b, x_e=x_e))
    assert np.allclose(out.y_g.value, out_s.y_g.value, atol=1e-12)
    assert np.allclose(out.y_b.value, out_s.y_b.value, atol=1e-12)


def test_messages_positive_in_every_layer(g13):
    model = make_model(g13)
    perturb(model, scale=0.5)
    b = g13.as_batch()
    u, v = b.edge_index
    src, n = np.concatenate([u, v]), u.shape[0]
    e = model.encode_edges(b.x_e)
    e_half = ad.gather_rows(e, np.concatenate([np.arange(n), np.arange(n)]))
    h = model.encode_nodes(b.x_n)
    for layer in model.layers:
        assert np.all(message_construct(ad.gather_rows(h, src), e_half).value >= EPS_MSG)
        h = layer(h, e_half, src, np.concatenate([v, u]))


def test_deep_stack_has_finite_gradients(g13):
    model = make_model(g13, num_layers=16)
    with Tape() as t:
        out = model(g13.as_batch())
        loss = ad.add(ad.mse_loss(out.y_g, np.zeros((1, 6))), ad.mse_loss(out.y_b, np.zeros(out.y_b.shape)))
    backward(loss, t)
    assert np.isfinite(loss.item())
    assert all(np.all(np.isfinite(p.grad)) for p in model.parameters())


def test_full_model_gradients_on_4_bus_batch(spec4):
    gs = mutants(spec4, 3, seed=5)
    batch = make_batch(gs)
    model = make_model(gs[0], hidden_dim=8, state_dim=4)
    perturb(model)
    rng = np.random.default_rng(6)
    y_g = rng.normal(size=(3, 6))
    y_b = rng.normal(size=(len(batch.output_nodes), 6))

    def f():
        out = model(batch)
        return ad.add(ad.mse_loss(out.y_g, y_g), ad.mse_loss(out.y_b, y_b))

    assert finite_diff_check(f, model.parameters(), h=1e-6) < 1e-4


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, g13):
    model = make_model(g13)
    perturb(model)
    model.layers[1].p.value[...] = 1.7
    path = tmp_path / "m.json"
    model.save(path)
    again = PowerFlowMultiNet.load(path)
    for name, p in model.named_parameters().items():
        assert np.array_equal(again.named_parameters()[name].value, p.value), name
    assert np.array_equal(again.node_mean, model.node_mean)
    assert np.array_equal(again(g13.as_batch()).y_g.value, model(g13.as_batch()).y_g.value)


def test_projection_keeps_p_away_from_zero(g4):
    model = make_model(g4)
    model.layers[0].p.value[...] = 1e-5
    model.layers[1].p.value[...] = -1e-5
    model.project()
    assert float(model.layers[0].p.value) == model.config.p_min
    assert float(model.layers[1].p.value) == -model.config.p_min
    assert math.isfinite(float(model.layers[2].p.value))


def test_state_layout_mismatch(spec13):
    g = build_multigraph(spec13, ControlState((1, 1), (0,) * 5))
    model = PowerFlowMultiNet(ModelConfig(), 3)
    model.fit_normalization(g.features[0])
    with pytest.raises(ValueError):
        model(g.as_batch())
