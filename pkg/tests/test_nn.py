import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgrid import nn

from .oracles import fd_gradient, naive_mlp_forward, rel_err


def test_param_length_formula():
    specs = [nn.LayerSpec(2, 3, "tanh"), nn.LayerSpec(3, 1, "identity")]
    p = nn.mlp_init(specs, 7)
    assert len(p) == 2 * 3 + 3 + 3 * 1 + 1 == 13


def test_init_deterministic_per_seed():
    specs = nn.mlp_specs([4, 5, 2])
    a, b, c = nn.mlp_init(specs, 7), nn.mlp_init(specs, 7), nn.mlp_init(specs, 8)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, c.values)


def test_init_glorot_bounds_and_zero_bias():
    specs = nn.mlp_specs([30, 20, 10])
    for (w, b), s in zip(nn.mlp_init(specs, 0).unflatten(), specs):
        bound = math.sqrt(6.0 / (s.input_dim + s.output_dim))
        assert np.all(np.abs(w) <= bound)
        assert np.all(b == 0)


def test_chain_mismatch_is_error():
    with pytest.raises(nn.ShapeError):
        nn.mlp_init([nn.LayerSpec(2, 3), nn.LayerSpec(4, 1)], 0)
    with pytest.raises(nn.ShapeError):
        nn.LayerSpec(0, 3)
    with pytest.raises(nn.ShapeError):
        nn.LayerSpec(1, 3, "gelu")


def test_forward_zero_weights_gives_zero():
    specs = nn.mlp_specs([3, 4, 2])
    p = nn.zeros_like(nn.mlp_init(specs, 0))
    assert np.all(nn.mlp_forward(p, np.array([1.0, -2.0, 3.0])) == 0)


def test_forward_identity_layer():
    spec = nn.LayerSpec(3, 3, "identity")
    p = nn.flatten([(np.eye(3), np.zeros(3))], [spec])
    x = np.array([0.5, -1.5, 2.0])
    assert np.array_equal(nn.mlp_forward(p, x), x)


def test_forward_length_mismatch():
    p = nn.mlp_init(nn.mlp_specs([3, 2]), 0)
    with pytest.raises(nn.ShapeError):
        nn.mlp_forward(p, np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    sizes = list(rng.integers(1, 7, size=rng.integers(2, 5)))
    acts = ["tanh", "relu", "identity"]
    specs = [nn.LayerSpec(int(sizes[k]), int(sizes[k + 1]), acts[k % 3]) for k in range(len(sizes) - 1)]
    p = nn.ParamVector(rng.normal(size=nn.param_count(specs)), specs)
    x = rng.normal(size=sizes[0])
    np.testing.assert_allclose(nn.mlp_forward(p, x), naive_mlp_forward(p, x), rtol=0, atol=1e-12)


def test_forward_batch_matches_rows():
    rng = np.random.default_rng(3)
    p = nn.mlp_init(nn.mlp_specs([4, 6, 3]), rng)
    xs = rng.normal(size=(5, 4))
    batched = nn.mlp_forward(p, xs)
    for k in range(5):
        np.testing.assert_allclose(batched[k], nn.mlp_forward(p, xs[k]), atol=1e-15)


def test_forward_is_pure():
    p = nn.mlp_init(nn.mlp_specs([4, 6, 3]), 1)
    before = p.values.copy()
    x = np.linspace(-1, 1, 4)
    assert nn.mlp_forward(p, x).tobytes() == nn.mlp_forward(p, x).tobytes()
    assert np.array_equal(before, p.values)


def test_backward_zero_cotangent():
    p = nn.mlp_init(nn.mlp_specs([3, 4, 2]), 0)
    g_p, g_x = nn.mlp_backward(p, np.ones(3), np.zeros(2))
    assert np.all(g_p == 0) and np.all(g_x == 0)


def test_backward_linear_layer_is_outer_product():
    spec = nn.LayerSpec(3, 2, "identity")
    rng = np.random.default_rng(0)
    p = nn.ParamVector(rng.normal(size=spec.size), [spec])
    x, g = rng.normal(size=3), rng.normal(size=2)
    g_p, g_x = nn.mlp_backward(p, x, g)
    np.testing.assert_allclose(g_p[:6].reshape(2, 3), np.outer(g, x), atol=1e-15)
    np.testing.assert_allclose(g_p[6:], g, atol=1e-15)
    w, _ = p.unflatten()[0]
    np.testing.assert_allclose(g_x, w.T @ g, atol=1e-15)


def test_backward_shape_mismatch():
    p = nn.mlp_init(nn.mlp_specs([3, 2]), 0)
    with pytest.raises(nn.ShapeError):
        nn.mlp_backward(p, np.zeros(3), np.zeros(3))


def _check_fd(p, x, g, masks=None):
    g_p, g_x = nn.mlp_backward(p, x, g, masks)

    def f_params(v):
        return float(nn.mlp_forward(p.with_values(v), x, masks) @ g)

    def f_input(xx):
        return float(nn.mlp_forward(p, xx, masks) @ g)

    assert rel_err(g_p, fd_gradient(f_params, p.values)) <= 1e-4
    assert rel_err(g_x, fd_gradient(f_input, x)) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(
    widths=st.lists(st.integers(1, 8), min_size=2, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_backward_matches_finite_differences(widths, seed):
    rng = np.random.default_rng(seed)
    specs = nn.mlp_specs(widths)
    p = nn.ParamVector(rng.normal(scale=0.7, size=nn.param_count(specs)), specs)
    _check_fd(p, rng.normal(size=widths[0]), rng.normal(size=widths[-1]))


def test_backward_with_dropout_masks_matches_fd():
    rng = np.random.default_rng(5)
    specs = nn.mlp_specs([3, 6, 5, 2])
    p = nn.mlp_init(specs, rng)
    masks = [(rng.random(6) < 0.7) / 0.7, (rng.random(5) < 0.7) / 0.7]
    _check_fd(p, rng.normal(size=3), rng.normal(size=2), masks)


def test_backward_batch_sums_params():
    rng = np.random.default_rng(9)
    p = nn.mlp_init(nn.mlp_specs([3, 4, 2]), rng)
    xs, gs = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    g_p, g_x = nn.mlp_backward(p, xs, gs)
    parts = [nn.mlp_backward(p, xs[k], gs[k]) for k in range(4)]
    np.testing.assert_allclose(g_p, sum(q[0] for q in parts), atol=1e-13)
    np.testing.assert_allclose(g_x, np.stack([q[1] for q in parts]), atol=1e-15)


@given(widths=st.lists(st.integers(1, 8), min_size=2, max_size=5), seed=st.integers(0, 1000))
def test_flatten_unflatten_roundtrip(widths, seed):
    p = nn.mlp_init(nn.mlp_specs(widths), seed)
    q = nn.flatten([(w.copy(), b.copy()) for w, b in p.unflatten()], p.specs)
    assert q.values.tobytes() == p.values.tobytes()
    offs = p.offsets
    assert offs[0] == 0 and all(b > a for a, b in zip(offs, offs[1:]))
    assert offs[-1] + p.specs[-1].size == len(p)


def test_log_prob_standard_normal_mode():
    d = 5
    head = nn.GaussianHead(np.zeros(d), np.zeros(d))
    assert nn.gaussian_log_prob(head, np.zeros(d)) == pytest.approx(-d / 2 * math.log(2 * math.pi), abs=1e-12)


def test_log_prob_translation_invariant():
    rng = np.random.default_rng(0)
    mean, ls, a = rng.normal(size=4), rng.normal(scale=0.3, size=4), rng.normal(size=4)
    lp1 = nn.gaussian_log_prob(nn.GaussianHead(mean, ls), a)
    lp2 = nn.gaussian_log_prob(nn.GaussianHead(mean + 3.25, ls), a + 3.25)
    assert lp1 == pytest.approx(lp2, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_log_prob_matches_product_of_univariate_densities(seed):
    rng = np.random.default_rng(seed)
    mean, ls, a = rng.normal(size=6), rng.normal(scale=0.5, size=6), rng.normal(size=6)
    std = np.exp(ls)
    dens = np.prod(np.exp(-0.5 * ((a - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi)))
    assert nn.gaussian_log_prob(nn.GaussianHead(mean, ls), a) == pytest.approx(math.log(dens), abs=1e-12)


def test_sample_log_prob_consistent():
    rng = np.random.default_rng(1)
    head = nn.GaussianHead(rng.normal(size=8), rng.normal(scale=0.2, size=8))
    for _ in range(20):
        a, lp = nn.gaussian_sample(head, rng)
        assert lp == pytest.approx(nn.gaussian_log_prob(head, a), abs=1e-12)


def test_log_std_clamped_and_finite():
    head = nn.GaussianHead(np.zeros(3), np.array([-20.0, 0.0, 9.0]))
    assert np.array_equal(head.log_std, [nn.LOG_STD_MIN, 0.0, nn.LOG_STD_MAX])
    with pytest.raises(ValueError):
        nn.GaussianHead(np.zeros(2), np.array([np.nan, 0.0]))


def test_entropy_closed_form():
    ls = np.array([0.1, -0.4, 0.3])
    head = nn.GaussianHead(np.zeros(3), ls)
    expected = sum(0.5 * math.log(2 * math.pi * math.e * math.exp(2 * v)) for v in ls)
    assert head.entropy() == pytest.approx(expected, abs=1e-12)
