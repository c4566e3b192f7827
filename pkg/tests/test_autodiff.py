import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from valence import autodiff as ad
from valence.autodiff import DiagGaussian, Tape


def fd_check(build, params, tol=1e-4):
    errs = ad.check_gradients(build, params)
    assert max(errs.values()) <= tol, errs


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def test_tanh_at_origin():
    t = Tape()
    assert ad.tanh(t.const([0.0])).value.tolist() == [0.0]


def test_softmax_symmetric_pair():
    t = Tape()
    out = ad.softmax(t.const([3.7, 3.7])).value
    assert out.tolist() == [0.5, 0.5]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 2, 3), rand(rng, 3, 4)
    ref = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    t = Tape()
    np.testing.assert_allclose(ad.matmul(t.const(a), t.const(b)).value, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_op():
    t = Tape()
    with pytest.raises(ad.DimensionError, match="matmul"):
        ad.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))


def test_concat_shape_error():
    t = Tape()
    with pytest.raises(ad.DimensionError, match="concat"):
        ad.concat([t.const(np.ones((2, 3))), t.const(np.ones((3, 3)))])


def test_tape_is_topologically_ordered():
    t = Tape()
    w = t.param("w", [1.0, 2.0])
    y = ad.tsum(ad.tanh(w * w) + w)
    assert all(p < child for child, ps in enumerate(t.parents) for p in ps)
    assert y.id == len(t) - 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_is_a_distribution(xs):
    t = Tape()
    s = ad.softmax(t.const(xs)).value
    assert abs(s.sum() - 1.0) <= 1e-12
    assert np.all(s > 0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_tanh_gradient_at_zero():
    t = Tape()
    w = t.param("w", 0.0)
    assert t.backward(ad.tanh(w))["w"] == pytest.approx(1.0, abs=0)


def test_quadratic_gradient():
    t = Tape()
    w = t.param("w", [1.0, 2.0])
    assert t.backward(ad.tsum(w * w))["w"].tolist() == [2.0, 4.0]


def test_non_scalar_loss_rejected():
    t = Tape()
    w = t.param("w", [1.0, 2.0])
    with pytest.raises(ad.ContractError):
        t.backward(w * 2.0)


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(1)
    params = {"W1": rand(rng, 4, 5), "b1": rand(rng, 5), "W2": rand(rng, 5, 3), "b2": rand(rng, 3)}
    x = rand(rng, 6, 4)

    def build(tape, p):
        h = ad.tanh(ad.linear(tape.const(x), p["W1"], p["b1"]))
        return ad.tmean(ad.square(ad.linear(h, p["W2"], p["b2"])))

    fd_check(build, params)


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "softplus": ad.softplus,
    "square": ad.square,
    "neg": ad.neg,
    "softmax": ad.softmax,
    "log": lambda x: ad.log(ad.softplus(x) + 0.1),
    "relu": lambda x: ad.relu(x + 0.05),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(2)
    params = {"x": rand(rng, 3, 4)}
    if name == "relu":
        # keep inputs away from the kink
        params["x"] = np.sign(params["x"]) * (np.abs(params["x"]) + 0.2)
    c = rand(rng, 3, 4)
    fd_check(lambda t, p: ad.tsum(UNARY[name](p["x"]) * c), params)


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.exp(b)),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (4, 3))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(3)
    params = {"a": rand(rng, 3, 4), "b": rand(rng, 3, 4)}
    fd_check(lambda t, p: ad.tsum(ad.tanh(BINARY[name](p["a"], p["b"]))), params)


def test_broadcast_add_gradient():
    rng = np.random.default_rng(4)
    params = {"a": rand(rng, 2, 3, 4), "b": rand(rng, 4)}
    fd_check(lambda t, p: ad.tsum(ad.square(p["a"] + p["b"])), params)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(5)
    params = {"x": rand(rng, 2, 3, 4), "w": rand(rng, 4, 5)}
    fd_check(lambda t, p: ad.tsum(ad.tanh(p["x"] @ p["w"])), params)


def test_structural_primitive_gradients():
    rng = np.random.default_rng(6)
    params = {"a": rand(rng, 2, 3), "b": rand(rng, 2, 2), "c": rand(rng, 2, 3)}
    mask = (rng.random((2, 5)) > 0.4) / 0.6

    def build(t, p):
        cat = ad.concat([p["a"], p["b"]])
        st_ = ad.stack([p["a"], p["c"]], axis=1)
        sl = cat[:, 1:4]
        return (
            ad.tsum(ad.apply_mask(cat, mask) * cat)
            + ad.tmean(ad.square(st_))
            + ad.tsum(ad.tanh(sl), axis=None)
            + ad.tsum(ad.square(ad.tsum(p["c"], axis=1)))
        )

    fd_check(build, params)


def test_mean_and_axis_sum_gradients():
    rng = np.random.default_rng(7)
    params = {"x": rand(rng, 3, 4)}
    w = rand(rng, 4)
    fd_check(lambda t, p: ad.tsum(ad.tmean(p["x"], axis=0) * w) + ad.tsum(ad.square(ad.tsum(p["x"], axis=1, keepdims=True))), params)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------


def test_reparam_examples():
    t = Tape()
    q = DiagGaussian.from_moments(t, [3.0], [4.0])
    assert ad.reparam_sample(q, [0.0]).value.tolist() == [3.0]
    q = DiagGaussian.from_moments(t, [0.0], [1.0])
    assert ad.reparam_sample(q, [2.0]).value.tolist() == [2.0]


def test_reparam_length_mismatch():
    t = Tape()
    q = DiagGaussian.from_moments(t, [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ad.DimensionError):
        ad.reparam_sample(q, [0.0])


def test_reparam_gradient_through_variance():
    rng = np.random.default_rng(8)
    params = {"mu": rand(rng, 3), "lv": rand(rng, 3)}
    eps = rand(rng, 3)
    fd_check(lambda t, p: ad.tsum(ad.square(ad.reparam_sample(DiagGaussian(p["mu"], p["lv"]), eps))), params)


def test_kl_examples():
    t = Tape()
    std = DiagGaussian.from_moments(t, [0.0], [1.0])
    assert float(ad.gaussian_kl(std, std).value) == 0.0
    shifted = DiagGaussian.from_moments(t, [1.0], [1.0])
    assert float(ad.gaussian_kl(shifted, std).value) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_quadrature():
    rng = np.random.default_rng(9)
    grid = np.linspace(-10, 10, 200001)
    for _ in range(5):
        mq, mp = rng.uniform(-1, 1, 2)
        vq, vp = rng.uniform(0.5, 1.5, 2)
        q = np.exp(-0.5 * (grid - mq) ** 2 / vq) / math.sqrt(2 * math.pi * vq)
        p = np.exp(-0.5 * (grid - mp) ** 2 / vp) / math.sqrt(2 * math.pi * vp)
        ref = np.trapezoid(q * np.log(q / p), grid)
        t = Tape()
        got = ad.gaussian_kl(DiagGaussian.from_moments(t, [mq], [vq]), DiagGaussian.from_moments(t, [mp], [vp]))
        assert abs(float(got.value) - ref) <= 1e-6


def test_kl_dimension_mismatch():
    t = Tape()
    with pytest.raises(ad.DimensionError):
        ad.gaussian_kl(DiagGaussian.from_moments(t, [0.0], [1.0]), DiagGaussian.from_moments(t, [0.0, 0.0], [1.0, 1.0]))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-3, 3), st.floats(-2, 2), st.floats(-3, 3), st.floats(-2, 2)), min_size=1, max_size=4)
)
def test_kl_nonnegative_and_zero_only_at_equality(rows):
    a = np.array(rows)
    t = Tape()
    q = DiagGaussian(t.const(a[:, 0]), t.const(a[:, 1]))
    p = DiagGaussian(t.const(a[:, 2]), t.const(a[:, 3]))
    kl = float(ad.gaussian_kl(q, p).value)
    assert kl >= -1e-12
    assert float(ad.gaussian_kl(q, q).value) == 0.0
    if np.abs(a[:, 0] - a[:, 2]).max() > 1e-3 or np.abs(a[:, 1] - a[:, 3]).max() > 1e-3:
        assert kl > 0.0


def test_nll_zero_at_unit_density():
    t = Tape()
    var = np.full(3, 1.0 / (2 * math.pi))
    x = np.array([0.3, -1.0, 2.0])
    assert abs(float(ad.gaussian_nll(x, DiagGaussian.from_moments(t, x, var)).value)) <= 1e-15


def test_nll_matches_direct_density():
    rng = np.random.default_rng(10)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        x, m = rand(rng, d), rand(rng, d)
        v = rng.uniform(0.1, 3.0, d)
        ref = -sum(math.log(math.exp(-0.5 * (xi - mi) ** 2 / vi) / math.sqrt(2 * math.pi * vi)) for xi, mi, vi in zip(x, m, v))
        t = Tape()
        got = float(ad.gaussian_nll(x, DiagGaussian.from_moments(t, m, v)).value)
        assert abs(got - ref) <= 1e-10


def test_nll_gradient():
    rng = np.random.default_rng(11)
    params = {"mu": rand(rng, 2, 3), "lv": rand(rng, 2, 3)}
    x = rand(rng, 2, 3)
    fd_check(lambda t, p: ad.gaussian_nll(x, DiagGaussian(p["mu"], p["lv"])), params)


def test_kl_gradient():
    rng = np.random.default_rng(12)
    params = {"mq": rand(rng, 3), "lq": rand(rng, 3), "mp": rand(rng, 3), "lp": rand(rng, 3)}
    fd_check(lambda t, p: ad.gaussian_kl(DiagGaussian(p["mq"], p["lq"]), DiagGaussian(p["mp"], p["lp"])), params)


def test_poe_gradient_with_gates():
    rng = np.random.default_rng(13)
    params = {f"{k}{i}": rand(rng, 2, 3) for i in range(3) for k in "ml"}
    gates = [None, np.array([[1.0], [0.0]]), np.array([[1.0], [1.0]])]

    def build(t, p):
        f = [DiagGaussian(p[f"m{i}"], p[f"l{i}"]) for i in range(3)]
        q = ad.poe(f, gates)
        return ad.tsum(ad.square(q.mean)) + ad.tsum(q.logvar)

    fd_check(build, params)


def test_variance_must_be_positive():
    with pytest.raises(ad.ContractError):
        DiagGaussian.from_moments(Tape(), [0.0], [0.0])


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def test_sgd_step_definition():
    p = {"w": np.array([1.0])}
    ad.optimizer_step(p, {"w": np.array([2.0])}, ad.OptimConfig(kind="sgd", lr=0.1))
    assert p["w"][0] == pytest.approx(0.8, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = {"w": np.array([1.5, -2.0])}
    ad.optimizer_step(p, {"w": np.zeros(2)}, ad.OptimConfig(kind=kind))
    assert p["w"].tolist() == [1.5, -2.0]


def test_quadratic_converges_in_fifty_steps():
    p = {"w": np.array([0.0])}
    opt = ad.Optimizer(ad.OptimConfig(kind="sgd", lr=0.1))
    for _ in range(50):
        opt.step(p, {"w": 2.0 * (p["w"] - 3.0)})
    assert abs(p["w"][0] - 3.0) < 1e-2


def test_adam_defaults():
    cfg = ad.OptimConfig()
    assert (cfg.kind, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == ("adam", 1e-3, 0.9, 0.999, 1e-8)


def test_non_finite_gradient_names_parameter():
    p = {"w": np.array([1.0]), "b": np.array([0.0])}
    with pytest.raises(ad.TrainingError, match="'b'"):
        ad.optimizer_step(p, {"w": np.array([1.0]), "b": np.array([np.nan])})


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        t = Tape()
        w = t.param("w", rng.standard_normal((3, 3)))
        mask = ad.dropout_mask(rng, (3, 3), 0.3)
        loss = ad.tsum(ad.tanh(ad.apply_mask(w @ w, mask)))
        return loss.value.tobytes(), t.backward(loss)["w"].tobytes()

    assert run() == run()


def test_dropout_mask_scaling():
    rng = np.random.default_rng(0)
    m = ad.dropout_mask(rng, (1000,), 0.25)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.75}
    assert np.all(ad.dropout_mask(rng, (4,), 0.0) == 1.0)
