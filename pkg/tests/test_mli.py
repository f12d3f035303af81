import numpy as np
import pytest

from mlin import tensor as T
from mlin.mli import (
    ConfigError,
    MliConfig,
    MliLayerParams,
    aggregate,
    interact,
    mli_forward,
    parameter_count,
    propagate,
    summarize,
)
from mlin.tensor import Tape, Tensor
import oracle
from oracle import numeric_grad, rel_err


def layer(cfg, seed=0, scale=0.5):
    """Layer with every parameter (biases included) drawn away from zero."""
    rng = np.random.default_rng(seed)
    params = MliLayerParams.init(cfg, rng)
    for _, t in params.named():
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)
    return params


def arrays(params):
    return {name: t.data for name, t in params.named()}


def test_config_validation():
    with pytest.raises(ConfigError):
        MliConfig(k=0)
    with pytest.raises(ConfigError):
        MliConfig(interaction_op="mutan")
    with pytest.raises(ConfigError):
        MliConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        MliConfig(value_proj=False, heads=2)


def test_summarize_uniform_weights_give_the_mean():
    X = np.random.default_rng(0).normal(size=(5, 3))
    L, Xb = summarize(Tensor(X), Tensor(np.zeros((1, 3))), Tensor(np.zeros(1)))
    assert np.allclose(L.data, 0.2, atol=1e-15)
    assert np.allclose(Xb.data, X.mean(axis=0, keepdims=True), atol=1e-15)


def test_summarize_permutation_and_loop_oracle():
    rng = np.random.default_rng(1)
    X, W, b = rng.normal(size=(4, 8)), rng.normal(size=(2, 8)), rng.normal(size=2)
    L, Xb = summarize(Tensor(X), Tensor(W), Tensor(b))
    L_ref, Xb_ref = oracle.summarize(X, W, b)
    assert np.abs(L.data - L_ref).max() < 1e-12
    assert np.abs(Xb.data - Xb_ref).max() < 1e-12
    pi = rng.permutation(4)
    Lp, Xbp = summarize(Tensor(X[pi]), Tensor(W), Tensor(b))
    assert np.abs(Lp.data - L.data[:, pi]).max() < 1e-12
    assert np.abs(Xbp.data - Xb.data).max() < 1e-12


def test_summarize_rows_are_convex_combinations():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(6, 3))
    L, Xb = summarize(Tensor(X), Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=4)))
    assert (L.data >= 0).all() and np.allclose(L.data.sum(axis=1), 1, atol=1e-12)
    assert (Xb.data <= X.max(axis=0) + 1e-12).all() and (Xb.data >= X.min(axis=0) - 1e-12).all()


def test_summarize_width_mismatch():
    with pytest.raises(T.DimensionError):
        summarize(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 5))), Tensor(np.ones(2)))


def test_interact_identities():
    rng = np.random.default_rng(3)
    Rb = rng.normal(size=(3, 4))
    eye, zero = Tensor(np.eye(4)), Tensor(np.zeros(4))
    A = interact(Tensor(Rb), Tensor(np.ones((3, 4))), "product", eye, zero).data
    B = interact(Tensor(Rb), Tensor(np.zeros((3, 4))), "addition", eye, zero).data
    for j in range(3):
        assert np.array_equal(A[:, j], Rb)
        assert np.array_equal(B[:, j], Rb)


@pytest.mark.parametrize("op", ["product", "addition", "concat"])
def test_interact_loop_oracle(op):
    rng = np.random.default_rng(4)
    Rb, Eb = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    a_in = 6 if op == "concat" else 3
    W_A, b_A = rng.normal(size=(a_in, 3)), rng.normal(size=3)
    A = interact(Tensor(Rb), Tensor(Eb), op, Tensor(W_A), Tensor(b_A)).data
    assert A.shape == (2, 2, 3)
    assert np.abs(A - oracle.interact(Rb, Eb, op, W_A, b_A)).max() < 1e-12


def test_interact_unknown_operator():
    x = Tensor(np.ones((2, 3)))
    with pytest.raises(ConfigError):
        interact(x, x, "bilinear", Tensor(np.eye(3)), Tensor(np.zeros(3)))


def test_propagate_identity_and_permutation():
    rng = np.random.default_rng(5)
    k, d = 2, 3
    A = rng.normal(size=(k, k, d))
    flat = A.reshape(k * k, d)
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    out = propagate(Tensor(A), Tensor(np.eye(d)), z(d), z(4, 4), z(4)).data
    assert np.array_equal(out, flat)
    P = np.eye(4)[[2, 0, 3, 1]]
    out = propagate(Tensor(A), z(d, d), z(d), Tensor(P), z(4)).data
    assert np.array_equal(out, P @ flat)


def test_propagate_loop_oracle():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(2, 2, 3))
    W_c, b_c, W_p, b_p = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=(4, 4)), rng.normal(size=4)
    out = propagate(Tensor(A), Tensor(W_c), Tensor(b_c), Tensor(W_p), Tensor(b_p)).data
    assert np.abs(out - oracle.propagate(A, W_c, b_c, W_p, b_p)).max() < 1e-12


def test_aggregate_zero_value_path_is_identity():
    cfg = MliConfig(d_model=4, k=2, heads=2, head_dim=3, dropout_rate=0.0)
    params = layer(cfg)
    params.zero_value_path()
    X = np.random.default_rng(7).normal(size=(3, 4))
    X_U, _ = aggregate(Tensor(X), Tensor(np.ones((4, 4))), params, cfg)
    assert np.array_equal(X_U.data, X)


def test_aggregate_single_latent():
    cfg = MliConfig(d_model=4, k=1, heads=1, head_dim=3, dropout_rate=0.0, value_proj=False)
    params = layer(cfg)
    rng = np.random.default_rng(8)
    X, A_hat = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    X_U, U = aggregate(Tensor(X), Tensor(A_hat), params, cfg)
    assert np.array_equal(U.data, np.ones((1, 3, 1)))
    assert np.allclose(X_U.data, X + A_hat, atol=1e-15)


@pytest.mark.parametrize("value_proj,heads", [(False, 1), (True, 1), (True, 2)])
def test_aggregate_loop_oracle(value_proj, heads):
    cfg = MliConfig(d_model=4, k=2, heads=heads, head_dim=3, dropout_rate=0.0, value_proj=value_proj)
    params = layer(cfg, seed=9)
    rng = np.random.default_rng(9)
    X, A_hat = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    X_U, U = aggregate(Tensor(X), Tensor(A_hat), params, cfg, "E")
    ref, U_ref = oracle.aggregate(X, A_hat, arrays(params), heads, 3, "e", value_proj)
    assert np.abs(X_U.data - ref).max() < 1e-12
    assert np.abs(U.data - U_ref).max() < 1e-12
    assert np.abs(U.data.sum(axis=-1) - 1).max() < 1e-12


@pytest.mark.parametrize("op", ["product", "addition", "concat"])
def test_mli_forward_loop_oracle(op):
    cfg = MliConfig(d_model=8, k=2, heads=2, head_dim=4, interaction_op=op, dropout_rate=0.0)
    params = layer(cfg, seed=10)
    rng = np.random.default_rng(10)
    R, E = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    R_U, E_U, trace = mli_forward(Tensor(R), Tensor(E), params, cfg)
    R_ref, E_ref, parts = oracle.mli_block(R, E, arrays(params), op, 2, 4)
    assert np.abs(R_U.data - R_ref).max() < 1e-10
    assert np.abs(E_U.data - E_ref).max() < 1e-10
    for name in ("L_R", "L_E", "U_R", "U_E", "A_hat"):
        assert np.abs(getattr(trace, name) - parts[name]).max() < 1e-10


def test_mli_forward_batched_matches_per_sample():
    cfg = MliConfig(d_model=8, k=3, heads=2, head_dim=4, dropout_rate=0.0)
    params = layer(cfg, seed=11)
    rng = np.random.default_rng(11)
    R, E = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 5, 8))
    R_U, E_U, _ = mli_forward(Tensor(R), Tensor(E), params, cfg)
    for b in range(3):
        r, e, _ = mli_forward(Tensor(R[b]), Tensor(E[b]), params, cfg)
        assert np.abs(R_U.data[b] - r.data).max() < 1e-12
        assert np.abs(E_U.data[b] - e.data).max() < 1e-12


@pytest.mark.parametrize("M,N,k", [(1, 1, 1), (1, 7, 3), (6, 2, 4)])
def test_shapes_preserved_and_k_may_exceed_rows(M, N, k):
    cfg = MliConfig(d_model=6, k=k, heads=3, head_dim=2, dropout_rate=0.0)
    rng = np.random.default_rng(12)
    R_U, E_U, trace = mli_forward(Tensor(rng.normal(size=(M, 6))), Tensor(rng.normal(size=(N, 6))),
                                  layer(cfg), cfg)
    assert R_U.shape == (M, 6) and E_U.shape == (N, 6)
    assert trace.L_R.shape == (k, M) and trace.U_E.shape == (3, N, k * k)


def total(x):
    """Scalar sum of a (n, d) tensor using only taped ops."""
    n, d = x.shape
    row = T.reshape(T.scale(T.mean_rows(x), n), (1, d))
    return T.matmul(row, Tensor(np.ones((d, 1))))


def test_mli_forward_grad_every_group():
    cfg = MliConfig(d_model=4, k=2, heads=2, head_dim=2, interaction_op="concat", dropout_rate=0.0)
    params = layer(cfg, seed=13)
    rng = np.random.default_rng(13)
    R, E = rng.uniform(-1, 1, size=(3, 4)), rng.uniform(-1, 1, size=(2, 4))
    wr, we = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))

    def objective():
        R_U, E_U, _ = mli_forward(Tensor(R), Tensor(E), params, cfg)
        return float(np.sum(R_U.data * wr) + np.sum(E_U.data * we))

    with Tape() as tape:
        R_U, E_U, _ = mli_forward(Tensor(R), Tensor(E), params, cfg)
        out = T.add(total(T.mul(R_U, Tensor(wr))), total(T.mul(E_U, Tensor(we))))
    tape.backward(out)
    for name, t in params.named():
        numeric = numeric_grad(objective, t.data)
        if max(np.linalg.norm(numeric), np.linalg.norm(t.grad)) < 1e-8:
            # summary and key biases shift softmax logits uniformly: exactly zero
            assert np.linalg.norm(t.grad - numeric) < 1e-8, name
        else:
            assert rel_err(t.grad, numeric) < 1e-6, name


def test_parameter_count_matches_tensors():
    for cfg in [MliConfig(), MliConfig(d_model=8, k=2, heads=2, head_dim=4, interaction_op="concat"),
                MliConfig(d_model=8, k=3, heads=1, head_dim=5, value_proj=False)]:
        assert MliLayerParams.init(cfg, np.random.default_rng(0)).num_parameters() == parameter_count(cfg)


def test_parameter_count_default_closed_form():
    d, k, hq = 512, 6, 12 * 128
    summaries = 2 * (k * d + k)
    interaction = d * d + d
    propagation = d * d + d + k ** 4 + k ** 2
    queries_keys_values = 4 * (d * hq + hq)
    outputs = 2 * (hq * d + d)
    assert parameter_count(MliConfig()) == summaries + interaction + propagation + queries_keys_values + outputs
