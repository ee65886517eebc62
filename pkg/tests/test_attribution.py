import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrpcl.attribution import (
    AttributionConfig, attribute, bilinear_split, ffn_relevance, linear_relevance, load_relevance,
    lora_linear_relevance, mha_relevance, save_relevance,
)
from lrpcl.model import forward
from lrpcl.numerics import ShapeError, gelu

from conftest import mha_instance, random_model, relevance_like, tiny_config

EPS = 1e-9


def rel_err(got, want):
    return abs(got - want) / max(abs(want), 1e-300)


def mha_total(out):
    return sum(float(v.sum()) for v in out.values())


def chained_mha(inst, eps):
    """Prop-style MHA relevance recomputed from the primitives only.

    f -> (O, W_O); per head O_r = A_r V_r -> (A_r, V_r); softmax passes
    R(A_r) to E_r; E_r = (Q_r / sqrt(d_head)) K_r^T -> (Q_r, K_r); then each
    projection output back to (X, W).
    """
    X, Q, K, V, A, O, f = (inst[k] for k in ("X", "Q", "K", "V", "A", "O", "f"))
    n_heads, m, dh = Q.shape
    R_O, R_WO, _ = linear_relevance(O, inst["W_O"], None, f, inst["R_f"], eps)
    out = {"X": np.zeros_like(X), "W_O": R_WO}
    for p in "QKV":
        out[f"W_{p}"] = np.zeros_like(inst[f"W_{p}"])
    for r in range(n_heads):
        cols = slice(r * dh, (r + 1) * dh)
        R_A, R_V = bilinear_split(A[r], V[r], O[:, cols], R_O[:, cols], eps)
        Qs = Q[r] / np.sqrt(dh)
        R_Qs, R_Kt = bilinear_split(Qs, K[r].T, Qs @ K[r].T, R_A, eps)
        for p, R_out, act in (("Q", R_Qs, Q[r]), ("K", R_Kt.T, K[r]), ("V", R_V, V[r])):
            R_X, R_W, _ = linear_relevance(X, inst[f"W_{p}"][:, cols], None, act, R_out, eps)
            out["X"] += R_X
            out[f"W_{p}"][:, cols] += R_W
    return out


# ---------------------------------------------------------------- primitives

def test_bilinear_quarter_split():
    R_a, R_b = bilinear_split([[1.0, 1.0]], [[1.0], [1.0]], [[2.0]], [[1.0]], EPS)
    assert np.allclose(R_a, 0.25) and np.allclose(R_b, 0.25)


def test_bilinear_zero_relevance():
    R_a, R_b = bilinear_split(np.ones((2, 3)), np.ones((3, 2)), 3 * np.ones((2, 2)), np.zeros((2, 2)), EPS)
    assert not R_a.any() and not R_b.any()


def test_bilinear_shape_error():
    with pytest.raises(ShapeError):
        bilinear_split(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), EPS)


def test_linear_scalar_example():
    R_P, R_W, R_B = linear_relevance([[1.0]], [[2.0]], [[0.0]], [[2.0]], [[2.0]], 1e-12)
    assert R_P[0, 0] == pytest.approx(1.0) and R_W[0, 0] == pytest.approx(1.0) and R_B[0, 0] == 0.0


def test_linear_bias_only():
    C = np.array([[1.5, -2.0]])
    R_P, R_W, R_B = linear_relevance(np.ones((1, 3)), np.zeros((3, 2)), C, C, np.array([[0.7, 0.3]]), EPS)
    assert not R_P.any() and not R_W.any()
    assert np.allclose(R_B, [[0.7, 0.3]])


def absorbed(R, C, eps):
    """What conservation predicts once the stabiliser's share is removed."""
    return float((R * C / (C + eps * np.where(C >= 0, 1.0, -1.0))).sum())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_bilinear_and_linear_conserve(seed, n, k, q):
    # conservation is exact up to the eps term; eps only absorbs R * eps / (C + eps)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, q))
    c = a @ b
    R_c = relevance_like(rng, c)
    R_a, R_b = bilinear_split(a, b, c, R_c, EPS)
    assert rel_err(R_a.sum() + R_b.sum(), absorbed(R_c, c, EPS)) < 1e-11
    bias = rng.normal(size=q)
    C = a @ b + bias
    R_C = relevance_like(rng, C)
    R_P, R_W, R_B = linear_relevance(a, b, bias, C, R_C, EPS)
    assert rel_err(R_P.sum() + R_W.sum() + R_B.sum(), absorbed(R_C, C, EPS)) < 1e-11


def test_linear_random_4x3_conserves(rng):
    P, W, bias = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    C = P @ W + bias
    R_C = relevance_like(rng, C)
    out = linear_relevance(P, W, bias, C, R_C, EPS)
    assert rel_err(sum(x.sum() for x in out), R_C.sum()) < 1e-9


def ffn_instance(rng, m=1, d=2, d_ff=3):
    g = rng.normal(size=(m, d))
    W_1, b_1 = rng.normal(size=(d, d_ff)), rng.normal(size=d_ff)
    W_2, b_2 = rng.normal(size=(d_ff, d)), rng.normal(size=d)
    U = g @ W_1 + b_1
    S = gelu(U)
    delta = S @ W_2 + b_2
    return g, U, S, delta, W_1, b_1, W_2, b_2


def test_ffn_conservation_homogeneity_and_zero(rng):
    inst = ffn_instance(rng)
    R_delta = relevance_like(rng, inst[3])
    out = ffn_relevance(*inst, R_delta, EPS)
    assert rel_err(sum(x.sum() for x in out), R_delta.sum()) < 1e-9
    double = ffn_relevance(*inst, 2 * R_delta, EPS)
    assert all(np.allclose(d2, 2 * d1, rtol=1e-14, atol=0) for d1, d2 in zip(out, double))
    assert all(not x.any() for x in ffn_relevance(*inst, np.zeros_like(R_delta), EPS))


@pytest.mark.parametrize("n_heads,m", [(1, 2), (2, 5), (4, 7)])
def test_mha_conservation(rng, n_heads, m):
    inst, _ = mha_instance(rng, m, n_heads, 4 if n_heads == 1 else 3)
    out = mha_relevance(**inst, eps=EPS)
    assert set(out) == {"X", "W_Q", "W_K", "W_V", "W_O"}
    assert rel_err(mha_total(out), inst["R_f"].sum()) < 1e-8


def test_mha_matches_chained_primitives(rng):
    for n_heads in (1, 2, 3):
        inst, _ = mha_instance(rng, 6, n_heads, 3)
        closed = mha_relevance(**inst, eps=1e-13)
        chain = chained_mha(inst, 1e-13)
        for k in chain:
            assert np.max(np.abs(closed[k] - chain[k])) < 1e-10, k


def test_mha_zero_in_zero_out(rng):
    inst, _ = mha_instance(rng, 4, 2, 2)
    inst["R_f"] = np.zeros_like(inst["R_f"])
    assert all(not v.any() for v in mha_relevance(**inst, eps=EPS).values())


def test_mha_rejects_mismatched_heads(rng):
    inst, _ = mha_instance(rng, 4, 2, 2)
    inst["K"] = inst["K"][:1]
    with pytest.raises(ShapeError):
        mha_relevance(**inst, eps=EPS)


def test_lora_linear_conservation_rank1(rng):
    P, W, A, B = rng.normal(size=(1, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), rng.normal(size=(1, 2))
    C = P @ (W + A @ B)
    R_C = relevance_like(rng, C)
    R_P, R_W, R_A, R_B = lora_linear_relevance(P, W, A, B, C, R_C, EPS)
    assert rel_err(R_P.sum() + R_W.sum() + R_A.sum() + R_B.sum(), R_C.sum()) < 1e-9


def test_lora_zero_b_reduces_to_frozen_branch(rng):
    P, W, A = rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 2))
    B = np.zeros((2, 4))
    C = P @ W
    R_C = rng.normal(size=C.shape)
    R_P, R_W, R_A, R_B = lora_linear_relevance(P, W, A, B, C, R_C, EPS)
    assert not R_A.any() and not R_B.any()
    R_P0, R_W0, _ = linear_relevance(P, W, None, C, R_C, EPS)
    assert np.allclose(R_P, R_P0, rtol=1e-12, atol=0) and np.array_equal(R_W, R_W0)


def test_lora_factor_rescaling_leaves_relevance_unchanged(rng):
    # the product AB and the intermediate P A B are invariant, and each factor's
    # relevance R = W * (...) picks up c from the factor and 1/c from the ratio
    P, W, A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2, 4))
    C = P @ (W + A @ B)
    R_C = rng.normal(size=C.shape)
    base = lora_linear_relevance(P, W, A, B, C, R_C, 1e-14)
    c = 3.7
    scaled = lora_linear_relevance(P, W, c * A, B / c, C, R_C, 1e-14)
    for x, y in zip(base, scaled):
        assert np.allclose(x, y, rtol=1e-10, atol=1e-12)


def test_mha_lora_conservation(rng):
    inst, lora = mha_instance(rng, 5, 2, 3, lora_rank=2)
    out = mha_relevance(**inst, eps=EPS, lora=lora)
    assert {"A_Q", "B_Q", "A_O", "B_O"} <= set(out)
    assert rel_err(mha_total(out), inst["R_f"].sum()) < 1e-8


# ---------------------------------------------------------------- full model

@pytest.mark.parametrize("lora", [None, 2])
def test_global_conservation(lora):
    params = random_model(tiny_config(n_layers=2, d_model=8, n_heads=2, lora_rank=lora), seed=11)
    tr = forward(params, [1, 5, 2, 6, 3, 0])
    rmap = attribute(params, tr)
    z = tr.Z[-1, tr.predicted]
    assert rmap.total == pytest.approx(z)
    assert abs(rmap.conserved_sum() - z) <= 1e-5 * max(1.0, abs(z))
    assert set(rmap.tensors) == {k for k in params if k.startswith("block") and "ln" not in k}
    for k, v in rmap.tensors.items():
        assert v.shape == params[k].shape


def test_multi_position_attribution_is_sum_of_single():
    params = random_model(tiny_config(n_layers=2), seed=12)
    tr = forward(params, [1, 2, 3, 4, 5])
    joint = attribute(params, tr, positions=[2, 4])
    parts = [attribute(params, tr, positions=[p]) for p in (2, 4)]
    for k in joint.tensors:
        assert np.allclose(joint.tensors[k], parts[0].tensors[k] + parts[1].tensors[k], atol=1e-10)


def test_homogeneity_in_initial_relevance():
    params = random_model(tiny_config(n_layers=2), seed=13)
    tr = forward(params, [3, 1, 4, 1])
    base = attribute(params, tr)
    params.tensors["W_vocab"] *= 2.0
    params.tensors["lnf_gain"] /= 2.0
    params.tensors["lnf_bias"] /= 2.0
    # same logits, but Y is halved and W_vocab doubled: initial relevance is unchanged
    again = attribute(params, forward(params, [3, 1, 4, 1]))
    assert again.total == pytest.approx(base.total)
    doubled = base.scaled(2.0)
    assert doubled.conserved_sum() == pytest.approx(2 * base.conserved_sum())


def test_zero_logit_gives_zero_map():
    params = random_model(tiny_config(), seed=14)
    params.tensors["W_vocab"][:] = 0.0
    rmap = attribute(params, forward(params, [1, 2, 3]))
    assert rmap.total == 0.0
    assert all(not v.any() for v in rmap.tensors.values()) and not rmap.input.any()


def test_attribution_is_pure_function_of_trace():
    params = random_model(tiny_config(n_layers=2), seed=15)
    tr = forward(params, [2, 3, 4])
    a, b = attribute(params, tr), attribute(params, tr)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_attribute_rejects_foreign_trace():
    params = random_model(tiny_config(n_layers=2), seed=16)
    other = random_model(tiny_config(n_layers=1), seed=16)
    with pytest.raises(ValueError):
        attribute(params, forward(other, [1, 2]))


def test_relevance_roundtrip(tmp_path):
    params = random_model(tiny_config(), seed=17)
    rmap = attribute(params, forward(params, [1, 2, 3]))
    save_relevance(rmap, tmp_path / "r", {"sample": 3})
    back, meta = load_relevance(tmp_path / "r")
    assert meta["sample"] == 3 and back.targets == rmap.targets
    for k in rmap.tensors:
        assert np.allclose(back.tensors[k], rmap.tensors[k], rtol=1e-6, atol=1e-7)


def test_config_rejects_bad_eps():
    with pytest.raises(ValueError):
        AttributionConfig(eps=0.0)
