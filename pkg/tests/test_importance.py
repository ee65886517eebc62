import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrpcl.importance import (
    EmptyCorrectSetError, ImportancePrior, aggregate_task_prior, build_task_prior, gated_names,
    historical_gate, load_gate, load_prior, normalize_sample, sample_relevance, save_gate,
    save_prior, select_correct,
)
from lrpcl.model import init_params
from lrpcl.numerics import ShapeError
from lrpcl.tasks import Example, Tokenizer, exact_matches

from conftest import random_model, tiny_config

# subnormal inputs underflow to 0 after scaling, which drops their sign
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)


def brute_prior(values, k):
    """Per element: sort the samples' values descending in pure Python, average the first k."""
    vals = sorted(values, reverse=True)[: min(k, len(values))]
    return sum(vals) / len(vals)


def prior(v):
    return ImportancePrior("t", {"w": np.asarray(v, dtype=float)}, 1, 1)


# ---------------------------------------------------------------- normalize_sample

def test_normalize_examples():
    e = np.e
    out = normalize_sample({"w": np.array([0.0, e - 1, -(e - 1)])})["w"]
    assert np.allclose(out, [0.0, 1.0, -1.0], atol=1e-11)
    assert not normalize_sample({"w": np.zeros(4)})["w"].any()


@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_normalize_range_and_sign(r):
    out = normalize_sample({"w": r})["w"]
    assert np.all(np.abs(out) <= 1.0)
    assert np.array_equal(np.sign(out), np.sign(r))


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e3, 1e3)), st.floats(1.5, 100))
def test_normalize_preserves_ranking_under_scaling(r, c):
    a = normalize_sample({"w": r})["w"]
    b = normalize_sample({"w": c * r})["w"]
    i, j = np.triu_indices(r.size, 1)
    strict = r[i] < r[j]
    assert np.all(a[i][strict] <= a[j][strict]) and np.all(b[i][strict] <= b[j][strict])


def test_normalize_is_per_tensor():
    out = normalize_sample({"small": np.array([1e-3, 0.0]), "big": np.array([1e3, 1.0])})
    assert out["small"][0] == pytest.approx(1.0) and out["big"][0] == pytest.approx(1.0)


# ---------------------------------------------------------------- aggregation

def test_aggregate_example_top2():
    maps = [{"w": np.array([v])} for v in (0.9, 0.1, -0.5, 0.8)]
    assert aggregate_task_prior(maps, k=2).tensors["w"][0] == pytest.approx(0.85)


def test_aggregate_single_and_identical_samples(rng):
    m = {"w": rng.uniform(-1, 1, size=(3, 4))}
    assert np.array_equal(aggregate_task_prior([m], k=8).tensors["w"], m["w"])
    same = aggregate_task_prior([m] * 5, k=3).tensors["w"]
    assert np.allclose(same, m["w"], rtol=1e-15, atol=0)


def test_aggregate_uses_all_samples_when_fewer_than_k():
    maps = [{"w": np.array([v])} for v in (0.2, 0.4)]
    p = aggregate_task_prior(maps, k=8)
    assert p.k == 2 and p.tensors["w"][0] == pytest.approx(0.3)


def test_aggregate_matches_brute_force(rng):
    for _ in range(50):
        n, k = int(rng.integers(1, 12)), int(rng.integers(1, 10))
        maps = [{"w": rng.uniform(-1, 1, size=5)} for _ in range(n)]
        got = aggregate_task_prior(maps, k).tensors["w"]
        for u in range(5):
            assert got[u] == pytest.approx(brute_prior([m["w"][u] for m in maps], k), abs=1e-15)


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.integers(1, 10), st.integers(0, 11), st.floats(0, 1))
def test_aggregate_bounded_and_monotone(vals, k, idx, bump):
    maps = [{"w": np.array([v])} for v in vals]
    p = aggregate_task_prior(maps, k).tensors["w"][0]
    assert -1.0 <= p <= 1.0
    i = idx % len(vals)
    raised = [dict(m) for m in maps]
    raised[i] = {"w": np.array([min(1.0, vals[i] + bump)])}
    assert aggregate_task_prior(raised, k).tensors["w"][0] >= p - 1e-15


def test_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        aggregate_task_prior([], 2)
    with pytest.raises(ValueError):
        aggregate_task_prior([{"w": np.zeros(1)}], 0)


# ---------------------------------------------------------------- gate

def test_gate_examples():
    assert historical_gate([prior([0.5]), prior([-0.2])]).tensors["w"][0] == pytest.approx(0.5)
    assert historical_gate([prior([-0.3]), prior([-0.1])]).tensors["w"][0] == 1.0
    ones = historical_gate([], {"w": (2, 3)}).tensors["w"]
    assert ones.shape == (2, 3) and np.all(ones == 1.0)


def test_gate_matches_direct_evaluation(rng):
    ps = [prior(rng.uniform(-1, 1, size=(3, 3))) for _ in range(4)]
    direct = 1.0 - np.clip(np.max([p.tensors["w"] for p in ps], axis=0), 0, 1)
    assert np.array_equal(historical_gate(ps).tensors["w"], direct)


@given(st.lists(arrays(np.float64, 4, elements=st.floats(-1, 1)), min_size=1, max_size=5),
       arrays(np.float64, 4, elements=st.floats(-1, 1)))
def test_gate_monotone_in_history(history, extra):
    ps = [prior(h) for h in history]
    before = historical_gate(ps).tensors["w"]
    after = historical_gate(ps + [prior(extra)]).tensors["w"]
    assert np.all((after >= 0) & (after <= 1)) and np.all(after <= before)
    dominated = prior(np.minimum(extra, history[0]))
    assert np.array_equal(historical_gate(ps + [dominated]).tensors["w"], before)


def test_gate_shape_mismatch():
    with pytest.raises(ShapeError):
        historical_gate([prior([0.1, 0.2]), prior([0.1])])


def test_gate_without_history_needs_shapes():
    with pytest.raises(ValueError):
        historical_gate([])


# ---------------------------------------------------------------- pipeline

def test_gated_names_by_mode():
    full = init_params(tiny_config(n_layers=2, lora_rank=2))
    names = gated_names(full, "full")
    assert "block0.W_Q" in names and "block1.b_2" in names
    assert not any("ln" in n or ".A_" in n for n in names)
    assert all(".A_" in n or ".B_" in n for n in gated_names(full, "lora"))
    with pytest.raises(ValueError):
        gated_names(init_params(tiny_config()), "lora")



def test_select_correct_membership(monkeypatch):
    examples = [Example("copy", "ab", "ab")] * 5
    monkeypatch.setattr("lrpcl.importance.exact_matches", lambda p, e, t: [True, False, True, False, False])
    assert select_correct(examples, None, Tokenizer(4)) == [0, 2]
    monkeypatch.setattr("lrpcl.importance.exact_matches", lambda p, e, t: [False] * 5)
    with pytest.raises(EmptyCorrectSetError, match="train longer"):
        select_correct(examples, None, Tokenizer(4))


def test_select_correct_matches_decode_oracle():
    tok = Tokenizer(4)
    params = random_model(tiny_config(vocab=tok.vocab_size, max_len=16), seed=21)
    examples = [Example("copy", p, p) for p in ("0123", "3210", "0", "11", "2", "3", "01")]
    ok = exact_matches(params, examples, tok)
    if any(ok):
        assert select_correct(examples, params, tok) == [i for i, v in enumerate(ok) if v]


def test_sample_relevance_covers_whole_response():
    tok = Tokenizer(4)
    params = random_model(tiny_config(n_layers=2, vocab=tok.vocab_size, max_len=16), seed=22)
    ex = Example("copy", "012", "012")
    rmap = sample_relevance(params, ex, tok)
    n_prompt = len(tok.prompt_ids(ex))
    assert [p for p, _ in rmap.targets] == list(range(n_prompt - 1, n_prompt + 3))
    assert abs(rmap.conserved_sum() - rmap.total) <= 1e-5 * max(1.0, abs(rmap.total))


def test_build_prior_without_correct_requirement(tmp_path):
    tok = Tokenizer(4)
    params = random_model(tiny_config(n_layers=2, vocab=tok.vocab_size, max_len=16), seed=23)
    examples = [Example("copy", p, p) for p in ("01", "123", "3302")]
    p = build_task_prior(params, examples, tok, k=2, require_correct=False)
    assert set(p.tensors) == set(gated_names(params))
    assert all(np.all(np.abs(v) <= 1) for v in p.tensors.values())
    save_prior(p, tmp_path / "task1.prior")
    back = load_prior(tmp_path / "task1.prior")
    assert back.task == "copy" and back.k == 2 and back.n_correct == 3
    g = historical_gate([back])
    save_gate(g, tmp_path / "stage2.gate")
    assert np.allclose(load_gate(tmp_path / "stage2.gate").tensors["block0.W_Q"], g.tensors["block0.W_Q"])
