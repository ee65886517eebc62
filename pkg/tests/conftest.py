import numpy as np
import pytest

from lrpcl.model import ModelConfig, init_params
from lrpcl.numerics import tune_allocator

tune_allocator()


def tiny_config(n_layers=1, d_model=8, n_heads=2, d_ff=12, vocab=7, max_len=12, lora_rank=None, seed=0):
    return ModelConfig(n_layers=n_layers, d_model=d_model, d_ff=d_ff, n_heads=n_heads,
                       d_head=d_model // n_heads, vocab_size=vocab, max_seq_len=max_len,
                       lora_rank=lora_rank, seed=seed)


def random_model(cfg, seed=0, std=0.5):
    """Model with O(1) weights so every path carries signal (init std is tiny)."""
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for name in params:
        params.tensors[name] = rng.normal(0.0, std, size=params[name].shape)
        if "gain" in name:
            params.tensors[name] += 1.0
    return params


def relevance_like(rng, C):
    """Upstream relevance for output ``C``: ``|C|`` times a positive share.

    Relevance produced by the propagation rules always has the form
    ``output * ratio``, so ``R / C`` stays bounded; arbitrary ``R`` against a
    near-zero ``C`` would measure the stabiliser, not the rule.
    """
    return np.abs(C) * rng.uniform(0.5, 1.5, size=C.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mha_instance(rng, m, n_heads, d_head, lora_rank=None):
    """Random causal attention forward pass in the layout ``mha_relevance`` expects."""
    d = n_heads * d_head
    X = rng.normal(size=(m, d))
    W = {p: rng.normal(size=(d, d)) / np.sqrt(d) for p in "QKVO"}
    lora = None
    if lora_rank is not None:
        lora = {f"W_{p}": W[p] for p in "QKVO"}
        for p in "QKVO":
            lora[f"A_{p}"] = rng.normal(size=(d, lora_rank)) / np.sqrt(d)
            lora[f"B_{p}"] = rng.normal(size=(lora_rank, d)) / np.sqrt(lora_rank)
        W = {p: W[p] + lora[f"A_{p}"] @ lora[f"B_{p}"] for p in "QKVO"}
    heads = lambda M: np.stack([M[:, r * d_head:(r + 1) * d_head] for r in range(n_heads)])
    Q, K, V = heads(X @ W["Q"]), heads(X @ W["K"]), heads(X @ W["V"])
    E = Q @ K.transpose(0, 2, 1) / np.sqrt(d_head)
    mask = np.tril(np.ones((m, m), dtype=bool))
    A = np.exp(np.where(mask, E, -np.inf) - np.where(mask, E, -np.inf).max(-1, keepdims=True))
    A /= A.sum(-1, keepdims=True)
    O = np.concatenate(list(A @ V), axis=1)
    f = O @ W["O"]
    R_f = relevance_like(rng, f)
    return dict(X=X, Q=Q, K=K, V=V, E=E, A=A, O=O, f=f, W_Q=W["Q"], W_K=W["K"], W_V=W["V"],
                W_O=W["O"], R_f=R_f), lora


def finite_difference_report(params, batch, h=1e-5, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    Relative error is ``|an - fd| / max(|an|, |fd|, floor)`` so entries that
    are zero in exact arithmetic are judged on absolute error.
    """
    from lrpcl.trainer import encode_batch, sequence_loss

    tokens, labels, weights = encode_batch(batch)
    _, grads = sequence_loss(params, tokens, labels, weights)
    worst, where = 0.0, None
    for name in params:
        w = params.tensors[name]
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            up = sequence_loss(params, tokens, labels, weights, with_grads=False)[0]
            w[idx] = old - h
            dn = sequence_loss(params, tokens, labels, weights, with_grads=False)[0]
            w[idx] = old
            fd = (up - dn) / (2 * h)
            an = grads[name][idx]
            err = abs(an - fd) / max(abs(an), abs(fd), floor)
            if err > worst:
                worst, where = err, (name, idx)
    return worst, where, sum(v.size for v in params.tensors.values())


# acceptance verdict lines, repeated after the run so they survive output capture
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
