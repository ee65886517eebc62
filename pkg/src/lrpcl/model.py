"""Decoder-only Transformer with the block layout used throughout the package.

One block maps hidden states ``H`` to::

    X = LN1(H)
    f = MHA(X)                     (causal, no projection biases)
    g = LN2(H + f)
    U = g W_1 + b_1,  S = GELU(U),  delta = S W_2 + b_2
    H_next = H + f + delta

Logits are ``LN_f(H_L) W_vocab``. Note that ``g`` normalises the post-attention
sum but the FFN output is added to ``H + f`` rather than to ``g``; this is
neither the usual pre-LN nor post-LN arrangement and is kept on purpose.

Parameters live in a flat, ordered dict keyed ``tok_emb``, ``pos_emb``,
``block{l}.{name}``, ``lnf_gain``, ``lnf_bias`` and ``W_vocab``. Attention
projections are stored as ``d x d`` matrices whose column block
``r*d_head:(r+1)*d_head`` is head ``r``'s projection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from lrpcl import container
from lrpcl.numerics import LN_EPS, gelu_grad, make_rng, normal_cdf

PROJ = ("Q", "K", "V", "O")
BLOCK_WEIGHTS = ("W_Q", "W_K", "W_V", "W_O", "W_1", "b_1", "W_2", "b_2")
BLOCK_LN = ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
LORA_FACTORS = tuple(f"{ab}_{p}" for p in PROJ for ab in ("A", "B"))


class ContextOverflowError(ValueError):
    """Sequence would exceed ``max_seq_len``."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    d_head: int
    vocab_size: int
    max_seq_len: int
    lora_rank: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "d_head", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.max_seq_len < 2:
            raise ValueError("ModelConfig.max_seq_len must be >= 2")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"ModelConfig.d_model ({self.d_model}) must equal n_heads*d_head "
                f"({self.n_heads}*{self.d_head})"
            )
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ValueError("ModelConfig.lora_rank must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {
        "tok_emb": (V, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for l in range(cfg.n_layers):
        p = f"block{l}."
        shapes.update(
            {
                p + "W_Q": (d, d),
                p + "W_K": (d, d),
                p + "W_V": (d, d),
                p + "W_O": (d, d),
                p + "W_1": (d, cfg.d_ff),
                p + "b_1": (cfg.d_ff,),
                p + "W_2": (cfg.d_ff, d),
                p + "b_2": (d,),
                p + "ln1_gain": (d,),
                p + "ln1_bias": (d,),
                p + "ln2_gain": (d,),
                p + "ln2_bias": (d,),
            }
        )
        if cfg.lora_rank is not None:
            for proj in PROJ:
                shapes[p + f"A_{proj}"] = (d, cfg.lora_rank)
                shapes[p + f"B_{proj}"] = (cfg.lora_rank, d)
    shapes.update({"lnf_gain": (d,), "lnf_bias": (d,), "W_vocab": (d, V)})
    return shapes


@dataclass
class ModelParams:
    """All trainable tensors of a model, keyed by name (see module docstring)."""

    cfg: ModelConfig
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")
        self.tensors = {name: self.tensors[name] for name in expected}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def block(self, l: int) -> Dict[str, np.ndarray]:
        p = f"block{l}."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def effective(self, l: int, proj: str) -> np.ndarray:
        """``W + A B`` for a LoRA-adapted projection, else ``W``."""
        w = self.tensors[f"block{l}.W_{proj}"]
        if self.cfg.lora_rank is None:
            return w
        return w + self.tensors[f"block{l}.A_{proj}"] @ self.tensors[f"block{l}.B_{proj}"]

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None, std: float = 0.02) -> ModelParams:
    """Weights ~ N(0, std^2) truncated at 2 std; biases and LoRA ``B`` zero; LN gains one."""
    if rng is None:
        rng = make_rng(cfg.seed, "init")
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_gain"):
            tensors[name] = np.ones(shape)
        elif short.endswith("_bias") or short in ("b_1", "b_2") or short.startswith("B_"):
            tensors[name] = np.zeros(shape)
        elif short.startswith("A_"):
            tensors[name] = rng.normal(0.0, std, size=shape)
        else:
            tensors[name] = _truncated_normal(rng, shape, std)
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------
# forward / backward on a (batch, time) token array
# --------------------------------------------------------------------------


def _ln_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _ln_bwd(dy, gain, stats):
    xhat, rstd = stats
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, nh * dh)


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2:
        raise ValueError("tokens must be a (batch, time) array")
    T = tokens.shape[1]
    if T < 1:
        raise ValueError("empty token sequence")
    if T > cfg.max_seq_len:
        raise ContextOverflowError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")


def forward_batch(params: ModelParams, tokens) -> Tuple[np.ndarray, dict]:
    """Run the model on a ``(B, T)`` int array; return logits and the cache."""
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(cfg, tokens)
    B, T = tokens.shape
    nh, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    scale = 1.0 / np.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    H = params["tok_emb"][tokens] + params["pos_emb"][:T][None]
    cache = {"tokens": tokens, "H0": H, "blocks": []}
    for l in range(cfg.n_layers):
        p = params.block(l)
        W = {proj: params.effective(l, proj) for proj in PROJ}
        X, ln1 = _ln_fwd(H, p["ln1_gain"], p["ln1_bias"])
        W_qkv = np.concatenate([W["Q"], W["K"], W["V"]], axis=1)
        QKV = X @ W_qkv
        Q = _split_heads(QKV[..., :d], nh)
        K = _split_heads(QKV[..., d : 2 * d], nh)
        V = _split_heads(QKV[..., 2 * d :], nh)
        E = (Q @ K.transpose(0, 1, 3, 2)) * scale
        Em = np.where(causal, E, -np.inf)
        Em = Em - Em.max(axis=-1, keepdims=True)
        A = np.exp(Em)
        A /= A.sum(axis=-1, keepdims=True)
        O = _merge_heads(A @ V)
        f = O @ W["O"]
        s = H + f
        g, ln2 = _ln_fwd(s, p["ln2_gain"], p["ln2_bias"])
        U = g @ p["W_1"] + p["b_1"]
        cdf = normal_cdf(U)
        S = U * cdf
        delta = S @ p["W_2"] + p["b_2"]
        H_next = H + f + delta
        cache["blocks"].append(
            dict(H=H, X=X, ln1=ln1, Q=Q, K=K, V=V, E=E, A=A, O=O, f=f, s=s, g=g, ln2=ln2,
                 U=U, cdf=cdf, S=S, delta=delta, H_next=H_next, W=W, W_qkv=W_qkv)
        )
        H = H_next
    Y, lnf = _ln_fwd(H, params["lnf_gain"], params["lnf_bias"])
    logits = Y @ params["W_vocab"]
    cache.update(H_L=H, Y=Y, lnf=lnf)
    return logits, cache


def backward_batch(params: ModelParams, cache: dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar whose logit gradient is ``dlogits``.

    Returns gradients for every tensor in ``params`` (LoRA factors included
    when present; frozen tensors are filtered by the caller).
    """
    cfg = params.cfg
    nh = cfg.n_heads
    scale = 1.0 / np.sqrt(cfg.d_head)
    grads: Dict[str, np.ndarray] = {}
    d = cfg.d_model

    Y = cache["Y"]
    grads["W_vocab"] = Y.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    dY = dlogits @ params["W_vocab"].T
    dH, grads["lnf_gain"], grads["lnf_bias"] = _ln_bwd(dY, params["lnf_gain"], cache["lnf"])

    for l in reversed(range(cfg.n_layers)):
        c = cache["blocks"][l]
        p = params.block(l)
        pre = f"block{l}."
        W = c["W"]
        # H_next = H + f + delta
        d_delta = dH
        dS = d_delta @ p["W_2"].T
        grads[pre + "W_2"] = c["S"].reshape(-1, cfg.d_ff).T @ d_delta.reshape(-1, d)
        grads[pre + "b_2"] = d_delta.sum(axis=(0, 1))
        dU = dS * gelu_grad(c["U"], c["cdf"])
        grads[pre + "W_1"] = c["g"].reshape(-1, d).T @ dU.reshape(-1, cfg.d_ff)
        grads[pre + "b_1"] = dU.sum(axis=(0, 1))
        dg = dU @ p["W_1"].T
        ds, grads[pre + "ln2_gain"], grads[pre + "ln2_bias"] = _ln_bwd(dg, p["ln2_gain"], c["ln2"])
        df = dH + ds
        dH_res = dH + ds
        dW = {}
        dW["O"] = c["O"].reshape(-1, d).T @ df.reshape(-1, d)
        dO = _split_heads(df @ W["O"].T, nh)
        A, V, Q, K = c["A"], c["V"], c["Q"], c["K"]
        dA = dO @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dO
        dE = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = dE @ K
        dK = dE.transpose(0, 1, 3, 2) @ Q
        dQKV = np.concatenate([_merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)], axis=-1)
        dW_qkv = c["X"].reshape(-1, d).T @ dQKV.reshape(-1, 3 * d)
        dW["Q"], dW["K"], dW["V"] = dW_qkv[:, :d], dW_qkv[:, d : 2 * d], dW_qkv[:, 2 * d :]
        dX = dQKV @ c["W_qkv"].T
        dH_ln, grads[pre + "ln1_gain"], grads[pre + "ln1_bias"] = _ln_bwd(dX, p["ln1_gain"], c["ln1"])
        dH = dH_res + dH_ln
        for proj in PROJ:
            grads[pre + f"W_{proj}"] = dW[proj]
            if cfg.lora_rank is not None:
                grads[pre + f"A_{proj}"] = dW[proj] @ p[f"B_{proj}"].T
                grads[pre + f"B_{proj}"] = p[f"A_{proj}"].T @ dW[proj]

    tokens = cache["tokens"]
    T = tokens.shape[1]
    g_tok = np.zeros_like(params["tok_emb"])
    np.add.at(g_tok, tokens.reshape(-1), dH.reshape(-1, d))
    grads["tok_emb"] = g_tok
    g_pos = np.zeros_like(params["pos_emb"])
    g_pos[:T] = dH.sum(axis=0)
    grads["pos_emb"] = g_pos
    return {name: grads[name] for name in params}


def logits(params: ModelParams, tokens) -> np.ndarray:
    """Logits for a single sequence (``(m, V)``) or a batch (``(B, m, V)``)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        return forward_batch(params, tokens[None])[0][0]
    return forward_batch(params, tokens)[0]


# --------------------------------------------------------------------------
# single-sequence trace for attribution
# --------------------------------------------------------------------------


@dataclass
class BlockTrace:
    """Cached activations of one block for a single sequence of length ``m``.

    ``Q``, ``K``, ``V``, ``E`` and ``A`` are stacked over heads on axis 0.
    ``E`` holds the raw scaled scores ``Q K^T / sqrt(d_head)`` without the
    causal mask; ``A`` is the masked softmax (exact zeros above the diagonal).
    """

    H: np.ndarray
    X: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    E: np.ndarray
    A: np.ndarray
    O: np.ndarray
    f: np.ndarray
    s: np.ndarray
    g: np.ndarray
    U: np.ndarray
    S: np.ndarray
    delta: np.ndarray
    H_next: np.ndarray


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    blocks: List[BlockTrace]
    H_L: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    @property
    def predicted(self) -> int:
        """Greedy next-token index at the last position (ties -> lowest index)."""
        return int(np.argmax(self.Z[-1]))


def forward(params: ModelParams, tokens: Sequence[int]) -> ForwardTrace:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1:
        raise ValueError("forward expects a single token sequence")
    Z, cache = forward_batch(params, toks[None])
    blocks = []
    for c in cache["blocks"]:
        blocks.append(
            BlockTrace(
                H=c["H"][0], X=c["X"][0], Q=c["Q"][0], K=c["K"][0], V=c["V"][0],
                E=c["E"][0], A=c["A"][0], O=c["O"][0], f=c["f"][0], s=c["s"][0],
                g=c["g"][0], U=c["U"][0], S=c["S"][0], delta=c["delta"][0],
                H_next=c["H_next"][0],
            )
        )
    return ForwardTrace(tokens=toks, blocks=blocks, H_L=cache["H_L"][0], Y=cache["Y"][0], Z=Z[0])


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


def greedy_decode(params: ModelParams, prompt: Sequence[int], max_new: int,
                  eos_id: Optional[int] = None) -> List[int]:
    """Append argmax tokens until ``max_new`` are produced or ``eos_id`` is emitted.

    Raises:
        ContextOverflowError: ``len(prompt) + max_new`` exceeds ``max_seq_len``.
    """
    return greedy_decode_batch(params, [prompt], max_new, eos_id)[0]


def greedy_decode_batch(params: ModelParams, prompts: Sequence[Sequence[int]], max_new: int,
                        eos_id: Optional[int] = None) -> List[List[int]]:
    """Batched :func:`greedy_decode`; prompts are grouped by length."""
    cfg = params.cfg
    out: List[Optional[List[int]]] = [None] * len(prompts)
    by_len: Dict[int, List[int]] = {}
    for i, pr in enumerate(prompts):
        if len(pr) == 0:
            raise ValueError("prompt must be nonempty")
        if len(pr) + max_new > cfg.max_seq_len:
            raise ContextOverflowError(
                f"prompt of length {len(pr)} plus {max_new} new tokens exceeds "
                f"max_seq_len {cfg.max_seq_len}"
            )
        by_len.setdefault(len(pr), []).append(i)
    for _, idx in sorted(by_len.items()):
        seqs = np.array([list(prompts[i]) for i in idx], dtype=np.int64)
        done = np.zeros(len(idx), dtype=bool)
        for _ in range(max_new):
            if done.all():
                break
            nxt = np.argmax(forward_batch(params, seqs)[0][:, -1, :], axis=-1)
            if eos_id is not None:
                nxt = np.where(done, eos_id, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            if eos_id is not None:
                done |= nxt == eos_id
        for row, i in zip(seqs, idx):
            toks = row.tolist()
            n = len(prompts[i])
            gen = toks[n:]
            if eos_id is not None and eos_id in gen:
                gen = gen[: gen.index(eos_id) + 1]
            out[i] = toks[:n] + gen
    return out  # type: ignore[return-value]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    container.write_container(
        path, params.tensors, {"kind": "checkpoint", "config": params.cfg.to_dict()}
    )


def load_checkpoint(path, expect: Optional[dict] = None) -> Tuple[ModelParams, ModelConfig]:
    """Load a checkpoint; ``expect`` maps config fields to required values."""
    tensors, meta = container.read_container(path)
    if meta.get("kind") != "checkpoint":
        raise container.IntegrityError(f"{path} is not a model checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    for key, want in (expect or {}).items():
        if getattr(cfg, key) != want:
            raise ValueError(f"checkpoint {key}={getattr(cfg, key)!r}, expected {want!r}")
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors:
            raise container.IntegrityError(f"checkpoint lacks tensor {name}")
        if tensors[name].shape != shape:
            raise container.IntegrityError(f"{name}: stored shape {tensors[name].shape} != {shape}")
    return ModelParams(cfg, tensors), cfg
