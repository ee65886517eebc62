"""Layer-wise relevance propagation onto Transformer parameters.

Every rule here is linear in the incoming relevance and redistributes it
between the operands of a product in proportion to their contribution,
splitting evenly between the two factors of a bilinear product. Layer norm,
softmax and the FFN nonlinearity pass relevance through unchanged.

Relevance is started from the greedy next-token logit ``Z[m, j_hat]`` and
ends up on the block parameters (``W_Q, W_K, W_V, W_O, W_1, b_1, W_2, b_2``
and LoRA factors) and on the embedded input ``H0``. The sum over all of them
reproduces the starting logit up to the ``eps`` stabiliser.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from lrpcl import container
from lrpcl.model import PROJ, ForwardTrace, ModelParams
from lrpcl.numerics import ShapeError, check_finite, matmul, stable_div


@dataclass(frozen=True)
class AttributionConfig:
    eps: float = 1e-9
    conservation_tol: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("AttributionConfig.eps must be positive")


@dataclass
class RelevanceMap:
    """Per-element relevance of block parameters for one attribution.

    Attributes:
        tensors: ``block{l}.{name}`` -> relevance, shaped like the parameter.
            In LoRA mode the frozen ``W_*`` entries hold the backbone share and
            ``A_*``/``B_*`` the adapter share.
        input: relevance of the embedded input ``H0`` (``m x d``).
        total: the logit mass that was propagated.
        targets: ``(position, token)`` pairs whose logits were attributed.
    """

    tensors: Dict[str, np.ndarray]
    input: np.ndarray
    total: float
    targets: Tuple[Tuple[int, int], ...] = field(default_factory=tuple)

    def parameter_sum(self) -> float:
        return float(sum(v.sum() for v in self.tensors.values()))

    def conserved_sum(self) -> float:
        return self.parameter_sum() + float(self.input.sum())

    def conservation_error(self) -> float:
        return abs(self.conserved_sum() - self.total)

    def scaled(self, c: float) -> "RelevanceMap":
        return RelevanceMap(
            {k: c * v for k, v in self.tensors.items()}, c * self.input, c * self.total, self.targets
        )


# --------------------------------------------------------------------------
# primitive rules
# --------------------------------------------------------------------------


def _same(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape {a.shape} vs {b.shape}")


def bilinear_split(a, b, c, R_c, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Relevance of the two factors of ``c = a @ b``; each gets half."""
    a, b, c, R_c = (np.asarray(x, dtype=np.float64) for x in (a, b, c, R_c))
    if a.shape[1] != b.shape[0] or c.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"bilinear_split shapes a{a.shape} b{b.shape} c{c.shape}")
    _same("R_c", R_c, c)
    lam = stable_div(R_c, c, eps)
    return 0.5 * a * matmul(lam, b.T), 0.5 * b * matmul(a.T, lam)


def _linear_from_ratio(P, W, B, lam):
    R_P = 0.5 * P * matmul(lam, W.T)
    R_W = 0.5 * W * matmul(P.T, lam)
    if B is None:
        R_B = None
    elif B.ndim == 1:
        R_B = B * lam.sum(axis=0)
    else:
        R_B = B * lam
    return R_P, R_W, R_B


def linear_relevance(P, W, B, C, R_C, eps: float):
    """Relevance for ``C = P @ W + B`` (``B`` a row-broadcast vector, matrix or ``None``).

    Returns ``(R_P, R_W, R_B)``; ``R_B`` is ``None`` when ``B`` is.
    """
    P, W, C, R_C = (np.asarray(x, dtype=np.float64) for x in (P, W, C, R_C))
    if B is not None:
        B = np.asarray(B, dtype=np.float64)
    if P.shape[1] != W.shape[0] or C.shape != (P.shape[0], W.shape[1]):
        raise ShapeError(f"linear_relevance shapes P{P.shape} W{W.shape} C{C.shape}")
    _same("R_C", R_C, C)
    if B is not None and B.shape not in ((C.shape[1],), C.shape):
        raise ShapeError(f"bias shape {B.shape} incompatible with output {C.shape}")
    return _linear_from_ratio(P, W, B, stable_div(R_C, C, eps))


def lora_linear_relevance(P, W_frozen, A, B, C, R_C, eps: float):
    """Relevance for ``C = P @ (W_frozen + A @ B)``.

    The output relevance is shared between the branches ``P W_frozen`` and
    ``(P A) B`` in proportion to their contributions; the adapter branch is
    then unwound in two bilinear steps. Returns ``(R_P, R_W_frozen, R_A, R_B)``.
    """
    P, W_frozen, A, B, C, R_C = (np.asarray(x, dtype=np.float64) for x in (P, W_frozen, A, B, C, R_C))
    if W_frozen.shape != (A.shape[0], B.shape[1]) or A.shape[1] != B.shape[0]:
        raise ShapeError(f"LoRA shapes W{W_frozen.shape} A{A.shape} B{B.shape}")
    if P.shape[1] != W_frozen.shape[0] or C.shape != (P.shape[0], W_frozen.shape[1]):
        raise ShapeError(f"lora_linear_relevance shapes P{P.shape} W{W_frozen.shape} C{C.shape}")
    _same("R_C", R_C, C)
    lam = stable_div(R_C, C, eps)
    # branch shares are (P W) * lam and (P A B) * lam, so both reuse lam directly
    R_P1, R_W, _ = _linear_from_ratio(P, W_frozen, None, lam)
    M = P @ A
    R_M, R_B, _ = _linear_from_ratio(M, B, None, lam)
    R_P2, R_A, _ = _linear_from_ratio(P, A, None, stable_div(R_M, M, eps))
    return R_P1 + R_P2, R_W, R_A, R_B


# --------------------------------------------------------------------------
# module rules
# --------------------------------------------------------------------------


def ffn_relevance(g, U, S, delta, W_1, b_1, W_2, b_2, R_delta, eps: float):
    """Relevance through ``delta = GELU(g W_1 + b_1) W_2 + b_2``.

    The activation is an identity for relevance: ``R(U) = R(S)``.
    Returns ``(R_g, R_W1, R_b1, R_W2, R_b2)``.
    """
    g, U, S, delta, R_delta = (np.asarray(x, dtype=np.float64) for x in (g, U, S, delta, R_delta))
    _same("U/S", U, S)
    R_S, R_W2, R_b2 = linear_relevance(S, W_2, b_2, delta, R_delta, eps)
    R_g, R_W1, R_b1 = linear_relevance(g, W_1, b_1, U, R_S, eps)
    return R_g, R_W1, R_b1, R_W2, R_b2


def mha_relevance(X, Q, K, V, E, A, O, f, W_Q, W_K, W_V, W_O, R_f, eps: float,
                  lora: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Relevance through causal multi-head attention with the softmax as identity.

    ``Q``, ``K``, ``V`` are ``(n_heads, m, d_head)``, ``E`` and ``A`` are
    ``(n_heads, m, m)`` with ``E`` the unmasked scaled scores. ``W_*`` are the
    effective ``d x d`` projections (head ``r`` = column block ``r``).

    Without ``lora`` the closed forms are used and the result has keys
    ``X, W_Q, W_K, W_V, W_O``. With ``lora`` (frozen ``W_*`` plus ``A_*``,
    ``B_*``) every projection is unwound by :func:`lora_linear_relevance` and
    the result additionally holds ``A_*`` and ``B_*``; ``W_*`` then refers to
    the frozen backbone.
    """
    Q, K, V, E, A = (np.asarray(x, dtype=np.float64) for x in (Q, K, V, E, A))
    n_heads, m, d_head = Q.shape
    d = X.shape[1]
    if n_heads * d_head != d or W_O.shape != (d, d):
        raise ShapeError(f"head layout {Q.shape} incompatible with d={d}")
    for name, t in (("K", K), ("V", V)):
        if t.shape != Q.shape:
            raise ShapeError(f"{name} has {t.shape[0]} heads / shape {t.shape}, expected {Q.shape}")
    if E.shape != (n_heads, m, m) or A.shape != (n_heads, m, m):
        raise ShapeError(f"attention maps must be {(n_heads, m, m)}, got E{E.shape} A{A.shape}")
    _same("R_f", np.asarray(R_f), np.asarray(f))

    out: Dict[str, np.ndarray] = {}
    if lora is None:
        lam_f = stable_div(R_f, f, eps)
        R_O = 0.5 * O * matmul(lam_f, W_O.T)
        out["W_O"] = 0.5 * W_O * matmul(O.T, lam_f)
    else:
        R_O, out["W_O"], out["A_O"], out["B_O"] = lora_linear_relevance(
            O, lora["W_O"], lora["A_O"], lora["B_O"], f, R_f, eps
        )

    alpha = 1.0 / (8.0 * np.sqrt(d_head))
    causal = np.tril(np.ones((m, m), dtype=bool))
    theta = {p: np.zeros((m, d)) for p in ("Q", "K", "V")}
    R_W = {p: np.zeros((d, d)) for p in ("Q", "K", "V")}
    R_X = np.zeros_like(X)
    W = {"Q": W_Q, "K": W_K, "V": W_V}
    for r in range(n_heads):
        cols = slice(r * d_head, (r + 1) * d_head)
        lam_o = stable_div(R_O[:, cols], O[:, cols], eps)
        num = A[r] * matmul(lam_o, V[r].T)
        phi = np.where(causal, stable_div(num, E[r], eps), 0.0)
        th = {"Q": matmul(phi, K[r]), "K": matmul(phi.T, Q[r]), "V": matmul(A[r].T, lam_o)}
        for p, coef in (("Q", alpha), ("K", alpha), ("V", 0.25)):
            theta[p][:, cols] = th[p]
            if lora is None:
                Wr = W[p][:, cols]
                R_W[p][:, cols] = coef * Wr * matmul(X.T, th[p])
                R_X += coef * X * matmul(th[p], Wr.T)

    if lora is None:
        out.update({f"W_{p}": R_W[p] for p in ("Q", "K", "V")})
    else:
        # relevance reaching each projection output, R(Q) = Q * Theta_Q / (4 sqrt(d_head)) etc.
        proj_out = {p: np.concatenate(list(T), axis=1) for p, T in (("Q", Q), ("K", K), ("V", V))}
        share = {"Q": 2 * alpha, "K": 2 * alpha, "V": 0.5}
        for p in ("Q", "K", "V"):
            R_C = share[p] * proj_out[p] * theta[p]
            R_P, out[f"W_{p}"], out[f"A_{p}"], out[f"B_{p}"] = lora_linear_relevance(
                X, lora[f"W_{p}"], lora[f"A_{p}"], lora[f"B_{p}"], proj_out[p], R_C, eps
            )
            R_X += R_P
    out["X"] = R_X
    return out


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------


def attribute(params: ModelParams, trace: ForwardTrace, cfg: AttributionConfig = AttributionConfig(),
              positions: Optional[Sequence[int]] = None) -> RelevanceMap:
    """Propagate greedy next-token logits back onto every block parameter.

    Args:
        params: the parameters that produced ``trace``.
        trace: output of :func:`lrpcl.model.forward`.
        cfg: stabiliser settings.
        positions: rows whose argmax logit is attributed; defaults to the last
            row. Several rows are attributed jointly, which equals the sum of
            the individual attributions because every rule is linear.

    Raises:
        ValueError: trace does not belong to a model of this configuration.
        NumericalError: a NaN/Inf appeared; names the block and tensor.
    """
    mcfg = params.cfg
    eps = cfg.eps
    m = trace.Z.shape[0]
    if len(trace.blocks) != mcfg.n_layers or trace.Y.shape != (m, mcfg.d_model) \
            or trace.Z.shape[1] != mcfg.vocab_size:
        raise ValueError("trace does not match the model configuration")
    if positions is None:
        positions = [m - 1]
    positions = sorted(set(int(p) for p in positions))
    if not positions or positions[0] < 0 or positions[-1] >= m:
        raise ValueError(f"positions must lie in [0, {m})")

    W_vocab = params["W_vocab"]
    R_H = np.zeros((m, mcfg.d_model))
    targets = []
    total = 0.0
    for i in positions:
        j = int(np.argmax(trace.Z[i]))
        R_H[i] = trace.Y[i] * W_vocab[:, j]
        targets.append((i, j))
        total += float(trace.Z[i, j])

    lora_mode = mcfg.lora_rank is not None
    rel: Dict[str, np.ndarray] = {}
    for l in reversed(range(mcfg.n_layers)):
        bt = trace.blocks[l]
        p = params.block(l)
        where = f"block {l}"
        lam = stable_div(R_H, bt.H_next, eps)
        R_H_res = bt.H * lam
        R_f = bt.f * lam
        R_delta = bt.delta * lam

        R_g, R_W1, R_b1, R_W2, R_b2 = ffn_relevance(
            bt.g, bt.U, bt.S, bt.delta, p["W_1"], p["b_1"], p["W_2"], p["b_2"], R_delta, eps
        )
        lam2 = stable_div(R_g, bt.s, eps)
        R_H_res = R_H_res + bt.H * lam2
        R_f = R_f + bt.f * lam2

        W_eff = {proj: params.effective(l, proj) for proj in PROJ}
        lora = None
        if lora_mode:
            lora = {k: p[k] for k in p if k[:2] in ("W_", "A_", "B_")}
        mha = mha_relevance(
            bt.X, bt.Q, bt.K, bt.V, bt.E, bt.A, bt.O, bt.f,
            W_eff["Q"], W_eff["K"], W_eff["V"], W_eff["O"], R_f, eps, lora=lora,
        )
        R_H = R_H_res + mha.pop("X")

        block_rel = {"W_1": R_W1, "b_1": R_b1, "W_2": R_W2, "b_2": R_b2, **mha}
        for name, value in block_rel.items():
            check_finite(value, where, name)
            rel[f"block{l}.{name}"] = value
        check_finite(R_H, where, "H")

    order = [k for k in params if k in rel]
    return RelevanceMap({k: rel[k] for k in order}, R_H, total, tuple(targets))


def save_relevance(rmap: RelevanceMap, path, meta: Optional[dict] = None) -> None:
    tensors = {f"{k}.rel": v for k, v in rmap.tensors.items()}
    tensors["input.rel"] = rmap.input
    info = {"kind": "relevance", "total": rmap.total, "targets": [list(t) for t in rmap.targets]}
    info.update(meta or {})
    container.write_container(path, tensors, info)


def load_relevance(path) -> Tuple[RelevanceMap, dict]:
    tensors, meta = container.read_container(path)
    if meta.get("kind") != "relevance":
        raise container.IntegrityError(f"{path} is not a relevance map")
    inp = tensors.pop("input.rel")
    rel = {k[: -len(".rel")]: v for k, v in tensors.items()}
    return RelevanceMap(rel, inp, float(meta["total"]), tuple(tuple(t) for t in meta["targets"])), meta
