"""Autoregressive loss, Adam with element-wise gradient gates, training loops."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lrpcl.attribution import AttributionConfig
from lrpcl.importance import (
    DEFAULT_K,
    GateMask,
    ImportancePrior,
    build_task_prior,
    gated_names,
    historical_gate,
)
from lrpcl.model import LORA_FACTORS, ModelParams, backward_batch, forward_batch
from lrpcl.numerics import NumericalError, ShapeError, make_rng
from lrpcl.tasks import Example, Tokenizer, evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and loop settings.

    ``gate_moments`` selects which Adam moments see the gated gradient:
    ``"both"`` feeds the gated gradient to the first and second moment;
    ``"first"`` gates the first moment only and keeps the second moment on
    the (clipped) raw gradient, so a constant gate ``c`` shrinks the update
    by ``c`` instead of being normalised away.
    """

    learning_rate: float = 3e-4
    steps: int = 1000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: Optional[float] = 1.0
    seed: int = 0
    mode: str = "full"
    gate: bool = True
    gate_moments: str = "both"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig.learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("TrainConfig.steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")
        if self.mode not in ("full", "lora"):
            raise ValueError("TrainConfig.mode must be 'full' or 'lora'")
        if self.gate_moments not in ("both", "first"):
            raise ValueError("TrainConfig.gate_moments must be 'both' or 'first'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def trainable_names(params: ModelParams, mode: str) -> List[str]:
    if mode == "lora":
        if params.cfg.lora_rank is None:
            raise ValueError("LoRA mode needs a model with lora_rank set")
        return [k for k in params if k.split(".")[-1] in LORA_FACTORS]
    return [k for k in params if k.split(".")[-1] not in LORA_FACTORS]


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def encode_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], pad: int = 0):
    """Pack ``(prompt, target)`` id pairs for teacher forcing.

    Returns ``(tokens, labels, weights)``, each ``(B, T)``. ``weights`` is
    ``1 / (B * n_k)`` on the positions that predict target token ``j`` of
    example ``k`` and zero elsewhere, so the weighted NLL sum is the batch mean
    of per-example mean token NLL.
    """
    if not pairs:
        raise ValueError("empty batch")
    seqs = []
    for x, y in pairs:
        if len(y) == 0:
            raise ValueError("zero-length target")
        if len(x) == 0:
            raise ValueError("zero-length prompt")
        seqs.append((list(x) + list(y), len(x), len(y)))
    T = max(len(s) for s, _, _ in seqs) - 1
    B = len(seqs)
    tokens = np.full((B, T), pad, dtype=np.int64)
    labels = np.full((B, T), pad, dtype=np.int64)
    weights = np.zeros((B, T))
    for b, (s, nx, ny) in enumerate(seqs):
        tokens[b, : len(s) - 1] = s[:-1]
        labels[b, : len(s) - 1] = s[1:]
        weights[b, nx - 1 : nx - 1 + ny] = 1.0 / (B * ny)
    return tokens, labels, weights


def sequence_loss(params: ModelParams, tokens, labels, weights, with_grads: bool = True):
    """Weighted token NLL and (optionally) gradients for every tensor."""
    logits, cache = forward_batch(params, tokens)
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    nll = -np.take_along_axis(logp, np.asarray(labels)[..., None], axis=-1)[..., 0]
    loss = float((nll * weights).sum())
    if not np.isfinite(loss):
        raise NumericalError(f"loss is {loss}", where="loss", tensor="logits")
    if not with_grads:
        return loss, None
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, np.asarray(labels)[..., None],
                      np.take_along_axis(dlogits, np.asarray(labels)[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= weights[..., None]
    return loss, backward_batch(params, cache, dlogits)


def loss_and_grads(params: ModelParams, batch: Sequence[Tuple[Sequence[int], Sequence[int]]],
                   mode: str = "full", pad: int = 0) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean over the batch of per-example mean target-token NLL, with gradients.

    Only target positions contribute; gradients are returned for the
    trainable tensors of ``mode``.
    """
    tokens, labels, weights = encode_batch(batch, pad)
    loss, grads = sequence_loss(params, tokens, labels, weights)
    return loss, {k: grads[k] for k in trainable_names(params, mode)}


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    last_effective: Dict[str, np.ndarray] = field(default_factory=dict)


def apply_gated_step(params: ModelParams, grads: Dict[str, np.ndarray], gate: Optional[GateMask],
                     state: AdamState, cfg: TrainConfig) -> ModelParams:
    """One Adam step with gated gradients; updates ``params`` in place and returns it.

    Order: gate the raw gradients, clip by global norm, then the Adam moment
    updates. ``state.last_effective`` keeps the gradient that entered the
    first moment.
    """
    gated = dict(grads)
    if gate is not None:
        for name, g in gate.tensors.items():
            if name in gated:
                if g.shape != gated[name].shape:
                    raise ShapeError(f"gate {name}: shape {g.shape} vs gradient {gated[name].shape}")
                gated[name] = g * gated[name]
    scale = 1.0
    if cfg.grad_clip is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in gated.values())))
        if not np.isfinite(norm):
            raise NumericalError("gradient norm is not finite", where="optimizer", tensor="grads")
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    state.last_effective = {}
    for name, g in gated.items():
        if scale != 1.0:
            g = g * scale
        raw = grads[name] * scale if cfg.gate_moments == "first" else g
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * raw * raw
        state.last_effective[name] = g
        w = params.tensors[name]
        if cfg.weight_decay:
            w -= cfg.learning_rate * cfg.weight_decay * w
        w -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    losses: List[float]


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


def train(params: ModelParams, examples: Sequence[Example], tok: Tokenizer, cfg: TrainConfig,
          gate: Optional[GateMask] = None, stream: str = "stage1", log_every: int = 0) -> TrainResult:
    """Train a copy of ``params`` on ``examples`` with a fresh optimiser state."""
    if not examples:
        raise ValueError("no training data")
    params = params.copy()
    names = trainable_names(params, cfg.mode)
    rng = make_rng(cfg.seed, f"shuffle/{stream}")
    pairs = [(tok.prompt_ids(ex), tok.target_ids(ex)) for ex in examples]
    bs = min(cfg.batch_size, len(pairs))
    state = AdamState()
    losses = []
    for step, idx in enumerate(_batches(len(pairs), bs, cfg.steps, rng)):
        tokens, labels, weights = encode_batch([pairs[i] for i in idx], tok.pad)
        loss, grads = sequence_loss(params, tokens, labels, weights)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at step {step}", where=f"step {step}", tensor="loss")
        apply_gated_step(params, {k: grads[k] for k in names}, gate, state, cfg)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("%s step %d loss %.4f", stream, step + 1, float(np.mean(losses[-log_every:])))
    return TrainResult(params, losses)


def train_single_task(params: ModelParams, examples: Sequence[Example], tok: Tokenizer,
                      cfg: TrainConfig, stage: int = 1, log_every: int = 0) -> TrainResult:
    """Ungated training from ``params``.

    ``stage`` picks the shuffle stream; with the same seed a single-task model
    for the task at stage ``t`` sees exactly the batches stage ``t`` of a
    continual run sees.
    """
    return train(params, examples, tok, cfg, None, stream=f"stage{stage}", log_every=log_every)


@dataclass
class ContinualTask:
    name: str
    train: List[Example]
    eval: List[Example]


@dataclass
class ContinualResult:
    params: ModelParams
    stage_params: List[ModelParams]
    accuracy: List[List[Optional[float]]]
    priors: List[ImportancePrior]
    gates: List[GateMask]
    losses: List[List[float]]
    task_names: List[str]


def train_continual(init: ModelParams, tasks: Sequence[ContinualTask], tok: Tokenizer,
                    cfg: TrainConfig, gate_mode: Optional[bool] = None, k: int = DEFAULT_K,
                    attr_cfg: AttributionConfig = AttributionConfig(),
                    prior_source: str = "single", prior_samples: int = 64,
                    log_every: int = 0) -> ContinualResult:
    """Sequential fine-tuning over ``tasks``, optionally gated by earlier priors.

    ``accuracy[t][s]`` is eval exact-match of task ``t`` after stage ``s``
    (``None`` for stages before the task was learned).

    With gating on, after stage ``t`` the prior of task ``t`` is attributed
    on its single-task model (``prior_source="single"``: trained from
    ``init`` on that task alone; at stage 1 this is the stage-1 model itself)
    or on the live continual model (``prior_source="continual"``), using
    the first ``prior_samples`` training examples that the model solves.
    """
    if len(tasks) < 2:
        raise ValueError("continual training needs at least two tasks")
    if prior_source not in ("single", "continual"):
        raise ValueError("prior_source must be 'single' or 'continual'")
    gate_on = cfg.gate if gate_mode is None else gate_mode
    names = gated_names(init, cfg.mode)
    shapes = {n: init[n].shape for n in names}
    T = len(tasks)
    acc: List[List[Optional[float]]] = [[None] * T for _ in range(T)]
    params = init
    stage_params, priors, gates, losses = [], [], [], []
    for t, task in enumerate(tasks):
        gate = historical_gate(priors, shapes) if gate_on else None
        gates.append(gate if gate is not None else historical_gate([], shapes))
        res = train(params, task.train, tok, cfg, gate, stream=f"stage{t + 1}", log_every=log_every)
        params = res.params
        stage_params.append(params)
        losses.append(res.losses)
        for i in range(t + 1):
            acc[i][t] = evaluate(params, tasks[i].eval, tok)
        log.info("stage %d (%s): %s", t + 1, task.name,
                 ", ".join(f"{tasks[i].name}={acc[i][t]:.3f}" for i in range(t + 1)))
        if gate_on and t < T - 1:
            if prior_source == "continual" or t == 0:
                source = params
            else:
                source = train_single_task(init, task.train, tok, cfg, stage=t + 1).params
            priors.append(build_task_prior(source, task.train[:prior_samples], tok, k, attr_cfg, cfg.mode))
    return ContinualResult(params, stage_params, acc, priors, gates, losses, [t.name for t in tasks])
