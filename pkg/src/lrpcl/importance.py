"""Task importance priors built from per-sample relevance, and gradient gates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lrpcl import container
from lrpcl.attribution import AttributionConfig, RelevanceMap, attribute
from lrpcl.model import BLOCK_WEIGHTS, LORA_FACTORS, ModelParams, forward
from lrpcl.numerics import ShapeError
from lrpcl.tasks import Example, Tokenizer, exact_matches

DEFAULT_K = 8


class EmptyCorrectSetError(ValueError):
    """The model generated none of the candidate samples correctly."""


@dataclass
class ImportancePrior:
    """Per-element importance of the gated tensors for one task, in ``[-1, 1]``."""

    task: str
    tensors: Dict[str, np.ndarray]
    k: int
    n_correct: int


@dataclass
class GateMask:
    """Element-wise gradient multipliers in ``[0, 1]``."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


def gated_names(params: ModelParams, mode: str = "full") -> List[str]:
    """Tensors that receive importance priors and gates.

    Full fine-tuning gates the block weights and FFN biases; LoRA mode gates
    only the adapter factors. Embeddings, ``W_vocab`` and LN parameters are
    never gated.
    """
    if mode == "lora":
        if params.cfg.lora_rank is None:
            raise ValueError("LoRA mode needs a model with lora_rank set")
        keep = LORA_FACTORS
    elif mode == "full":
        keep = BLOCK_WEIGHTS
    else:
        raise ValueError(f"mode must be 'full' or 'lora', got {mode!r}")
    return [k for k in params if k.startswith("block") and k.split(".", 1)[1] in keep]


def normalize_sample(rel: Mapping[str, np.ndarray], eps: float = 1e-12) -> Dict[str, np.ndarray]:
    """Signed log-compression, scaled per tensor so the largest magnitude is ~1."""
    if isinstance(rel, RelevanceMap):
        rel = rel.tensors
    out = {}
    for name, r in rel.items():
        r = np.asarray(r, dtype=np.float64)
        mag = np.log1p(np.abs(r))
        top = mag.max() if mag.size else 0.0
        out[name] = np.sign(r) * mag / (top + eps)
    return out


def select_correct(examples: Sequence[Example], params: ModelParams, tok: Tokenizer) -> List[int]:
    """Indices of examples whose greedy generation matches the target exactly.

    Raises:
        EmptyCorrectSetError: nothing was generated correctly.
    """
    ok = exact_matches(params, examples, tok)
    idx = [i for i, hit in enumerate(ok) if hit]
    if not idx:
        raise EmptyCorrectSetError(
            f"model generated 0 of {len(examples)} samples correctly; "
            "train longer or provide more data before building a prior"
        )
    return idx


def sample_relevance(params: ModelParams, ex: Example, tok: Tokenizer,
                     cfg: AttributionConfig = AttributionConfig()) -> RelevanceMap:
    """Relevance of one sample's whole response.

    The framed sequence is run teacher-forced and every position that emits a
    response token (including ``[EOS]``) starts relevance from its argmax
    logit. For a correctly generated sample this is the sum of the per-step
    attributions of its greedy decode.
    """
    prompt = tok.prompt_ids(ex)
    target = tok.target_ids(ex)
    seq = prompt + target[:-1]
    positions = range(len(prompt) - 1, len(seq))
    return attribute(params, forward(params, seq), cfg, positions=positions)


def aggregate_task_prior(normalized: Sequence[Mapping[str, np.ndarray]], k: int = DEFAULT_K,
                         task: str = "") -> ImportancePrior:
    """Average of the ``k`` largest signed values per element across samples."""
    if not normalized:
        raise ValueError("need at least one normalized sample map")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(normalized)
    kk = min(k, n)
    names = list(normalized[0])
    out = {}
    for name in names:
        stack = np.stack([np.asarray(s[name], dtype=np.float64) for s in normalized])
        # descending per element; the axis-0 sum then adds largest first
        top = -np.sort(-stack, axis=0)[:kk]
        out[name] = top.sum(axis=0) / kk
    return ImportancePrior(task, out, kk, n)


def historical_gate(priors: Sequence[ImportancePrior],
                    shapes: Optional[Mapping[str, Tuple[int, ...]]] = None) -> GateMask:
    """``1 - max(0, elementwise max over priors)``; all ones without history.

    Args:
        priors: priors of every previously learned task.
        shapes: tensor shapes to use when ``priors`` is empty.
    """
    if not priors:
        if shapes is None:
            raise ValueError("shapes are required when there are no priors")
        return GateMask({k: np.ones(s) for k, s in shapes.items()})
    names = list(priors[0].tensors)
    for p in priors[1:]:
        if list(p.tensors) != names:
            raise ShapeError("priors cover different tensor sets")
        for k in names:
            if p.tensors[k].shape != priors[0].tensors[k].shape:
                raise ShapeError(f"{k}: prior shapes differ {p.tensors[k].shape} vs {priors[0].tensors[k].shape}")
    gate = {}
    for k in names:
        hist = np.maximum.reduce([p.tensors[k] for p in priors])
        gate[k] = 1.0 - np.clip(hist, 0.0, 1.0)
    return GateMask(gate)


def build_task_prior(params: ModelParams, examples: Sequence[Example], tok: Tokenizer,
                     k: int = DEFAULT_K, attr_cfg: AttributionConfig = AttributionConfig(),
                     mode: str = "full", norm_eps: float = 1e-12,
                     require_correct: bool = True) -> ImportancePrior:
    """Attribute ``examples`` on ``params`` and aggregate a task prior.

    With ``require_correct`` only correctly generated samples are used; if
    it is off, every sample is attributed on the model's own greedy
    predictions.
    """
    names = gated_names(params, mode)
    idx = select_correct(examples, params, tok) if require_correct else list(range(len(examples)))
    maps = []
    for i in idx:
        rmap = sample_relevance(params, examples[i], tok, attr_cfg)
        maps.append(normalize_sample({n: rmap.tensors[n] for n in names}, norm_eps))
    task = examples[idx[0]].task if idx else ""
    return aggregate_task_prior(maps, k, task=task)


def save_prior(prior: ImportancePrior, path) -> None:
    container.write_container(
        path, prior.tensors, {"kind": "prior", "task": prior.task, "k": prior.k, "n_correct": prior.n_correct}
    )


def load_prior(path) -> ImportancePrior:
    tensors, meta = container.read_container(path)
    if meta.get("kind") != "prior":
        raise container.IntegrityError(f"{path} is not an importance prior")
    return ImportancePrior(meta["task"], tensors, int(meta["k"]), int(meta["n_correct"]))


def save_gate(gate: GateMask, path) -> None:
    container.write_container(path, gate.tensors, {"kind": "gate"})


def load_gate(path) -> GateMask:
    tensors, meta = container.read_container(path)
    if meta.get("kind") != "gate":
        raise container.IntegrityError(f"{path} is not a gate mask")
    return GateMask(tensors)
