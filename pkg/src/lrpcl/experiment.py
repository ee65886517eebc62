"""Two-task continual experiment: naive vs attribution-gated, plus the similarity study.

For one seed :func:`run_seed` trains

* ``theta_1``: init -> task 1 (this is also the single-task model for task 1),
* ``theta_2`` naive: ``theta_1`` -> task 2 ungated,
* ``theta_2`` gated: ``theta_1`` -> task 2 with the gate built from task 1's prior,
* ``theta'_2``: init -> task 2 (single-task model for task 2),

then compares the importance maps of ``(theta'_1, T1)`` vs ``(theta'_2, T2)``
(independent setting) with ``(theta_2, T1)`` vs ``(theta_2, T2)``
(sequential setting, naive ``theta_2``).

Stage 1 is shared between the two continual arms because it is
bit-identical in both (the stage-1 gate is all ones).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Dict, List

from lrpcl.analysis import forgetting, similarity_study
from lrpcl.attribution import AttributionConfig
from lrpcl.importance import build_task_prior, historical_gate
from lrpcl.model import ModelConfig, init_params
from lrpcl.tasks import TaskSpec, Tokenizer, evaluate, generate
from lrpcl.trainer import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple = ("copy", "reverse")
    alphabet_size: int = 16
    min_len: int = 4
    max_len: int = 10
    n_train: int = 4000
    n_eval: int = 200
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 2e-3
    gate_moments: str = "both"
    k: int = 8
    prior_samples: int = 64
    study_samples: int = 64
    study_k_fraction: float = 0.01

    def task_specs(self, seed: int) -> List[TaskSpec]:
        return [
            TaskSpec(name, self.alphabet_size, self.min_len, self.max_len, self.n_train, self.n_eval, seed)
            for name in self.tasks
        ]

    def model_config(self, seed: int, tok: Tokenizer) -> ModelConfig:
        max_len = max(s.max_framed_len() for s in self.task_specs(seed))
        return ModelConfig(
            n_layers=self.n_layers, d_model=self.d_model, d_ff=self.d_ff, n_heads=self.n_heads,
            d_head=self.d_model // self.n_heads, vocab_size=tok.vocab_size, max_seq_len=max_len, seed=seed,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, steps=self.steps, batch_size=self.batch_size,
                           seed=seed, gate_moments=self.gate_moments)


def run_seed(seed: int, cfg: ExperimentConfig = ExperimentConfig(), with_study: bool = True) -> Dict:
    """Run both continual arms (and optionally the similarity study) for ``seed``."""
    t0 = time.time()
    tok = Tokenizer(cfg.alphabet_size)
    (s1, s2) = cfg.task_specs(seed)
    tr1, ev1 = generate(s1)
    tr2, ev2 = generate(s2)
    init = init_params(cfg.model_config(seed, tok))
    tc = cfg.train_config(seed)
    attr = AttributionConfig()

    theta1 = train(init, tr1, tok, tc, stream="stage1").params
    acc1 = evaluate(theta1, ev1, tok)
    log.info("seed %d stage 1: %s=%.3f", seed, s1.name, acc1)

    naive = train(theta1, tr2, tok, tc, stream="stage2").params
    prior1 = build_task_prior(theta1, tr1[: cfg.prior_samples], tok, cfg.k, attr)
    gate = historical_gate([prior1])
    gated = train(theta1, tr2, tok, tc, gate=gate, stream="stage2").params

    acc = {}
    for arm, final in (("naive", naive), ("gated", gated)):
        acc[arm] = [[acc1, evaluate(final, ev1, tok)], [None, evaluate(final, ev2, tok)]]
        log.info("seed %d %s: %s=%.3f %s=%.3f", seed, arm, s1.name, acc[arm][0][1], s2.name, acc[arm][1][1])

    out = {
        "seed": seed,
        "tasks": [s1.name, s2.name],
        "accuracy": acc,
        "forgetting": {arm: forgetting(a).to_dict() for arm, a in acc.items()},
        "prior_n_correct": prior1.n_correct,
        "gate_mean": {k: float(v.mean()) for k, v in gate.tensors.items()},
        "seconds_continual": time.time() - t0,
    }
    if with_study:
        theta2_single = train(init, tr2, tok, tc, stream="stage2").params
        out["acc_single_task2"] = evaluate(theta2_single, ev2, tok)
        n = cfg.study_samples

        def imp(params, data):
            return build_task_prior(params, data[:n], tok, cfg.k, attr, require_correct=False)

        indep = similarity_study(imp(theta1, tr1), imp(theta2_single, tr2),
                                 k_fraction=cfg.study_k_fraction, setting="independent")
        seq = similarity_study(imp(naive, tr1), imp(naive, tr2),
                               k_fraction=cfg.study_k_fraction, setting="sequential")
        out["similarity"] = {"independent": indep.summary(), "sequential": seq.summary()}
        out["similarity_reports"] = [indep, seq]
    out["seconds"] = time.time() - t0
    return out


def retention_verdict(results: List[Dict]) -> Dict:
    """Evaluate the naive-drop / retention / plasticity conditions per seed."""
    rows = []
    for r in results:
        a_n, a_g = r["accuracy"]["naive"], r["accuracy"]["gated"]
        rows.append({
            "seed": r["seed"],
            "naive_drop": a_n[0][0] - a_n[0][1],
            "retention_margin": a_g[0][1] - a_n[0][1],
            "task2_gap": abs(a_g[1][1] - a_n[1][1]),
        })
    return {
        "rows": rows,
        "naive_drop_ok": all(x["naive_drop"] >= 0.30 for x in rows),
        "retention_seeds": sum(x["retention_margin"] >= 0.10 for x in rows),
        "task2_ok": all(x["task2_gap"] <= 0.10 for x in rows),
    }


def similarity_verdict(results: List[Dict]) -> Dict:
    rows = []
    for r in results:
        s = r["similarity"]
        rows.append({
            "seed": r["seed"],
            "overlap": (s["independent"]["mean_topk_overlap"], s["sequential"]["mean_topk_overlap"]),
            "spearman": (s["independent"]["mean_spearman"], s["sequential"]["mean_spearman"]),
        })
    higher = [x["overlap"][1] > x["overlap"][0] and x["spearman"][1] > x["spearman"][0] for x in rows]
    return {"rows": rows, "seeds_higher": sum(higher)}
