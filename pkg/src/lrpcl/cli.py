"""Command-line pipeline: ``lrpcl <command> --config run.json [flags]``.

Commands and what they write under ``--out``:

============== ===========================================================
gen-tasks      ``data/tokenizer.json``, ``data/{task}.{train,eval}.jsonl``
train-single   ``single/{task}/checkpoint/``, ``loss.csv``, ``eval.json``
attribute      ``attr/{task}/sample{i:05d}/`` per correct sample, ``index.json``
prior          ``priors/task{t}.prior/``
train-continual ``continual/gate-{on,off}/stage{t}/checkpoint/``,
               ``stage{t}.gate/``, ``task{t}.prior/``, ``accuracy.json``, ``loss.csv``
study          ``study/similarity.csv``, ``study/summary.json``
report         ``report/summary.json``, ``report/accuracy.csv``, ``report/similarity.csv``
============== ===========================================================

Every command also writes ``config.json`` (the resolved config) and
``manifests/{command}*.json`` listing SHA-256 hashes of its inputs and
outputs. Exit codes: 0 success, 2 config error, 3 data error (missing or
corrupt artifact, empty correct set), 4 numerical error.

``LRPCL_THREADS`` caps BLAS threads and the attribution worker pool.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from lrpcl import config as config_mod
from lrpcl.analysis import forgetting, similarity_study, write_similarity_csv
from lrpcl.attribution import save_relevance
from lrpcl.config import ConfigError, RunConfig
from lrpcl.container import IntegrityError
from lrpcl.importance import (
    EmptyCorrectSetError, build_task_prior, sample_relevance, save_gate, save_prior, select_correct,
)
from lrpcl.model import init_params, load_checkpoint, save_checkpoint
from lrpcl.numerics import NumericalError, tune_allocator
from lrpcl.tasks import Tokenizer, evaluate, generate, load_dataset, save_dataset
from lrpcl.trainer import ContinualTask, train_continual, train_single_task

log = logging.getLogger("lrpcl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "LRPCL_THREADS"


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; produce it first with `lrpcl {producer}`")
        self.path = path
        self.producer = producer


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _files(path: Path) -> Iterable[Path]:
    if path.is_dir():
        yield from sorted(p for p in path.rglob("*") if p.is_file())
    elif path.exists():
        yield path


def _hashes(root: Path, paths: Iterable[Path]) -> Dict[str, str]:
    out = {}
    for p in paths:
        for f in _files(p):
            out[f.relative_to(root).as_posix()] = _sha256(f)
    return dict(sorted(out.items()))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(cfg: RunConfig, name: str, inputs: List[Path], outputs: List[Path]) -> None:
    root = cfg.out
    _write_json(root / "manifests" / f"{name}.json", {
        "command": name,
        "config_sha256": hashlib.sha256(cfg.to_json().encode()).hexdigest(),
        "inputs": _hashes(root, inputs),
        "outputs": _hashes(root, outputs),
    })


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, "must be >= 1")
    return n


def _data_paths(cfg: RunConfig, task: str):
    d = cfg.out / "data"
    return d / f"{task}.train.jsonl", d / f"{task}.eval.jsonl"


def _load_data(cfg: RunConfig, task: str):
    tr, ev = _data_paths(cfg, task)
    _require(tr, "gen-tasks")
    _require(ev, "gen-tasks")
    tok_path = _require(cfg.out / "data" / "tokenizer.json", "gen-tasks")
    try:
        tok = Tokenizer.from_json(tok_path.read_text())
        return tok, load_dataset(tr), load_dataset(ev)
    except (ValueError, KeyError) as exc:
        raise IntegrityError(f"dataset for {task} is unreadable: {exc}") from None


def _single_ckpt(cfg: RunConfig, task: str) -> Path:
    return cfg.out / "single" / task / "checkpoint"


def _load_model(path: Path, producer: str, cfg: RunConfig):
    _require(path / "manifest.json", producer)
    params, mcfg = load_checkpoint(path)
    if mcfg != cfg.model:
        raise IntegrityError(f"{path} was trained with {mcfg}, config expects {cfg.model}")
    return params


def _write_losses(path: Path, losses: List[float], stage: Optional[int] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "loss"] if stage is not None else ["step", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow(([stage] if stage is not None else []) + [i, repr(float(loss))])


def _selected_tasks(cfg: RunConfig, task: Optional[str]) -> List[str]:
    return [cfg.task(task).name] if task else cfg.task_names


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_tasks(cfg: RunConfig, args) -> None:
    data = cfg.out / "data"
    data.mkdir(parents=True, exist_ok=True)
    (data / "tokenizer.json").write_text(cfg.tokenizer().to_json())
    outputs = [data / "tokenizer.json"]
    for i, spec in enumerate(cfg.tasks):
        try:
            tr, ev = generate(spec)
        except ValueError as exc:
            raise ConfigError(f"tasks[{i}].n_train", str(exc)) from None
        p_tr, p_ev = _data_paths(cfg, spec.name)
        save_dataset(p_tr, tr)
        save_dataset(p_ev, ev)
        outputs += [p_tr, p_ev]
        log.info("%s: %d train / %d eval examples", spec.name, len(tr), len(ev))
    _write_manifest(cfg, "gen-tasks", [], outputs)


def cmd_train_single(cfg: RunConfig, args) -> None:
    init = init_params(cfg.model)
    for name in _selected_tasks(cfg, args.task):
        tok, tr, ev = _load_data(cfg, name)
        res = train_single_task(init, tr, tok, cfg.train, stage=cfg.stage_of(name), log_every=args.log_every)
        out = cfg.out / "single" / name
        save_checkpoint(res.params, out / "checkpoint")
        _write_losses(out / "loss.csv", res.losses)
        acc = evaluate(res.params, ev, tok)
        _write_json(out / "eval.json", {"task": name, "exact_match": acc})
        log.info("%s: eval exact match %.3f", name, acc)
        _write_manifest(cfg, f"train-single-{name}", list(_data_paths(cfg, name)), [out])


def cmd_attribute(cfg: RunConfig, args) -> None:
    workers = _threads()
    for name in _selected_tasks(cfg, args.task):
        tok, tr, _ = _load_data(cfg, name)
        ckpt = Path(args.checkpoint) if args.checkpoint else _single_ckpt(cfg, name)
        params = _load_model(ckpt, f"train-single --task {name}", cfg)
        candidates = tr[: cfg.importance.samples]
        idx = select_correct(candidates, params, tok)
        out = cfg.out / "attr" / name

        def one(i):
            return sample_relevance(params, candidates[i], tok, cfg.attribution)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(one, idx))
        index = []
        for i, rmap in zip(idx, maps):
            rel = f"sample{i:05d}"
            save_relevance(rmap, out / rel, {"task": name, "sample": i})
            index.append({"sample": i, "path": rel, "prompt": candidates[i].prompt,
                          "total": rmap.total, "conservation_error": rmap.conservation_error()})
        _write_json(out / "index.json", {"task": name, "checkpoint": str(ckpt), "n_candidates": len(candidates),
                                         "n_correct": len(idx), "samples": index})
        log.info("%s: attributed %d of %d candidates", name, len(idx), len(candidates))
        _write_manifest(cfg, f"attribute-{name}", [ckpt, _data_paths(cfg, name)[0]], [out])


def cmd_prior(cfg: RunConfig, args) -> None:
    for name in _selected_tasks(cfg, args.task):
        tok, tr, _ = _load_data(cfg, name)
        ckpt = _single_ckpt(cfg, name)
        params = _load_model(ckpt, f"train-single --task {name}", cfg)
        prior = build_task_prior(params, tr[: cfg.importance.samples], tok, cfg.importance.k,
                                 cfg.attribution, cfg.train.mode, cfg.importance.eps)
        path = cfg.out / "priors" / f"task{cfg.stage_of(name)}.prior"
        save_prior(prior, path)
        log.info("%s: prior from %d correct samples", name, prior.n_correct)
        _write_manifest(cfg, f"prior-{name}", [ckpt, _data_paths(cfg, name)[0]], [path])


def cmd_train_continual(cfg: RunConfig, args) -> None:
    if len(cfg.tasks) < 2:
        raise ConfigError("tasks", "continual training needs at least two tasks")
    tasks = []
    tok = None
    for name in cfg.task_names:
        tok, tr, ev = _load_data(cfg, name)
        tasks.append(ContinualTask(name, tr, ev))
    gate_on = cfg.train.gate
    res = train_continual(init_params(cfg.model), tasks, tok, cfg.train, gate_mode=gate_on,
                          k=cfg.importance.k, attr_cfg=cfg.attribution,
                          prior_source=cfg.importance.prior_source,
                          prior_samples=cfg.importance.samples, log_every=args.log_every)
    out = cfg.out / "continual" / f"gate-{'on' if gate_on else 'off'}"
    out.mkdir(parents=True, exist_ok=True)
    for t, params in enumerate(res.stage_params, 1):
        save_checkpoint(params, out / f"stage{t}" / "checkpoint")
        if gate_on:
            save_gate(res.gates[t - 1], out / f"stage{t}.gate")
    for t, prior in enumerate(res.priors, 1):
        save_prior(prior, out / f"task{t}.prior")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "loss"])
        for s, losses in enumerate(res.losses, 1):
            for i, loss in enumerate(losses, 1):
                w.writerow([s, i, repr(float(loss))])
    rep = forgetting(res.accuracy)
    _write_json(out / "accuracy.json", {"tasks": res.task_names, "gate": gate_on, **rep.to_dict()})
    inputs = [p for n in cfg.task_names for p in _data_paths(cfg, n)]
    _write_manifest(cfg, f"train-continual-gate-{'on' if gate_on else 'off'}", inputs, [out])


def _study_priors(cfg, tok, params, data):
    return build_task_prior(params, data[: cfg.study.samples], tok, cfg.importance.k, cfg.attribution,
                            cfg.train.mode, cfg.importance.eps, require_correct=False)


def cmd_study(cfg: RunConfig, args) -> None:
    if len(cfg.tasks) < 2:
        raise ConfigError("tasks", "the similarity study needs two tasks")
    t1, t2 = cfg.task_names[:2]
    tok, tr1, _ = _load_data(cfg, t1)
    _, tr2, _ = _load_data(cfg, t2)
    single1 = _load_model(_single_ckpt(cfg, t1), f"train-single --task {t1}", cfg)
    single2 = _load_model(_single_ckpt(cfg, t2), f"train-single --task {t2}", cfg)
    seq_path = cfg.out / "continual" / "gate-off" / "stage2" / "checkpoint"
    seq = _load_model(seq_path, "train-continual --gate off", cfg)
    kf = cfg.study.k_fraction
    indep = similarity_study(_study_priors(cfg, tok, single1, tr1), _study_priors(cfg, tok, single2, tr2),
                             k_fraction=kf, setting="independent")
    seqr = similarity_study(_study_priors(cfg, tok, seq, tr1), _study_priors(cfg, tok, seq, tr2),
                            k_fraction=kf, setting="sequential")
    out = cfg.out / "study"
    out.mkdir(parents=True, exist_ok=True)
    write_similarity_csv(out / "similarity.csv", [indep, seqr])
    _write_json(out / "summary.json", {"tasks": [t1, t2], "k_fraction": kf,
                                       "independent": indep.summary(), "sequential": seqr.summary()})
    inputs = [_single_ckpt(cfg, t1), _single_ckpt(cfg, t2), seq_path, _data_paths(cfg, t1)[0],
              _data_paths(cfg, t2)[0]]
    _write_manifest(cfg, "study", inputs, [out])


def cmd_report(cfg: RunConfig, args) -> None:
    arms = {}
    for gate in ("off", "on"):
        path = _require(cfg.out / "continual" / f"gate-{gate}" / "accuracy.json", f"train-continual --gate {gate}")
        arms[gate] = json.loads(path.read_text())
    study_path = _require(cfg.out / "study" / "summary.json", "study")
    study = json.loads(study_path.read_text())
    naive, gated = arms["off"]["accuracy"], arms["on"]["accuracy"]
    T = len(naive)
    summary = {
        "tasks": arms["off"]["tasks"],
        "seed": cfg.seed,
        "naive": arms["off"],
        "gated": arms["on"],
        "stage1_identical": naive[0][0] == gated[0][0],
        "naive_task1_drop": naive[0][0] - naive[0][T - 1],
        "retention_margin": gated[0][T - 1] - naive[0][T - 1],
        "last_task_gap": abs(gated[T - 1][T - 1] - naive[T - 1][T - 1]),
        "similarity": {s: {"mean_topk_overlap": study[s]["mean_topk_overlap"],
                           "mean_spearman": study[s]["mean_spearman"]}
                       for s in ("independent", "sequential")},
    }
    summary["sequential_more_similar"] = all(
        summary["similarity"]["sequential"][m] > summary["similarity"]["independent"][m]
        for m in ("mean_topk_overlap", "mean_spearman")
    )
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "summary.json", summary)
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gate", "task", "stage", "exact_match"])
        for gate, acc in (("off", naive), ("on", gated)):
            for t in range(T):
                for s in range(t, T):
                    w.writerow([gate, summary["tasks"][t], s + 1, repr(float(acc[t][s]))])
    (out / "similarity.csv").write_bytes((cfg.out / "study" / "similarity.csv").read_bytes())
    inputs = [cfg.out / "continual" / f"gate-{g}" / "accuracy.json" for g in ("off", "on")]
    _write_manifest(cfg, "report", inputs + [study_path, cfg.out / "study" / "similarity.csv"], [out])


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "train-single": cmd_train_single,
    "attribute": cmd_attribute,
    "prior": cmd_prior,
    "train-continual": cmd_train_continual,
    "study": cmd_study,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrpcl", description="LRP parameter attribution and gated continual fine-tuning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--mode", choices=("full", "lora"), help="fine-tuning mode")
        p.add_argument("--gate", choices=("on", "off"), help="gradient gating for train-continual")
        p.add_argument("--task-order", help="comma-separated task names")
        p.add_argument("--log-every", type=int, default=0, help="log mean loss every N steps")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-single", "attribute", "prior"):
            p.add_argument("--task", help="restrict to one task (default: all)")
        if name == "attribute":
            p.add_argument("--checkpoint", help="checkpoint directory (default: the task's single-task model)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        order = [s.strip() for s in args.task_order.split(",") if s.strip()] if args.task_order else None
        gate = None if args.gate is None else args.gate == "on"
        cfg = config_mod.load(args.config, seed=args.seed, out=args.out, mode=args.mode, gate=gate,
                              task_order=order)
        if args.command == "train-continual" and args.gate is None:
            raise ConfigError("--gate", "train-continual needs --gate on|off")
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.json").write_text(cfg.to_json())
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, IntegrityError, EmptyCorrectSetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
