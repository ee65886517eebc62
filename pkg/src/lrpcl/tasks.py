"""Synthetic sequence tasks, a character tokenizer and exact-match evaluation.

Each example is framed as ``[BOS] <task> x [SEP] y [EOS]``. The task marker
token tells the shared model which mapping to apply; without it copy and
reverse would ask for different outputs on identical inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from lrpcl.model import ModelParams, greedy_decode_batch
from lrpcl.numerics import make_rng

TASK_NAMES = ("copy", "reverse", "modadd", "sort")
SPECIALS = ("<pad>", "<bos>", "<sep>", "<eos>")
SYMBOLS = "0123456789abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class TaskSpec:
    """A synthetic task.

    For ``modadd`` the length range is the operand width: the prompt is two
    operands of that width and the target is their sum modulo
    ``alphabet_size ** width``, written with the same width.
    """

    name: str
    alphabet_size: int = 16
    min_len: int = 4
    max_len: int = 10
    n_train: int = 2000
    n_eval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}; choose from {TASK_NAMES}")
        if not 1 <= self.alphabet_size <= len(SYMBOLS):
            raise ValueError(f"alphabet_size must be in [1, {len(SYMBOLS)}]")
        if self.name == "modadd" and self.alphabet_size < 2:
            raise ValueError("modadd needs an alphabet of at least 2 digits")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")

    def prompt_len(self, n: int) -> int:
        return 2 * n if self.name == "modadd" else n

    def max_framed_len(self) -> int:
        """Longest ``[BOS] <task> x [SEP] y [EOS]`` sequence this task can emit."""
        return 2 + self.prompt_len(self.max_len) + 1 + self.max_len + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Example:
    task: str
    prompt: str
    target: str


class Tokenizer:
    """Character-level map shared by every task of a curriculum."""

    def __init__(self, alphabet_size: int):
        self.alphabet = SYMBOLS[:alphabet_size]
        self.itos: List[str] = list(SPECIALS) + [f"<{t}>" for t in TASK_NAMES] + list(self.alphabet)
        self.stoi: Dict[str, int] = {s: i for i, s in enumerate(self.itos)}
        self.pad, self.bos, self.sep, self.eos = (self.stoi[s] for s in SPECIALS)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def task_token(self, task: str) -> int:
        return self.stoi[f"<{task}>"]

    def encode(self, text: str) -> List[int]:
        try:
            return [self.stoi[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in alphabet {self.alphabet!r}") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.itos[i] for i in ids)

    def prompt_ids(self, ex: Example) -> List[int]:
        return [self.bos, self.task_token(ex.task)] + self.encode(ex.prompt) + [self.sep]

    def target_ids(self, ex: Example) -> List[int]:
        return self.encode(ex.target) + [self.eos]

    def full_ids(self, ex: Example) -> List[int]:
        return self.prompt_ids(ex) + self.target_ids(ex)

    def to_json(self) -> str:
        return json.dumps({"alphabet": self.alphabet, "itos": self.itos}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        data = json.loads(text)
        tok = cls(len(data["alphabet"]))
        if tok.itos != data["itos"]:
            raise ValueError("tokenizer file does not match this package's vocabulary layout")
        return tok


def solve(task: str, prompt: str, alphabet_size: int) -> str:
    """Reference answer for ``prompt`` under ``task``."""
    if task == "copy":
        return prompt
    if task == "reverse":
        return prompt[::-1]
    if task == "sort":
        return "".join(sorted(prompt, key=SYMBOLS.index))
    if task == "modadd":
        w = len(prompt) // 2
        digits = SYMBOLS[:alphabet_size]
        a = int(prompt[:w], alphabet_size)
        b = int(prompt[w:], alphabet_size)
        s = (a + b) % alphabet_size ** w
        out = []
        for _ in range(w):
            s, rem = divmod(s, alphabet_size)
            out.append(digits[rem])
        return "".join(reversed(out))
    raise ValueError(f"unknown task {task!r}")


def _is_eval(prompt: str) -> bool:
    # hash partition on the raw prompt keeps splits disjoint across tasks too
    return hashlib.sha256(prompt.encode("utf-8")).digest()[0] % 5 == 0


def generate(spec: TaskSpec) -> Tuple[List[Example], List[Example]]:
    """Deterministic (train, eval) split for ``spec``; prompts never repeat."""
    rng = make_rng(spec.seed, f"data/{spec.name}")
    alphabet = SYMBOLS[: spec.alphabet_size]
    train: List[Example] = []
    evals: List[Example] = []
    seen = set()
    n_possible = sum(spec.alphabet_size ** spec.prompt_len(n) for n in range(spec.min_len, spec.max_len + 1))
    if n_possible < spec.n_train + spec.n_eval:
        raise ValueError(f"{spec.name}: only {n_possible} distinct prompts available")
    attempts = 0
    while len(train) < spec.n_train or len(evals) < spec.n_eval:
        attempts += 1
        if attempts > 100 * (spec.n_train + spec.n_eval) + 10000:
            raise ValueError(f"{spec.name}: could not fill the requested split sizes")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        prompt = "".join(alphabet[i] for i in rng.integers(0, spec.alphabet_size, size=spec.prompt_len(n)))
        if prompt in seen:
            continue
        seen.add(prompt)
        ex = Example(spec.name, prompt, solve(spec.name, prompt, spec.alphabet_size))
        bucket, cap = (evals, spec.n_eval) if _is_eval(prompt) else (train, spec.n_train)
        if len(bucket) < cap:
            bucket.append(ex)
    return train, evals


def decode_examples(params: ModelParams, examples: Sequence[Example], tok: Tokenizer) -> List[List[int]]:
    """Greedy continuation (after ``[SEP]``) of every example's prompt."""
    prompts = [tok.prompt_ids(ex) for ex in examples]
    max_new = max((len(ex.target) + 1 for ex in examples), default=0)
    out = greedy_decode_batch(params, prompts, max_new, eos_id=tok.eos)
    return [seq[len(pr):] for seq, pr in zip(out, prompts)]


def exact_matches(params: ModelParams, examples: Sequence[Example], tok: Tokenizer) -> List[bool]:
    """Per-example exact match: generated tokens equal ``target + [EOS]``."""
    gens = decode_examples(params, examples, tok)
    return [g == tok.target_ids(ex) for g, ex in zip(gens, examples)]


def evaluate(params: ModelParams, examples: Sequence[Example], tok: Tokenizer) -> float:
    if not examples:
        return 0.0
    return float(np.mean(exact_matches(params, examples, tok)))


def save_dataset(path, examples: Sequence[Example]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"task": ex.task, "prompt": ex.prompt, "target": ex.target}) + "\n")


def load_dataset(path) -> List[Example]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            out.append(Example(row["task"], row["prompt"], row["target"]))
    return out
