"""Word-level codec over a closed vocabulary, plus per-task prompt pools.

The vocabulary is built once from every string the package can emit:
QA templates over the full color/shape product, caption connectives, and
the three prompt pools shipped as package data. Word-level tokens over a
closed set keep encoding deterministic at this scale.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

from .common import read_json, rng_from, write_json
from .scenes import COLORS, SHAPES

SPECIALS = (
    "<bos>", "<eos>", "<pad>",
    "<task_und>", "<task_pixel>", "<task_depth>", "<task_seg>",
)
GEN_TASKS = ("pixel", "depth", "seg")

_PROMPT_TAG = 201

_PUNCT = ".,!?;:'\"()"


def canonicalize(text: str) -> str:
    """Lowercase, hyphens to spaces, punctuation stripped, spaces collapsed."""
    text = text.lower().replace("-", " ")
    text = "".join(ch for ch in text if ch not in _PUNCT)
    return " ".join(text.split())


def answer_vocab() -> list:
    """The closed answer set: yes/no plus the color names."""
    return ["yes", "no"] + list(COLORS)


@dataclass(frozen=True)
class PromptPool:
    task: str
    prompts: tuple

    def __post_init__(self):
        if not self.prompts:
            raise ValueError(f"prompt pool for task {self.task!r} is empty")


def load_prompt_pool(task: str, prompts_dir: str | Path | None = None) -> PromptPool:
    """Load `<task>.txt`, one prompt per line, from a directory or package data."""
    if task not in GEN_TASKS:
        raise ValueError(f"no prompt pool for task {task!r}")
    if prompts_dir is None:
        src = importlib.resources.files("tinyumm") / "prompts" / f"{task}.txt"
        raw = src.read_text(encoding="utf-8")
    else:
        raw = (Path(prompts_dir) / f"{task}.txt").read_text(encoding="utf-8")
    prompts = tuple(line for line in raw.splitlines() if line.strip())
    return PromptPool(task=task, prompts=prompts)


def sample_prompt(pool: PromptPool, seed: int) -> str:
    rng = rng_from(_PROMPT_TAG, seed)
    return pool.prompts[int(rng.integers(len(pool.prompts)))]


def _all_corpus_strings() -> list:
    strings = []
    for c in COLORS:
        for s in SHAPES:
            strings.append(f"Is there a {c} {s}?")
            strings.append(f"What color is the {s}?")
            for c2 in COLORS:
                for s2 in SHAPES:
                    strings.append(f"Is the {c} {s} closer than the {c2} {s2}?")
    strings += answer_vocab()
    strings.append("from left to right, a red circle and a blue square")
    for task in GEN_TASKS:
        strings += list(load_prompt_pool(task).prompts)
    return strings


class Vocabulary:
    """Bijective token/id map; specials occupy the lowest ids."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[: len(SPECIALS)] != list(SPECIALS):
            raise ValueError("specials must occupy the lowest ids in order")
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.bos = self.id_of["<bos>"]
        self.eos = self.id_of["<eos>"]
        self.pad = self.id_of["<pad>"]

    def __len__(self):
        return len(self.tokens)

    def task_token_id(self, task: str) -> int:
        return self.id_of[f"<task_{task}>"]

    def encode(self, text: str) -> list:
        ids = [self.bos]
        for word in canonicalize(text).split():
            if word not in self.id_of:
                raise ValueError(f"out-of-vocabulary word {word!r}")
            ids.append(self.id_of[word])
        ids.append(self.eos)
        return ids

    def decode(self, ids) -> str:
        drop = {self.bos, self.eos, self.pad}
        return " ".join(self.tokens[int(i)] for i in ids if int(i) not in drop)

    @classmethod
    def default(cls) -> "Vocabulary":
        words = set()
        for s in _all_corpus_strings():
            words.update(canonicalize(s).split())
        return cls(list(SPECIALS) + sorted(words))

    def save(self, path: str | Path) -> None:
        write_json(path, self.tokens)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(read_json(path))
