"""Recognition feedback (confusion statistics) and prompt construction."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, StateError

CHAIN_STEPS = 5
CONTEXT_STEP = CHAIN_STEPS + 1


class ConfusionMatrix:
    """Per-epoch counts; entry (m, n) = samples of true class m predicted as n."""

    def __init__(self, num_classes: int, epoch: int = 0, counts=None):
        self.num_classes = int(num_classes)
        self.epoch = int(epoch)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.array(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or np.any(counts < 0):
            raise ValueError(f"counts must be a nonnegative {num_classes}x{num_classes} matrix")
        self.counts = counts

    def reset_epoch(self, epoch: int) -> "ConfusionMatrix":
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        self.counts[:] = 0
        self.epoch = int(epoch)
        return self

    def _check(self, *indices):
        for i in indices:
            if not 0 <= i < self.num_classes:
                raise ValueError(f"class index {i} out of range [0, {self.num_classes})")

    def record(self, true_label: int, predicted: int) -> "ConfusionMatrix":
        self._check(true_label, predicted)
        self.counts[true_label, predicted] += 1
        return self

    def record_batch(self, true_labels, predicted) -> "ConfusionMatrix":
        t = np.asarray(true_labels, dtype=np.int64).ravel()
        p = np.asarray(predicted, dtype=np.int64).ravel()
        if t.size:
            self._check(int(t.min()), int(t.max()), int(p.min()), int(p.max()))
        np.add.at(self.counts, (t, p), 1)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def snapshot(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.epoch, self.counts.copy())

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.epoch == other.epoch
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self):
        return f"ConfusionMatrix(num_classes={self.num_classes}, epoch={self.epoch}, total={self.total})"


@dataclass(frozen=True)
class SimilarClassSet:
    anchor: int
    members: tuple[int, ...]
    k: int


def similar_set(cm: ConfusionMatrix, m: int, k: int) -> SimilarClassSet:
    """Top-k most frequent off-diagonal confusions of class ``m``.

    Ordered by descending count, ties by ascending class index; classes with
    zero count are never included.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    row = cm.counts[m]
    candidates = [n for n in range(cm.num_classes) if n != m and row[n] > 0]
    candidates.sort(key=lambda n: (-row[n], n))
    return SimilarClassSet(m, tuple(candidates[:k]), k)


@lru_cache(maxsize=None)
def load_templates(name: str = "prompts_v1.txt") -> dict[str, string.Template]:
    text = files("jointguide.resources").joinpath(name).read_text(encoding="utf-8")
    return parse_templates(text)


def parse_templates(text: str) -> dict[str, string.Template]:
    templates: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("@@ "):
            current = line[3:].strip()
            templates[current] = []
        elif current is None:
            raise FormatError("template file must start with an '@@' header")
        else:
            templates[current].append(line)
    if templates.pop("version 1", None) is None:
        raise FormatError("template file lacks '@@ version 1' header")
    return {k: string.Template("\n".join(v).strip()) for k, v in templates.items()}


@dataclass(frozen=True)
class PromptChain:
    class_name: str
    steps: tuple[str, ...]


def build_description_chain(class_name: str) -> PromptChain:
    """Coarse-to-fine chain: overview, body parts, informative joints, cues, summary."""
    if not class_name.strip():
        raise ValueError("class_name must be nonempty")
    t = load_templates()
    steps = tuple(t[f"chain.{i}"].substitute(class_name=class_name) for i in range(1, CHAIN_STEPS + 1))
    return PromptChain(class_name, steps)


@dataclass(frozen=True)
class ContextPrompt:
    class_name: str
    confusable_names: tuple[str, ...]
    template_id: str
    text: str


@dataclass
class DescriptionStore:
    """Per-class description chain transcripts and the resulting summary."""

    entries: dict[str, dict] = field(default_factory=dict)

    def put(self, class_name: str, turns: Sequence[tuple[str, str]]):
        turns = [[p, r] for p, r in turns]
        self.entries[class_name] = {"chain": turns, "description": turns[-1][1]}

    def description(self, class_name: str) -> str:
        try:
            return self.entries[class_name]["description"]
        except KeyError:
            raise StateError(
                f"no description for class {class_name!r}; run the description chain first "
                "(`jointguide describe`)"
            ) from None

    def turns(self, class_name: str) -> list[tuple[str, str]]:
        self.description(class_name)
        return [tuple(t) for t in self.entries[class_name]["chain"]]

    def __contains__(self, class_name):
        return class_name in self.entries

    def dumps(self) -> str:
        return json.dumps({"version": 1, "classes": self.entries}, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DescriptionStore":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise FormatError(f"unsupported description store version {doc.get('version')!r}")
        return cls(dict(doc["classes"]))

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DescriptionStore":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_context_prompt(class_name: str, confusable_names: Sequence[str],
                         descriptions: DescriptionStore) -> ContextPrompt:
    description = descriptions.description(class_name)
    t = load_templates()
    names = tuple(confusable_names)
    if names:
        template_id = "context"
        text = t[template_id].substitute(
            class_name=class_name,
            description=description,
            confusables=", ".join(f'"{n}"' for n in names),
        )
    else:
        template_id = "context.no_contrast"
        text = t[template_id].substitute(class_name=class_name, description=description)
    return ContextPrompt(class_name, names, template_id, text)
