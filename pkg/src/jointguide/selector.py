"""Turns LLM answers into joint constraints and text targets, and computes
the constraint and bidirectional alignment losses."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateInputError, FormatError
from .model import PROB_FLOOR, cross_entropy

VOCAB_MAGIC = "jointvocab"
VOCAB_VERSION = 1


@dataclass(frozen=True)
class JointVocabulary:
    """Grounds free-text joint mentions to joint indices.

    ``entries`` maps index -> (canonical name, aliases). ``groups`` maps a
    collective term such as "wrist" to several joints.
    """

    entries: tuple[tuple[int, str, tuple[str, ...]], ...]
    groups: tuple[tuple[str, tuple[int, ...]], ...] = ()

    def __post_init__(self):
        idx = sorted(e[0] for e in self.entries)
        if idx != list(range(len(idx))):
            raise ConfigurationError(f"joint indices must cover 0..V-1 exactly, got {idx}")
        seen = {}
        for i, name, aliases in self.entries:
            for term in (name, *aliases):
                if term != term.lower() or not term.strip():
                    raise ConfigurationError(f"joint term {term!r} must be nonempty lowercase")
                if term in seen and seen[term] != i:
                    raise ConfigurationError(f"term {term!r} names joints {seen[term]} and {i}")
                seen[term] = i
        for term, members in self.groups:
            if term in seen:
                raise ConfigurationError(f"group term {term!r} collides with a joint term")
            if term != term.lower() or any(not 0 <= m < len(idx) for m in members):
                raise ConfigurationError(f"bad group {term!r} -> {members}")

    @property
    def num_joints(self) -> int:
        return len(self.entries)

    def name(self, index: int) -> str:
        for i, n, _ in self.entries:
            if i == index:
                return n
        raise KeyError(index)

    def terms(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, name, aliases in self.entries:
            out.append((name, (i,)))
            out.extend((a, (i,)) for a in aliases)
        out.extend(self.groups)
        return out

    def dumps(self) -> str:
        lines = [f"{VOCAB_MAGIC} {VOCAB_VERSION}"]
        for i, name, aliases in sorted(self.entries):
            lines.append(f"joint\t{i}\t{name}\t{', '.join(aliases)}")
        for term, members in self.groups:
            lines.append(f"group\t{term}\t{','.join(map(str, members))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "JointVocabulary":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not lines or lines[0].split() != [VOCAB_MAGIC, str(VOCAB_VERSION)]:
            raise FormatError(f"expected '{VOCAB_MAGIC} {VOCAB_VERSION}' header")
        entries, groups = [], []
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if parts[0] == "joint" and len(parts) in (3, 4):
                aliases = tuple(a.strip() for a in parts[3].split(",") if a.strip()) if len(parts) == 4 else ()
                entries.append((int(parts[1]), parts[2].strip(), aliases))
            elif parts[0] == "group" and len(parts) == 3:
                groups.append((parts[1].strip(), tuple(int(m) for m in parts[2].split(","))))
            else:
                raise FormatError(f"vocabulary line {n} is malformed: {line!r}")
        return cls(tuple(entries), tuple(groups))

    @classmethod
    def load(cls, path) -> "JointVocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def default_vocabulary() -> JointVocabulary:
    from importlib.resources import files

    return JointVocabulary.loads(
        files("jointguide.resources").joinpath("joints.txt").read_text(encoding="utf-8")
    )


def parse_salient_joints(response: str, vocab: JointVocabulary) -> set[int]:
    """Indices of joints mentioned in ``response``.

    Longer terms win: once "right wrist" matches, the bare "wrist" inside it
    is not counted again.
    """
    text = response.lower()
    taken = np.zeros(len(text) + 1, dtype=bool)
    found: set[int] = set()
    for term, members in sorted(vocab.terms(), key=lambda t: (-len(t[0]), t[0])):
        pattern = r"(?<![a-z0-9])" + re.escape(term) + r"s?(?![a-z0-9])"
        for m in re.finditer(pattern, text):
            if taken[m.start():m.end()].any():
                continue
            taken[m.start():m.end()] = True
            found.update(members)
    return found


@dataclass(frozen=True)
class ConstraintMatrix:
    """Binary V x V matrix whose rows for salient joints are all ones."""

    salient: frozenset[int]
    num_joints: int

    @property
    def K(self) -> np.ndarray:
        k = np.zeros((self.num_joints, self.num_joints))
        k[sorted(self.salient), :] = 1.0
        return k


def build_constraint_matrix(salient, num_joints: int) -> ConstraintMatrix:
    salient = frozenset(int(v) for v in salient)
    bad = sorted(v for v in salient if not 0 <= v < num_joints)
    if bad:
        raise ValueError(f"joint indices {bad} out of range [0, {num_joints})")
    return ConstraintMatrix(salient, num_joints)


def joint_constrained_feature(feat: torch.Tensor, K: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    """Temporal mean, right-multiply by K, 1x1 channel projection, flatten.

    ``feat`` is (B, C, T, V); ``K`` is (V, V) or per-sample (B, V, V).
    Returns (B, C_out * V) flattened channel-major.
    """
    v = feat.shape[-1]
    if K.shape[-2:] != (v, v):
        raise ConfigurationError(f"constraint matrix is {tuple(K.shape)} but features have V={v}")
    x_pre = feat.mean(dim=-2)                     # (B, C, V)
    mixed = torch.matmul(x_pre, K.to(x_pre.dtype))  # (B, C, V)
    projected = proj(mixed.transpose(-1, -2)).transpose(-1, -2)  # (B, C_out, V)
    return projected.flatten(start_dim=-2)


def constraint_loss(x_joint: torch.Tensor, label, aux_classifier: nn.Linear) -> torch.Tensor:
    probs = torch.softmax(aux_classifier(x_joint), dim=-1)
    return cross_entropy(probs, label)


def skeleton_embed(feat: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    """Pool over frames and joints, project to d, L2-normalize."""
    z = proj(feat.mean(dim=(-2, -1)))
    norms = z.norm(dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise DegenerateInputError("skeleton embedding has zero norm after projection")
    return z / norms


def _check_tau(tau: float):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def cosine_logits(S: torch.Tensor, T: torch.Tensor, tau: float) -> torch.Tensor:
    """(B, B) matrix cos(s_i, t_j) / tau."""
    _check_tau(tau)
    s = F.normalize(S, dim=-1)
    t = F.normalize(T, dim=-1)
    return s @ t.transpose(0, 1) / tau


def bidirectional_probs(S: torch.Tensor, T: torch.Tensor, tau: float):
    """Row-stochastic skeleton->text and text->skeleton transition matrices."""
    logits = cosine_logits(S, T, tau)
    return torch.softmax(logits, dim=1), torch.softmax(logits.transpose(0, 1), dim=1)


def target_distributions(labels):
    """Uniform over in-batch positives; identical for both directions."""
    labels = torch.as_tensor(labels)
    same = (labels[:, None] == labels[None, :]).to(torch.float64)
    q = same / same.sum(dim=1, keepdim=True)
    return q, q.clone()


def kl_rows(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Per-row KL(q || p) with 0 log 0 = 0 and a floor on p."""
    q = q.to(p.dtype)
    log_q = torch.where(q > 0, torch.log(q.clamp_min(PROB_FLOOR)), torch.zeros_like(q))
    log_p = torch.log(p.clamp_min(PROB_FLOOR))
    return (q * (log_q - log_p)).sum(dim=1)


def alignment_loss(P_s2t, P_t2s, Q_s2t, Q_t2s) -> torch.Tensor:
    shapes = {tuple(m.shape) for m in (P_s2t, P_t2s, Q_s2t, Q_t2s)}
    if len(shapes) != 1:
        raise ValueError(f"probability matrices disagree in shape: {sorted(shapes)}")
    return 0.5 * (kl_rows(Q_s2t, P_s2t).mean() + kl_rows(Q_t2s, P_t2s).mean())


def alignment_loss_from_embeddings(S: torch.Tensor, T: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """Same value as ``alignment_loss(*bidirectional_probs(S, T, tau), *target_distributions(labels))``
    but computed through log-softmax for stable gradients."""
    logits = cosine_logits(S, T, tau)
    q, _ = target_distributions(labels)
    q = q.to(logits.dtype)
    floor = float(np.log(PROB_FLOOR))
    total = 0.0
    for lg in (logits, logits.transpose(0, 1)):
        log_p = torch.log_softmax(lg, dim=1).clamp_min(floor)
        log_q = torch.where(q > 0, torch.log(q.clamp_min(PROB_FLOOR)), torch.zeros_like(q))
        total = total + (q * (log_q - log_p)).sum(dim=1).mean()
    return 0.5 * total


@dataclass(frozen=True)
class GuidancePacket:
    class_index: int
    class_name: str
    constraint: ConstraintMatrix
    description: str
    embedding: tuple[float, ...]
    epoch_created: int

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError(f"class {self.class_index}: empty targeted description")
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"class {self.class_index}: embedding norm {norm} is not 1")


@dataclass(frozen=True)
class GuidanceTable:
    """Per-class packets, published as a whole and never mutated."""

    packets: tuple[GuidancePacket, ...]
    epoch: int = 0
    events: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if [p.class_index for p in self.packets] != list(range(len(self.packets))):
            raise ValueError("guidance packets must be ordered by class index 0..N_c-1")

    def constraint_tensor(self) -> torch.Tensor:
        return torch.as_tensor(np.stack([p.constraint.K for p in self.packets]), dtype=torch.float32)

    def embedding_tensor(self) -> torch.Tensor:
        return torch.as_tensor(np.array([p.embedding for p in self.packets]), dtype=torch.float32)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "epoch": self.epoch,
            "packets": [
                {
                    "class": p.class_index,
                    "name": p.class_name,
                    "joints": sorted(p.constraint.salient),
                    "num_joints": p.constraint.num_joints,
                    "description": p.description,
                    "embedding": list(p.embedding),
                    "epoch_created": p.epoch_created,
                }
                for p in self.packets
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def loads(cls, text: str) -> "GuidanceTable":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise FormatError(f"unsupported guidance table version {doc.get('version')!r}")
        packets = tuple(
            GuidancePacket(
                class_index=p["class"],
                class_name=p["name"],
                constraint=build_constraint_matrix(p["joints"], p["num_joints"]),
                description=p["description"],
                embedding=tuple(float(x) for x in p["embedding"]),
                epoch_created=p["epoch_created"],
            )
            for p in doc["packets"]
        )
        return cls(packets, doc["epoch"])
