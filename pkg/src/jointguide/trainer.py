"""Training loop with periodic guidance refresh, evaluation and run artifacts.

Run directory layout (relative to ``out_dir``)::

    config.ini              resolved configuration snapshot
    descriptions.json       description-chain store
    metrics.jsonl           one JSON record per epoch
    guidance/epoch_NNNN.json
    checkpoints/epoch_NNNN.jgck, checkpoints/final.jgck
    transcripts.cache
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import datasets
from .checkpoint import save_checkpoint
from .config import RunConfig
from .datasets import DatasetSplit, frame_indices
from .errors import ConfigurationError, JointGuideError, TrainingError
from .graph import DEFAULT_EDGES, SkeletonGraph
from .language import (
    CacheKey, ChatCompletionClient, CompletionClient, DialogueTranscript, HashEmbedder, ScriptedClient,
    TextEmbedder, TokenBucket, TranscriptCache, complete_cached,
)
from .model import Recognizer
from .questioner import (
    ConfusionMatrix, DescriptionStore, build_context_prompt, build_description_chain, similar_set,
)
from .selector import (
    GuidancePacket, GuidanceTable, JointVocabulary, alignment_loss_from_embeddings,
    build_constraint_matrix, default_vocabulary, parse_salient_joints,
)

log = logging.getLogger(__name__)


def total_loss(l_cls, l_con, l_align, alpha: float, beta: float):
    return l_cls + alpha * l_con + beta * l_align


@dataclass(frozen=True)
class LossReport:
    epoch: int
    batch: int
    cls: float
    con: float
    align: float
    total: float


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class: list[float]
    support: list[int]
    confusion: ConfusionMatrix
    pair_accuracy: dict[str, float] = field(default_factory=dict)

    @property
    def mean_pair_accuracy(self) -> float:
        return float(np.mean(list(self.pair_accuracy.values()))) if self.pair_accuracy else float("nan")

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top5": self.top5,
            "per_class": self.per_class,
            "support": self.support,
            "pair_accuracy": self.pair_accuracy,
            "mean_pair_accuracy": self.mean_pair_accuracy,
            "confusion": self.confusion.counts.tolist(),
        }


# ---------------------------------------------------------------- guidance

def run_description_chain(client: CompletionClient, class_names: Sequence[str],
                          cache: TranscriptCache | None = None) -> DescriptionStore:
    """Ask the coarse-to-fine chain for every class; the last answer becomes its description."""
    store = DescriptionStore()
    for idx, name in enumerate(class_names):
        transcript = DialogueTranscript(idx, name, 0, client.identity)
        for prompt in build_description_chain(name).steps:
            response = complete_cached(client, transcript, prompt, cache)
            transcript = transcript.extended(prompt, response)
        store.put(name, transcript.turns)
    return store


def cold_start_table(store: DescriptionStore, embedder: TextEmbedder,
                     class_names: Sequence[str], num_joints: int) -> GuidanceTable:
    """Class-specific descriptions with zero constraint matrices."""
    packets = tuple(
        GuidancePacket(
            class_index=i, class_name=name,
            constraint=build_constraint_matrix((), num_joints),
            description=store.description(name),
            embedding=tuple(float(x) for x in embedder.embed(store.description(name))),
            epoch_created=0,
        )
        for i, name in enumerate(class_names)
    )
    return GuidanceTable(packets, epoch=0)


def refresh_guidance(epoch: int, cm: ConfusionMatrix, store: DescriptionStore,
                     client: CompletionClient, embedder: TextEmbedder, vocab: JointVocabulary,
                     previous: GuidanceTable, k: int, cache: TranscriptCache | None = None,
                     parallelism: int = 1) -> GuidanceTable:
    """Ask a context-aware question per class and rebuild its packet.

    A class whose query fails keeps its previous packet; a reply naming no
    known joint keeps the previous constraint matrix. Both are recorded in
    the table's ``events``.
    """
    names = [p.class_name for p in previous.packets]

    def ask(m: int):
        try:
            members = similar_set(cm, m, k).members
            prompt = build_context_prompt(names[m], [names[n] for n in members], store)
            history = DialogueTranscript(m, names[m], epoch, client.identity, store.turns(names[m]))
            key = CacheKey.for_prompt(client.identity, m, epoch, history.next_step, prompt.text)
            hit = cache.lookup(key) if cache is not None else None
            return (key, hit if hit is not None else client.complete(history, prompt.text)), None
        except JointGuideError as exc:
            return None, exc

    workers = max(1, int(parallelism))
    if workers == 1:
        answers = [ask(m) for m in range(len(names))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            answers = list(pool.map(ask, range(len(names))))

    packets, events = [], []
    for m, (result, err) in enumerate(answers):
        prev = previous.packets[m]
        if err is not None:
            events.append(f"epoch {epoch} class {m}: query failed, keeping previous packet ({err})")
            packets.append(prev)
            continue
        key, response = result
        if cache is not None:
            cache.store(key, response)  # class order keeps the file deterministic
        salient = parse_salient_joints(response, vocab)
        if salient:
            constraint = build_constraint_matrix(salient, vocab.num_joints)
        else:
            events.append(f"epoch {epoch} class {m}: guidance miss (no joints parsed), keeping previous K")
            constraint = prev.constraint
        packets.append(GuidancePacket(
            class_index=m, class_name=names[m], constraint=constraint, description=response,
            embedding=tuple(float(x) for x in embedder.embed(response)), epoch_created=epoch,
        ))
    for e in events:
        log.warning(e)
    return GuidanceTable(tuple(packets), epoch=epoch, events=tuple(events))


# ---------------------------------------------------------------- training

def _batch(split: DatasetSplit, idx: np.ndarray, frames_out: int, mode: str,
           rng: np.random.Generator | None):
    data = split.data[idx]
    frames = frame_indices(data.shape[2], frames_out, mode, rng, count=len(idx))
    # (B, C, T, V) gathered along T per sample
    x = np.take_along_axis(data, frames[:, None, :, None], axis=2)
    return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(split.labels[idx])


def train_epoch(model: Recognizer, optimizer: torch.optim.Optimizer, train: DatasetSplit,
                table: GuidanceTable, cfg: RunConfig, epoch: int, rng: np.random.Generator
                ) -> tuple[ConfusionMatrix, list[LossReport]]:
    """One shuffled pass; returns the epoch's train-split confusion matrix and per-batch losses."""
    t = cfg.train
    model.train()
    cm = ConfusionMatrix(train.num_classes, epoch)
    K_all = table.constraint_tensor()
    E_all = table.embedding_tensor()
    order = rng.permutation(len(train))
    reports = []
    for b, start in enumerate(range(0, len(order), t.batch_size)):
        idx = order[start:start + t.batch_size]
        x, y = _batch(train, idx, cfg.data.frames_out, "train", rng)
        out = model(x, K_all[y])
        l_cls = F.cross_entropy(out.logits, y)
        l_con = F.cross_entropy(out.joint_logits, y)
        l_align = alignment_loss_from_embeddings(out.embedding, E_all[y], y, t.tau)
        for name, value in (("L_cls", l_cls), ("L_con", l_con), ("L_align", l_align)):
            if not torch.isfinite(value):
                raise TrainingError(f"non-finite {name} ({value.item()}) at epoch {epoch} batch {b}")
        loss = total_loss(l_cls, l_con, l_align, t.alpha, t.beta)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        cm.record_batch(y.numpy(), out.logits.detach().argmax(dim=1).numpy())
        reports.append(LossReport(epoch, b, l_cls.item(), l_con.item(), l_align.item(), loss.item()))
    return cm, reports


@torch.no_grad()
def evaluate(model: Recognizer, test: DatasetSplit, frames_out: int, batch_size: int = 256) -> EvalReport:
    model.eval()
    n_c = test.num_classes
    preds, top5_hits = [], []
    for start in range(0, len(test), batch_size):
        idx = np.arange(start, min(start + batch_size, len(test)))
        x, y = _batch(test, idx, frames_out, "test", None)
        logits = model.predict_proba(x)
        preds.append(logits.argmax(dim=1).numpy())
        k = min(5, n_c)
        top = logits.topk(k, dim=1).indices
        top5_hits.append((top == y[:, None]).any(dim=1).numpy())
    pred = np.concatenate(preds)
    hits5 = np.concatenate(top5_hits)
    cm = ConfusionMatrix(n_c).record_batch(test.labels, pred)
    support = cm.counts.sum(axis=1)
    correct = np.diag(cm.counts)
    per_class = [float(c / s) if s else float("nan") for c, s in zip(correct, support)]
    pairs = {}
    for a, b, _ in test.pairs:
        sel = (test.labels == a) | (test.labels == b)
        pairs[f"{a}-{b}"] = float(np.mean(pred[sel] == test.labels[sel]))
    return EvalReport(
        top1=float(np.mean(pred == test.labels)), top5=float(np.mean(hits5)),
        per_class=per_class, support=support.tolist(), confusion=cm, pair_accuracy=pairs,
    )


# ---------------------------------------------------------------- orchestration

def make_client(cfg: RunConfig) -> CompletionClient:
    g = cfg.guidance
    if g.client == "scripted":
        return ScriptedClient.from_file(g.script) if g.script else ScriptedClient.default()
    if g.client == "chat":
        return ChatCompletionClient(model=g.model, endpoint=g.endpoint, limiter=TokenBucket(g.rate))
    raise ConfigurationError(f"unknown client {g.client!r}")


def make_embedder(cfg: RunConfig) -> TextEmbedder:
    return HashEmbedder(cfg.model.embed_dim)


def load_data(cfg: RunConfig) -> tuple[DatasetSplit, DatasetSplit]:
    if cfg.data.dir:
        d = Path(cfg.data.dir)
        return datasets.load(d / "train.jgds"), datasets.load(d / "test.jgds")
    return datasets.generate(cfg.synthetic_spec())


def refresh_due(epoch: int, period: int) -> bool:
    """Guidance is refreshed before epochs R, 2R, ... (epoch 0 is the cold start)."""
    return epoch > 0 and epoch % period == 0


@dataclass
class RunResult:
    out_dir: Path
    final: EvalReport
    model: Recognizer
    table: GuidanceTable
    losses: list[LossReport]
    confusion: ConfusionMatrix


def _cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def run_training(cfg: RunConfig, out_dir=None, client: CompletionClient | None = None,
                 embedder: TextEmbedder | None = None, data=None, keep_losses: bool = False
                 ) -> RunResult:
    cfg = cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "guidance").mkdir(exist_ok=True)
    (out / "config.ini").write_text(cfg.dumps(), encoding="utf-8")
    digest = cfg.digest()
    t = cfg.train

    train, test = data if data is not None else load_data(cfg)
    vocab = default_vocabulary()
    if train.shape[2] != vocab.num_joints:
        raise ConfigurationError(f"data has {train.shape[2]} joints, vocabulary has {vocab.num_joints}")
    client = client or make_client(cfg)
    embedder = embedder or make_embedder(cfg)
    cache = TranscriptCache(out / cfg.guidance.cache)

    if cfg.guidance.descriptions:
        store = DescriptionStore.load(cfg.guidance.descriptions)
    else:
        store = run_description_chain(client, train.class_names, cache)
    store.save(out / "descriptions.json")
    table = cold_start_table(store, embedder, train.class_names, vocab.num_joints)
    (out / "guidance" / "epoch_0000.json").write_text(table.dumps(), encoding="utf-8")

    torch.manual_seed(t.seed)
    graph = SkeletonGraph.from_edges(vocab.num_joints, DEFAULT_EDGES)
    model = Recognizer(cfg.model_config(vocab.num_joints, train.num_classes), graph, seed=t.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=t.lr, momentum=t.momentum,
                                weight_decay=t.weight_decay, nesterov=t.nesterov)
    rng = np.random.default_rng([t.seed, 17])

    losses: list[LossReport] = []
    cm = ConfusionMatrix(train.num_classes)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        for epoch in range(t.epochs):
            refreshed = False
            if t.context_refresh and refresh_due(epoch, t.refresh_period):
                table = refresh_guidance(epoch, cm, store, client, embedder, vocab, table, t.k,
                                         cache, cfg.guidance.parallelism)
                (out / "guidance" / f"epoch_{epoch:04d}.json").write_text(table.dumps(), encoding="utf-8")
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.jgck", model,
                                config_hash=digest, epoch=epoch, class_names=train.class_names,
                                confusion=cm)
                refreshed = True
            lr = _cosine_lr(t.lr, epoch, t.epochs)
            for group in optimizer.param_groups:
                group["lr"] = lr
            cm, reports = train_epoch(model, optimizer, train, table, cfg, epoch, rng)
            if keep_losses:
                losses.extend(reports)
            ev = evaluate(model, test, cfg.data.frames_out)
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.mean([r.total for r in reports])),
                "loss_cls": float(np.mean([r.cls for r in reports])),
                "loss_con": float(np.mean([r.con for r in reports])),
                "loss_align": float(np.mean([r.align for r in reports])),
                "train_top1": float(np.trace(cm.counts) / cm.total),
                "test_top1": ev.top1,
                "test_top5": ev.top5,
                "pair_accuracy": ev.pair_accuracy,
                "refreshed": refreshed,
                "guidance_events": len(table.events) if refreshed else 0,
            }
            metrics.write(json.dumps(record, sort_keys=True) + "\n")
            log.info("epoch %d loss %.4f top1 %.3f pairs %s", epoch, record["loss"], ev.top1,
                     ev.pair_accuracy)

    save_checkpoint(out / "checkpoints" / "final.jgck", model, config_hash=digest, epoch=t.epochs,
                    class_names=train.class_names, confusion=cm)
    final = evaluate(model, test, cfg.data.frames_out)
    (out / "eval.json").write_text(json.dumps(final.to_dict(), sort_keys=True, indent=1) + "\n",
                                   encoding="utf-8")
    return RunResult(out, final, model, table, losses, cm)
