"""Downstream sequence classification on reverse-complement pooled embeddings."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .genome_io import N, TokenSequence, reverse_complement, synth_corpus, tokenize
from .model import JanusModel
from .numerics import ValueGrid
from .training import Checkpoint, TrainConfig, TrainState, adamw_step, clip_gradients, save_checkpoint

log = logging.getLogger(__name__)


def _check_plain(ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() > N):
        raise ValueError("sequence contains special tokens; only A, C, G, T, N are allowed")


def _pooled(model: JanusModel, ids: np.ndarray) -> ValueGrid:
    """Mean over all 2T fused rows, per sequence: [B, d]."""
    fused = model.forward(ids, mask="janus").fused
    return nx.reduce_mean(fused, axis=1)


def _rc_ids(ids: np.ndarray) -> np.ndarray:
    comp = np.array([3, 2, 1, 0, 4])
    return comp[ids[:, ::-1]]


def rc_pooled_embed_batch(ids: np.ndarray, model: JanusModel) -> ValueGrid:
    """(e(s) + e(rc(s))) / 2 for a [B, T] batch, differentiable."""
    ids = np.asarray(ids, dtype=np.int64)
    _check_plain(ids)
    # two separate passes of equal shape keep the two strands bitwise interchangeable
    e1 = _pooled(model, ids)
    e2 = _pooled(model, _rc_ids(ids))
    return (e1 + e2) * 0.5


def rc_pooled_embed(t: TokenSequence | str, model: JanusModel) -> np.ndarray:
    """Strand-symmetric fixed-length embedding of one sequence: [d_model]."""
    if isinstance(t, str):
        t = tokenize(t)
    _check_plain(t.ids)
    with nx.no_grad():
        e1 = _pooled(model, t.ids[None]).data[0]
        e2 = _pooled(model, reverse_complement(t).ids[None]).data[0]
    return (e1 + e2) / 2


@dataclass
class ClassifierHead:
    w: ValueGrid  # [d, n_classes]
    b: ValueGrid  # [n_classes]

    @classmethod
    def init(cls, d: int, n_classes: int, seed: int = 0, dtype=None) -> "ClassifierHead":
        if n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        dtype = dtype or nx.default_dtype()
        rng = np.random.default_rng([seed, 7])
        w = nx.uniform_init(rng, (d, n_classes), d).astype(dtype)
        return cls(ValueGrid(w, requires_grad=True), ValueGrid(np.zeros(n_classes, dtype=dtype), requires_grad=True))

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]

    def __call__(self, pooled: ValueGrid) -> ValueGrid:
        return pooled @ self.w + self.b

    def params(self) -> dict[str, ValueGrid]:
        return {"classifier.w": self.w, "classifier.b": self.b}


@dataclass
class Classifier:
    model: JanusModel
    head: ClassifierHead
    labels: list[str] = field(default_factory=list)

    def logits(self, ids: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self.head(rc_pooled_embed_batch(ids, self.model)).data

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config,
            train_config=None,
            params={k: v.data.copy() for k, v in self.model.params.items()},
            extra={k: v.data.copy() for k, v in self.head.params().items()},
            meta={"labels": list(self.labels), **(meta or {})},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Classifier":
        if "classifier.w" not in ckpt.extra:
            raise ValueError("checkpoint carries no classifier head")
        head = ClassifierHead(
            ValueGrid(ckpt.extra["classifier.w"].copy(), requires_grad=True),
            ValueGrid(ckpt.extra["classifier.b"].copy(), requires_grad=True),
        )
        return cls(ckpt.model(), head, list(ckpt.meta.get("labels", [])))


def classify(sequence: TokenSequence | str | np.ndarray, classifier: Classifier) -> tuple[int, np.ndarray]:
    """Class id (lowest id on ties) and probability row for one sequence."""
    if isinstance(sequence, str):
        sequence = tokenize(sequence)
    ids = sequence.ids if isinstance(sequence, TokenSequence) else np.asarray(sequence, dtype=np.int64)
    logits = classifier.logits(ids[None]).astype(np.float64)[0]
    probs = np.exp(nx.log_softmax_np(logits))
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------------------
# task data


def read_task_tsv(path) -> list[tuple[str, str]]:
    """Rows of ``sequence<TAB>label``; blank lines and '#' comments are skipped."""
    out = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ValueError(f"{path}:{lineno}: expected 'sequence<TAB>label'")
            try:
                tokenize(parts[0])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append((parts[0], parts[1]))
    return out


def write_task_tsv(rows: Sequence[tuple[str, str]], path) -> None:
    with open(path, "w", newline="") as fh:
        for s, y in rows:
            fh.write(f"{s}\t{y}\n")


def motif_task(seed: int, n: int, length: int = 32) -> list[tuple[str, str]]:
    """Balanced toy task: does the sequence contain GATA on either strand?

    Positives are planted-motif records; negatives are uniform sequences
    redrawn until neither GATA nor TATC occurs.
    """
    n_pos = n // 2
    rows = [(s, "motif") for _, s in synth_corpus("planted_motif", seed, n_pos, length)]
    rng = np.random.default_rng([seed, 0xBA5E])
    while len(rows) < n:
        s = "".join("ACGT"[i] for i in rng.integers(0, 4, size=length))
        if "GATA" not in s and "TATC" not in s:
            rows.append((s, "background"))
    order = rng.permutation(len(rows))
    return [rows[i] for i in order]


def encode_task(rows: Sequence[tuple[str, str]], labels: list[str] | None = None) -> tuple[list[np.ndarray], np.ndarray, list[str]]:
    labels = sorted({y for _, y in rows}) if labels is None else labels
    index = {y: i for i, y in enumerate(labels)}
    unknown = {y for _, y in rows} - set(index)
    if unknown:
        raise ValueError(f"labels not seen in training: {sorted(unknown)}")
    return [tokenize(s).ids for s, _ in rows], np.array([index[y] for _, y in rows]), labels


def _length_batches(seqs: list[np.ndarray], order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split an ordering into batches of equal-length sequences."""
    groups: dict[int, list[int]] = {}
    for i in order:
        groups.setdefault(len(seqs[i]), []).append(int(i))
    batches = []
    for idx in groups.values():
        batches += [np.array(idx[s : s + batch_size]) for s in range(0, len(idx), batch_size)]
    return batches


def _predict(classifier: Classifier, seqs: list[np.ndarray], batch_size: int = 256) -> np.ndarray:
    preds = np.zeros(len(seqs), dtype=np.int64)
    for b in _length_batches(seqs, np.arange(len(seqs)), batch_size):
        preds[b] = np.argmax(classifier.logits(np.stack([seqs[i] for i in b])), axis=-1)
    return preds


def accuracy(classifier: Classifier, rows: Sequence[tuple[str, str]]) -> float:
    seqs, y, _ = encode_task(rows, classifier.labels)
    return float((_predict(classifier, seqs) == y).mean())


@dataclass
class FinetuneResult:
    classifier: Classifier
    metrics: list[dict]
    best_val_accuracy: float
    best_epoch: int


def finetune(
    model: JanusModel | Checkpoint,
    train_rows: Sequence[tuple[str, str]],
    val_rows: Sequence[tuple[str, str]],
    epochs: int = 10,
    lr: float = 3e-3,
    batch_size: int = 16,
    backbone_lr_scale: float = 0.1,
    patience: int = 3,
    seed: int = 0,
    out_dir=None,
) -> FinetuneResult:
    """Train a linear head (and the backbone at a scaled learning rate) with
    AdamW, early-stopping on validation accuracy and keeping the best epoch.

    ``backbone_lr_scale=0`` freezes the backbone.
    """
    model = model.model() if isinstance(model, Checkpoint) else model.copy()
    seqs, y, labels = encode_task(train_rows)
    if len(labels) < 2:
        raise ValueError("training set holds a single class; at least two are needed")
    val_seqs, val_y, _ = encode_task(val_rows, labels)
    head = ClassifierHead.init(model.config.d_model, len(labels), seed, model.dtype)
    clf = Classifier(model, head, labels)
    params = dict(head.params())
    scales = {k: 1.0 for k in params}
    if backbone_lr_scale > 0:
        params.update(model.params)
        scales.update({k: backbone_lr_scale for k in model.params})
    steps_per_epoch = max(1, math.ceil(len(seqs) / batch_size))
    tc = TrainConfig(steps=max(1, epochs * steps_per_epoch), batch_size=batch_size, peak_lr=lr, seed=seed)
    state = TrainState.fresh(params, seed)
    best = (-1.0, -1, None)
    metrics: list[dict] = []
    stale = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(seqs))
        losses = []
        for b in _length_batches(seqs, order, batch_size):
            for p in params.values():
                p.zero_grad()
            ids = np.stack([seqs[i] for i in b])
            logits = head(rc_pooled_embed_batch(ids, model))
            loss = nx.cross_entropy_mean(logits, y[b])
            nx.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            grads, _ = clip_gradients(grads, tc.clip_norm)
            adamw_step(params, grads, state, lr, tc, lr_scale=scales)
            losses.append(loss.item())
        val_acc = float((_predict(clf, val_seqs) == val_y).mean()) if len(val_seqs) else float("nan")
        metrics.append({"epoch": epoch + 1, "train_ce": float(np.mean(losses)), "val_accuracy": val_acc})
        log.info("epoch %d train CE %.4f val accuracy %.4f", epoch + 1, metrics[-1]["train_ce"], val_acc)
        if val_acc > best[0]:
            snapshot = {k: p.data.copy() for k, p in params.items()}
            best = (val_acc, epoch + 1, snapshot)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    for k, arr in best[2].items():
        params[k].data = arr
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(clf.to_checkpoint({"best_epoch": best[1]}), out / "classifier.jnsc")
        with open(out / "finetune_metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_ce", "val_accuracy"])
            w.writeheader()
            w.writerows(metrics)
    return FinetuneResult(clf, metrics, best[0], best[1])
