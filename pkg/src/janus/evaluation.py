"""Last-token prediction accuracy and perplexity, and the paired Janus vs
masked-LM learning-curve comparison."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import ModelConfig
from .genome_io import MASK, SequenceBatch, TokenSequence, windows
from .model import JanusModel
from .training import TrainConfig, train


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    task: str
    n_examples: int
    accuracy: float
    ce: float
    perplexity: float
    sec_per_1k_steps: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def summary(self) -> str:
        return (
            f"{self.model_id} on {self.task}: accuracy {self.accuracy:.4f} over {self.n_examples} "
            f"examples, CE {self.ce:.4f}, perplexity {self.perplexity:.4f}"
        )

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(self)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerow([getattr(self, n) for n in names])


def _as_ids(seqs) -> np.ndarray:
    if isinstance(seqs, SequenceBatch):
        return seqs.ids
    if isinstance(seqs, TokenSequence):
        return seqs.ids[None]
    ids = np.asarray(seqs, dtype=np.int64)
    return ids[None] if ids.ndim == 1 else ids


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(nx.log_softmax_np(logits.astype(np.float64)))


def predict_next(prefix, model: JanusModel) -> np.ndarray:
    """Next-token distribution after ``prefix`` (length L >= 1, or a [B, L] batch).

    Reads fused forward row L-1, which admits only forward keys.
    """
    ids = _as_ids(prefix)
    L = ids.shape[1]
    if L < 1:
        raise ValueError("prefix must hold at least one token")
    if L == 1:
        # the fusion mask needs two positions; a forward row only looks left,
        # so right-padding cannot reach row 0
        ids = np.concatenate([ids, np.zeros_like(ids)], axis=1)
    with nx.no_grad():
        logits = model.forward(ids, mask="janus", rows=np.array([L - 1])).logits.data[:, 0]
    probs = _softmax(logits)
    return probs[0] if np.ndim(prefix) == 1 or isinstance(prefix, TokenSequence) else probs


def last_token_logits(model: JanusModel, objective: str, ids: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Logits for the final token of each sequence under the objective's protocol."""
    if objective not in ("janus", "mlm", "janus_left"):
        raise ValueError(f"unknown objective {objective!r}")
    T = ids.shape[1]
    out = []
    for s in range(0, len(ids), batch_size):
        chunk = ids[s : s + batch_size]
        with nx.no_grad():
            if objective == "mlm":
                masked = chunk.copy()
                masked[:, -1] = MASK
                lg = model.forward(masked, mask="full", rows=np.array([T - 1])).logits.data[:, 0]
            else:
                if (chunk[:, :-1] == MASK).any():
                    raise ValueError("MASK token present in a Janus evaluation batch")
                lg = model.forward(chunk[:, :-1], mask="janus", rows=np.array([T - 2])).logits.data[:, 0]
        out.append(lg.astype(np.float64))
    return np.concatenate(out)


def score_logits(logits: np.ndarray, targets: np.ndarray, n_symbols: int = 4) -> tuple[float, float]:
    """(accuracy, mean CE).

    The argmax runs over the first ``n_symbols`` ids (the nucleotides a target
    can take); ties go to the lowest id. CE uses the full vocabulary.
    """
    pred = np.argmax(logits[:, :n_symbols], axis=-1)
    logp = nx.log_softmax_np(logits)
    ce = float(-logp[np.arange(len(targets)), targets].mean())
    return float((pred == targets).mean()), ce


def eval_last_token(
    model: JanusModel,
    objective: str,
    test_set,
    model_id: str = "model",
    task: str = "last-token",
) -> EvalReport:
    ids = _as_ids(test_set)
    if ids.size == 0 or len(ids) == 0:
        raise ValueError("empty test set")
    if ids.shape[1] < 3:
        raise ValueError("test sequences need at least 3 tokens")
    logits = last_token_logits(model, objective, ids)
    acc, ce = score_logits(logits, ids[:, -1])
    return EvalReport(model_id, task, len(ids), acc, ce, math.exp(ce))


# ---------------------------------------------------------------------------
# paired comparison

CURVE_FIELDS = ("step", "janus_acc", "mlm_acc", "janus_ce", "mlm_ce")


@dataclass
class ComparisonResult:
    steps: list[int]
    curves: dict[str, list[EvalReport]]

    def final(self, objective: str) -> EvalReport:
        return self.curves[objective][-1]

    def rows(self) -> list[dict]:
        j, m = self.curves["janus"], self.curves["mlm"]
        return [
            {"step": s, "janus_acc": a.accuracy, "mlm_acc": b.accuracy, "janus_ce": a.ce, "mlm_ce": b.ce}
            for s, a, b in zip(self.steps, j, m)
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def check_matched(a: TrainConfig, b: TrainConfig) -> None:
    """Raise unless the configs differ only in the objective."""
    da, db = asdict(a), asdict(b)
    bad = [k for k in da if k != "objective" and da[k] != db[k]]
    if bad:
        raise ValueError(f"paired configs differ in non-objective fields: {', '.join(bad)}")
    if {a.objective, b.objective} != {"janus", "mlm"}:
        raise ValueError("paired configs must use the janus and mlm objectives")


def compare_paradigms(
    model_config: ModelConfig | tuple[ModelConfig, ModelConfig],
    train_configs: tuple[TrainConfig, TrainConfig],
    corpus,
    test_set,
    eval_every: int,
    out_csv=None,
) -> ComparisonResult:
    """Train a Janus and a masked-LM model under matched settings, scoring both
    on the test set every ``eval_every`` steps (and at step 0)."""
    if isinstance(model_config, tuple):
        if model_config[0] != model_config[1]:
            raise ValueError("paired model configs differ")
        model_config = model_config[0]
    check_matched(*train_configs)
    if eval_every < 1:
        raise ValueError("eval_every must be positive")
    ids = _as_ids(test_set)
    steps_total = train_configs[0].steps
    data = corpus if isinstance(corpus, SequenceBatch) else windows(corpus, train_configs[0].seq_len, train_configs[0].stride)
    curves: dict[str, list[EvalReport]] = {}
    eval_steps: list[int] = []
    for tc in train_configs:
        reports: list[EvalReport] = []
        seen: list[int] = []
        t_start = time.perf_counter()

        def hook(step, model, tc=tc, reports=reports, seen=seen):
            if step % eval_every == 0 or step == steps_total:
                rep = eval_last_token(model, tc.objective, ids, model_id=tc.objective)
                reports.append(rep)
                seen.append(step)

        train(model_config, tc, data, callback=hook)
        elapsed = time.perf_counter() - t_start
        last = reports[-1]
        reports[-1] = EvalReport(**{**asdict(last), "sec_per_1k_steps": 1000.0 * elapsed / steps_total})
        curves[tc.objective] = reports
        eval_steps = seen
    result = ComparisonResult(eval_steps, curves)
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        result.write_csv(out_csv)
    return result
